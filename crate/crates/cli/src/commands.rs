use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde_json::{json, Value};

use pomega_core::analysis::{DecaySeries, FitResult, Model};
use pomega_core::config::{EstimatorKind, RunConfig, TwaConfig};
use pomega_core::homodyne::{read_records, synth_records, write_records};
use pomega_core::pipeline::{
    derive_seed, fit_models, fit_summary, reconstruct_records, resume_series, run_simulation, run_synthetic_sweep, threshold,
    weighted_taus, write_fit_table, write_summary, read_summary, FitRow, PointOutput, SummaryRow,
};
use pomega_core::{Complex64, StateSpec};

use crate::{plots, Cli, Command, Estimator, FitArgs, ReconstructArgs, SimulateArgs, StateKind, SweepArgs, SynthArgs, Usage};

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

pub fn run(cli: &Cli) -> Result<()> {
    if let Some(j) = cli.jobs {
        rayon::ThreadPoolBuilder::new().num_threads(j as usize).build_global().context("worker pool")?;
    }
    let mut cfg = RunConfig::resolve(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &cli.out_dir {
        cfg.io.out_dir = dir.clone();
    }
    let out = Output { dir: cfg.io.out_dir.clone(), json: cli.json, gnuplot: cli.gnuplot };
    match &cli.command {
        Command::Synth(a) => synth(cfg, a, &out),
        Command::Reconstruct(a) => reconstruct(cfg, a, &out),
        Command::Simulate(a) => simulate(cfg, a, &out),
        Command::Fit(a) => fit(cfg, a, &out),
        Command::Sweep(a) => sweep(cfg, a, &out),
    }
}

struct Output {
    dir: PathBuf,
    json: bool,
    gnuplot: bool,
}

impl Output {
    fn path(&self, name: &str) -> Result<PathBuf> {
        fs::create_dir_all(&self.dir).with_context(|| format!("creating {}", self.dir.display()))?;
        Ok(self.dir.join(name))
    }

    fn create(&self, name: &str) -> Result<(PathBuf, BufWriter<File>)> {
        let p = self.path(name)?;
        let f = File::create(&p).with_context(|| format!("creating {}", p.display()))?;
        Ok((p, BufWriter::new(f)))
    }

    fn script(&self, name: &str, body: String) -> Result<()> {
        if self.gnuplot {
            let p = self.path(name)?;
            fs::write(&p, body).with_context(|| format!("writing {}", p.display()))?;
        }
        Ok(())
    }

    /// JSON summary on stdout, or the human lines.
    fn report(&self, summary: Value, lines: &[String]) {
        if self.json {
            println!("{summary}");
        } else {
            for l in lines {
                println!("{l}");
            }
        }
    }
}

fn state_from_args(a: &SynthArgs) -> Option<StateSpec> {
    let alpha = Complex64::new(a.alpha, a.alpha_im);
    a.state.map(|k| match k {
        StateKind::Vacuum => StateSpec::Vacuum,
        StateKind::Coherent => StateSpec::Coherent { alpha },
        StateKind::Thermal => StateSpec::Thermal { nbar: a.nbar },
        StateKind::DisplacedThermal => StateSpec::DisplacedThermal { alpha, nbar: a.nbar },
        StateKind::PhaseDiffused => StateSpec::PhaseDiffused { alpha, nbar: a.nbar, kappa: a.kappa },
    })
}

fn synth(mut cfg: RunConfig, a: &SynthArgs, out: &Output) -> Result<()> {
    if let Some(s) = state_from_args(a) {
        cfg.synth.state = s;
    }
    if let Some(n) = a.n {
        cfg.synth.n = n;
    }
    if !a.delay.is_empty() {
        cfg.synth.delays_ps = a.delay.clone();
    }
    if let Some(d) = a.diffusion {
        cfg.synth.dynamics.phase_diffusion_rate = d;
    }
    cfg.validate()?;
    let delays = &cfg.synth.delays_ps;
    if a.out.is_some() && delays.len() > 1 {
        return Err(usage("--out takes a single delay; use --out-dir for several"));
    }
    let mut files = Vec::new();
    let mut lines = vec![format!("seed {} state {:?}", cfg.seed, cfg.synth.state)];
    for (i, &tau) in delays.iter().enumerate() {
        let recs = synth_records(&cfg.synth.state, cfg.synth.n, derive_seed(cfg.seed, i as u64), Some(&cfg.synth.dynamics), tau)?;
        let path = match &a.out {
            Some(p) => {
                if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                    fs::create_dir_all(parent)?;
                }
                p.clone()
            }
            None => out.path(&format!("records_tau{tau}.csv"))?,
        };
        let f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        write_records(&recs.records, BufWriter::new(f))?;
        lines.push(format!("{} records, tau {tau} ps -> {}", recs.records.len(), path.display()));
        files.push(json!({"path": path, "tau_ps": tau, "records": recs.records.len()}));
    }
    out.report(json!({"command": "synth", "seed": cfg.seed, "state": cfg.synth.state, "files": files}), &lines);
    Ok(())
}

fn field_name(s: f64, tau: f64) -> String {
    format!("field_s{s}_tau{tau}")
}

fn reconstruct(mut cfg: RunConfig, a: &ReconstructArgs, out: &Output) -> Result<()> {
    let files = if a.records.is_empty() { cfg.io.records.clone() } else { a.records.clone() };
    if files.is_empty() {
        return Err(usage("no record files given (arguments or io.records)"));
    }
    let taus = if a.tau.is_empty() { cfg.synth.delays_ps.clone() } else { a.tau.clone() };
    if taus.len() != files.len() {
        return Err(usage(format!("{} record files but {} delays; pass --tau", files.len(), taus.len())));
    }
    if !a.s.is_empty() {
        cfg.selection.s_list = a.s.clone();
    }
    if let Some(w) = a.w {
        cfg.selection.w = w;
    }
    cfg.validate()?;
    let mut rows: Vec<SummaryRow> = Vec::new();
    for (file, &tau) in files.iter().zip(&taus) {
        let f = File::open(file).with_context(|| format!("opening {}", file.display()))?;
        let recs = read_records(std::io::BufReader::new(f)).with_context(|| format!("reading {}", file.display()))?;
        for rec in reconstruct_records(&recs, tau, &cfg)? {
            if let (Some(field), false) = (&rec.field, a.no_fields) {
                field.export(&out.path(&field_name(rec.row.s, tau))?)?;
            }
            rows.push(rec.row);
        }
    }
    let (path, w) = out.create("summary.csv")?;
    write_summary(&rows, w)?;
    out.script("summary.gp", plots::summary(&path, &cfg.selection.s_list))?;
    let empty = rows.iter().filter(|r| r.is_empty()).count();
    let mut lines: Vec<String> = rows
        .iter()
        .map(|r| match r.var_phi {
            Some(v) => format!("s {} tau {} ps: Var(phi) {v:.4}, <|alpha|> {:.4}, kept {}", r.s, r.tau_ps, r.mean_amp.unwrap_or(f64::NAN), r.n_kept),
            None => format!("s {} tau {} ps: empty selection", r.s, r.tau_ps),
        })
        .collect();
    lines.push(format!("summary -> {}", path.display()));
    out.report(json!({"command": "reconstruct", "summary": path, "rows": rows, "empty_rows": empty}), &lines);
    Ok(())
}

fn estimator_kind(e: Estimator) -> EstimatorKind {
    match e {
        Estimator::Samples => EstimatorKind::Samples,
        Estimator::Bridge => EstimatorKind::Bridge,
    }
}

/// Writes report JSON and residual CSV of every successful fit.
fn write_fit_outputs(out: &Output, tag: &str, fits: &[(FitRow, Option<FitResult>)]) -> Result<Vec<(String, String)>> {
    let mut written = Vec::new();
    for (row, fit) in fits {
        let Some(f) = fit else { continue };
        let model = row.model.name();
        let (_, w) = out.create(&format!("residuals_{tag}_{model}.csv"))?;
        f.write_residuals(w)?;
        let p = out.path(&format!("fit_{tag}_{model}.json"))?;
        fs::write(&p, serde_json::to_string_pretty(&f.report())? + "\n")?;
        written.push((model.to_string(), format!("residuals_{tag}_{model}.csv")));
    }
    Ok(written)
}

fn fit_lines(fits: &[(FitRow, Option<FitResult>)]) -> Vec<String> {
    fits.iter()
        .map(|(r, _)| {
            let s = r.s.map_or(String::new(), |s| format!(" s {s}"));
            match (r.tau_c, r.tau_c_err) {
                (Some(t), Some(e)) => format!("power {}{s} {}: tau_c {t:.1} +- {e:.1} ps", r.power, r.model),
                _ => format!("power {}{s} {}: fit failed", r.power, r.model),
            }
        })
        .collect()
}

fn simulate(mut cfg: RunConfig, a: &SimulateArgs, out: &Output) -> Result<()> {
    if let Some(n) = a.grid {
        if n < 8 {
            return Err(usage("--grid needs N >= 8"));
        }
        cfg.twa.params = TwaConfig::reduced(n).params;
    }
    let twa = &mut cfg.twa;
    if !a.powers.is_empty() {
        twa.powers = a.powers.clone();
    }
    if a.p_thr.is_some() {
        twa.p_thr = a.p_thr;
    }
    if let Some(m) = a.trajectories {
        twa.run.trajectories = m;
    }
    if let Some(t) = a.t_settle {
        twa.run.t_settle = t;
    }
    if let Some(t) = a.t_obs {
        twa.run.t_obs = t;
    }
    if let Some(p) = a.points {
        twa.run.points = p;
    }
    if let Some(e) = a.estimator {
        twa.estimator = estimator_kind(e);
    }
    twa.checkpoint |= a.checkpoint;
    if twa.run.trajectories < 2 || twa.run.points < 3 || !(twa.run.t_obs > 0.0) || !(twa.run.t_settle >= 0.0) {
        return Err(usage("simulation needs >= 2 trajectories, >= 3 points, t_obs > 0 and t_settle >= 0"));
    }
    cfg.validate()?;
    let models = cfg.fits.models.clone();
    let opts = cfg.fits.options();

    if let Some(dir) = &a.resume {
        let series = resume_series(dir, &cfg.twa.run, cfg.twa.k, cfg.twa.estimator, &cfg)?;
        let (path, w) = out.create("series_resumed.csv")?;
        series.write_csv(w)?;
        let fits = fit_models(f64::NAN, None, Some(&series), &models, &opts);
        let mut lines = vec![format!("resumed {} -> {}", dir.display(), path.display())];
        lines.extend(fit_lines(&fits));
        out.report(json!({"command": "simulate", "resumed": dir, "series": path, "values": series.values}), &lines);
        return Ok(());
    }

    let p_thr = threshold(&cfg)?;
    log::info!("threshold pump {p_thr:.4}");
    let ck = if cfg.twa.checkpoint { Some(out.path("checkpoints")?) } else { None };
    let results = run_simulation(&cfg, p_thr, ck.as_deref())?;
    let mut table = Vec::new();
    let mut lines = vec![format!("threshold pump {p_thr:.4} ps^-1 um^-2")];
    let mut summary = Vec::new();
    for r in &results {
        let tag = format!("p{}", r.power);
        let (path, w) = out.create(&format!("series_{tag}.csv"))?;
        r.series.write_csv(w)?;
        let resid = write_fit_outputs(out, &tag, &r.fits)?;
        out.script(&format!("series_{tag}.gp"), plots::series(&path, &resid))?;
        lines.push(format!("power {} (P0 {:.3}): <n_k> {:.1} -> {}", r.power, r.p0, r.steady.n_mean, path.display()));
        lines.extend(fit_lines(&r.fits));
        summary.push(json!({
            "power": r.power, "p0": r.p0, "n_mean": r.steady.n_mean, "series": path,
            "fits": r.fits.iter().map(|(row, _)| row).collect::<Vec<_>>(),
        }));
        table.extend(r.fits.iter().map(|(row, _)| row.clone()));
    }
    let (path, w) = out.create("tau_vs_power.csv")?;
    write_fit_table(&table, w)?;
    out.script("tau_vs_power.gp", plots::fit_table(&path, 1, "P / P_thr", &model_names(&models)))?;
    out.report(json!({"command": "simulate", "p_thr": p_thr, "powers": summary, "table": path}), &lines);
    Ok(())
}

fn model_names(models: &[Model]) -> Vec<&'static str> {
    models.iter().map(|m| m.name()).collect()
}

fn parse_models(names: &[String], default: &[Model]) -> Result<Vec<Model>> {
    if names.is_empty() {
        return Ok(default.to_vec());
    }
    names.iter().map(|n| n.parse::<Model>().map_err(|_| usage(format!("unknown model '{n}'")))).collect()
}

fn weighted_rows(points: &[PointOutput], models: &[Model]) -> (Vec<Value>, Vec<String>, Vec<Vec<String>>) {
    let mut json_rows = Vec::new();
    let mut lines = Vec::new();
    let mut csv_rows = Vec::new();
    for (power, model, res) in weighted_taus(points, models) {
        match res {
            Ok(w) => {
                lines.push(format!("power {power} {model}: weighted tau_c {:.1} +- {:.1} ps", w.tau_mean, w.stderr));
                json_rows.push(json!({"power": power, "model": model, "tau_mean": w.tau_mean, "stderr": w.stderr}));
                csv_rows.push(vec![power.to_string(), model.name().into(), w.tau_mean.to_string(), w.stderr.to_string()]);
            }
            Err(e) => {
                lines.push(format!("power {power} {model}: no weighted tau_c ({e})"));
                json_rows.push(json!({"power": power, "model": model, "tau_mean": null, "stderr": null}));
                csv_rows.push(vec![power.to_string(), model.name().into(), String::new(), String::new()]);
            }
        }
    }
    (json_rows, lines, csv_rows)
}

fn write_weighted(out: &Output, name: &str, rows: &[Vec<String>]) -> Result<PathBuf> {
    let p = out.path(name)?;
    let mut body = String::from("power,model,tau_mean,stderr\n");
    for r in rows {
        body.push_str(&r.join(","));
        body.push('\n');
    }
    fs::write(&p, body)?;
    Ok(p)
}

fn fit(mut cfg: RunConfig, a: &FitArgs, out: &Output) -> Result<()> {
    let models = parse_models(&a.models, &cfg.fits.models)?;
    cfg.fits.inverse_variance |= a.inverse_variance;
    let opts = cfg.fits.options();
    let power = a.power.unwrap_or(cfg.synth.power);
    let open = |p: &Path| File::open(p).with_context(|| format!("opening {}", p.display()));
    let (fits, summary_rows) = if let Some(p) = &a.summary {
        let rows = read_summary(open(p)?).with_context(|| format!("reading {}", p.display()))?;
        (fit_summary(&rows, power, &models, &opts), Some(rows))
    } else {
        let p = a.series.as_ref().expect("clap requires one input");
        let series = DecaySeries::read_csv(open(p)?, "series").with_context(|| format!("reading {}", p.display()))?;
        (fit_models(power, None, Some(&series), &models, &opts), None)
    };
    let mut radii: Vec<Option<f64>> = fits.iter().map(|(r, _)| r.s).collect();
    radii.dedup();
    for s in radii {
        let tag = s.map_or(format!("p{power}"), |s| format!("p{power}_s{s}"));
        let subset: Vec<_> = fits.iter().filter(|(r, _)| r.s == s).cloned().collect();
        write_fit_outputs(out, &tag, &subset)?;
    }
    let table: Vec<FitRow> = fits.iter().map(|(r, _)| r.clone()).collect();
    let (path, w) = out.create("fits.csv")?;
    write_fit_table(&table, w)?;
    out.script("fits.gp", plots::fit_table(&path, 2, "s", &model_names(&models)))?;
    let mut lines = fit_lines(&fits);
    lines.push(format!("table -> {}", path.display()));
    let mut summary = json!({"command": "fit", "table": path, "fits": table});
    if a.weighted {
        let Some(rows) = summary_rows else {
            return Err(usage("--weighted needs --summary (weights are records kept per radius)"));
        };
        let point = PointOutput { power, summary: rows, fits };
        let (j, l, c) = weighted_rows(std::slice::from_ref(&point), &models);
        let p = write_weighted(out, "weighted.csv", &c)?;
        lines.extend(l);
        summary["weighted"] = json!(j);
        summary["weighted_table"] = json!(p);
    }
    out.report(summary, &lines);
    Ok(())
}

fn sweep(mut cfg: RunConfig, a: &SweepArgs, out: &Output) -> Result<()> {
    if let Some(n) = a.n {
        cfg.synth.n = n;
    }
    cfg.validate()?;
    let points = cfg.sweep_points();
    let mut powers: Vec<f64> = points.iter().map(|p| p.0).collect();
    powers.sort_by(f64::total_cmp);
    if powers.windows(2).any(|w| w[0] == w[1]) {
        return Err(usage("sweep powers must be distinct"));
    }
    let results = run_synthetic_sweep(&cfg)?;
    let mut lines = Vec::new();
    let mut table = Vec::new();
    for p in &results {
        let (path, w) = out.create(&format!("summary_p{}.csv", p.power))?;
        write_summary(&p.summary, w)?;
        out.script(&format!("summary_p{}.gp", p.power), plots::summary(&path, &cfg.selection.s_list))?;
        for s in &cfg.selection.s_list {
            let subset: Vec<_> = p.fits.iter().filter(|(r, _)| r.s == Some(*s)).cloned().collect();
            write_fit_outputs(out, &format!("p{}_s{s}", p.power), &subset)?;
        }
        lines.push(format!("power {}: {} summary rows -> {}", p.power, p.summary.len(), path.display()));
        lines.extend(fit_lines(&p.fits));
        table.extend(p.fits.iter().map(|(r, _)| r.clone()));
    }
    let (path, w) = out.create("tau_vs_s.csv")?;
    write_fit_table(&table, w)?;
    let names = model_names(&cfg.fits.models);
    out.script("tau_vs_s.gp", plots::fit_table(&path, 2, "s", &names))?;
    let mut summary = json!({"command": "sweep", "seed": cfg.seed, "table": path, "rows": table.len(), "fits": table});
    if a.weighted {
        let (j, l, c) = weighted_rows(&results, &cfg.fits.models);
        let p = write_weighted(out, "tau_vs_power.csv", &c)?;
        out.script("tau_vs_power.gp", plots::weighted(&p, &names))?;
        lines.extend(l);
        summary["weighted"] = json!(j);
    }
    out.report(summary, &lines);
    Ok(())
}
