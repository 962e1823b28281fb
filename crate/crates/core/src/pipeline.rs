//! End-to-end workflows: synthetic records → reconstruction → fits, and
//! simulated coherence-time runs. Tables are tidy CSV.

use std::io::{Read, Write};
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::analysis::{fit_decay_with, weighted_mean_tau, DecaySeries, FitOptions, FitResult, Model, WeightedTau};
use crate::bridge::k_table_for_grid;
use crate::config::{EstimatorKind, RunConfig};
use crate::error::{Error, Result};
use crate::homodyne::{orthogonality_filter, postselect, synth_records, AnnulusSelector, Dynamics, MultiChannelRecord};
use crate::phasespace::{circular_errors, circular_stats, PhaseSpaceGrid, QuasiProbabilityField};
use crate::tomography::{bin_dataset, estimate_field, StateSpec};
use crate::twa::{
    coherence_series, locate_threshold, mode_stats, phase_variance_series, read_checkpoint, steady_ensemble, write_checkpoint,
    CoherenceRun, ModeStats, ModelParams, PhaseEstimator, Simulator, WaveVector,
};

/// Independent seed for stream `stream` of the master seed.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(stream.wrapping_add(1 << 32));
    rng.next_u64()
}

pub const SUMMARY_HEADER: [&str; 7] = ["s", "tau_ps", "var_phi", "var_phi_err", "mean_amp", "mean_amp_err", "n_kept"];
pub const FIT_HEADER: [&str; 5] = ["power", "s", "model", "tau_c", "tau_c_err"];

/// One (s, τ) reconstruction. Statistics are `None` for an empty annulus.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub s: f64,
    pub tau_ps: f64,
    pub var_phi: Option<f64>,
    pub var_phi_err: Option<f64>,
    pub mean_amp: Option<f64>,
    pub mean_amp_err: Option<f64>,
    pub n_kept: usize,
}

impl SummaryRow {
    pub fn is_empty(&self) -> bool {
        self.var_phi.is_none()
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

fn parse_opt(s: &str) -> Result<Option<f64>> {
    let s = s.trim();
    if s.is_empty() {
        return Ok(None);
    }
    s.parse().map(Some).map_err(|_| Error::Format(format!("bad number '{s}'")))
}

/// CSV with [`SUMMARY_HEADER`]; empty selections leave the statistics blank.
pub fn write_summary<W: Write>(rows: &[SummaryRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SUMMARY_HEADER)?;
    for r in rows {
        w.write_record([
            r.s.to_string(),
            r.tau_ps.to_string(),
            opt(r.var_phi),
            opt(r.var_phi_err),
            opt(r.mean_amp),
            opt(r.mean_amp_err),
            r.n_kept.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_summary<R: Read>(input: R) -> Result<Vec<SummaryRow>> {
    let mut rdr = csv::Reader::from_reader(input);
    if rdr.headers()?.iter().ne(SUMMARY_HEADER) {
        return Err(Error::Format(format!("expected header {}", SUMMARY_HEADER.join(","))));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let f = |i: usize| parse_opt(rec.get(i).unwrap_or(""));
        let need = |i: usize| f(i)?.ok_or_else(|| Error::Format(format!("missing {} in {:?}", SUMMARY_HEADER[i], rec)));
        rows.push(SummaryRow {
            s: need(0)?,
            tau_ps: need(1)?,
            var_phi: f(2)?,
            var_phi_err: f(3)?,
            mean_amp: f(4)?,
            mean_amp_err: f(5)?,
            n_kept: rec.get(6).unwrap_or("").trim().parse().map_err(|_| Error::Format(format!("bad n_kept in {rec:?}")))?,
        });
    }
    Ok(rows)
}

/// Summary row plus the reconstructed field.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub row: SummaryRow,
    pub field: Option<QuasiProbabilityField>,
}

/// Orthogonality filter, then per radius: postselect → bin → estimate →
/// circular statistics.
pub fn reconstruct_records(records: &[MultiChannelRecord], tau_ps: f64, cfg: &RunConfig) -> Result<Vec<Reconstruction>> {
    let sel = &cfg.selection;
    let filtered;
    let kept: &[MultiChannelRecord] = if sel.window > 0 {
        filtered = orthogonality_filter(records, sel.window)?;
        &filtered
    } else {
        records
    };
    let tomo = &cfg.tomography;
    sel.s_list
        .iter()
        .map(|&s| {
            let ps = postselect(kept, &AnnulusSelector::new(s, sel.w)?);
            let mut row = SummaryRow { s, tau_ps, var_phi: None, var_phi_err: None, mean_amp: None, mean_amp_err: None, n_kept: ps.n_kept };
            if ps.empty {
                return Ok(Reconstruction { row, field: None });
            }
            let hist = bin_dataset(&ps.dataset, &tomo.binning)?;
            let mut field = estimate_field(&hist, &tomo.grid, tomo.r, &tomo.estimator)?;
            field.meta.s = Some(s);
            field.meta.w = Some(sel.w);
            field.meta.tau_ps = Some(tau_ps);
            let st = circular_stats(&field)?;
            let err = circular_errors(&field, &st);
            row.var_phi = Some(st.variance);
            row.mean_amp = Some(st.mean_amplitude);
            row.var_phi_err = err.map(|e| e.variance);
            row.mean_amp_err = err.map(|e| e.mean_amplitude);
            Ok(Reconstruction { row, field: Some(field) })
        })
        .collect()
}

/// Records for every configured delay; delay `i` uses stream `i` of `seed`.
pub fn synth_delays(state: &StateSpec, dynamics: &Dynamics, n: usize, delays: &[f64], seed: u64) -> Result<Vec<(f64, Vec<MultiChannelRecord>)>> {
    delays
        .iter()
        .enumerate()
        .map(|(i, &d)| Ok((d, synth_records(state, n, derive_seed(seed, i as u64), Some(dynamics), d)?.records)))
        .collect()
}

/// `Var(φ)` against delay for one radius; `None` below four usable points.
pub fn series_for_radius(rows: &[SummaryRow], s: f64) -> Option<DecaySeries> {
    let mut pts: Vec<&SummaryRow> = rows.iter().filter(|r| r.s == s && !r.is_empty()).collect();
    pts.sort_by(|a, b| a.tau_ps.total_cmp(&b.tau_ps));
    if pts.len() < 4 {
        return None;
    }
    let errors: Option<Vec<f64>> = pts.iter().map(|r| r.var_phi_err).collect();
    let weights = pts.iter().map(|r| r.n_kept as f64).collect();
    DecaySeries::new(pts.iter().map(|r| r.tau_ps).collect(), pts.iter().map(|r| r.var_phi.unwrap()).collect(), errors, Some(weights), &format!("var_phi_s{s}")).ok()
}

/// Row of the τ_c tables; `s` is blank for simulated series.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitRow {
    pub power: f64,
    pub s: Option<f64>,
    pub model: Model,
    pub tau_c: Option<f64>,
    pub tau_c_err: Option<f64>,
}

pub fn write_fit_table<W: Write>(rows: &[FitRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(FIT_HEADER)?;
    for r in rows {
        w.write_record([r.power.to_string(), opt(r.s), r.model.name().to_string(), opt(r.tau_c), opt(r.tau_c_err)])?;
    }
    w.flush()?;
    Ok(())
}

/// Fits every model; failures are logged and leave blank τ_c.
pub fn fit_models(power: f64, s: Option<f64>, series: Option<&DecaySeries>, models: &[Model], opts: &FitOptions) -> Vec<(FitRow, Option<FitResult>)> {
    models
        .iter()
        .map(|&model| {
            let fit = match series {
                Some(ser) => fit_decay_with(ser, model, opts).map_err(|e| log::warn!("power {power}, s {s:?}, {model}: {e}")).ok(),
                None => {
                    log::warn!("power {power}, s {s:?}: fewer than four usable delays, {model} skipped");
                    None
                }
            };
            let row = FitRow { power, s, model, tau_c: fit.as_ref().map(|f| f.tau_c), tau_c_err: fit.as_ref().map(|f| f.tau_c_err) };
            (row, fit)
        })
        .collect()
}

/// Everything produced by one sweep point.
#[derive(Debug, Clone)]
pub struct PointOutput {
    pub power: f64,
    pub summary: Vec<SummaryRow>,
    pub fits: Vec<(FitRow, Option<FitResult>)>,
}

/// Synthetic sweep: for each point, records at every delay → summary
/// rows → fits per radius and model. Point `i` draws from stream `i` of
/// the master seed, so the result does not depend on the worker count.
pub fn run_synthetic_sweep(cfg: &RunConfig) -> Result<Vec<PointOutput>> {
    cfg.validate()?;
    let points = cfg.sweep_points();
    points
        .par_iter()
        .enumerate()
        .map(|(i, (power, state, dynamics))| {
            let recs = synth_delays(state, dynamics, cfg.synth.n, &cfg.synth.delays_ps, derive_seed(cfg.seed, i as u64))?;
            let mut summary = Vec::new();
            for (tau, r) in &recs {
                summary.extend(reconstruct_records(r, *tau, cfg)?.into_iter().map(|x| x.row));
            }
            let opts = cfg.fits.options();
            let fits = cfg
                .selection
                .s_list
                .iter()
                .flat_map(|&s| fit_models(*power, Some(s), series_for_radius(&summary, s).as_ref(), &cfg.fits.models, &opts))
                .collect();
            Ok(PointOutput { power: *power, summary, fits })
        })
        .collect()
}

/// Weighted mean τ_c over radii for each (power, model), weighted by the
/// number of postselected records behind each series.
pub fn weighted_taus(points: &[PointOutput], models: &[Model]) -> Vec<(f64, Model, Result<WeightedTau>)> {
    let mut out = Vec::new();
    for p in points {
        for &m in models {
            let mut fits = Vec::new();
            let mut weights = Vec::new();
            for (row, fit) in &p.fits {
                if row.model != m {
                    continue;
                }
                if let (Some(f), Some(s)) = (fit, row.s) {
                    fits.push(f.clone());
                    weights.push(p.summary.iter().filter(|r| r.s == s && !r.is_empty()).map(|r| r.n_kept as f64).sum());
                }
            }
            out.push((p.power, m, weighted_mean_tau(&fits, &weights)));
        }
    }
    out
}

/// Simulated coherence-time result for one pump.
#[derive(Debug, Clone)]
pub struct SimulatedPoint {
    /// Pump as a multiple of the threshold.
    pub power: f64,
    pub p0: f64,
    pub series: DecaySeries,
    pub steady: ModeStats,
    pub fits: Vec<(FitRow, Option<FitResult>)>,
}

/// Threshold pump: configured, or located by bisection.
pub fn threshold(cfg: &RunConfig) -> Result<f64> {
    match cfg.twa.p_thr {
        Some(p) => Ok(p),
        None => locate_threshold(&cfg.twa.params, cfg.twa.k, &cfg.twa.threshold),
    }
}

fn estimator_for(kind: EstimatorKind, steady: &ModeStats, cfg: &RunConfig) -> Result<PhaseEstimator> {
    Ok(match kind {
        EstimatorKind::Samples => PhaseEstimator::Samples,
        EstimatorKind::Bridge => {
            let half = 1.5 * (steady.n_mean.max(0.0) + 1.0).sqrt() + 3.0;
            let grid = PhaseSpaceGrid::square(half, half / 60.0)?;
            PhaseEstimator::Bridge { table: k_table_for_grid(cfg.tomography.r, &grid)?, grid }
        }
    })
}

fn run_params(cfg: &RunConfig, p0: f64) -> ModelParams {
    ModelParams { p0, ..cfg.twa.params.clone() }
}

/// Coherence-time runs at every configured power. With a checkpoint
/// directory the aligned ensemble of power `i` is saved under `p<i>`.
pub fn run_simulation(cfg: &RunConfig, p_thr: f64, checkpoints: Option<&Path>) -> Result<Vec<SimulatedPoint>> {
    let twa = &cfg.twa;
    twa.powers
        .iter()
        .enumerate()
        .map(|(i, &power)| {
            let params = run_params(cfg, power * p_thr);
            let run = CoherenceRun { seed: derive_seed(cfg.seed, 1000 + i as u64), ..twa.run };
            let (series, steady) = match (twa.estimator, checkpoints) {
                (EstimatorKind::Samples, None) => {
                    let c = coherence_series(&params, twa.k, &run, &PhaseEstimator::Samples)?;
                    (c.series, c.steady)
                }
                _ => aligned_run(&params, twa.k, &run, twa.estimator, cfg, checkpoints.map(|d| d.join(format!("p{i}"))).as_deref())?,
            };
            let fits = fit_models(power, None, Some(&series), &cfg.fits.models, &cfg.fits.options());
            Ok(SimulatedPoint { power, p0: params.p0, series, steady, fits })
        })
        .collect()
}

fn aligned_run(
    params: &ModelParams,
    k: WaveVector,
    run: &CoherenceRun,
    kind: EstimatorKind,
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
) -> Result<(DecaySeries, ModeStats)> {
    let mut ens = steady_ensemble(params, k, run.trajectories, run.t_settle, run.seed)?;
    let steady = mode_stats(&ens, params, k)?;
    ens.align_phase(params, k)?;
    if let Some(dir) = checkpoint {
        write_checkpoint(&ens, params, dir)?;
    }
    let est = estimator_for(kind, &steady, cfg)?;
    let sim = Simulator::new(params)?;
    let t0 = ens.time();
    let delays = run.delays();
    let times: Vec<f64> = delays.iter().map(|d| t0 + d).collect();
    let s = phase_variance_series(&mut ens, &sim, k, &times, &est)?;
    Ok((DecaySeries::new(delays, s.values, s.errors, None, "var_phi")?, steady))
}

/// Re-runs the series of a saved aligned ensemble.
pub fn resume_series(dir: &Path, run: &CoherenceRun, k: WaveVector, kind: EstimatorKind, cfg: &RunConfig) -> Result<DecaySeries> {
    let (params, mut ens) = read_checkpoint(dir)?;
    let steady = mode_stats(&ens, &params, k)?;
    let est = estimator_for(kind, &steady, cfg)?;
    let sim = Simulator::new(&params)?;
    let t0 = ens.time();
    let delays = run.delays();
    let times: Vec<f64> = delays.iter().map(|d| t0 + d).collect();
    let s = phase_variance_series(&mut ens, &sim, k, &times, &est)?;
    DecaySeries::new(delays, s.values, s.errors, None, "var_phi")
}

/// Fits the summary series of every radius in a summary table.
pub fn fit_summary(rows: &[SummaryRow], power: f64, models: &[Model], opts: &FitOptions) -> Vec<(FitRow, Option<FitResult>)> {
    let mut radii: Vec<f64> = rows.iter().map(|r| r.s).collect();
    radii.sort_by(f64::total_cmp);
    radii.dedup();
    radii.par_iter().flat_map_iter(|&s| fit_models(power, Some(s), series_for_radius(rows, s).as_ref(), models, opts)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_are_distinct_and_stable() {
        let a: Vec<u64> = (0..8).map(|i| derive_seed(7, i)).collect();
        let mut b = a.clone();
        b.sort();
        b.dedup();
        assert_eq!(b.len(), 8);
        assert_eq!(derive_seed(7, 3), a[3]);
        assert_ne!(derive_seed(8, 3), a[3]);
    }

    #[test]
    fn summary_round_trip_with_empty_row() {
        let rows = vec![
            SummaryRow { s: 2.0, tau_ps: 0.0, var_phi: Some(0.3), var_phi_err: Some(0.01), mean_amp: Some(2.9), mean_amp_err: Some(0.02), n_kept: 120 },
            SummaryRow { s: 60.0, tau_ps: 0.0, var_phi: None, var_phi_err: None, mean_amp: None, mean_amp_err: None, n_kept: 0 },
        ];
        let mut buf = Vec::new();
        write_summary(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("s,tau_ps,var_phi,var_phi_err,mean_amp,mean_amp_err,n_kept\n"));
        assert!(text.contains("60,0,,,,,0"));
        assert_eq!(read_summary(&buf[..]).unwrap(), rows);
    }

    #[test]
    fn failed_fits_keep_row_count() {
        let rows = fit_models(1.0, Some(2.0), None, &Model::ALL, &FitOptions::default());
        assert_eq!(rows.len(), 4);
        assert!(rows.iter().all(|(r, f)| r.tau_c.is_none() && f.is_none()));
    }
}
