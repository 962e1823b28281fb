//! Ready-to-run gnuplot scripts for the CSV outputs.

use std::fmt::Write as _;
use std::path::Path;

const PREAMBLE: &str = "set datafile separator ','\nset key autotitle columnhead\nset grid\n";

fn name(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

/// `Var(φ)` and `⟨|α|⟩` against delay, one curve per radius.
pub fn summary(csv: &Path, radii: &[f64]) -> String {
    let file = name(csv);
    let mut s = format!("{PREAMBLE}set terminal pngcairo size 1000,420\nset output '{}.png'\nset multiplot layout 1,2\n", stem(csv));
    for (col, ecol, label) in [(3, 4, "Var(phi)"), (5, 6, "<|alpha|>")] {
        let _ = write!(s, "set xlabel 'tau (ps)'\nset ylabel '{label}'\nplot ");
        let curves: Vec<String> = radii
            .iter()
            .map(|r| format!("'{file}' using ($1=={r} ? $2 : 1/0):{col}:{ecol} with yerrorlines title 's = {r}'"))
            .collect();
        s.push_str(&curves.join(", \\\n     "));
        s.push('\n');
    }
    s.push_str("unset multiplot\n");
    s
}

/// Series with its fitted curves.
pub fn series(csv: &Path, fits: &[(String, String)]) -> String {
    let mut s = format!("{PREAMBLE}set terminal pngcairo size 700,450\nset output '{}.png'\nset xlabel 'tau (ps)'\nset ylabel 'Var(phi)'\nplot '{}' using 1:2 with points pt 7 title 'data'", stem(csv), name(csv));
    for (model, resid) in fits {
        let _ = write!(s, ", \\\n     '{resid}' using 1:3 with lines title '{model}'");
    }
    s.push('\n');
    s
}

/// τ_c against the column `x` of a fit table, one curve per model.
pub fn fit_table(csv: &Path, x_col: usize, x_label: &str, models: &[&str]) -> String {
    tau_plot(csv, x_col, 3, 4, x_label, models)
}

/// Weighted τ_c against power.
pub fn weighted(csv: &Path, models: &[&str]) -> String {
    tau_plot(csv, 1, 2, 3, "power", models)
}

fn tau_plot(csv: &Path, x_col: usize, model_col: usize, tau_col: usize, x_label: &str, models: &[&str]) -> String {
    let file = name(csv);
    let err_col = tau_col + 1;
    let mut s = format!("{PREAMBLE}set terminal pngcairo size 700,450\nset output '{}.png'\nset xlabel '{x_label}'\nset ylabel 'tau_c (ps)'\nset logscale y\nplot ", stem(csv));
    let curves: Vec<String> = models
        .iter()
        .map(|m| format!("'{file}' using {x_col}:(strcol({model_col}) eq '{m}' ? ${tau_col} : 1/0):{err_col} with yerrorbars title '{m}'"))
        .collect();
    s.push_str(&curves.join(", \\\n     "));
    s.push('\n');
    s
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}
