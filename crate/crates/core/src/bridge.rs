//! Wigner-to-P_Ω conversion: the radial convolution kernel `K` and its
//! application to trajectory samples.

use std::f64::consts::{PI, TAU};
use std::io::Write;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::{integrate, j0, CubicTable, GaussLegendre};
use crate::phasespace::{g_unchecked, FieldMeta, FilterParam, PhaseSpaceGrid, QuasiProbabilityField};
use crate::twa::mode_stats_from_amplitudes;

/// Radii at which the reduced kernel is checked against the 4D integral.
pub const VALIDATION_RADII: [f64; 5] = [0.0, 0.5, 1.0, 2.0, 5.0];

/// Quadrature orders of the 4D kernel integral.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BruteForceOrders {
    /// Gauss–Legendre nodes per radial variable.
    pub radial: usize,
    /// Trapezoid nodes per angle.
    pub angular: usize,
}

impl Default for BruteForceOrders {
    fn default() -> Self {
        BruteForceOrders { radial: 32, angular: 64 }
    }
}

/// Complex value of the 4D kernel integral at `|α| = r`.
pub fn kernel_bruteforce_complex(r: FilterParam, radius: f64, orders: BruteForceOrders) -> Complex64 {
    let rr = r.value();
    let a = 2.0 * rr * radius;
    let gl = GaussLegendre::new(orders.radial);
    let nodes: Vec<(f64, f64)> = gl.mapped(0.0, 1.0).collect();
    let m = orders.angular;
    let h = TAU / m as f64;
    let angles: Vec<f64> = (0..m).map(|i| i as f64 * h).collect();
    let half = 0.5 * rr * rr;
    // per (s', φ): s'·w·exp(iA s' sinφ + R² s'²/2); per (t', ϑ): same with −iA
    let side = |sign: f64| -> Vec<Complex64> {
        let mut v = Vec::with_capacity(nodes.len() * m);
        for &(x, w) in &nodes {
            for &ang in &angles {
                v.push(Complex64::from_polar(x * w * h * (half * x * x).exp(), sign * a * x * ang.sin()));
            }
        }
        v
    };
    let s_side = side(1.0);
    let t_side = side(-1.0);
    let cos_diff: Vec<f64> = (0..m).map(|d| (d as f64 * h).cos()).collect();
    let total: Complex64 = (0..nodes.len())
        .into_par_iter()
        .map(|is| {
            let mut acc = Complex64::new(0.0, 0.0);
            let s = nodes[is].0;
            for (it, &(t, _)) in nodes.iter().enumerate() {
                let c = 2.0 * rr * rr * s * t;
                let cross: Vec<f64> = cos_diff.iter().map(|cd| (-0.5 * c * cd).exp()).collect();
                for ip in 0..m {
                    let sv = s_side[is * m + ip];
                    let mut inner = Complex64::new(0.0, 0.0);
                    for iv in 0..m {
                        inner += t_side[it * m + iv] * cross[(ip + m - iv) % m];
                    }
                    acc += sv * inner;
                }
            }
            acc
        })
        .collect::<Vec<_>>()
        .into_iter()
        .sum();
    total * (rr * rr / PI.powi(3))
}

/// Real kernel values from the 4D integral; errors if the imaginary
/// residue exceeds 1e-8.
pub fn k_table_bruteforce(r: FilterParam, radii: &[f64], orders: BruteForceOrders) -> Result<Vec<f64>> {
    radii
        .iter()
        .map(|&x| {
            if !(x >= 0.0 && x.is_finite()) {
                return Err(invalid(format!("radius must be >= 0, got {x}")));
            }
            let z = kernel_bruteforce_complex(r, x, orders);
            if z.im.abs() > 1e-8 {
                return Err(Error::Validation(format!("kernel at r = {x} has imaginary residue {:.3e}", z.im)));
            }
            Ok(z.re)
        })
        .collect()
}

/// `(4/π)∫₀^{2R} b J₀(2br) e^{b²/2} g(b/2R) db`, integrated over
/// `b = 2R cos θ`, where `g` is smooth in `θ`.
pub fn kernel_reduced(r: FilterParam, radius: f64) -> f64 {
    reduced_with_limit(r, radius, 1.0)
}

/// Reduced integral with the `b` range stretched to `[0, 2R·stretch]`
/// (`g` vanishes past `2R`).
pub fn reduced_with_limit(r: FilterParam, radius: f64, stretch: f64) -> f64 {
    let two_r = 2.0 * r.value();
    let core = |theta: f64| {
        let (s, c) = theta.sin_cos();
        let b = two_r * c;
        let g = (theta - s * c) / PI;
        b * j0(2.0 * b * radius) * (0.5 * b * b).exp() * g * two_r * s
    };
    let main = integrate(core, 0.0, 0.5 * PI, 1e-15, 1e-13, 2000).value;
    let extra = if stretch > 1.0 {
        integrate(
            |b| b * j0(2.0 * b * radius) * (0.5 * b * b).exp() * g_unchecked(b / two_r),
            two_r,
            two_r * stretch,
            1e-15,
            1e-13,
            200,
        )
        .value
    } else {
        0.0
    };
    4.0 / PI * (main + extra)
}

/// Build and validation record of a kernel table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelMeta {
    #[serde(rename = "R")]
    pub r: f64,
    pub step: f64,
    pub r_max: f64,
    pub method: String,
    pub bruteforce_orders: BruteForceOrders,
    /// `(radius, relative deviation)` of reduced vs 4D values.
    pub validation: Vec<(f64, f64)>,
    /// Largest `|K|` over the last tenth of the table.
    pub tail_envelope: f64,
    /// `2π ∫₀^{r_max} r K(r) dr`.
    pub normalization: f64,
}

/// `K(|α|)` tabulated on `[0, r_max]`; zero beyond.
#[derive(Debug, Clone, PartialEq)]
pub struct RadialKernelTable {
    pub table: CubicTable,
    pub meta: KernelMeta,
}

impl RadialKernelTable {
    pub fn radii(&self) -> Vec<f64> {
        (0..self.table.values.len()).map(|i| i as f64 * self.table.step).collect()
    }

    pub fn r_max(&self) -> f64 {
        self.table.x_max()
    }

    #[inline]
    pub fn eval(&self, r: f64) -> f64 {
        self.table.eval(r).unwrap_or(0.0)
    }

    /// CSV `r,K`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["r", "K"])?;
        for (r, k) in self.radii().iter().zip(&self.table.values) {
            w.write_record([r.to_string(), k.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn metadata_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.meta)?)
    }
}

fn check_table_args(r: FilterParam, r_max: f64, step: f64) -> Result<()> {
    if !(r_max > 0.0 && step > 0.0 && step < r_max && r_max.is_finite()) {
        return Err(invalid(format!("kernel table needs 0 < step < r_max, got step {step}, r_max {r_max}")));
    }
    if r.value() > 1.5 {
        log::warn!("R = {} > 1.5: e^(b^2/2) amplifies the kernel integrand by {:.1e}", r.value(), (2.0 * r.value() * r.value()).exp());
    }
    Ok(())
}

fn finish(r: FilterParam, step: f64, values: Vec<f64>, method: &str, orders: BruteForceOrders, validation: Vec<(f64, f64)>) -> RadialKernelTable {
    let n = values.len();
    let tail = values[n - n / 10 - 1..].iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    // trapezoid on the fine lattice
    let mut norm = 0.0;
    for i in 1..n {
        let (r0, r1) = ((i - 1) as f64 * step, i as f64 * step);
        norm += 0.5 * step * (r0 * values[i - 1] + r1 * values[i]);
    }
    let table = CubicTable::radial(step, values);
    let meta = KernelMeta {
        r: r.value(),
        step,
        r_max: table.x_max(),
        method: method.to_string(),
        bruteforce_orders: orders,
        validation,
        tail_envelope: tail,
        normalization: TAU * norm,
    };
    RadialKernelTable { table, meta }
}

/// Relative deviation of the reduced kernel from the 4D integral at each
/// validation radius, scaled by `max(|K_4D|, 1e-3·K(0))`.
pub fn validate_reduced(r: FilterParam, orders: BruteForceOrders) -> Result<Vec<(f64, f64)>> {
    let brute = k_table_bruteforce(r, &VALIDATION_RADII, orders)?;
    let floor = 1e-3 * brute[0].abs();
    Ok(VALIDATION_RADII
        .iter()
        .zip(&brute)
        .map(|(&x, &b)| (x, (kernel_reduced(r, x) - b).abs() / b.abs().max(floor)))
        .collect())
}

/// Table from the reduced radial integral on `[0, r_max]` at spacing
/// `step`, validated against the 4D integral at [`VALIDATION_RADII`] to
/// 1e-3 relative.
pub fn k_table_reduced(r: FilterParam, r_max: f64, step: f64) -> Result<RadialKernelTable> {
    check_table_args(r, r_max, step)?;
    let orders = BruteForceOrders::default();
    let validation = validate_reduced(r, orders)?;
    if let Some(&(x, dev)) = validation.iter().find(|(_, d)| !(*d <= 1e-3)) {
        return Err(Error::Validation(format!("reduced kernel deviates by {dev:.2e} at r = {x}")));
    }
    let n = (r_max / step).ceil() as usize + 1;
    let values: Vec<f64> = (0..n).into_par_iter().map(|i| kernel_reduced(r, i as f64 * step)).collect();
    Ok(finish(r, step, values, "reduced", orders, validation))
}

/// Table from the 4D integral at every radius (slow).
pub fn k_table_from_bruteforce(r: FilterParam, r_max: f64, step: f64, orders: BruteForceOrders) -> Result<RadialKernelTable> {
    check_table_args(r, r_max, step)?;
    let n = (r_max / step).ceil() as usize + 1;
    let radii: Vec<f64> = (0..n).map(|i| i as f64 * step).collect();
    let values = k_table_bruteforce(r, &radii, orders)?;
    Ok(finish(r, step, values, "bruteforce", orders, Vec::new()))
}

/// Reduced table, or the 4D table if validation fails.
pub fn k_table(r: FilterParam, r_max: f64, step: f64) -> Result<RadialKernelTable> {
    match k_table_reduced(r, r_max, step) {
        Err(Error::Validation(msg)) => {
            log::error!("{msg}; building the kernel table from the 4D integral");
            k_table_from_bruteforce(r, r_max, step, BruteForceOrders::default())
        }
        other => other,
    }
}

/// Table sized for `grid`: covers the grid diagonal, spacing 0.01.
pub fn k_table_for_grid(r: FilterParam, grid: &PhaseSpaceGrid) -> Result<RadialKernelTable> {
    let diag = (grid.q_max - grid.q_min).hypot(grid.p_max - grid.p_min);
    k_table(r, diag + 1.0, 0.01)
}

/// `P_Ω(α) ≈ (1/M) Σ_j K(|α − ψ_j|)` with σ from the spread of the
/// per-sample contributions.
pub fn convolve_samples(samples: &[Complex64], table: &RadialKernelTable, grid: &PhaseSpaceGrid) -> Result<QuasiProbabilityField> {
    if samples.is_empty() {
        return Err(Error::Empty("no samples to convolve".into()));
    }
    grid.validate()?;
    if samples.len() < 100 {
        log::warn!("convolving only {} samples", samples.len());
    }
    let diag = (grid.q_max - grid.q_min).hypot(grid.p_max - grid.p_min);
    if table.r_max() < diag {
        log::warn!("kernel table ends at {} < grid diagonal {diag}", table.r_max());
    }
    let m = samples.len() as f64;
    let (values, sigmas): (Vec<f64>, Vec<f64>) = (0..grid.len())
        .into_par_iter()
        .map(|k| {
            let a = grid.point(k);
            let (mut s1, mut s2) = (0.0, 0.0);
            for z in samples {
                let v = table.eval((a - z).norm());
                s1 += v;
                s2 += v * v;
            }
            let mean = s1 / m;
            let var = (s2 / m - mean * mean).max(0.0);
            (mean, if samples.len() > 1 { (var / (m - 1.0)).sqrt() } else { 0.0 })
        })
        .unzip();
    let meta = FieldMeta { r: table.meta.r, n_samples: samples.len() as u64, ..FieldMeta::default() };
    QuasiProbabilityField::new(*grid, values, (samples.len() > 1).then_some(sigmas), meta)
}

/// Mandel `Q = (Var n − n)/n` of the ensemble and its standard error.
/// Nonnegative Gaussian-like Wigner functions (displaced thermal states)
/// have `Q ≥ 0`; a significantly negative value means the kernel
/// convolution assumption is doubtful.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassicalityCheck {
    pub mandel_q: f64,
    pub stderr: f64,
    pub consistent: bool,
}

pub fn classicality_check(samples: &[Complex64]) -> Result<ClassicalityCheck> {
    let st = mode_stats_from_amplitudes(samples)?;
    if !(st.n_mean > 0.0) {
        return Ok(ClassicalityCheck { mandel_q: 0.0, stderr: 0.0, consistent: true });
    }
    let q = (st.n_var - st.n_mean) / st.n_mean;
    let m = samples.len() as f64;
    // sampling error of the variance estimate, via the spread of |ψ|²
    let w: Vec<f64> = samples.iter().map(|z| z.norm_sqr()).collect();
    let mw = w.iter().sum::<f64>() / m;
    let m4 = w.iter().map(|x| (x - mw).powi(4)).sum::<f64>() / m;
    let m2 = w.iter().map(|x| (x - mw).powi(2)).sum::<f64>() / m;
    let se = ((m4 - m2 * m2).max(0.0) / m).sqrt() / st.n_mean;
    let consistent = q >= -3.0 * se - 1e-12;
    if !consistent {
        log::warn!("ensemble looks sub-Poissonian (Q = {q:.3} +/- {se:.3}); W >= 0 assumption doubtful");
    }
    Ok(ClassicalityCheck { mandel_q: q, stderr: se, consistent })
}
