//! Regularizing kernel, pattern functions and circular statistics of
//! phase-space fields.

use std::f64::consts::{FRAC_PI_2, PI};
use std::io::Write;
use std::path::Path;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{finite, invalid, Error, Result};
use crate::numerics::{integrate, j1, HermiteTable};

/// Width of the regularizing kernel in phase space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct FilterParam(f64);

impl FilterParam {
    pub fn new(r: f64) -> Result<Self> {
        if r.is_finite() && r > 0.0 {
            Ok(FilterParam(r))
        } else {
            Err(invalid(format!("filter width must be positive, got {r}")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl Default for FilterParam {
    fn default() -> Self {
        FilterParam(0.7)
    }
}

impl TryFrom<f64> for FilterParam {
    type Error = Error;
    fn try_from(r: f64) -> Result<Self> {
        FilterParam::new(r)
    }
}

impl From<FilterParam> for f64 {
    fn from(r: FilterParam) -> f64 {
        r.0
    }
}

/// `Ω(γ) = [J1(2R|γ|) / (√π |γ|)]²`, with the limit `R²/π` at the origin.
pub fn kernel_omega(gamma: Complex64, r: FilterParam) -> Result<f64> {
    finite("gamma.re", gamma.re)?;
    finite("gamma.im", gamma.im)?;
    Ok(omega_radial(gamma.norm(), r.0))
}

#[inline]
pub(crate) fn omega_radial(abs_gamma: f64, r: f64) -> f64 {
    let x = 2.0 * r * abs_gamma;
    if x < 1e-6 {
        // J1(x)/x = 1/2 - x²/16 + ...
        let ratio = 0.5 - x * x / 16.0;
        return 4.0 * r * r * ratio * ratio / PI;
    }
    let v = j1(x) / abs_gamma;
    v * v / PI
}

/// Normalized overlap of two unit disks at separation `2t`:
/// `(1/π)[arccos t − t√(1−t²)]` for `t ≤ 1`, zero beyond.
pub fn kernel_g(t: f64) -> Result<f64> {
    finite("t", t)?;
    if t < 0.0 {
        return Err(invalid(format!("kernel_g needs t >= 0, got {t}")));
    }
    Ok(g_unchecked(t))
}

#[inline]
pub(crate) fn g_unchecked(t: f64) -> f64 {
    if t >= 1.0 {
        0.0
    } else {
        (t.acos() - t * (1.0 - t * t).sqrt()) / PI
    }
}

/// `h(X, R) = ∫₀¹ u[arccos u − u√(1−u²)] cos(uX) e^{2R²u²} du`.
pub fn kernel_h(x: f64, r: FilterParam) -> Result<f64> {
    finite("X", x)?;
    Ok(h_and_slope(x, r.0, None).0)
}

/// Amplification applied to the `h` integrand: the Gaussian `e^{2R²u²}`
/// and, for binned quadratures of width `dx`, `1/sinc(R·u·dx)`.
#[inline]
fn gain(u: f64, r: f64, bin_width: Option<f64>) -> f64 {
    let mut g = (2.0 * r * r * u * u).exp();
    if let Some(dx) = bin_width {
        let z = r * u * dx;
        if z > 1e-8 {
            g *= z / z.sin();
        }
    }
    g
}

/// `h(X)` and `dh/dX`, integrating over `θ` with `u = cos θ`.
pub(crate) fn h_and_slope(x: f64, r: f64, bin_width: Option<f64>) -> (f64, f64) {
    let weight = |theta: f64| {
        let (s, c) = theta.sin_cos();
        c * (theta - c * s) * s * gain(c, r, bin_width)
    };
    let value = integrate(
        |th| weight(th) * (x * th.cos()).cos(),
        0.0,
        FRAC_PI_2,
        1e-14,
        1e-13,
        4000,
    )
    .value;
    let slope = integrate(
        |th| {
            let c = th.cos();
            -weight(th) * c * (x * c).sin()
        },
        0.0,
        FRAC_PI_2,
        1e-14,
        1e-13,
        4000,
    )
    .value;
    (value, slope)
}

/// `f_Ω(α; x; φ) = (16R²/π³)·h(X, R)` with `X = 2R[x − 2|α|cos(φ + arg α)]`.
pub fn pattern_function(alpha: Complex64, x: f64, phi: f64, r: FilterParam) -> Result<f64> {
    finite("x", x)?;
    finite("phi", phi)?;
    finite("alpha.re", alpha.re)?;
    finite("alpha.im", alpha.im)?;
    let rv = r.0;
    let proj = 2.0 * (Complex64::from_polar(1.0, phi) * alpha).re;
    let big_x = 2.0 * rv * (x - proj);
    Ok(16.0 * rv * rv / PI.powi(3) * h_and_slope(big_x, rv, None).0)
}

/// Memoized `π·f_Ω` as a function of the displacement `d = x − 2Re(e^{iφ}α)`.
///
/// Backed by a cubic Hermite table of `h` with tabulated slopes.
#[derive(Debug, Clone)]
pub struct PatternTable {
    r: f64,
    bin_width: Option<f64>,
    scale: f64,
    table: HermiteTable,
}

impl PatternTable {
    /// Table valid for `|d| ≤ d_max`. `bin_width` enables the x-bin
    /// deconvolution factor.
    pub fn new(r: FilterParam, d_max: f64, bin_width: Option<f64>) -> Result<Self> {
        let rv = r.0;
        if let Some(dx) = bin_width {
            if !(dx > 0.0) || rv * dx >= 0.5 * PI {
                return Err(invalid(format!(
                    "bin correction needs 0 < R·dx < π/2 (R = {rv}, dx = {dx})"
                )));
            }
        }
        let x_max = 2.0 * rv * d_max.abs();
        let mut m4 = (2.0 * rv * rv).exp() * PI / 12.0;
        if let Some(dx) = bin_width {
            let z = rv * dx;
            m4 *= z / z.sin();
        }
        let step = (384.0 * 1e-10 / m4).powf(0.25).min(0.05);
        let table = HermiteTable::build(step, x_max.max(1.0), |x| h_and_slope(x, rv, bin_width));
        Ok(PatternTable { r: rv, bin_width, scale: 16.0 * rv * rv / (PI * PI), table })
    }

    pub fn filter(&self) -> f64 {
        self.r
    }

    pub fn bin_width(&self) -> Option<f64> {
        self.bin_width
    }

    pub fn d_max(&self) -> f64 {
        self.table.x_max() / (2.0 * self.r)
    }

    /// `h(X)` from the table, direct quadrature past its end.
    #[inline]
    pub fn h(&self, x: f64) -> f64 {
        match self.table.eval(x.abs()) {
            Some(v) => v,
            None => h_and_slope(x, self.r, self.bin_width).0,
        }
    }

    /// `π f_Ω` at displacement `d`.
    #[inline]
    pub fn pi_f(&self, d: f64) -> f64 {
        self.scale * self.h(2.0 * self.r * d)
    }
}

/// Rectangular lattice of phase-space points `α = q + ip`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhaseSpaceGrid {
    #[serde(rename = "qmin")]
    pub q_min: f64,
    #[serde(rename = "qmax")]
    pub q_max: f64,
    #[serde(rename = "pmin")]
    pub p_min: f64,
    #[serde(rename = "pmax")]
    pub p_max: f64,
    pub step: f64,
}

impl Default for PhaseSpaceGrid {
    fn default() -> Self {
        PhaseSpaceGrid { q_min: -20.0, q_max: 20.0, p_min: -20.0, p_max: 20.0, step: 0.25 }
    }
}

impl PhaseSpaceGrid {
    pub fn new(q_min: f64, q_max: f64, p_min: f64, p_max: f64, step: f64) -> Result<Self> {
        let g = PhaseSpaceGrid { q_min, q_max, p_min, p_max, step };
        g.validate()?;
        Ok(g)
    }

    pub fn square(half_width: f64, step: f64) -> Result<Self> {
        Self::new(-half_width, half_width, -half_width, half_width, step)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.q_min, self.q_max, self.p_min, self.p_max, self.step];
        if all.iter().any(|v| !v.is_finite()) || self.step <= 0.0 {
            return Err(invalid("grid bounds must be finite and step positive"));
        }
        for (lo, hi, axis) in [(self.q_min, self.q_max, "q"), (self.p_min, self.p_max, "p")] {
            let n = (hi - lo) / self.step;
            if hi < lo || (n - n.round()).abs() > 1e-9 * n.max(1.0) {
                return Err(invalid(format!(
                    "{axis} range [{lo}, {hi}] is not a multiple of step {}",
                    self.step
                )));
            }
        }
        Ok(())
    }

    pub fn nq(&self) -> usize {
        ((self.q_max - self.q_min) / self.step).round() as usize + 1
    }

    pub fn np(&self) -> usize {
        ((self.p_max - self.p_min) / self.step).round() as usize + 1
    }

    pub fn len(&self) -> usize {
        self.nq() * self.np()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn q(&self, i: usize) -> f64 {
        self.q_min + i as f64 * self.step
    }

    pub fn p(&self, j: usize) -> f64 {
        self.p_min + j as f64 * self.step
    }

    /// Point for flat index `k = j·nq + i`.
    pub fn point(&self, k: usize) -> Complex64 {
        let nq = self.nq();
        Complex64::new(self.q(k % nq), self.p(k / nq))
    }

    pub fn points(&self) -> impl Iterator<Item = Complex64> + '_ {
        (0..self.len()).map(move |k| self.point(k))
    }

    /// Largest `|α|` on the grid.
    pub fn max_radius(&self) -> f64 {
        let q = self.q_min.abs().max(self.q_max.abs());
        let p = self.p_min.abs().max(self.p_max.abs());
        q.hypot(p)
    }

    pub fn cell_area(&self) -> f64 {
        self.step * self.step
    }
}

/// Provenance carried with a reconstructed field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct FieldMeta {
    #[serde(rename = "R")]
    pub r: f64,
    pub n_samples: u64,
    pub s: Option<f64>,
    pub w: Option<f64>,
    pub tau_ps: Option<f64>,
}

/// Values (and optional pointwise σ) of a quasiprobability on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct QuasiProbabilityField {
    pub grid: PhaseSpaceGrid,
    /// Row-major with `q` fastest: index `j·nq + i`.
    pub values: Vec<f64>,
    pub sigmas: Option<Vec<f64>>,
    pub meta: FieldMeta,
}

impl QuasiProbabilityField {
    pub fn new(grid: PhaseSpaceGrid, values: Vec<f64>, sigmas: Option<Vec<f64>>, meta: FieldMeta) -> Result<Self> {
        grid.validate()?;
        if values.len() != grid.len() {
            return Err(invalid(format!("{} values for {} grid points", values.len(), grid.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("field values must be finite"));
        }
        if let Some(s) = &sigmas {
            if s.len() != values.len() || s.iter().any(|v| !(*v >= 0.0)) {
                return Err(invalid("sigmas must be nonnegative, one per point"));
            }
        }
        Ok(QuasiProbabilityField { grid, values, sigmas, meta })
    }

    /// Tabulates `f(α)` on the grid.
    pub fn tabulate<F: Fn(Complex64) -> f64 + Sync>(grid: PhaseSpaceGrid, meta: FieldMeta, f: F) -> Result<Self> {
        let values: Vec<f64> = (0..grid.len()).into_par_iter().map(|k| f(grid.point(k))).collect();
        Self::new(grid, values, None, meta)
    }

    /// `Ω(α − α₀)` on the grid: the exact regularized P function of the
    /// coherent state `|α₀⟩` (the vacuum for `α₀ = 0`).
    pub fn coherent_omega(grid: PhaseSpaceGrid, alpha0: Complex64, r: FilterParam) -> Result<Self> {
        let meta = FieldMeta { r: r.0, ..FieldMeta::default() };
        Self::tabulate(grid, meta, |a| omega_radial((a - alpha0).norm(), r.0))
    }

    /// `Σ values · step²`.
    pub fn riemann_sum(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.grid.cell_area()
    }

    pub fn value_at(&self, i: usize, j: usize) -> f64 {
        self.values[j * self.grid.nq() + i]
    }

    /// Grid point with the largest value.
    pub fn argmax(&self) -> Complex64 {
        let k = self
            .values
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(k, _)| k)
            .unwrap_or(0);
        self.grid.point(k)
    }

    /// Writes `q,p,value,sigma` rows; sigma is blank when absent.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["q", "p", "value", "sigma"])?;
        for k in 0..self.values.len() {
            let a = self.grid.point(k);
            let sigma = self.sigmas.as_ref().map(|s| s[k].to_string()).unwrap_or_default();
            w.write_record([a.re.to_string(), a.im.to_string(), self.values[k].to_string(), sigma])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn sidecar(&self) -> serde_json::Value {
        serde_json::json!({
            "R": self.meta.r,
            "grid": self.grid,
            "n_samples": self.meta.n_samples,
            "s": self.meta.s,
            "w": self.meta.w,
            "tau_ps": self.meta.tau_ps,
        })
    }

    /// Writes `<stem>.csv` and `<stem>.json`.
    pub fn export(&self, stem: &Path) -> Result<()> {
        let csv_path = stem.with_extension("csv");
        self.write_csv(std::io::BufWriter::new(std::fs::File::create(csv_path)?))?;
        let json = serde_json::to_string_pretty(&self.sidecar())?;
        std::fs::write(stem.with_extension("json"), json + "\n")?;
        Ok(())
    }

    /// Reads a field back from `<stem>.csv` and `<stem>.json`.
    pub fn import(stem: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Sidecar {
            #[serde(rename = "R")]
            r: f64,
            grid: PhaseSpaceGrid,
            n_samples: u64,
            s: Option<f64>,
            w: Option<f64>,
            tau_ps: Option<f64>,
        }
        let side: Sidecar = serde_json::from_str(&std::fs::read_to_string(stem.with_extension("json"))?)?;
        let mut rdr = csv::Reader::from_path(stem.with_extension("csv"))?;
        let mut values = Vec::new();
        let mut sigmas = Vec::new();
        let mut any_sigma = false;
        for rec in rdr.records() {
            let rec = rec?;
            let parse = |i: usize| -> Result<f64> {
                rec.get(i)
                    .ok_or_else(|| Error::Format("short field row".into()))?
                    .parse::<f64>()
                    .map_err(|e| Error::Format(e.to_string()))
            };
            values.push(parse(2)?);
            match rec.get(3) {
                Some(s) if !s.is_empty() => {
                    any_sigma = true;
                    sigmas.push(parse(3)?);
                }
                _ => sigmas.push(0.0),
            }
        }
        let meta = FieldMeta { r: side.r, n_samples: side.n_samples, s: side.s, w: side.w, tau_ps: side.tau_ps };
        Self::new(side.grid, values, any_sigma.then_some(sigmas), meta)
    }
}

/// Circular moments of a field (Var(φ) = 1 − |⟨r⟩|).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CircularStats {
    pub resultant: Complex64,
    pub variance: f64,
    pub mean_amplitude: f64,
}

/// Standard errors of the circular moments, propagating pointwise σ as if
/// grid points were independent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CircularErrors {
    pub variance: f64,
    pub mean_amplitude: f64,
}

/// Grid-truncated circular statistics. The origin, where the direction
/// `α/|α|` is undefined, carries zero weight.
pub fn circular_stats(field: &QuasiProbabilityField) -> Result<CircularStats> {
    if field.values.iter().all(|&v| v == 0.0) {
        return Err(Error::Empty("circular statistics of an all-zero field".into()));
    }
    let area = field.grid.cell_area();
    let mut res = Complex64::new(0.0, 0.0);
    let mut amp = 0.0;
    for (k, &v) in field.values.iter().enumerate() {
        let a = field.grid.point(k);
        let n = a.norm();
        if n == 0.0 {
            continue;
        }
        res += a * (v / n);
        amp += v * n;
    }
    res *= area;
    Ok(CircularStats { resultant: res, variance: 1.0 - res.norm(), mean_amplitude: amp * area })
}

/// Error propagation for [`circular_stats`]; `None` without σ.
pub fn circular_errors(field: &QuasiProbabilityField, stats: &CircularStats) -> Option<CircularErrors> {
    let sig = field.sigmas.as_ref()?;
    let area = field.grid.cell_area();
    let dir = if stats.resultant.norm() > 0.0 { stats.resultant / stats.resultant.norm() } else { Complex64::new(0.0, 0.0) };
    let mut v2 = 0.0;
    let mut a2 = 0.0;
    for (k, &s) in sig.iter().enumerate() {
        let a = field.grid.point(k);
        let n = a.norm();
        if n == 0.0 {
            continue;
        }
        let proj = (dir.conj() * a / n).re;
        v2 += (s * proj).powi(2);
        a2 += (s * n).powi(2);
    }
    Some(CircularErrors { variance: v2.sqrt() * area, mean_amplitude: a2.sqrt() * area })
}
