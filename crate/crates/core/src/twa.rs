//! Truncated-Wigner simulation of a polariton condensate coupled to an
//! incoherent reservoir: stochastic Gross–Pitaevskii dynamics on a periodic
//! square grid, mode statistics, initial-state preparation and phase
//! variance series.

use std::f64::consts::{PI, TAU};
use std::fs;
use std::path::Path;
use std::sync::Arc;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::analysis::{circular_stats_from_phases, DecaySeries};
use crate::bridge::{convolve_samples, RadialKernelTable};
use crate::error::{invalid, Error, Result};
use crate::phasespace::{circular_stats, PhaseSpaceGrid};

/// Electron mass in meV·ps²/μm².
pub const ELECTRON_MASS: f64 = 5685.63;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Classical RK4 on the full drift, spectral Laplacian.
    #[default]
    Rk4,
    /// RK4 in the interaction picture of the kinetic term (kinetic
    /// propagation exact in Fourier space).
    Rk4Ip,
}

/// Model and discretization parameters. Units: μm, ps, meV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelParams {
    /// Effective mass in electron masses.
    pub m_eff: f64,
    pub gamma_c: f64,
    pub gamma_r: f64,
    #[serde(rename = "R_r")]
    pub r_r: f64,
    pub g_c: f64,
    pub g_r: f64,
    #[serde(rename = "P0")]
    pub p0: f64,
    pub pump_width: f64,
    #[serde(rename = "L")]
    pub l: f64,
    #[serde(rename = "N")]
    pub n: usize,
    pub dt: f64,
    pub hbar: f64,
    pub scheme: Scheme,
    /// Inject the Wigner noise.
    pub noise: bool,
    /// Use `|ψ|² − 1/ΔV` in the nonlinear and reservoir terms.
    pub renormalize: bool,
}

impl Default for ModelParams {
    fn default() -> Self {
        ModelParams {
            m_eff: 1e-4,
            gamma_c: 0.2,
            gamma_r: 0.3,
            r_r: 0.015,
            g_c: 6e-3,
            g_r: 6e-3,
            p0: 8.0,
            pump_width: 40.0,
            l: 230.4,
            n: 256,
            dt: 0.02,
            hbar: 0.6582,
            scheme: Scheme::Rk4,
            noise: true,
            renormalize: true,
        }
    }
}

impl ModelParams {
    /// Square box of `n` points at the default 0.9 μm spacing.
    pub fn with_grid(n: usize) -> Self {
        ModelParams { n, l: 0.9 * n as f64, ..Self::default() }
    }

    pub fn dx(&self) -> f64 {
        self.l / self.n as f64
    }

    pub fn cell_area(&self) -> f64 {
        self.dx() * self.dx()
    }

    /// `ħ/2m` in μm²/ps.
    pub fn kinetic_coefficient(&self) -> f64 {
        self.hbar / (2.0 * self.m_eff * ELECTRON_MASS)
    }

    /// Squared wavevector at the Brillouin-zone corner.
    pub fn k_max_sq(&self) -> f64 {
        2.0 * (PI / self.dx()).powi(2)
    }

    /// Largest stable step: `0.4 / ((ħ/2m)·k²_max)` for explicit RK4; for
    /// the interaction picture the kinetic term drops out and the bound
    /// comes from the local rates.
    pub fn max_dt(&self) -> f64 {
        match self.scheme {
            Scheme::Rk4 => 0.4 / (self.kinetic_coefficient() * self.k_max_sq()),
            Scheme::Rk4Ip => (0.5 / (self.gamma_c + self.gamma_r)).min(1.0),
        }
    }

    /// `γ_c γ_r / R_r`: uniform mean-field threshold pump.
    pub fn homogeneous_threshold(&self) -> f64 {
        self.gamma_c * self.gamma_r / self.r_r
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("m_eff", self.m_eff),
            ("pump_width", self.pump_width),
            ("L", self.l),
            ("dt", self.dt),
            ("hbar", self.hbar),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} must be positive, got {v}")));
            }
        }
        let rates = [
            ("gamma_c", self.gamma_c),
            ("gamma_r", self.gamma_r),
            ("R_r", self.r_r),
            ("g_c", self.g_c),
            ("g_r", self.g_r),
            ("P0", self.p0),
        ];
        for (name, v) in rates {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.n < 2 {
            return Err(invalid("grid needs N >= 2"));
        }
        let bound = self.max_dt();
        if self.dt > bound {
            return Err(invalid(format!("dt = {} ps exceeds the stability bound {bound:.4} ps", self.dt)));
        }
        Ok(())
    }

    fn coord(&self, i: usize) -> f64 {
        (i as f64 - (self.n / 2) as f64) * self.dx()
    }

    fn vacuum_density(&self) -> f64 {
        if self.renormalize {
            1.0 / self.cell_area()
        } else {
            0.0
        }
    }
}

/// Gaussian pump `P0·exp(−r²/w²)` centered on grid point `(N/2, N/2)`;
/// row-major with `x` fastest.
pub fn pump_profile(params: &ModelParams) -> Vec<f64> {
    let n = params.n;
    let w2 = params.pump_width * params.pump_width;
    let mut out = Vec::with_capacity(n * n);
    for j in 0..n {
        let y = params.coord(j);
        for i in 0..n {
            let x = params.coord(i);
            out.push(params.p0 * (-(x * x + y * y) / w2).exp());
        }
    }
    out
}

/// Reservoir stationary with no condensate: `P/(γ_r − R_r/ΔV)` when the
/// renormalized density is used (it is `−1/ΔV` at `ψ = 0`), else `P/γ_r`.
pub fn reservoir_steady(params: &ModelParams) -> Result<Vec<f64>> {
    if params.p0 == 0.0 {
        return Ok(vec![0.0; params.n * params.n]);
    }
    let loss = params.gamma_r - params.r_r * params.vacuum_density();
    if !(loss > 0.0) {
        return Err(invalid(format!(
            "gamma_r = {} <= R_r/dV = {}: reservoir has no steady state",
            params.gamma_r,
            params.r_r * params.vacuum_density()
        )));
    }
    Ok(pump_profile(params).into_iter().map(|p| p / loss).collect())
}

/// `g_c[1 − P*·g_r γ_c/(g_c γ_r)]` with `P* = P0 R_r/(γ_c γ_r)` at the pump
/// center. Negative means the reservoir makes the net nonlinearity focusing.
pub fn effective_potential_diagnostic(params: &ModelParams) -> f64 {
    let p_star = params.p0 * params.r_r / (params.gamma_c * params.gamma_r);
    params.g_c - p_star * params.g_r * params.gamma_c / params.gamma_r
}

/// Field and reservoir on the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CondensateState {
    pub psi: Vec<Complex64>,
    pub n_res: Vec<f64>,
    pub t: f64,
}

impl CondensateState {
    /// Empty condensate (no vacuum noise) over the no-condensate reservoir.
    pub fn empty(params: &ModelParams) -> Result<Self> {
        Ok(CondensateState { psi: vec![Complex64::new(0.0, 0.0); params.n * params.n], n_res: reservoir_steady(params)?, t: 0.0 })
    }

    /// Vacuum Wigner noise (`⟨|ψ|²⟩ = 1/(2ΔV)` per cell) over the
    /// no-condensate reservoir.
    pub fn vacuum<G: Rng>(params: &ModelParams, rng: &mut G) -> Result<Self> {
        let mut s = Self::empty(params)?;
        add_vacuum(&mut s.psi, params.cell_area(), rng);
        Ok(s)
    }

    /// `ΔV·Σ|ψ|²`.
    pub fn norm(&self, params: &ModelParams) -> f64 {
        params.cell_area() * self.psi.iter().map(|z| z.norm_sqr()).sum::<f64>()
    }
}

fn add_vacuum<G: Rng>(psi: &mut [Complex64], cell_area: f64, rng: &mut G) {
    let s = (0.25 / cell_area).sqrt();
    for z in psi.iter_mut() {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        *z += Complex64::new(s * re, s * im);
    }
}

/// Wavevector on the reciprocal lattice, μm⁻¹.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct WaveVector {
    pub kx: f64,
    pub ky: f64,
}

impl WaveVector {
    pub const ZERO: WaveVector = WaveVector { kx: 0.0, ky: 0.0 };

    /// Lattice indices `(mx, my)` with `k = 2π m / L`.
    pub fn lattice_index(&self, params: &ModelParams) -> Result<(i64, i64)> {
        let unit = TAU / params.l;
        let snap = |k: f64| -> Result<i64> {
            let m = k / unit;
            let r = m.round();
            if (m - r).abs() > 1e-9 * r.abs().max(1.0) {
                return Err(invalid(format!("k = {k} is not on the reciprocal lattice (spacing {unit})")));
            }
            Ok(r as i64)
        };
        Ok((snap(self.kx)?, snap(self.ky)?))
    }
}

/// Mode amplitude `ψ_k = √ΔV/N · Σ_r ψ(r) e^{−ik·r}`, so that
/// `Σ_k |ψ_k|² = ΔV Σ_r |ψ(r)|²`.
pub fn mode_amplitude(state: &CondensateState, params: &ModelParams, k: WaveVector) -> Result<Complex64> {
    let (mx, my) = k.lattice_index(params)?;
    let n = params.n;
    let scale = params.cell_area().sqrt() / n as f64;
    if mx == 0 && my == 0 {
        return Ok(state.psi.iter().sum::<Complex64>() * scale);
    }
    let unit = TAU / params.l;
    let phase = |m: i64, i: usize| Complex64::from_polar(1.0, -(m as f64) * unit * params.coord(i));
    let ex: Vec<Complex64> = (0..n).map(|i| phase(mx, i)).collect();
    let mut total = Complex64::new(0.0, 0.0);
    for j in 0..n {
        let row = &state.psi[j * n..(j + 1) * n];
        let s: Complex64 = row.iter().zip(&ex).map(|(a, b)| a * b).sum();
        total += s * phase(my, j);
    }
    Ok(total * scale)
}

struct Fft2 {
    n: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    scratch_len: usize,
}

impl Fft2 {
    fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(n);
        let inv = planner.plan_fft_inverse(n);
        let scratch_len = fwd.get_inplace_scratch_len().max(inv.get_inplace_scratch_len());
        Fft2 { n, fwd, inv, scratch_len }
    }

    fn transpose(&self, buf: &mut [Complex64]) {
        let n = self.n;
        for j in 0..n {
            for i in (j + 1)..n {
                buf.swap(j * n + i, i * n + j);
            }
        }
    }

    /// Forward transform, leaving the spectrum transposed. The kinetic
    /// multipliers are symmetric in `(kx, ky)`, so the transpose is harmless
    /// and the inverse undoes it.
    fn forward_t(&self, buf: &mut [Complex64], scratch: &mut [Complex64]) {
        self.fwd.process_with_scratch(buf, scratch);
        self.transpose(buf);
        self.fwd.process_with_scratch(buf, scratch);
    }

    fn inverse_t(&self, buf: &mut [Complex64], scratch: &mut [Complex64]) {
        self.inv.process_with_scratch(buf, scratch);
        self.transpose(buf);
        self.inv.process_with_scratch(buf, scratch);
    }
}

/// Per-trajectory scratch buffers.
struct Workspace {
    psi_a: Vec<Complex64>,
    psi_b: Vec<Complex64>,
    psi_k: Vec<Complex64>,
    psi_acc: Vec<Complex64>,
    n_a: Vec<f64>,
    n_k: Vec<f64>,
    n_acc: Vec<f64>,
    n_old: Vec<f64>,
    scratch: Vec<Complex64>,
}

impl Workspace {
    fn new(cells: usize, scratch: usize) -> Self {
        let z = Complex64::new(0.0, 0.0);
        Workspace {
            psi_a: vec![z; cells],
            psi_b: vec![z; cells],
            psi_k: vec![z; cells],
            psi_acc: vec![z; cells],
            n_a: vec![0.0; cells],
            n_k: vec![0.0; cells],
            n_acc: vec![0.0; cells],
            n_old: vec![0.0; cells],
            scratch: vec![z; scratch],
        }
    }
}

/// Stepper for one parameter set: pump, FFT plans and kinetic multipliers.
pub struct Simulator {
    params: ModelParams,
    pump: Vec<f64>,
    fft: Fft2,
    /// Explicit scheme: `−i(ħ/2m)k²/N²`; interaction picture:
    /// `exp(−i(ħ/2m)k²·dt/2)/N²`. Indexed in the transposed layout.
    kinetic: Vec<Complex64>,
}

impl Simulator {
    pub fn new(params: &ModelParams) -> Result<Self> {
        params.validate()?;
        let n = params.n;
        let unit = TAU / params.l;
        let freq = |i: usize| {
            let m = if i <= n / 2 { i as f64 } else { i as f64 - n as f64 };
            m * unit
        };
        let c = params.kinetic_coefficient();
        let norm = 1.0 / (n * n) as f64;
        let mut kinetic = Vec::with_capacity(n * n);
        for j in 0..n {
            for i in 0..n {
                let k2 = freq(i).powi(2) + freq(j).powi(2);
                kinetic.push(match params.scheme {
                    Scheme::Rk4 => Complex64::new(0.0, -c * k2 * norm),
                    Scheme::Rk4Ip => Complex64::from_polar(norm, -c * k2 * 0.5 * params.dt),
                });
            }
        }
        Ok(Simulator { params: params.clone(), pump: pump_profile(params), fft: Fft2::new(n), kinetic })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    fn workspace(&self) -> Workspace {
        Workspace::new(self.params.n * self.params.n, self.fft.scratch_len)
    }

    /// Applies the Fourier multiplier in place.
    fn apply_kinetic(&self, buf: &mut [Complex64], scratch: &mut [Complex64]) {
        self.fft.forward_t(buf, scratch);
        for (z, m) in buf.iter_mut().zip(&self.kinetic) {
            *z *= m;
        }
        self.fft.inverse_t(buf, scratch);
    }

    /// Pointwise drift (gain/loss, interactions, reservoir) of cell `c`.
    #[inline]
    fn local(&self, c: usize, psi: Complex64, n: f64) -> (Complex64, f64) {
        let p = &self.params;
        let dens = psi.norm_sqr() - p.vacuum_density();
        let gain = 0.5 * (p.r_r * n - p.gamma_c);
        let energy = (p.g_r * n + p.g_c * dens) / p.hbar;
        let dpsi = psi * Complex64::new(gain, -energy);
        let dn = self.pump[c] - (p.gamma_r + p.r_r * dens) * n;
        (dpsi, dn)
    }

    /// Full drift into (`out_psi`, `out_n`); `out_psi` doubles as FFT buffer.
    fn drift(&self, psi: &[Complex64], n: &[f64], out_psi: &mut [Complex64], out_n: &mut [f64], scratch: &mut [Complex64]) {
        out_psi.copy_from_slice(psi);
        self.apply_kinetic(out_psi, scratch);
        for c in 0..psi.len() {
            let (dp, dn) = self.local(c, psi[c], n[c]);
            out_psi[c] += dp;
            out_n[c] = dn;
        }
    }

    fn local_drift(&self, psi: &[Complex64], n: &[f64], out_psi: &mut [Complex64], out_n: &mut [f64]) {
        for c in 0..psi.len() {
            let (dp, dn) = self.local(c, psi[c], n[c]);
            out_psi[c] = dp;
            out_n[c] = dn;
        }
    }

    fn rk4(&self, s: &mut CondensateState, w: &mut Workspace) {
        let dt = self.params.dt;
        let cells = s.psi.len();
        let Workspace { psi_a, psi_b, psi_k, psi_acc, n_a, n_k, n_acc, scratch, .. } = w;
        psi_acc.copy_from_slice(&s.psi);
        n_acc.copy_from_slice(&s.n_res);
        // stage weights for the accumulator and the next stage offset
        let stages = [(1.0 / 6.0, 0.5), (1.0 / 3.0, 0.5), (1.0 / 3.0, 1.0), (1.0 / 6.0, 0.0)];
        psi_a.copy_from_slice(&s.psi);
        n_a.copy_from_slice(&s.n_res);
        for (weight, next) in stages {
            self.drift(psi_a, n_a, psi_k, n_k, scratch);
            for c in 0..cells {
                psi_acc[c] += psi_k[c] * (weight * dt);
                n_acc[c] += n_k[c] * (weight * dt);
                psi_b[c] = s.psi[c] + psi_k[c] * (next * dt);
                n_a[c] = s.n_res[c] + n_k[c] * (next * dt);
            }
            std::mem::swap(psi_a, psi_b);
        }
        s.psi.copy_from_slice(psi_acc);
        s.n_res.copy_from_slice(n_acc);
    }

    fn rk4_ip(&self, s: &mut CondensateState, w: &mut Workspace) {
        let dt = self.params.dt;
        let cells = s.psi.len();
        let Workspace { psi_a, psi_b, psi_k, psi_acc, n_a, n_k, n_acc, scratch, .. } = w;
        // psi_b = D ψ (interaction-picture state)
        psi_b.copy_from_slice(&s.psi);
        self.apply_kinetic(psi_b, scratch);
        // k1 = D N(ψ)
        self.local_drift(&s.psi, &s.n_res, psi_k, n_k);
        self.apply_kinetic(psi_k, scratch);
        for c in 0..cells {
            psi_acc[c] = psi_b[c] + psi_k[c] * (dt / 6.0);
            n_acc[c] = s.n_res[c] + n_k[c] * (dt / 6.0);
            psi_a[c] = psi_b[c] + psi_k[c] * (0.5 * dt);
            n_a[c] = s.n_res[c] + n_k[c] * (0.5 * dt);
        }
        // k2, k3
        for last in [false, true] {
            self.local_drift(psi_a, n_a, psi_k, n_k);
            let off = if last { 1.0 } else { 0.5 };
            for c in 0..cells {
                psi_acc[c] += psi_k[c] * (dt / 3.0);
                n_acc[c] += n_k[c] * (dt / 3.0);
                psi_a[c] = psi_b[c] + psi_k[c] * (off * dt);
                n_a[c] = s.n_res[c] + n_k[c] * (off * dt);
            }
        }
        // k4 = N(D(ψ_I + k3))
        self.apply_kinetic(psi_a, scratch);
        self.local_drift(psi_a, n_a, psi_k, n_k);
        self.apply_kinetic(psi_acc, scratch);
        for c in 0..cells {
            s.psi[c] = psi_acc[c] + psi_k[c] * (dt / 6.0);
            s.n_res[c] = n_acc[c] + n_k[c] * (dt / 6.0);
        }
    }

    fn step_with(&self, s: &mut CondensateState, rng: &mut ChaCha8Rng, w: &mut Workspace) -> Result<()> {
        let p = &self.params;
        if p.noise {
            w.n_old.copy_from_slice(&s.n_res);
        }
        match p.scheme {
            Scheme::Rk4 => self.rk4(s, w),
            Scheme::Rk4Ip => self.rk4_ip(s, w),
        }
        if p.noise {
            // ⟨dW dW*⟩ = (R_r n + γ_c) dt / (2ΔV), split evenly over re/im
            let f = p.dt / (4.0 * p.cell_area());
            for (z, &n) in s.psi.iter_mut().zip(&w.n_old) {
                let amp = ((p.r_r * n + p.gamma_c).max(0.0) * f).sqrt();
                let re: f64 = rng.sample(StandardNormal);
                let im: f64 = rng.sample(StandardNormal);
                *z += Complex64::new(amp * re, amp * im);
            }
        }
        s.t += p.dt;
        let bad = s.psi.iter().position(|z| !z.is_finite()).or_else(|| s.n_res.iter().position(|v| !v.is_finite()));
        if let Some(c) = bad {
            return Err(Error::NonFinite { ix: c % p.n, iy: c / p.n, t: s.t });
        }
        Ok(())
    }

    /// One step of `dt`.
    pub fn step(&self, state: &mut CondensateState, rng: &mut ChaCha8Rng) -> Result<()> {
        let mut w = self.workspace();
        self.step_with(state, rng, &mut w)
    }

    /// `steps` consecutive steps.
    pub fn advance(&self, state: &mut CondensateState, rng: &mut ChaCha8Rng, steps: usize) -> Result<()> {
        let mut w = self.workspace();
        for _ in 0..steps {
            self.step_with(state, rng, &mut w)?;
        }
        Ok(())
    }

    /// Steps needed to get from `t0` to `t1`.
    pub fn steps_between(&self, t0: f64, t1: f64) -> usize {
        ((t1 - t0) / self.params.dt).round().max(0.0) as usize
    }
}

/// Mean-field growth rate of a small uniform condensate seeded into the
/// no-condensate reservoir, from the uniform (kinetic-free) dynamics.
fn uniform_growth(params: &ModelParams, p: f64, horizon: f64) -> Result<f64> {
    let mut q = params.clone();
    q.p0 = p;
    q.noise = false;
    q.renormalize = false;
    q.n = 1;
    q.l = params.dx();
    q.pump_width = f64::INFINITY;
    let seed = 1e-6;
    let mut psi = Complex64::new(seed, 0.0);
    let mut n = p / q.gamma_r;
    let f = |psi: Complex64, n: f64| {
        let dens = psi.norm_sqr();
        let dpsi = psi * Complex64::new(0.5 * (q.r_r * n - q.gamma_c), -(q.g_r * n + q.g_c * dens) / q.hbar);
        (dpsi, p - (q.gamma_r + q.r_r * dens) * n)
    };
    let dt = 0.05;
    let steps = (horizon / dt).ceil() as usize;
    for _ in 0..steps {
        let (a1, b1) = f(psi, n);
        let (a2, b2) = f(psi + a1 * (0.5 * dt), n + 0.5 * dt * b1);
        let (a3, b3) = f(psi + a2 * (0.5 * dt), n + 0.5 * dt * b2);
        let (a4, b4) = f(psi + a3 * dt, n + dt * b3);
        psi += (a1 + a2 * 2.0 + a3 * 2.0 + a4) * (dt / 6.0);
        n += dt / 6.0 * (b1 + 2.0 * b2 + 2.0 * b3 + b4);
    }
    Ok((psi.norm() / seed).ln() / (steps as f64 * dt))
}

/// Uniform-pump mean-field threshold located by bisection on the sign of
/// the growth rate of a small seed (noise off, unrenormalized density).
pub fn homogeneous_threshold_bisect(params: &ModelParams, rel_tol: f64) -> Result<f64> {
    if !(params.r_r > 0.0 && params.gamma_r > 0.0) {
        return Err(invalid("threshold search needs R_r > 0 and gamma_r > 0"));
    }
    let horizon = 200.0;
    let mut lo = 0.0;
    let mut hi = 1.0;
    while uniform_growth(params, hi, horizon)? <= 0.0 {
        lo = hi;
        hi *= 2.0;
        if hi > 1e9 {
            return Err(Error::NoConvergence { what: "threshold bracket".into(), best_residual: hi });
        }
    }
    while hi - lo > rel_tol * hi {
        let mid = 0.5 * (lo + hi);
        if uniform_growth(params, mid, horizon)? > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// One trajectory: state plus its own random stream.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub id: u64,
    pub state: CondensateState,
    pub rng: ChaCha8Rng,
}

/// Trajectory RNG: the master seed with stream `id`.
pub fn trajectory_rng(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Independent trajectories sharing one parameter set. Ensemble averages
/// are taken in trajectory order, so results do not depend on scheduling.
#[derive(Debug, Clone)]
pub struct TrajectoryEnsemble {
    pub seed: u64,
    pub trajectories: Vec<Trajectory>,
}

impl TrajectoryEnsemble {
    /// `m` vacuum trajectories over the no-condensate reservoir.
    pub fn vacuum(params: &ModelParams, m: usize, seed: u64) -> Result<Self> {
        if m == 0 {
            return Err(invalid("ensemble needs M >= 1"));
        }
        let trajectories = (0..m as u64)
            .map(|id| {
                let mut rng = trajectory_rng(seed, id);
                let state = CondensateState::vacuum(params, &mut rng)?;
                Ok(Trajectory { id, state, rng })
            })
            .collect::<Result<_>>()?;
        Ok(TrajectoryEnsemble { seed, trajectories })
    }

    /// `m` trajectories starting from a mean-field state plus vacuum noise.
    pub fn seeded(params: &ModelParams, profile: &MeanFieldProfile, m: usize, seed: u64) -> Result<Self> {
        let cells = params.n * params.n;
        if m == 0 {
            return Err(invalid("ensemble needs M >= 1"));
        }
        if profile.condensate.len() != cells || profile.reservoir.len() != cells {
            return Err(invalid("mean-field profile does not match the grid"));
        }
        let trajectories = (0..m as u64)
            .map(|id| {
                let mut rng = trajectory_rng(seed, id);
                let mut psi = profile.condensate.clone();
                add_vacuum(&mut psi, params.cell_area(), &mut rng);
                Trajectory { id, state: CondensateState { psi, n_res: profile.reservoir.clone(), t: 0.0 }, rng }
            })
            .collect();
        Ok(TrajectoryEnsemble { seed, trajectories })
    }

    /// Rotates every trajectory by a global phase so that its amplitude in
    /// mode `k` is real and nonnegative. Number statistics are unchanged.
    pub fn align_phase(&mut self, params: &ModelParams, k: WaveVector) -> Result<()> {
        for tr in &mut self.trajectories {
            let a = mode_amplitude(&tr.state, params, k)?;
            let rot = if a.norm() > 0.0 { a.conj() / a.norm() } else { Complex64::new(1.0, 0.0) };
            tr.state.psi.iter_mut().for_each(|z| *z *= rot);
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn time(&self) -> f64 {
        self.trajectories.first().map_or(0.0, |t| t.state.t)
    }

    /// Advances every trajectory to `t_end` (in parallel).
    pub fn evolve_to(&mut self, sim: &Simulator, t_end: f64) -> Result<()> {
        let steps = sim.steps_between(self.time(), t_end);
        self.trajectories.par_iter_mut().try_for_each(|tr| {
            sim.advance(&mut tr.state, &mut tr.rng, steps)
                .map_err(|e| Error::Trajectory { id: tr.id as usize, source: Box::new(e) })
        })
    }

    pub fn mode_amplitudes(&self, params: &ModelParams, k: WaveVector) -> Result<Vec<Complex64>> {
        self.trajectories.par_iter().map(|tr| mode_amplitude(&tr.state, params, k)).collect()
    }
}

/// Number statistics of one mode from symmetric-ordered samples.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeStats {
    /// `⟨n̂⟩ = ⟨|ψ|²⟩ − 1/2`.
    pub n_mean: f64,
    /// `⟨n̂²⟩ − ⟨n̂⟩²` with `⟨n̂²⟩ = ⟨|ψ|⁴⟩ − ⟨|ψ|²⟩`.
    pub n_var: f64,
    /// Phase-sensitive coherent part `|⟨ψ⟩|²`.
    pub n_coh: f64,
    /// `n_mean − n_coh`.
    pub n_th: f64,
    /// Coherent part from the number statistics of a displaced thermal
    /// state, `√max(n² + n − Var n, 0)`; insensitive to a random global phase.
    pub coherence_proxy: f64,
    pub phase_samples: Vec<f64>,
}

pub fn mode_stats_from_amplitudes(amps: &[Complex64]) -> Result<ModeStats> {
    if amps.len() < 2 {
        return Err(invalid("mode statistics need M >= 2 trajectories"));
    }
    let m = amps.len() as f64;
    let (mut s2, mut s4, mut mean) = (0.0, 0.0, Complex64::new(0.0, 0.0));
    for a in amps {
        let w = a.norm_sqr();
        s2 += w;
        s4 += w * w;
        mean += a;
    }
    let (w2, w4) = (s2 / m, s4 / m);
    mean /= m;
    let n_mean = w2 - 0.5;
    let n_var = w4 - w2 - n_mean * n_mean;
    let n_coh = mean.norm_sqr();
    Ok(ModeStats {
        n_mean,
        n_var,
        n_coh,
        n_th: n_mean - n_coh,
        coherence_proxy: (n_mean * n_mean + n_mean - n_var).max(0.0).sqrt(),
        phase_samples: amps.iter().map(|a| a.arg()).collect(),
    })
}

pub fn mode_stats(ensemble: &TrajectoryEnsemble, params: &ModelParams, k: WaveVector) -> Result<ModeStats> {
    mode_stats_from_amplitudes(&ensemble.mode_amplitudes(params, k)?)
}

/// Target mode statistics for initial-state preparation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitPrepTarget {
    pub n_mean: f64,
    pub n_var: f64,
    /// Optional target for `coherence_proxy / n_mean`.
    pub coherence: Option<f64>,
    pub k: WaveVector,
}

impl InitPrepTarget {
    /// Takes mean, variance and coherence from measured statistics.
    pub fn from_stats(stats: &ModeStats, k: WaveVector) -> Self {
        let coherence = (stats.n_mean > 0.0).then(|| stats.coherence_proxy / stats.n_mean);
        InitPrepTarget { n_mean: stats.n_mean, n_var: stats.n_var, coherence, k }
    }
}

/// Prepared ensemble and the final sampling parameters.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub ensemble: TrajectoryEnsemble,
    pub mu: f64,
    pub sigma: f64,
    /// Relative residuals of (n_mean, n_var[, coherence]).
    pub residuals: Vec<f64>,
}

/// Stationary mean-field profile used to shape prepared ensembles.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanFieldProfile {
    /// Condensate shape scaled to unit amplitude in the selected mode.
    pub envelope: Vec<Complex64>,
    /// Mean-field condensate at the end of the run (zero when it decayed).
    pub condensate: Vec<Complex64>,
    /// Reservoir density at the end of the run.
    pub reservoir: Vec<f64>,
}

/// Mean-field run (noise off, unrenormalized density) from the pump shape.
/// The envelope falls back to the pump shape if the mean field decays.
pub fn mean_field_envelope(params: &ModelParams, k: WaveVector, t_run: f64) -> Result<MeanFieldProfile> {
    let mut q = params.clone();
    q.noise = false;
    q.renormalize = false;
    let sim = Simulator::new(&q)?;
    let pump = pump_profile(&q);
    let peak = pump.iter().cloned().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let mut state = CondensateState {
        psi: pump.iter().map(|p| Complex64::new(p / peak, 0.0)).collect(),
        n_res: reservoir_steady(&q)?,
        t: 0.0,
    };
    let mut rng = trajectory_rng(0, 0);
    sim.advance(&mut state, &mut rng, sim.steps_between(0.0, t_run))?;
    let mut env: Vec<Complex64> = state.psi.iter().map(|z| Complex64::new(z.norm(), 0.0)).collect();
    let total: f64 = env.iter().map(|z| z.re).sum();
    let decayed = !(total > 1e-6 * (q.n * q.n) as f64);
    if decayed {
        env = pump.iter().map(|p| Complex64::new(*p, 0.0)).collect();
        state.psi.iter_mut().for_each(|z| *z = Complex64::new(0.0, 0.0));
    }
    let (mx, my) = k.lattice_index(&q)?;
    if mx != 0 || my != 0 {
        for j in 0..q.n {
            for i in 0..q.n {
                let ph = k.kx * q.coord(i) + k.ky * q.coord(j);
                env[j * q.n + i] *= Complex64::from_polar(1.0, ph);
            }
        }
    }
    let amp = mode_amplitude(&CondensateState { psi: env.clone(), n_res: Vec::new(), t: 0.0 }, &q, k)?;
    if amp.norm() == 0.0 {
        return Err(Error::Degenerate("envelope has no weight in the selected mode".into()));
    }
    Ok(MeanFieldProfile { envelope: env.into_iter().map(|z| z / amp).collect(), condensate: state.psi, reservoir: state.n_res })
}

fn residuals(amps: &[Complex64], target: &InitPrepTarget) -> Result<Vec<f64>> {
    let st = mode_stats_from_amplitudes(amps)?;
    let rel = |a: f64, b: f64| (a - b) / b.abs().max(1.0);
    let mut r = vec![rel(st.n_mean, target.n_mean), rel(st.n_var, target.n_var)];
    if let Some(c) = target.coherence {
        r.push(st.coherence_proxy / st.n_mean.max(f64::MIN_POSITIVE) - c);
    }
    Ok(r)
}

/// Draws `m` trajectories `ψ_j = env·(μ + σ_th ξ_j) + vacuum noise` and
/// tunes `(μ, σ_th)` on the fixed draws until the measured mode statistics
/// match the target within `tol` (relative). `sigma` reports the total
/// Gaussian width in the mode, `√(σ_th² + 1/2)`. Reservoirs start from the
/// mean-field profile.
pub fn prepare_initial_state(
    target: &InitPrepTarget,
    params: &ModelParams,
    profile: &MeanFieldProfile,
    m: usize,
    seed: u64,
    tol: f64,
) -> Result<Prepared> {
    let (n, v) = (target.n_mean, target.n_var);
    if !(n >= 0.0 && v >= 0.0 && tol > 0.0) {
        return Err(invalid("targets must be >= 0 and tol > 0"));
    }
    if v < n * (1.0 - tol) || v > (n * n + n) * (1.0 + tol) {
        return Err(invalid(format!(
            "variance {v} outside the displaced-thermal range [{n}, {}]",
            n * n + n
        )));
    }
    if m < 2 {
        return Err(invalid("preparation needs M >= 2"));
    }
    let cells = params.n * params.n;
    if profile.envelope.len() != cells || profile.reservoir.len() != cells {
        return Err(invalid("mean-field profile does not match the grid"));
    }
    let mut base = CondensateState::empty(params)?;
    base.n_res.clone_from(&profile.reservoir);
    let mut trajectories = Vec::with_capacity(m);
    let mut xi = Vec::with_capacity(m);
    let mut vac_amp = Vec::with_capacity(m);
    for id in 0..m as u64 {
        let mut rng = trajectory_rng(seed, id);
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        xi.push(Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2);
        let mut state = base.clone();
        add_vacuum(&mut state.psi, params.cell_area(), &mut rng);
        vac_amp.push(mode_amplitude(&state, params, target.k)?);
        trajectories.push(Trajectory { id, state, rng });
    }
    let amps = |mu: f64, s: f64| -> Vec<Complex64> { xi.iter().zip(&vac_amp).map(|(x, v)| mu + x * s + v).collect() };
    let n_th0 = n - (n * n + n - v).max(0.0).sqrt();
    let mut mu = (n - n_th0).max(0.0).sqrt();
    let mut s = n_th0.max(0.0).sqrt();
    let mut best = (f64::INFINITY, mu, s);
    for _ in 0..100 {
        let r = residuals(&amps(mu, s), target)?;
        let worst = r.iter().fold(0.0_f64, |a, b| a.max(b.abs()));
        if worst < best.0 {
            best = (worst, mu, s);
        }
        if worst < tol {
            break;
        }
        // Newton step on (μ², σ_th²) for the mean and variance residuals
        let (u, t) = (mu * mu, s * s);
        let h = 1e-6 * (u + t).max(1.0);
        let at = |u: f64, t: f64| residuals(&amps(u.max(0.0).sqrt(), t.max(0.0).sqrt()), target);
        let ru = at(u + h, t)?;
        let rt = at(u, t + h)?;
        let j = [[(ru[0] - r[0]) / h, (rt[0] - r[0]) / h], [(ru[1] - r[1]) / h, (rt[1] - r[1]) / h]];
        let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
        if det.abs() < 1e-300 {
            break;
        }
        let du = (j[1][1] * r[0] - j[0][1] * r[1]) / det;
        let dt = (-j[1][0] * r[0] + j[0][0] * r[1]) / det;
        mu = (u - du).max(0.0).sqrt();
        s = (t - dt).max(0.0).sqrt();
    }
    let (worst, mu, s) = best;
    if worst >= tol {
        return Err(Error::NoConvergence { what: "initial-state preparation".into(), best_residual: worst });
    }
    let residuals = residuals(&amps(mu, s), target)?;
    for (tr, x) in trajectories.iter_mut().zip(&xi) {
        let c = mu + x * s;
        for (z, e) in tr.state.psi.iter_mut().zip(&profile.envelope) {
            *z += e * c;
        }
    }
    Ok(Prepared { ensemble: TrajectoryEnsemble { seed, trajectories }, mu, sigma: (s * s + 0.5).sqrt(), residuals })
}

/// How `Var(φ)` is read off the mode amplitudes.
#[derive(Debug, Clone)]
pub enum PhaseEstimator {
    /// Circular variance of the sample phases.
    Samples,
    /// Circular variance of the P_Ω field obtained by convolving the samples
    /// with the Wigner-to-P_Ω kernel.
    Bridge { table: RadialKernelTable, grid: PhaseSpaceGrid },
}

/// Evolves the ensemble through `times` and records `Var(φ)` of mode `k`.
pub fn phase_variance_series(
    ensemble: &mut TrajectoryEnsemble,
    sim: &Simulator,
    k: WaveVector,
    times: &[f64],
    estimator: &PhaseEstimator,
) -> Result<DecaySeries> {
    if times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(invalid("time grid must be strictly increasing"));
    }
    let mut values = Vec::with_capacity(times.len());
    let mut errors = Vec::with_capacity(times.len());
    for &t in times {
        ensemble.evolve_to(sim, t)?;
        let amps = ensemble.mode_amplitudes(sim.params(), k)?;
        let (v, e) = match estimator {
            PhaseEstimator::Samples => {
                let phases: Vec<f64> = amps.iter().map(|a| a.arg()).collect();
                let st = circular_stats_from_phases(&phases)?;
                let mean_dir = st.resultant.arg();
                let m = phases.len() as f64;
                let c: Vec<f64> = phases.iter().map(|p| (p - mean_dir).cos()).collect();
                let cm = c.iter().sum::<f64>() / m;
                let var_c = c.iter().map(|x| (x - cm).powi(2)).sum::<f64>() / (m - 1.0).max(1.0);
                (st.variance, (var_c / m).sqrt())
            }
            PhaseEstimator::Bridge { table, grid } => {
                let field = convolve_samples(&amps, table, grid)?;
                let st = circular_stats(&field)?;
                let err = crate::phasespace::circular_errors(&field, &st).map_or(f64::NAN, |e| e.variance);
                (st.variance, err)
            }
        };
        values.push(v);
        errors.push(e);
    }
    DecaySeries::new(times.to_vec(), values, Some(errors), None, "var_phi")
}

/// Coherence-time measurement from a phase-aligned steady state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoherenceRun {
    pub trajectories: usize,
    pub t_settle: f64,
    /// Longest delay, ps.
    pub t_obs: f64,
    /// Delays after τ = 0; spaced quadratically so short decays are resolved.
    pub points: usize,
    pub seed: u64,
}

impl Default for CoherenceRun {
    fn default() -> Self {
        CoherenceRun { trajectories: 50, t_settle: 300.0, t_obs: 3000.0, points: 30, seed: 1 }
    }
}

impl CoherenceRun {
    /// `t_obs·(i/points)²` for `i = 0..=points`.
    pub fn delays(&self) -> Vec<f64> {
        let n = self.points.max(1) as f64;
        (0..=self.points).map(|i| self.t_obs * (i as f64 / n).powi(2)).collect()
    }
}

/// Series and steady-state statistics of one coherence-time run.
#[derive(Debug, Clone)]
pub struct CoherenceSeries {
    /// `Var(φ)` against delay from the alignment instant.
    pub series: DecaySeries,
    pub steady: ModeStats,
}

/// Settles a mean-field-seeded ensemble, aligns the phase of mode `k` in
/// every trajectory and records `Var(φ)` as the phase diffuses.
pub fn coherence_series(params: &ModelParams, k: WaveVector, run: &CoherenceRun, estimator: &PhaseEstimator) -> Result<CoherenceSeries> {
    if run.trajectories < 2 || run.points < 3 || !(run.t_obs > 0.0) || !(run.t_settle >= 0.0) {
        return Err(invalid("coherence run needs >= 2 trajectories, >= 3 points and t_obs > 0"));
    }
    let sim = Simulator::new(params)?;
    let mut ens = steady_ensemble(params, k, run.trajectories, run.t_settle, run.seed)?;
    let steady = mode_stats(&ens, params, k)?;
    ens.align_phase(params, k)?;
    let t0 = ens.time();
    let delays = run.delays();
    let times: Vec<f64> = delays.iter().map(|d| t0 + d).collect();
    let s = phase_variance_series(&mut ens, &sim, k, &times, estimator)?;
    let series = DecaySeries::new(delays, s.values, s.errors, None, "var_phi")?;
    Ok(CoherenceSeries { series, steady })
}

/// Stochastic threshold search settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ThresholdSearch {
    pub p_lo: f64,
    pub p_hi: f64,
    pub trajectories: usize,
    pub t_settle: f64,
    /// Snapshots pooled into the statistics after settling.
    pub snapshots: usize,
    /// ps between pooled snapshots.
    pub interval: f64,
    pub rel_tol: f64,
    pub seed: u64,
}

impl Default for ThresholdSearch {
    fn default() -> Self {
        ThresholdSearch { p_lo: 2.0, p_hi: 16.0, trajectories: 20, t_settle: 300.0, snapshots: 10, interval: 50.0, rel_tol: 0.05, seed: 1 }
    }
}

/// Steady-state ensemble at the current pump: mean-field start plus vacuum
/// noise, evolved for `t_settle`.
pub fn steady_ensemble(params: &ModelParams, k: WaveVector, m: usize, t_settle: f64, seed: u64) -> Result<TrajectoryEnsemble> {
    let sim = Simulator::new(params)?;
    let profile = mean_field_envelope(params, k, MEAN_FIELD_RUN)?;
    let mut ens = TrajectoryEnsemble::seeded(params, &profile, m, seed)?;
    ens.evolve_to(&sim, t_settle)?;
    Ok(ens)
}

/// ps of noise-free evolution behind [`mean_field_envelope`] in the
/// steady-state workflows.
pub const MEAN_FIELD_RUN: f64 = 500.0;

/// First-order coherence `|⟨ψ_k*(t) ψ_k(t + interval)⟩| / n_mean` of mode
/// `k` at pump peak `p`, averaged over consecutive snapshot pairs of a
/// settled ensemble. The product cancels both the phase inherited from the
/// mean-field start and the common blueshift rotation.
pub fn lag_coherence(params: &ModelParams, p: f64, k: WaveVector, search: &ThresholdSearch) -> Result<f64> {
    let q = ModelParams { p0: p, ..params.clone() };
    let sim = Simulator::new(&q)?;
    let mut ens = steady_ensemble(&q, k, search.trajectories, search.t_settle, search.seed)?;
    let pairs = search.snapshots.max(2) - 1;
    let mut prev = ens.mode_amplitudes(&q, k)?;
    let mut n_mean = mode_stats_from_amplitudes(&prev)?.n_mean;
    let mut corr = Complex64::new(0.0, 0.0);
    for i in 1..=pairs {
        ens.evolve_to(&sim, search.t_settle + i as f64 * search.interval)?;
        let next = ens.mode_amplitudes(&q, k)?;
        corr += prev.iter().zip(&next).map(|(a, b)| a.conj() * b).sum::<Complex64>() / next.len() as f64;
        n_mean += mode_stats_from_amplitudes(&next)?.n_mean;
        prev = next;
    }
    let (corr, n_mean) = (corr.norm() / pairs as f64, n_mean / (pairs + 1) as f64);
    Ok(if n_mean > 0.0 { (corr / n_mean).min(1.0) } else { 0.0 })
}

/// Pump peak at which the lag coherence of mode `k` crosses 1/2,
/// by bisection between `p_lo` (below) and `p_hi` (above).
pub fn locate_threshold(params: &ModelParams, k: WaveVector, search: &ThresholdSearch) -> Result<f64> {
    let frac = |p: f64| lag_coherence(params, p, k, search);
    let (mut lo, mut hi) = (search.p_lo, search.p_hi);
    if !(lo < hi) || frac(lo)? >= 0.5 || frac(hi)? < 0.5 {
        return Err(invalid(format!("threshold not bracketed by [{lo}, {hi}]")));
    }
    while hi - lo > search.rel_tol * hi {
        let mid = 0.5 * (lo + hi);
        if frac(mid)? >= 0.5 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    params: ModelParams,
    seed: u64,
    t: f64,
    trajectories: Vec<CheckpointEntry>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointEntry {
    id: u64,
    /// ChaCha word position, decimal.
    word_pos: String,
}

/// Writes `header.json` plus `psi_<id>.csv` (`re,im`) and `n_<id>.csv`
/// (`n`) per trajectory, row-major.
pub fn write_checkpoint(ensemble: &TrajectoryEnsemble, params: &ModelParams, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let header = CheckpointHeader {
        params: params.clone(),
        seed: ensemble.seed,
        t: ensemble.time(),
        trajectories: ensemble
            .trajectories
            .iter()
            .map(|tr| CheckpointEntry { id: tr.id, word_pos: tr.rng.get_word_pos().to_string() })
            .collect(),
    };
    fs::write(dir.join("header.json"), serde_json::to_string_pretty(&header)?)?;
    for tr in &ensemble.trajectories {
        let mut w = csv::Writer::from_path(dir.join(format!("psi_{}.csv", tr.id)))?;
        w.write_record(["re", "im"])?;
        for z in &tr.state.psi {
            w.write_record([z.re.to_string(), z.im.to_string()])?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(dir.join(format!("n_{}.csv", tr.id)))?;
        w.write_record(["n"])?;
        for v in &tr.state.n_res {
            w.write_record([v.to_string()])?;
        }
        w.flush()?;
    }
    Ok(())
}

pub fn read_checkpoint(dir: &Path) -> Result<(ModelParams, TrajectoryEnsemble)> {
    let header: CheckpointHeader = serde_json::from_str(&fs::read_to_string(dir.join("header.json"))?)?;
    header.params.validate()?;
    let cells = header.params.n * header.params.n;
    let mut trajectories = Vec::with_capacity(header.trajectories.len());
    for e in &header.trajectories {
        let mut rd = csv::Reader::from_path(dir.join(format!("psi_{}.csv", e.id)))?;
        let psi = rd
            .deserialize::<(f64, f64)>()
            .map(|r| r.map(|(re, im)| Complex64::new(re, im)).map_err(Error::from))
            .collect::<Result<Vec<_>>>()?;
        let mut rd = csv::Reader::from_path(dir.join(format!("n_{}.csv", e.id)))?;
        let n_res = rd.deserialize::<(f64,)>().map(|r| r.map(|v| v.0).map_err(Error::from)).collect::<Result<Vec<_>>>()?;
        if psi.len() != cells || n_res.len() != cells {
            return Err(Error::Format(format!("trajectory {} payload does not match N = {}", e.id, header.params.n)));
        }
        let mut rng = trajectory_rng(header.seed, e.id);
        let pos: u128 = e.word_pos.parse().map_err(|_| Error::Format(format!("bad word position {}", e.word_pos)))?;
        rng.set_word_pos(pos);
        trajectories.push(Trajectory { id: e.id, state: CondensateState { psi, n_res, t: header.t }, rng });
    }
    Ok((header.params, TrajectoryEnsemble { seed: header.seed, trajectories }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize) -> ModelParams {
        ModelParams::with_grid(n)
    }

    #[test]
    fn pump_shape() {
        let p = small(32);
        let pump = pump_profile(&p);
        let c = 16 * 32 + 16;
        assert_eq!(pump[c], p.p0);
        for j in 1..16 {
            for i in 1..16 {
                let a = pump[(16 + j) * 32 + 16 + i];
                assert_eq!(a, pump[(16 - j) * 32 + 16 - i]);
                assert_eq!(a, pump[(16 + i) * 32 + 16 + j]);
            }
        }
        let q = ModelParams { l: 0.9 * 32.0 * 4.0, pump_width: 0.9 * 4.0 * 10.0, ..p };
        // |r| = w lands on a grid point when w is a multiple of dx
        let i = 16 + (q.pump_width / q.dx()).round() as usize;
        assert!((pump_profile(&q)[16 * 32 + i] - q.p0 / std::f64::consts::E).abs() < 1e-12);
    }

    #[test]
    fn reservoir_without_condensate() {
        let mut p = small(16);
        p.renormalize = false;
        let n = reservoir_steady(&p).unwrap();
        assert!((n[8 * 16 + 8] - 8.0 / 0.3).abs() < 1e-12);
        p.renormalize = true;
        let n = reservoir_steady(&p).unwrap();
        assert!((n[8 * 16 + 8] - 8.0 / (0.3 - 0.015 / 0.81)).abs() < 1e-9);
        p.gamma_r = 0.01;
        assert!(reservoir_steady(&p).is_err());
    }

    #[test]
    fn potential_diagnostic() {
        let p = ModelParams::default();
        assert!((effective_potential_diagnostic(&ModelParams { g_r: 0.0, ..p.clone() }) - p.g_c).abs() < 1e-18);
        assert!((effective_potential_diagnostic(&ModelParams { p0: 0.0, ..p.clone() }) - p.g_c).abs() < 1e-18);
        let p_star = 8.0 * 0.015 / (0.2 * 0.3);
        let want = 6e-3 * (1.0 - p_star * (6e-3 * 0.2) / (6e-3 * 0.3));
        assert!((effective_potential_diagnostic(&p) - want).abs() < 1e-15);
    }

    #[test]
    fn stability_bound_enforced() {
        let p = ModelParams { dt: 0.05, ..ModelParams::default() };
        assert!(p.validate().is_err());
        assert!(ModelParams::default().validate().is_ok());
        assert!((ModelParams::default().max_dt() - 0.02837).abs() < 1e-4);
    }

    #[test]
    fn parseval_and_plane_waves() {
        let p = small(16);
        let mut rng = trajectory_rng(3, 0);
        let s = CondensateState::vacuum(&p, &mut rng).unwrap();
        let unit = TAU / p.l;
        let mut total = 0.0;
        for my in -8..8 {
            for mx in -8..8 {
                let k = WaveVector { kx: mx as f64 * unit, ky: my as f64 * unit };
                total += mode_amplitude(&s, &p, k).unwrap().norm_sqr();
            }
        }
        assert!((total - s.norm(&p)).abs() < 1e-10 * total);
        let k = WaveVector { kx: 3.0 * unit, ky: -unit };
        let wave = CondensateState {
            psi: (0..256).map(|c| Complex64::from_polar(1.0, k.kx * p.coord(c % 16) + k.ky * p.coord(c / 16))).collect(),
            n_res: vec![0.0; 256],
            t: 0.0,
        };
        let at_k = mode_amplitude(&wave, &p, k).unwrap().norm_sqr();
        assert!((at_k - wave.norm(&p)).abs() < 1e-9 * at_k);
        assert!(mode_amplitude(&wave, &p, WaveVector::ZERO).unwrap().norm() < 1e-9);
        assert!(mode_amplitude(&wave, &p, WaveVector { kx: 0.5 * unit, ky: 0.0 }).is_err());
        let uniform = CondensateState { psi: vec![Complex64::new(0.7, 0.0); 256], n_res: vec![0.0; 256], t: 0.0 };
        let z = mode_amplitude(&uniform, &p, WaveVector::ZERO).unwrap().norm_sqr();
        assert!((z - p.cell_area() * 256.0 * 0.49).abs() < 1e-10);
    }

    #[test]
    fn mode_stats_moment_arithmetic() {
        let beta = Complex64::new(3.0, 4.0);
        let st = mode_stats_from_amplitudes(&[beta; 5]).unwrap();
        assert!((st.n_mean - 24.5).abs() < 1e-12);
        // ⟨|ψ|⁴⟩ − ⟨|ψ|²⟩ − n² = 625 − 25 − 24.5²
        assert!((st.n_var - (625.0 - 25.0 - 600.25)).abs() < 1e-9);
        assert!((st.n_coh - 25.0).abs() < 1e-12);
        assert!(mode_stats_from_amplitudes(&[beta]).is_err());
    }

    #[test]
    fn vacuum_mode_is_empty() {
        let mut rng = trajectory_rng(9, 0);
        let m = 20_000;
        let amps: Vec<Complex64> = (0..m)
            .map(|_| {
                let a: f64 = rng.sample(StandardNormal);
                let b: f64 = rng.sample(StandardNormal);
                Complex64::new(a, b) * 0.5
            })
            .collect();
        let st = mode_stats_from_amplitudes(&amps).unwrap();
        assert!(st.n_mean.abs() < 4.0 * 0.5 / (m as f64).sqrt(), "{}", st.n_mean);
        let r = circular_stats_from_phases(&st.phase_samples).unwrap();
        assert!(r.resultant.norm() < 4.0 / (m as f64).sqrt());
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = ModelParams { n: 8, l: 7.2, ..ModelParams::default() };
        let sim = Simulator::new(&p).unwrap();
        let mut ens = TrajectoryEnsemble::vacuum(&p, 3, 5).unwrap();
        ens.evolve_to(&sim, 0.2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_checkpoint(&ens, &p, dir.path()).unwrap();
        let (q, mut back) = read_checkpoint(dir.path()).unwrap();
        assert_eq!(q, p);
        ens.evolve_to(&sim, 0.5).unwrap();
        back.evolve_to(&sim, 0.5).unwrap();
        for (a, b) in ens.trajectories.iter().zip(&back.trajectories) {
            assert_eq!(a.state, b.state);
        }
    }
}
