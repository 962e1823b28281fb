//! Three-channel homodyne records: Husimi histogram, intensity
//! postselection, target-phase reconstruction and a synthetic generator.

use std::collections::VecDeque;
use std::f64::consts::{PI, TAU};
use std::io::{Read, Write};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tomography::{wrap_phase, QuadratureDataset, QuadratureSample, StateSpec};

/// Local-oscillator repetition period (75.4 MHz) in ps.
pub const PULSE_PERIOD_PS: f64 = 1e6 / 75.4;

/// One pulse: two postselection quadratures, the target quadrature and the
/// relative LO phase between postselection and target channels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MultiChannelRecord {
    pub t_index: u64,
    #[serde(rename = "X1")]
    pub x1: f64,
    #[serde(rename = "X2")]
    pub x2: f64,
    #[serde(rename = "X3")]
    pub x3: f64,
    pub dphi: f64,
}

impl MultiChannelRecord {
    /// Radius in the postselection plane.
    pub fn radius(&self) -> f64 {
        self.x1.hypot(self.x2)
    }
}

pub fn write_records<W: Write>(records: &[MultiChannelRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t_index", "X1", "X2", "X3", "dphi"])?;
    for r in records {
        w.write_record([
            r.t_index.to_string(),
            r.x1.to_string(),
            r.x2.to_string(),
            r.x3.to_string(),
            r.dphi.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads `t_index,X1,X2,X3,dphi`; rejects non-finite values and
/// non-increasing pulse indices.
pub fn read_records<R: Read>(input: R) -> Result<Vec<MultiChannelRecord>> {
    let mut rdr = csv::Reader::from_reader(input);
    let want = ["t_index", "X1", "X2", "X3", "dphi"];
    if rdr.headers()?.iter().collect::<Vec<_>>() != want {
        return Err(Error::Format(format!("expected header {}", want.join(","))));
    }
    let mut out: Vec<MultiChannelRecord> = Vec::new();
    for rec in rdr.deserialize() {
        let r: MultiChannelRecord = rec?;
        if ![r.x1, r.x2, r.x3, r.dphi].iter().all(|v| v.is_finite()) {
            return Err(Error::Format(format!("non-finite record at pulse {}", r.t_index)));
        }
        if let Some(prev) = out.last() {
            if r.t_index <= prev.t_index {
                return Err(Error::Format(format!("pulse index {} does not increase", r.t_index)));
            }
        }
        out.push(r);
    }
    Ok(out)
}

/// `max − min` of `values` over a centered window of `window` entries
/// (truncated at the ends).
pub fn rolling_peak_to_peak(values: &[f64], window: usize) -> Vec<f64> {
    let n = values.len();
    let before = (window - 1) / 2;
    let after = window - 1 - before;
    let mut hi: VecDeque<usize> = VecDeque::new();
    let mut lo: VecDeque<usize> = VecDeque::new();
    let mut out = Vec::with_capacity(n);
    let mut next = 0;
    for i in 0..n {
        let end = (i + after).min(n - 1);
        while next <= end {
            while hi.back().is_some_and(|&j| values[j] <= values[next]) {
                hi.pop_back();
            }
            hi.push_back(next);
            while lo.back().is_some_and(|&j| values[j] >= values[next]) {
                lo.pop_back();
            }
            lo.push_back(next);
            next += 1;
        }
        let start = i.saturating_sub(before);
        while hi.front().is_some_and(|&j| j < start) {
            hi.pop_front();
        }
        while lo.front().is_some_and(|&j| j < start) {
            lo.pop_front();
        }
        out.push(values[hi[0]] - values[lo[0]]);
    }
    out
}

/// Keeps records whose `|X1·X2|` lies within 2.5% of the rolling
/// peak-to-peak of `X1·X2`, so the two postselection quadratures are
/// close to orthogonal.
pub fn orthogonality_filter(records: &[MultiChannelRecord], window: usize) -> Result<Vec<MultiChannelRecord>> {
    if window == 0 {
        return Err(invalid("orthogonality window must be >= 1"));
    }
    if records.is_empty() {
        return Ok(Vec::new());
    }
    let prod: Vec<f64> = records.iter().map(|r| r.x1 * r.x2).collect();
    let p2p = rolling_peak_to_peak(&prod, window);
    Ok(records
        .iter()
        .zip(prod.iter().zip(&p2p))
        .filter(|(_, (p, span))| p.abs() <= 0.025 * **span)
        .map(|(r, _)| *r)
        .collect())
}

/// Keeps records whose postselection radius lies between the `lo` and `hi`
/// percentiles of all radii (drift and jump removal).
pub fn range_gate(records: &[MultiChannelRecord], lo: f64, hi: f64) -> Result<Vec<MultiChannelRecord>> {
    if !(0.0..=100.0).contains(&lo) || !(0.0..=100.0).contains(&hi) || lo > hi {
        return Err(invalid(format!("bad percentile gate [{lo}, {hi}]")));
    }
    if records.is_empty() {
        return Ok(Vec::new());
    }
    let mut radii: Vec<f64> = records.iter().map(|r| r.radius()).collect();
    radii.sort_by(f64::total_cmp);
    let pick = |p: f64| radii[((p / 100.0) * (radii.len() - 1) as f64).round() as usize];
    let (a, b) = (pick(lo), pick(hi));
    Ok(records.iter().filter(|r| (a..=b).contains(&r.radius())).copied().collect())
}

/// Square bins over `[min, max]²` in the `(X1, X2)` plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HusimiBinSpec {
    pub min: f64,
    pub max: f64,
    pub width: f64,
}

impl Default for HusimiBinSpec {
    fn default() -> Self {
        HusimiBinSpec { min: -30.0, max: 30.0, width: 0.25 }
    }
}

impl HusimiBinSpec {
    pub fn bins(&self) -> usize {
        ((self.max - self.min) / self.width).round() as usize
    }

    fn index(&self, v: f64) -> Option<usize> {
        let i = ((v - self.min) / self.width).floor();
        (i >= 0.0 && (i as usize) < self.bins()).then_some(i as usize)
    }

    pub fn center(&self, i: usize) -> f64 {
        self.min + (i as f64 + 0.5) * self.width
    }
}

/// Joint histogram of the two postselection quadratures.
#[derive(Debug, Clone, PartialEq)]
pub struct HusimiHistogram {
    pub spec: HusimiBinSpec,
    /// `counts[j·bins + i]` for `X1` bin `i` and `X2` bin `j`.
    pub counts: Vec<u64>,
    pub total: u64,
    pub mean: [f64; 2],
    pub covariance: [[f64; 2]; 2],
}

impl HusimiHistogram {
    pub fn count(&self, i: usize, j: usize) -> u64 {
        self.counts[j * self.spec.bins() + i]
    }

    /// CSV `q_ps,p_ps,count` over nonzero bins.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["q_ps", "p_ps", "count"])?;
        let n = self.spec.bins();
        for j in 0..n {
            for i in 0..n {
                let c = self.counts[j * n + i];
                if c > 0 {
                    w.write_record([self.spec.center(i).to_string(), self.spec.center(j).to_string(), c.to_string()])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

pub fn husimi_histogram(records: &[MultiChannelRecord], spec: &HusimiBinSpec) -> Result<HusimiHistogram> {
    if records.is_empty() {
        return Err(Error::Empty("no records for the Husimi histogram".into()));
    }
    if !(spec.width > 0.0 && spec.max > spec.min) {
        return Err(invalid("Husimi bins need max > min and width > 0"));
    }
    let n = spec.bins();
    let mut counts = vec![0u64; n * n];
    let (mut s1, mut s2) = (0.0, 0.0);
    for r in records {
        if let (Some(i), Some(j)) = (spec.index(r.x1), spec.index(r.x2)) {
            counts[j * n + i] += 1;
        }
        s1 += r.x1;
        s2 += r.x2;
    }
    let m = records.len() as f64;
    let mean = [s1 / m, s2 / m];
    let mut c = [[0.0; 2]; 2];
    for r in records {
        let d = [r.x1 - mean[0], r.x2 - mean[1]];
        for a in 0..2 {
            for b in 0..2 {
                c[a][b] += d[a] * d[b];
            }
        }
    }
    let denom = (m - 1.0).max(1.0);
    for row in &mut c {
        for v in row.iter_mut() {
            *v /= denom;
        }
    }
    Ok(HusimiHistogram { spec: *spec, counts, total: records.len() as u64, mean, covariance: c })
}

/// Target-channel phase `(Δφ + atan2(X2, X1)) mod 2π`.
pub fn reconstruct_phase(rec: &MultiChannelRecord) -> Result<f64> {
    if rec.x1 == 0.0 && rec.x2 == 0.0 {
        return Err(invalid(format!("pulse {}: zero postselection vector has no phase", rec.t_index)));
    }
    Ok(wrap_phase(rec.dphi + rec.x2.atan2(rec.x1)))
}

/// Annulus `s − w/2 ≤ √(X1² + X2²) ≤ s + w/2`, lower edge clamped at 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnulusSelector {
    pub s: f64,
    pub w: f64,
}

impl AnnulusSelector {
    pub fn new(s: f64, w: f64) -> Result<Self> {
        if !(s >= 0.0 && s.is_finite()) || !(w > 0.0) {
            return Err(invalid(format!("annulus needs s >= 0 and w > 0, got s = {s}, w = {w}")));
        }
        Ok(AnnulusSelector { s, w })
    }

    pub fn lower(&self) -> f64 {
        (self.s - 0.5 * self.w).max(0.0)
    }

    pub fn upper(&self) -> f64 {
        self.s + 0.5 * self.w
    }

    pub fn contains(&self, radius: f64) -> bool {
        radius >= self.lower() && radius <= self.upper()
    }
}

/// Postselected target quadratures.
#[derive(Debug, Clone, PartialEq)]
pub struct Postselection {
    pub dataset: QuadratureDataset,
    pub n_kept: usize,
    pub n_seen: usize,
    /// Set when nothing fell in the annulus.
    pub empty: bool,
}

pub fn postselect(records: &[MultiChannelRecord], sel: &AnnulusSelector) -> Postselection {
    let mut samples = Vec::new();
    for r in records {
        if sel.contains(r.radius()) {
            // radius ≥ lower ≥ 0; only the degenerate s = 0 annulus can hit the origin
            if let Ok(phi) = reconstruct_phase(r) {
                samples.push(QuadratureSample { x: r.x3, phi });
            }
        }
    }
    let n_kept = samples.len();
    if n_kept == 0 {
        log::warn!("annulus s = {}, w = {} selected no records", sel.s, sel.w);
    }
    Postselection { dataset: QuadratureDataset::new(samples), n_kept, n_seen: records.len(), empty: n_kept == 0 }
}

/// Latent-amplitude dynamics of the record generator. Rates in ps⁻¹,
/// frequency in GHz.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Dynamics {
    /// Phase diffusion `D`: `⟨e^{iΔθ}⟩ = e^{−Dτ}`.
    pub phase_diffusion_rate: f64,
    /// Relaxation rate of the thermal part of the amplitude.
    pub amplitude_relax_rate: f64,
    pub oscillation_freq_ghz: f64,
    pub oscillation_depth: f64,
    pub pulse_period_ps: f64,
    /// Full period of the triangular LO phase sweep, in pulses.
    pub sweep_period_pulses: u64,
}

impl Default for Dynamics {
    fn default() -> Self {
        Dynamics {
            phase_diffusion_rate: 0.0,
            amplitude_relax_rate: 0.0,
            oscillation_freq_ghz: 0.0,
            oscillation_depth: 0.0,
            pulse_period_ps: PULSE_PERIOD_PS,
            sweep_period_pulses: 2000,
        }
    }
}

impl Dynamics {
    pub fn validate(&self) -> Result<()> {
        let v = [self.phase_diffusion_rate, self.amplitude_relax_rate, self.oscillation_freq_ghz, self.oscillation_depth];
        if v.iter().any(|x| !(*x >= 0.0 && x.is_finite())) {
            return Err(invalid("generator rates must be finite and >= 0"));
        }
        if !(self.pulse_period_ps > 0.0) || self.sweep_period_pulses < 2 {
            return Err(invalid("pulse period must be positive and the sweep at least 2 pulses"));
        }
        Ok(())
    }

    fn modulation(&self, t_ps: f64) -> f64 {
        if self.oscillation_depth == 0.0 {
            1.0
        } else {
            1.0 + self.oscillation_depth * (TAU * self.oscillation_freq_ghz * 1e-3 * t_ps).sin()
        }
    }

    /// Triangular sweep of the relative LO phase over `[0, 2π]`.
    pub fn sweep(&self, t_index: u64) -> f64 {
        let p = self.sweep_period_pulses;
        let u = (t_index % p) as f64 / p as f64;
        TAU * if u < 0.5 { 2.0 * u } else { 2.0 - 2.0 * u }
    }
}

/// Generated records plus the latent amplitudes behind them.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthRecords {
    pub records: Vec<MultiChannelRecord>,
    /// Amplitude seen by the postselection channels at each pulse.
    pub latent: Vec<Complex64>,
    /// Amplitude seen by the target channel, `delay_ps` later.
    pub latent_target: Vec<Complex64>,
}

/// Draws pulses of a latent amplitude `a_t` and measures
/// `X1 = 2Re a + n1`, `X2 = 2Im a + n2`, `X3 = 2Re(e^{iΔφ} a′) + n3` with
/// independent unit vacuum noise `n_i`, where `a′` is the amplitude
/// `delay_ps` after the postselection pulse.
/// `a_t` is drawn from the state's P function, so each channel sees a
/// coherent state of amplitude `a_t` (split losses are not modelled).
pub fn synth_records(
    state: &StateSpec,
    n: usize,
    seed: u64,
    dynamics: Option<&Dynamics>,
    delay_ps: f64,
) -> Result<SynthRecords> {
    state.validate()?;
    if n == 0 {
        return Err(invalid("record count must be >= 1"));
    }
    let dynamic = dynamics.is_some();
    let dyn_ = dynamics.copied().unwrap_or_default();
    dyn_.validate()?;
    if !(delay_ps >= 0.0) {
        return Err(invalid(format!("delay must be >= 0, got {delay_ps}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let disp = state.displacement();
    let nbar = state.nbar();
    let kappa = state.phase_width();
    let thermal = |rng: &mut ChaCha8Rng, var: f64| -> Complex64 {
        let s = (var / 2.0).sqrt();
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        Complex64::new(s * re, s * im)
    };
    let mut theta = 0.0_f64;
    let mut delta = thermal(&mut rng, nbar);
    let decay = |dt: f64| (-dyn_.amplitude_relax_rate * dt).exp();
    let mut out = SynthRecords {
        records: Vec::with_capacity(n),
        latent: Vec::with_capacity(n),
        latent_target: Vec::with_capacity(n),
    };
    for t in 0..n as u64 {
        if t > 0 {
            if dynamic {
                let step = dyn_.pulse_period_ps;
                let dphase: f64 = rng.sample(StandardNormal);
                theta += (2.0 * dyn_.phase_diffusion_rate * step).sqrt() * dphase;
                let e = decay(step);
                delta = delta * e + thermal(&mut rng, nbar * (1.0 - e * e));
            } else {
                delta = thermal(&mut rng, nbar);
            }
        }
        let jitter = if kappa > 0.0 {
            let z: f64 = rng.sample(StandardNormal);
            kappa * z
        } else {
            0.0
        };
        let t_ps = t as f64 * dyn_.pulse_period_ps;
        let a = dyn_.modulation(t_ps) * (disp * Complex64::from_polar(1.0, theta + jitter) + delta);
        let a_target = if dynamic && delay_ps > 0.0 {
            let dphase: f64 = rng.sample(StandardNormal);
            let th = theta + (2.0 * dyn_.phase_diffusion_rate * delay_ps).sqrt() * dphase;
            let e = decay(delay_ps);
            let d = delta * e + thermal(&mut rng, nbar * (1.0 - e * e));
            dyn_.modulation(t_ps + delay_ps) * (disp * Complex64::from_polar(1.0, th + jitter) + d)
        } else {
            a
        };
        let dphi = dyn_.sweep(t);
        let n1: f64 = rng.sample(StandardNormal);
        let n2: f64 = rng.sample(StandardNormal);
        let n3: f64 = rng.sample(StandardNormal);
        out.records.push(MultiChannelRecord {
            t_index: t,
            x1: 2.0 * a.re + n1,
            x2: 2.0 * a.im + n2,
            x3: 2.0 * (Complex64::from_polar(1.0, dphi) * a_target).re + n3,
            dphi,
        });
        out.latent.push(a);
        out.latent_target.push(a_target);
    }
    Ok(out)
}

/// Recovers `Δφ` from the sinusoidal dependence of the smoothed `X1·X3`
/// product: `⟨X1 X3⟩ ∝ cos Δφ` for a phase-symmetric state. The branch
/// `Δφ` vs `2π − Δφ` follows the sign of the local slope, assuming the
/// phase rises where the smoothed product falls.
pub fn recover_dphi(records: &[MultiChannelRecord], window: usize) -> Result<Vec<f64>> {
    if window < 3 || records.len() < window {
        return Err(invalid("Δφ recovery needs at least one full smoothing window"));
    }
    let prod: Vec<f64> = records.iter().map(|r| r.x1 * r.x3).collect();
    let n = prod.len();
    let half = window / 2;
    let mut prefix = vec![0.0; n + 1];
    for i in 0..n {
        prefix[i + 1] = prefix[i] + prod[i];
    }
    let smooth: Vec<f64> = (0..n)
        .map(|i| {
            let a = i.saturating_sub(half);
            let b = (i + half + 1).min(n);
            (prefix[b] - prefix[a]) / (b - a) as f64
        })
        .collect();
    let peak = smooth.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if peak == 0.0 {
        return Err(Error::Degenerate("X1·X3 carries no interference signal".into()));
    }
    Ok((0..n)
        .map(|i| {
            let c = (smooth[i] / peak).clamp(-1.0, 1.0);
            let base = c.acos();
            let lo = i.saturating_sub(half);
            let hi = (i + half).min(n - 1);
            let slope = smooth[hi] - smooth[lo];
            if slope > 0.0 {
                TAU - base
            } else {
                base
            }
        })
        .map(|p| if p >= TAU { p - TAU } else { p })
        .collect())
}

/// Circular distance between two phases, in `[0, π]`.
pub fn phase_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(TAU);
    d.min(TAU - d).min(PI)
}
