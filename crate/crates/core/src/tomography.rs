//! Direct sampling of P_Ω from binned quadrature data.

use std::f64::consts::{PI, TAU};
use std::io::{Read, Write};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::CubicTable;
use crate::phasespace::{FieldMeta, FilterParam, PatternTable, PhaseSpaceGrid, QuasiProbabilityField};

/// One homodyne outcome `x` at local-oscillator phase `phi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadratureSample {
    pub x: f64,
    pub phi: f64,
}

impl QuadratureSample {
    /// Wraps `phi` into `[0, 2π)`.
    pub fn new(x: f64, phi: f64) -> Result<Self> {
        if !x.is_finite() || !phi.is_finite() {
            return Err(invalid(format!("non-finite sample ({x}, {phi})")));
        }
        Ok(QuadratureSample { x, phi: wrap_phase(phi) })
    }
}

/// `phi mod 2π` in `[0, 2π)`.
pub fn wrap_phase(phi: f64) -> f64 {
    let w = phi.rem_euclid(TAU);
    if w >= TAU {
        0.0
    } else {
        w
    }
}

/// Quadrature/phase pairs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct QuadratureDataset {
    pub samples: Vec<QuadratureSample>,
}

impl QuadratureDataset {
    pub fn new(samples: Vec<QuadratureSample>) -> Self {
        QuadratureDataset { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// CSV with header `index,x,phi`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["index", "x", "phi"])?;
        for (i, s) in self.samples.iter().enumerate() {
            w.write_record([i.to_string(), s.x.to_string(), s.phi.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(input);
        let headers = rdr.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["index", "x", "phi"] {
            return Err(Error::Format(format!("expected header index,x,phi, got {:?}", headers)));
        }
        let mut samples = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let f = |i: usize| -> Result<f64> {
                rec[i].parse::<f64>().map_err(|e| Error::Format(format!("{e} in {:?}", &rec[i])))
            };
            samples.push(QuadratureSample::new(f(1)?, f(2)?)?);
        }
        Ok(QuadratureDataset { samples })
    }
}

/// Nearest-node binning in `x` and `φ`.
///
/// `x` nodes sit at `k·x_width` for `|k| ≤ x_max/x_width`; phase nodes at
/// `c·2π/Φ` with `Φ = round(2π/phi_width)`, so the node spacing is exact
/// and the last bin wraps onto the first.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BinningGrid {
    pub x_width: f64,
    pub phi_width: f64,
    pub x_max: f64,
}

impl Default for BinningGrid {
    fn default() -> Self {
        BinningGrid { x_width: 1.0, phi_width: 0.1, x_max: 20.0 }
    }
}

impl BinningGrid {
    pub fn new(x_width: f64, phi_width: f64, x_max: f64) -> Result<Self> {
        let g = BinningGrid { x_width, phi_width, x_max };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.x_width > 0.0 && self.phi_width > 0.0 && self.x_max > 0.0) {
            return Err(invalid("bin widths and x range must be positive"));
        }
        let k = self.x_max / self.x_width;
        if (k - k.round()).abs() > 1e-9 * k.max(1.0) {
            return Err(invalid(format!("x range {} is not a multiple of bin width {}", self.x_max, self.x_width)));
        }
        if self.n_phi() < 8 {
            return Err(invalid(format!("need at least 8 phase bins, width {} gives {}", self.phi_width, self.n_phi())));
        }
        Ok(())
    }

    /// Nodes on either side of zero.
    pub fn half_x(&self) -> usize {
        (self.x_max / self.x_width).round() as usize
    }

    pub fn n_x(&self) -> usize {
        2 * self.half_x() + 1
    }

    pub fn n_phi(&self) -> usize {
        (TAU / self.phi_width).round().max(0.0) as usize
    }

    pub fn phi_step(&self) -> f64 {
        TAU / self.n_phi() as f64
    }

    pub fn x_node(&self, k: usize) -> f64 {
        (k as f64 - self.half_x() as f64) * self.x_width
    }

    pub fn phi_node(&self, c: usize) -> f64 {
        c as f64 * self.phi_step()
    }

    /// `(x index, phase index, overflowed)`.
    pub fn locate(&self, s: &QuadratureSample) -> (usize, usize, bool) {
        let half = self.half_x() as i64;
        let k = (s.x / self.x_width).round() as i64;
        let kc = k.clamp(-half, half);
        let n_phi = self.n_phi();
        let c = ((s.phi / self.phi_step()).round() as i64).rem_euclid(n_phi as i64) as usize;
        ((kc + half) as usize, c, s.x.abs() > self.x_max)
    }
}

/// Counts per `(x, φ)` cell, stored column by column.
#[derive(Debug, Clone, PartialEq)]
pub struct BinnedHistogram {
    pub grid: BinningGrid,
    /// `counts[c·n_x + k]`.
    pub counts: Vec<u64>,
    /// Counts of the antipodal images `(−x, φ + π)`, same layout.
    pub mirror: Vec<u64>,
    pub total: u64,
    /// Samples with `|x| > x_max` that were clamped into the edge bins.
    pub overflow: u64,
}

impl BinnedHistogram {
    pub fn count(&self, k: usize, c: usize) -> u64 {
        self.counts[c * self.grid.n_x() + k]
    }

    pub fn column(&self, c: usize) -> &[u64] {
        let n = self.grid.n_x();
        &self.counts[c * n..(c + 1) * n]
    }

    /// Counts summed over `x` for each phase node.
    pub fn phase_marginal(&self) -> Vec<u64> {
        (0..self.grid.n_phi()).map(|c| self.column(c).iter().sum()).collect()
    }

    /// Every count multiplied by `factor`.
    pub fn scaled(&self, factor: u64) -> Self {
        BinnedHistogram {
            grid: self.grid,
            counts: self.counts.iter().map(|c| c * factor).collect(),
            mirror: self.mirror.iter().map(|c| c * factor).collect(),
            total: self.total * factor,
            overflow: self.overflow * factor,
        }
    }
}

pub fn bin_dataset(data: &QuadratureDataset, grid: &BinningGrid) -> Result<BinnedHistogram> {
    grid.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("quadrature dataset".into()));
    }
    let n_x = grid.n_x();
    let mut counts = vec![0u64; n_x * grid.n_phi()];
    let mut mirror = vec![0u64; n_x * grid.n_phi()];
    let mut overflow = 0;
    for s in &data.samples {
        let (k, c, over) = grid.locate(s);
        counts[c * n_x + k] += 1;
        overflow += over as u64;
        let image = QuadratureSample { x: -s.x, phi: wrap_phase(s.phi + PI) };
        let (k, c, _) = grid.locate(&image);
        mirror[c * n_x + k] += 1;
    }
    if overflow > 0 {
        log::warn!("{overflow} samples beyond |x| = {} clamped into edge bins", grid.x_max);
    }
    Ok(BinnedHistogram { grid: *grid, counts, mirror, total: data.len() as u64, overflow })
}

/// Knobs of [`estimate_field`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorOptions {
    /// Divide out the x-bin box convolution in the pattern function.
    pub bin_correction: bool,
    /// Divide out the φ-bin box convolution, harmonic by harmonic in φ.
    pub phase_correction: bool,
    /// Pool every sample with its antipodal image `(−x, φ + π)`.
    pub symmetrize: bool,
    /// Lattice spacing of the per-column projections.
    pub projection_step: f64,
}

impl Default for EstimatorOptions {
    fn default() -> Self {
        EstimatorOptions { bin_correction: true, phase_correction: true, symmetrize: true, projection_step: 0.025 }
    }
}

impl EstimatorOptions {
    /// The bare binned weighted average: no bin corrections, no pooling.
    pub fn literal() -> Self {
        EstimatorOptions { bin_correction: false, phase_correction: false, symmetrize: false, projection_step: 0.025 }
    }
}

/// Cell weights `N(x, φ)` as reals, with optional antipodal pooling and
/// φ-bin deconvolution. Returns `None` for empty columns.
fn cell_weights(hist: &BinnedHistogram, opts: &EstimatorOptions) -> Vec<Option<Vec<f64>>> {
    use rustfft::{num_complex::Complex, FftPlanner};
    let bg = hist.grid;
    let (n_x, n_phi) = (bg.n_x(), bg.n_phi());
    let raw = |c: usize, k: usize| {
        let i = c * n_x + k;
        hist.counts[i] as f64 + if opts.symmetrize { hist.mirror[i] as f64 } else { 0.0 }
    };
    let occupied: Vec<bool> = (0..n_phi).map(|c| (0..n_x).any(|k| raw(c, k) > 0.0)).collect();
    let mut cells: Vec<Vec<f64>> = (0..n_phi).map(|c| (0..n_x).map(|k| raw(c, k)).collect()).collect();
    if opts.phase_correction {
        if occupied.iter().all(|&o| o) {
            let mut planner = FftPlanner::<f64>::new();
            let fwd = planner.plan_fft_forward(n_phi);
            let inv = planner.plan_fft_inverse(n_phi);
            let half_width = 0.5 * bg.phi_step();
            let mut row = vec![Complex::new(0.0, 0.0); n_phi];
            for k in 0..n_x {
                for (z, col) in row.iter_mut().zip(&cells) {
                    *z = Complex::new(col[k], 0.0);
                }
                fwd.process(&mut row);
                for (m, z) in row.iter_mut().enumerate() {
                    let signed = if 2 * m > n_phi { m as f64 - n_phi as f64 } else { m as f64 };
                    let arg = signed * half_width;
                    if arg != 0.0 {
                        *z *= arg / arg.sin();
                    }
                }
                inv.process(&mut row);
                for c in 0..n_phi {
                    cells[c][k] = row[c].re / n_phi as f64;
                }
            }
        } else {
            log::warn!("phase-bin correction skipped: some phase columns are empty");
        }
    }
    cells
        .into_iter()
        .zip(occupied)
        .map(|(col, occ)| occ.then_some(col))
        .collect()
}

/// Weighted-average estimate of P_Ω, its second moment and pointwise σ.
///
/// `P(α) = (1/Φ) Σ_φ Σ_x [N(x,φ)/N_φ] π f_Ω(α; x; φ)` over the Φ nonempty
/// phase columns. Each column is reduced to a function of the projection
/// `y = 2Re(e^{iφ}α)` tabulated once and interpolated at every grid point.
pub fn estimate_field(
    hist: &BinnedHistogram,
    grid: &PhaseSpaceGrid,
    r: FilterParam,
    opts: &EstimatorOptions,
) -> Result<QuasiProbabilityField> {
    grid.validate()?;
    let bg = hist.grid;
    let n_x = bg.n_x();
    let cells = cell_weights(hist, opts);
    let columns: Vec<(usize, &Vec<f64>)> =
        cells.iter().enumerate().filter_map(|(c, col)| col.as_ref().map(|v| (c, v))).collect();
    if columns.is_empty() {
        return Err(Error::Empty("every phase column is empty".into()));
    }
    let dy = opts.projection_step;
    if !(dy > 0.0) {
        return Err(invalid("projection step must be positive"));
    }
    let y_half = ((2.0 * grid.max_radius()) / dy).ceil() as usize + 3;
    let y_count = 2 * y_half + 1;
    let y0 = -(y_half as f64) * dy;
    let table = PatternTable::new(r, bg.x_max + y_half as f64 * dy + 1.0, opts.bin_correction.then_some(bg.x_width))?;

    let projections: Vec<(f64, CubicTable, CubicTable)> = columns
        .par_iter()
        .map(|&(c, col)| {
            let n_col: f64 = col.iter().sum();
            let weights: Vec<(f64, f64)> = (0..n_x)
                .filter(|&k| col[k] != 0.0)
                .map(|k| (bg.x_node(k), col[k] / n_col))
                .collect();
            let mut g1 = Vec::with_capacity(y_count);
            let mut g2 = Vec::with_capacity(y_count);
            for i in 0..y_count {
                let y = y0 + i as f64 * dy;
                let (mut a, mut b) = (0.0, 0.0);
                for &(x, w) in &weights {
                    let f = table.pi_f(x - y);
                    a += w * f;
                    b += w * f * f;
                }
                g1.push(a);
                g2.push(b);
            }
            (bg.phi_node(c), CubicTable::new(y0, dy, g1), CubicTable::new(y0, dy, g2))
        })
        .collect();

    let n_cols = columns.len() as f64;
    let moments: Vec<(f64, f64)> = (0..grid.len())
        .into_par_iter()
        .map(|k| {
            let a = grid.point(k);
            let (mut m1, mut m2) = (0.0, 0.0);
            for (phi, g1, g2) in &projections {
                let y = 2.0 * (Complex64::from_polar(1.0, *phi) * a).re;
                m1 += g1.eval(y).unwrap_or(0.0);
                m2 += g2.eval(y).unwrap_or(0.0);
            }
            (m1 / n_cols, m2 / n_cols)
        })
        .collect();

    let n = hist.total;
    let values: Vec<f64> = moments.iter().map(|m| m.0).collect();
    let sigmas = (n >= 2).then(|| {
        moments.iter().map(|&(m1, m2)| ((m2 - m1 * m1).max(0.0) / (n - 1) as f64).sqrt()).collect()
    });
    let meta = FieldMeta { r: r.value(), n_samples: n, ..FieldMeta::default() };
    QuasiProbabilityField::new(*grid, values, sigmas, meta)
}

/// Test-state family for the quadrature generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StateSpec {
    Vacuum,
    Coherent { alpha: Complex64 },
    Thermal { nbar: f64 },
    DisplacedThermal { alpha: Complex64, nbar: f64 },
    /// Displaced thermal state whose displacement is rotated by a
    /// normal phase of width `kappa` (wrapped on the circle).
    PhaseDiffused { alpha: Complex64, nbar: f64, kappa: f64 },
}

impl StateSpec {
    pub fn validate(&self) -> Result<()> {
        let (nbar, kappa) = match *self {
            StateSpec::Vacuum | StateSpec::Coherent { .. } => (0.0, 0.0),
            StateSpec::Thermal { nbar } | StateSpec::DisplacedThermal { nbar, .. } => (nbar, 0.0),
            StateSpec::PhaseDiffused { nbar, kappa, .. } => (nbar, kappa),
        };
        if !(nbar >= 0.0 && nbar.is_finite()) {
            return Err(invalid(format!("thermal occupation must be >= 0, got {nbar}")));
        }
        if !(kappa >= 0.0 && kappa.is_finite()) {
            return Err(invalid(format!("phase width must be >= 0, got {kappa}")));
        }
        Ok(())
    }

    pub fn displacement(&self) -> Complex64 {
        match *self {
            StateSpec::Vacuum | StateSpec::Thermal { .. } => Complex64::new(0.0, 0.0),
            StateSpec::Coherent { alpha }
            | StateSpec::DisplacedThermal { alpha, .. }
            | StateSpec::PhaseDiffused { alpha, .. } => alpha,
        }
    }

    pub fn nbar(&self) -> f64 {
        match *self {
            StateSpec::Vacuum | StateSpec::Coherent { .. } => 0.0,
            StateSpec::Thermal { nbar } | StateSpec::DisplacedThermal { nbar, .. } | StateSpec::PhaseDiffused { nbar, .. } => nbar,
        }
    }

    pub fn phase_width(&self) -> f64 {
        match *self {
            StateSpec::PhaseDiffused { kappa, .. } => kappa,
            _ => 0.0,
        }
    }

    /// Draws one latent amplitude: displacement (phase-smeared when
    /// applicable) plus a thermal part with `E|δ|² = n̄`.
    pub fn draw_amplitude<G: Rng>(&self, rng: &mut G) -> Complex64 {
        let mut a = self.displacement();
        let kappa = self.phase_width();
        if kappa > 0.0 {
            let th: f64 = rng.sample(StandardNormal);
            a *= Complex64::from_polar(1.0, kappa * th);
        }
        let nbar = self.nbar();
        if nbar > 0.0 {
            let s = (nbar / 2.0).sqrt();
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            a += Complex64::new(s * re, s * im);
        }
        a
    }
}

/// Synthetic quadratures: `φ` uniform, `x ~ Normal(2Re(e^{iφ}α), 2n̄+1)`.
pub fn synth_quadratures(state: &StateSpec, n: usize, seed: u64) -> Result<QuadratureDataset> {
    state.validate()?;
    if n == 0 {
        return Err(invalid("sample count must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let phi = rng.random::<f64>() * TAU;
        let a = state.draw_amplitude(&mut rng);
        let noise: f64 = rng.sample(StandardNormal);
        let x = 2.0 * (Complex64::from_polar(1.0, phi) * a).re + noise;
        samples.push(QuadratureSample { x, phi: wrap_phase(phi) });
    }
    Ok(QuadratureDataset { samples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_sample_lands_in_its_bin() {
        let g = BinningGrid::default();
        let ds = QuadratureDataset::new(vec![QuadratureSample::new(0.4, 0.04).unwrap()]);
        let h = bin_dataset(&ds, &g).unwrap();
        assert_eq!(h.total, 1);
        assert_eq!(h.count(g.half_x(), 0), 1);
        assert_eq!(h.counts.iter().sum::<u64>(), 1);
    }

    #[test]
    fn default_grid_counts() {
        let g = BinningGrid::default();
        assert_eq!(g.n_x(), 41);
        assert_eq!(g.n_phi(), 63);
        assert!(BinningGrid::new(1.0, 1.0, 20.0).is_err());
    }

    #[test]
    fn phase_wraps_to_node_zero() {
        let g = BinningGrid::default();
        let s = QuadratureSample::new(0.0, TAU - 1e-9).unwrap();
        assert_eq!(g.locate(&s).1, 0);
        assert!((QuadratureSample::new(0.0, -0.5).unwrap().phi - (TAU - 0.5)).abs() < 1e-15);
    }

    #[test]
    fn overflow_is_clamped_and_tallied() {
        let g = BinningGrid::default();
        let ds = QuadratureDataset::new(vec![
            QuadratureSample::new(25.0, 0.0).unwrap(),
            QuadratureSample::new(-20.2, 0.0).unwrap(),
        ]);
        let h = bin_dataset(&ds, &g).unwrap();
        assert_eq!(h.overflow, 2);
        assert_eq!(h.count(g.n_x() - 1, 0), 1);
        assert_eq!(h.count(0, 0), 1);
    }

    #[test]
    fn empty_dataset_rejected() {
        assert!(bin_dataset(&QuadratureDataset::default(), &BinningGrid::default()).is_err());
    }

    #[test]
    fn generator_rejects_bad_states() {
        assert!(synth_quadratures(&StateSpec::Thermal { nbar: -1.0 }, 10, 1).is_err());
        let pd = StateSpec::PhaseDiffused { alpha: Complex64::new(1.0, 0.0), nbar: 0.0, kappa: -0.1 };
        assert!(synth_quadratures(&pd, 10, 1).is_err());
        assert!(synth_quadratures(&StateSpec::Vacuum, 0, 1).is_err());
    }

    #[test]
    fn vacuum_variance() {
        let n = 200_000;
        let ds = synth_quadratures(&StateSpec::Vacuum, n, 3).unwrap();
        let mean = ds.samples.iter().map(|s| s.x).sum::<f64>() / n as f64;
        let var = ds.samples.iter().map(|s| (s.x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((var - 1.0).abs() < 4.0 / (n as f64).sqrt());
    }

    #[test]
    fn thermal_variance() {
        let n = 200_000;
        let ds = synth_quadratures(&StateSpec::Thermal { nbar: 4.0 }, n, 5).unwrap();
        let var = ds.samples.iter().map(|s| s.x * s.x).sum::<f64>() / n as f64;
        // Var of a sample variance of N(0, 9): 2·81/n
        assert!((var - 9.0).abs() < 4.0 * (162.0 / n as f64).sqrt());
    }

    #[test]
    fn coherent_mean_near_zero_phase() {
        let ds = synth_quadratures(&StateSpec::Coherent { alpha: Complex64::new(3.0, 0.0) }, 400_000, 9).unwrap();
        let sel: Vec<f64> = ds
            .samples
            .iter()
            .filter(|s| s.phi < 0.01 || s.phi > TAU - 0.01)
            .map(|s| s.x)
            .collect();
        let m = sel.iter().sum::<f64>() / sel.len() as f64;
        // phase window adds at most 6(1 - cos 0.01) ~ 3e-4 of bias
        assert!((m - 6.0).abs() < 4.0 / (sel.len() as f64).sqrt() + 3e-4, "{m} from {}", sel.len());
    }

    #[test]
    fn generator_is_deterministic() {
        let s = StateSpec::PhaseDiffused { alpha: Complex64::new(2.0, 1.0), nbar: 0.3, kappa: 0.4 };
        assert_eq!(synth_quadratures(&s, 1000, 11).unwrap(), synth_quadratures(&s, 1000, 11).unwrap());
        assert_ne!(synth_quadratures(&s, 1000, 11).unwrap(), synth_quadratures(&s, 1000, 12).unwrap());
    }

    #[test]
    fn csv_round_trip_is_lossless() {
        let ds = synth_quadratures(&StateSpec::Thermal { nbar: 1.3 }, 500, 2).unwrap();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        assert!(buf.starts_with(b"index,x,phi\n"));
        let back = QuadratureDataset::read_csv(&buf[..]).unwrap();
        assert_eq!(back, ds);
    }

    proptest! {
        #[test]
        fn binning_is_permutation_invariant(seed in 0u64..1000, rot in 1usize..500) {
            let ds = synth_quadratures(&StateSpec::Thermal { nbar: 20.0 }, 500, seed).unwrap();
            let mut shuffled = ds.clone();
            shuffled.samples.rotate_left(rot);
            shuffled.samples.reverse();
            let g = BinningGrid::default();
            prop_assert_eq!(bin_dataset(&ds, &g).unwrap(), bin_dataset(&shuffled, &g).unwrap());
        }

        #[test]
        fn histogram_conserves_counts(seed in 0u64..1000, n in 1usize..400) {
            let ds = synth_quadratures(&StateSpec::Thermal { nbar: 60.0 }, n, seed).unwrap();
            let h = bin_dataset(&ds, &BinningGrid::default()).unwrap();
            prop_assert_eq!(h.counts.iter().sum::<u64>(), n as u64);
            prop_assert_eq!(h.total, n as u64);
        }
    }
}
