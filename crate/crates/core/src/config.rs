//! Run configuration: one TOML document, unknown keys rejected, every
//! field defaulted.

use std::path::{Path, PathBuf};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::analysis::{FitOptions, Model};
use crate::error::{Error, Result};
use crate::homodyne::{Dynamics, HusimiBinSpec};
use crate::phasespace::{FilterParam, PhaseSpaceGrid};
use crate::tomography::{BinningGrid, EstimatorOptions, StateSpec};
use crate::twa::{CoherenceRun, ModelParams, Scheme, ThresholdSearch, WaveVector};

/// Environment variable naming the default config file.
pub const CONFIG_ENV: &str = "POMEGA_CONFIG";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; every stream is derived from it.
    pub seed: u64,
    pub tomography: TomographyConfig,
    pub selection: SelectionConfig,
    pub synth: SynthConfig,
    pub twa: TwaConfig,
    pub fits: FitConfig,
    pub io: IoConfig,
    /// Synthetic sweep points; empty means the single `synth` point.
    pub sweep: Vec<SweepPoint>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            tomography: TomographyConfig::default(),
            selection: SelectionConfig::default(),
            synth: SynthConfig::default(),
            twa: TwaConfig::default(),
            fits: FitConfig::default(),
            io: IoConfig::default(),
            sweep: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TomographyConfig {
    #[serde(rename = "R")]
    pub r: FilterParam,
    pub binning: BinningGrid,
    pub grid: PhaseSpaceGrid,
    pub estimator: EstimatorOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectionConfig {
    pub s_list: Vec<f64>,
    pub w: f64,
    /// Records in the orthogonality-filter window; 0 disables the filter.
    pub window: usize,
    pub husimi: HusimiBinSpec,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig { s_list: vec![2.0, 5.0, 10.0], w: 0.57, window: 1000, husimi: HusimiBinSpec::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub state: StateSpec,
    pub n: usize,
    pub delays_ps: Vec<f64>,
    pub dynamics: Dynamics,
    /// Label carried into fit tables.
    pub power: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            state: StateSpec::Coherent { alpha: Complex64::new(3.0, 0.0) },
            n: 1_000_000,
            delays_ps: vec![0.0],
            dynamics: Dynamics::default(),
            power: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepPoint {
    pub power: f64,
    #[serde(default)]
    pub state: Option<StateSpec>,
    #[serde(default)]
    pub dynamics: Option<Dynamics>,
}

/// How `Var(φ)` is read off simulated mode amplitudes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    #[default]
    Samples,
    Bridge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TwaConfig {
    pub params: ModelParams,
    pub run: CoherenceRun,
    /// Pump peaks as multiples of the threshold.
    pub powers: Vec<f64>,
    /// Threshold pump; located by [`ThresholdSearch`] when absent.
    pub p_thr: Option<f64>,
    pub threshold: ThresholdSearch,
    pub k: WaveVector,
    pub estimator: EstimatorKind,
    /// Write a checkpoint after the run of each power.
    pub checkpoint: bool,
}

impl Default for TwaConfig {
    fn default() -> Self {
        TwaConfig {
            params: ModelParams::default(),
            run: CoherenceRun::default(),
            powers: vec![0.8, 1.0, 1.3, 1.7],
            p_thr: None,
            threshold: ThresholdSearch::default(),
            k: WaveVector::ZERO,
            estimator: EstimatorKind::Samples,
            checkpoint: false,
        }
    }
}

impl TwaConfig {
    /// Desk-scale variant: `n`² grid at 0.9 μm spacing, interaction-picture
    /// stepping at 0.2 ps.
    pub fn reduced(n: usize) -> Self {
        TwaConfig { params: ModelParams { scheme: Scheme::Rk4Ip, dt: 0.2, ..ModelParams::with_grid(n) }, ..Self::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub models: Vec<Model>,
    /// Inverse-variance weights from the reconstruction errors.
    pub inverse_variance: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig { models: Model::ALL.to_vec(), inverse_variance: false }
    }
}

impl FitConfig {
    pub fn options(&self) -> FitOptions {
        FitOptions { inverse_variance: self.inverse_variance }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoConfig {
    pub out_dir: PathBuf,
    /// Record files to reconstruct, one per delay.
    pub records: Vec<PathBuf>,
}

impl Default for IoConfig {
    fn default() -> Self {
        IoConfig { out_dir: PathBuf::from("out"), records: Vec::new() }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    /// Explicit path, else `$POMEGA_CONFIG`, else defaults.
    pub fn resolve(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => match std::env::var_os(CONFIG_ENV) {
                Some(p) if !p.is_empty() => Self::load(Path::new(&p)),
                _ => Ok(Self::default()),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.tomography.binning.validate().map_err(|e| Error::Config(format!("tomography.binning: {e}")))?;
        self.tomography.grid.validate().map_err(|e| Error::Config(format!("tomography.grid: {e}")))?;
        let sel = &self.selection;
        if sel.s_list.is_empty() || sel.s_list.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return bad("selection.s_list needs finite radii >= 0".into());
        }
        if !(sel.w > 0.0 && sel.w.is_finite()) {
            return bad(format!("selection.w must be positive, got {}", sel.w));
        }
        self.synth.state.validate().map_err(|e| Error::Config(format!("synth.state: {e}")))?;
        self.synth.dynamics.validate().map_err(|e| Error::Config(format!("synth.dynamics: {e}")))?;
        if self.synth.n == 0 {
            return bad("synth.n must be >= 1".into());
        }
        if self.synth.delays_ps.is_empty() || self.synth.delays_ps.windows(2).any(|w| w[1] <= w[0]) || self.synth.delays_ps.iter().any(|d| !(*d >= 0.0)) {
            return bad("synth.delays_ps must be nonempty, >= 0 and strictly increasing".into());
        }
        for (i, p) in self.sweep.iter().enumerate() {
            if let Some(s) = &p.state {
                s.validate().map_err(|e| Error::Config(format!("sweep[{i}].state: {e}")))?;
            }
            if let Some(d) = &p.dynamics {
                d.validate().map_err(|e| Error::Config(format!("sweep[{i}].dynamics: {e}")))?;
            }
        }
        self.twa.params.validate().map_err(|e| Error::Config(format!("twa.params: {e}")))?;
        if self.twa.powers.iter().any(|p| !(*p > 0.0 && p.is_finite())) {
            return bad("twa.powers must be positive".into());
        }
        if self.twa.p_thr.is_some_and(|p| !(p > 0.0)) {
            return bad("twa.p_thr must be positive".into());
        }
        if self.fits.models.is_empty() {
            return bad("fits.models is empty".into());
        }
        Ok(())
    }

    /// Sweep points, falling back to the single `synth` point.
    pub fn sweep_points(&self) -> Vec<(f64, StateSpec, Dynamics)> {
        if self.sweep.is_empty() {
            return vec![(self.synth.power, self.synth.state, self.synth.dynamics)];
        }
        self.sweep
            .iter()
            .map(|p| (p.power, p.state.unwrap_or(self.synth.state), p.dynamics.unwrap_or(self.synth.dynamics)))
            .collect()
    }
}
