//! `pomega`: batch driver for synthetic records, reconstruction,
//! condensate simulation and decay fits.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod plots;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Error raised for bad arguments or configuration; exits with status 2.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

#[derive(Debug, Parser)]
#[command(name = "pomega", version, about = "Phase-space reconstruction, polariton TWA simulation and coherence-decay fits")]
pub struct Cli {
    /// TOML run configuration (default: $POMEGA_CONFIG, else built-in defaults).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides `io.out_dir`).
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Master seed (overrides `seed`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Print a JSON summary on standard output.
    #[arg(long, global = true)]
    pub json: bool,
    /// Also write gnuplot scripts next to the CSV outputs.
    #[arg(long, global = true)]
    pub gnuplot: bool,
    /// Worker threads (default: all cores).
    #[arg(long, global = true, value_parser = clap::value_parser!(u32).range(1..))]
    pub jobs: Option<u32>,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate multi-channel homodyne record files.
    Synth(SynthArgs),
    /// Filter, postselect and reconstruct P_Ω per radius and delay.
    Reconstruct(ReconstructArgs),
    /// Truncated-Wigner coherence-time runs per pump power.
    Simulate(SimulateArgs),
    /// Fit decay models to summary tables or series.
    Fit(FitArgs),
    /// Synthetic pipeline over all sweep points.
    Sweep(SweepArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum StateKind {
    Vacuum,
    Coherent,
    Thermal,
    DisplacedThermal,
    PhaseDiffused,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// State family (default: `synth.state`).
    #[arg(long, value_enum)]
    pub state: Option<StateKind>,
    /// Displacement, real part.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub alpha: f64,
    /// Displacement, imaginary part.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub alpha_im: f64,
    #[arg(long, default_value_t = 0.0)]
    pub nbar: f64,
    /// Phase-noise width for `phase-diffused`.
    #[arg(long, default_value_t = 0.0)]
    pub kappa: f64,
    /// Records per delay; accepts forms like 1e6.
    #[arg(long, value_parser = parse_count)]
    pub n: Option<usize>,
    /// Delays between postselection and target pulses, ps.
    #[arg(long, value_delimiter = ',')]
    pub delay: Vec<f64>,
    /// Latent phase-diffusion rate, ps⁻¹.
    #[arg(long)]
    pub diffusion: Option<f64>,
    /// Output file (single delay only); default `<out_dir>/records_tau<delay>.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    /// Record files, one per delay (default: `io.records`).
    pub records: Vec<PathBuf>,
    /// Delay of each record file, ps (default: `synth.delays_ps`).
    #[arg(long, value_delimiter = ',')]
    pub tau: Vec<f64>,
    /// Annulus radii (overrides `selection.s_list`).
    #[arg(long, value_delimiter = ',')]
    pub s: Vec<f64>,
    /// Annulus width (overrides `selection.w`).
    #[arg(long)]
    pub w: Option<f64>,
    /// Skip writing the reconstructed fields.
    #[arg(long)]
    pub no_fields: bool,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Desk-scale N×N grid at 0.9 μm spacing with interaction-picture stepping.
    #[arg(long)]
    pub grid: Option<usize>,
    /// Pump powers as multiples of the threshold.
    #[arg(long, value_delimiter = ',')]
    pub powers: Vec<f64>,
    /// Threshold pump, ps⁻¹μm⁻² (located by bisection when absent).
    #[arg(long)]
    pub p_thr: Option<f64>,
    /// Ensemble size
    #[arg(long)]
    pub trajectories: Option<usize>,
    /// Settling time before the phase is aligned, ps
    #[arg(long)]
    pub t_settle: Option<f64>,
    /// Longest delay, ps
    #[arg(long)]
    pub t_obs: Option<f64>,
    /// Delays after zero, spaced quadratically
    #[arg(long)]
    pub points: Option<usize>,
    #[arg(long, value_enum)]
    pub estimator: Option<Estimator>,
    /// Save the aligned ensemble of each power under `<out_dir>/checkpoints`.
    #[arg(long)]
    pub checkpoint: bool,
    /// Continue the series of a saved ensemble instead of simulating afresh.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Estimator {
    Samples,
    Bridge,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Summary table (`s,tau_ps,var_phi,...`); fits one series per radius.
    #[arg(long, conflicts_with = "series", required_unless_present = "series")]
    pub summary: Option<PathBuf>,
    /// Single series (`t_ps,value[,stderr]`).
    #[arg(long)]
    pub series: Option<PathBuf>,
    /// Power label for the output table.
    #[arg(long)]
    pub power: Option<f64>,
    /// Models to fit (default: `fits.models`).
    #[arg(long, value_delimiter = ',')]
    pub models: Vec<String>,
    /// Inverse-variance weights from the stderr column.
    #[arg(long)]
    pub inverse_variance: bool,
    /// Also report τ_c averaged over radii, weighted by records kept.
    #[arg(long)]
    pub weighted: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Records per delay (overrides `synth.n`).
    #[arg(long, value_parser = parse_count)]
    pub n: Option<usize>,
    /// Average τ_c over radii, weighted by records kept.
    #[arg(long)]
    pub weighted: bool,
}

/// Positive integer count; accepts `1000000`, `1e6`, `2.5e5`.
fn parse_count(s: &str) -> Result<usize, String> {
    let v: f64 = s.trim().parse().map_err(|_| format!("'{s}' is not a number"))?;
    if !(v >= 1.0) || v.fract() != 0.0 || v > 1e15 {
        return Err(format!("'{s}' must be a whole number >= 1"));
    }
    Ok(v as usize)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = e.downcast_ref::<Usage>().is_some()
                || matches!(e.downcast_ref::<pomega_core::Error>(), Some(pomega_core::Error::Config(_)));
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}
