//! Regularized P-function (P_Ω) reconstruction from homodyne data,
//! truncated-Wigner simulation of a driven-dissipative polariton condensate,
//! and coherence-decay analysis through circular phase statistics.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::excessive_precision)]

pub mod analysis;
pub mod bridge;
pub mod config;
pub mod error;
pub mod homodyne;
pub mod numerics;
pub mod phasespace;
pub mod pipeline;
pub mod tomography;
pub mod twa;

pub use error::{Error, Result};
pub use num_complex::Complex64;
pub use phasespace::{
    circular_errors, circular_stats, kernel_g, kernel_h, kernel_omega, pattern_function, CircularErrors,
    CircularStats, FieldMeta, FilterParam, PatternTable, PhaseSpaceGrid, QuasiProbabilityField,
};
pub use analysis::{compare_models, fit_decay, fit_decay_with, DecaySeries, FitOptions, FitResult, Model};
pub use config::RunConfig;
pub use tomography::{bin_dataset, estimate_field, BinningGrid, EstimatorOptions, QuadratureDataset, QuadratureSample, StateSpec};
