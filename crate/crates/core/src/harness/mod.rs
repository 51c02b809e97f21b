//! Replay storage, training and evaluation loops, metrics and run configuration.

mod buffer;
mod config;
mod consistency;
mod eval;
mod metrics;
mod plot;
mod train;
mod verify;

pub use buffer::{Batch, ReplayBuffer};
pub use config::RunConfig;
pub use consistency::{energy_distance, median, sample_semigroup_gaps, semigroup_gaps};
pub use eval::{evaluate, evaluate_behavior, EvalReport, Sampler};
pub use metrics::{bootstrap_ci, iqm};
pub use plot::diagnostics_svg;
pub use train::{
    adapt_online, diagnostics_csv, eval_rng, initialize, parse_diagnostics, train_offline,
    Checkpoint, DiagnosticsRow, OfflineRun, OnlineRun, CSV_HEADER,
};
pub use verify::{
    autodiff_suite, equivalence_suite, kkt_suite, sampler_consistency_check, semigroup_check,
    SuiteReport,
};
