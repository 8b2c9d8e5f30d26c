//! Experiment plumbing: configuration, phase runner, sweeps, charts, and the
//! randomized verification suites.

pub mod chart;
pub mod config;
pub mod run;
pub mod sweep;
pub mod verify;

pub use chart::{emit_chart, render_chart};
pub use config::{DataSource, ExperimentConfig, Phase};
pub use run::{evaluate, knn_eval, load_data, run, EvalReport, RunSummary, Splits};
pub use sweep::{sweep, SweepRow, SWEEP_PARAMS};
pub use verify::{parse_suites, verify, verify_with_fault, Fault, Suite, VerifyReport};
