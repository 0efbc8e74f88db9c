//! Configuration, experiment orchestration, metrics, and output artifacts —
//! the user-facing surface behind the CLI.

pub mod config;
pub mod log;
pub mod metrics;
pub mod pipeline;
pub mod plot;

pub use config::{DatasetKind, ExperimentConfig};
pub use metrics::a_total;
pub use pipeline::{run_experiment, RunSummary};
