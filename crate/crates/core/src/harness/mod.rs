//! Dataset ingestion, experiment orchestration and the command-line front end.

pub mod cli;
pub mod data;
pub mod experiment;
pub mod io;
pub mod verify;

pub use data::{load_csv, split, Dataset, SyntheticSpec};
pub use experiment::{run_experiment, ExperimentConfig, Method, MetricsRecord};
pub use verify::{verify_bounds_cmd, VerifyConfig, VerifySummary};
