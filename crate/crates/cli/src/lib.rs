//! Configuration-driven experiment runner for residual-pooling federated
//! learning and its FedAvg baseline.

pub mod compare;
pub mod config;
pub mod run;

pub use compare::{compare, Comparison, RunDigest};
pub use config::{Algorithm, ConfigError, ExperimentConfig, Overrides};
pub use run::{run, simulate, MetricsRow, RunOutput, Summary};
