//! Configuration, data generation, evaluation, reference oracles and the
//! benchmark runner behind the command-line tool.

pub mod config;
pub mod data;
pub mod experiment;
pub mod metrics;
pub mod oracle;
pub mod store;

pub use config::RunConfig;
pub use data::{generate_dataset, sample_initial_states, GenerationReport};
pub use experiment::{prepare, run_benchmark, Prepared};
pub use metrics::{cost_ratio_cdf, evaluate_policy, Metrics, MetricsRow, RatioCaps};
pub use oracle::{oracle_suite, OracleReport, OracleResult};
