//! Experiment runner for the meta-Stackelberg federated-learning simulator:
//! TOML configurations, seeded pretraining, adaptation and evaluation runs,
//! line-delimited metrics, summary tables, and plot-data export.

pub mod config;
pub mod error;
pub mod export;
pub mod metrics;
pub mod run;

pub use config::{ExperimentConfig, Mode};
pub use error::{CliError, CliResult};
pub use export::{export_plot_data, Grouping};
pub use run::run;
