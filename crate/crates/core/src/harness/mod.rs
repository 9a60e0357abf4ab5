//! Training runs, metrics files and the command-line interface.

pub mod cli;
mod config;
mod metrics;
mod train;

pub use config::TrainConfig;
pub use metrics::{parse_metrics_csv, read_metrics_csv, render_metrics_csv, write_metrics_csv, MetricsRecord, METRICS_HEADER};
pub use train::{adversarial_train, d_step, estimator_options, g_step, load_or_generate, TrainOutcome, TrainState};
