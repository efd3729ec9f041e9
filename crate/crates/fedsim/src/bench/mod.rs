//! Experiment configuration, the grid sweep, metrics, result persistence,
//! and the command-line interface.

pub mod cli;
pub mod config;
pub mod grid;
pub mod metrics;
pub mod results;

pub use cli::cli_main;
pub use config::{
    DatasetSpec, LossChoice, NamedInit, NamedModel, NamedStrategy, Preset, ResolvedExperiment,
};
pub use grid::{run_grid, GridReport};
pub use metrics::{balanced_accuracy, confusion_matrix, evaluate, ConfusionMatrix};
pub use results::{format_summary, read_results, summarize, write_results, ResultRow, SummaryRow};
