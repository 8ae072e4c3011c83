//! Command-line harness: dataset generation, training runs, evaluation,
//! grids, few-shot sweeps, and parameter reports, all reproducible from a
//! single seed.

use thiserror::Error;

pub mod io;
pub mod pipeline;

pub use io::{ablation_tag, apply_ablation, RunConfig, ScheduleCounts};
pub use pipeline::{
    eval_run, fewshot_run, grid_run, params_rows, train_run, EvalArgs, EvalSummary, FewshotArgs,
    GridArgs, TrainArgs,
};

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad invocation: unknown names, invalid combinations, out-of-range
    /// values. Maps to exit code 2.
    #[error("{detail}")]
    Usage { detail: String },
    /// Failure while executing a well-formed request. Maps to exit code 1.
    #[error("{detail}")]
    Runtime { detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Core(#[from] misdd_core::CoreError),
    #[error(transparent)]
    Data(#[from] misdd_data::DataError),
    #[error(transparent)]
    Metrics(#[from] misdd_metrics::MetricsError),
    #[error(transparent)]
    Model(#[from] misdd_model::ModelError),
}

impl CliError {
    /// Process exit code for this error: 2 for usage mistakes, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage { .. } => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
