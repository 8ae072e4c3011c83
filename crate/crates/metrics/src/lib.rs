//! Evaluation metrics for surface-defect detection: image-level and
//! pixel-level AUROC, two area-under-per-region-overlap (AUPRO)
//! variants, and 8-connected component labeling — each paired with a
//! brute-force oracle implementation in [`oracle`] used by the test
//! suites to verify the fast paths.

pub mod aupro;
pub mod auroc;
pub mod oracle;
pub mod regions;
pub mod report;

pub use aupro::{aupro_both, aupro_paper, aupro_standard, DEFAULT_FPR_LIMIT, DEFAULT_IOU_TAU};
pub use auroc::{auroc, p_auroc};
pub use regions::{connected_components, BinaryMask, Region};
pub use report::{evaluate_run, MetricsReport, RunReport, ScoredSample};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{metric}: undefined for single-class labels ({detail})")]
    SingleClass { metric: String, detail: String },

    #[error("{metric}: {detail}")]
    Degenerate { metric: String, detail: String },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("{metric}: value {value} outside [0,1]")]
    OutOfRange { metric: String, value: f64 },

    #[error("empty input: {0}")]
    Empty(String),
}

pub type Result<T> = std::result::Result<T, MetricsError>;
