//! Dual-branch (RGB + depth) anomaly detection model with cross-modal
//! prompts, a toy text branch, symmetric contrastive training, and
//! gallery-based scoring.
//!
//! The crate is organized around a [`Model`] (a named parameter store plus
//! an architecture description). Forward passes are built on the `misdd-core`
//! tape so the same code path serves training, gradient checks, and
//! inference; scoring then works on plain tensors extracted from the tape.

pub mod config;
pub mod encoder;
pub mod gallery;
pub mod missing;
pub mod model;
pub mod prompts;
pub mod scl;
pub mod text;

use misdd_core::CoreError;
use misdd_data::DataError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error("text error: {detail}")]
    Text { detail: String },
    #[error("missing-modality error: {detail}")]
    Missing { detail: String },
    #[error("embedding norm violation in {context}: norm {norm}")]
    NormViolation { context: String, norm: f64 },
    #[error("non-finite value in {context} (epoch {epoch}, step {step})")]
    NonFinite {
        context: String,
        epoch: usize,
        step: usize,
    },
    #[error("gallery error: {detail}")]
    Gallery { detail: String },
    #[error("score out of range in {context}: {value}")]
    ScoreRange { context: String, value: f64 },
    #[error("checkpoint mismatch: {detail}")]
    Checkpoint { detail: String },
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Data(#[from] DataError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

pub use config::{EncoderConfig, ModelConfig, PromptActivation, PromptConfig, TrainConfig};
pub use encoder::{
    extract_patches, forward_branch, replicate_depth, run_warmup, BranchOutput, WarmupSample,
    BRANCHES, BRANCH_3D, BRANCH_RGB,
};
pub use gallery::{
    bilinear_upsample, build_galleries, detect, dummy_branch_features, encode_branch_features,
    harmonic, harmonic_fuse, image_score, memory_bank_map, pixel_map, BranchFeatures, Galleries,
    SampleScore, ScorePair, TEMPERATURE,
};
pub use missing::{
    apply_input_level, sample_schedule, MissingLevel, MissingSpec, MissingType, ModalityIndicator,
};
pub use model::{BoundParams, Model, ParamGroupRow};
pub use prompts::{generate_msp, refine_prompt};
pub use scl::{
    contrastive_loss, contrastive_nodes, few_shot_included, run_training, LossBreakdown,
    SampleLossNodes, TrainContext, TrainSample, UNIT_NORM_TOL,
};
pub use text::{
    build_semantic_duality, encode_text, tokenize, TextPromptSpec, TextTemplates, BOS_ID, EOS_ID,
    VOCAB_ROWS, VOCAB_WORDS,
};
