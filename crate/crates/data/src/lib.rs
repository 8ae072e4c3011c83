//! Synthetic paired RGB/depth surface-defect corpus: procedural
//! per-class textures, seeded defect injection with pixel-accurate
//! ground truth, and a bit-exact on-disk dataset format.

pub mod dataset;
pub mod manifest;
pub mod synth;
pub mod types;

pub use dataset::{generate_dataset, load_dataset, Dataset};
pub use manifest::{Manifest, SampleRecord, MANIFEST_FORMAT, MANIFEST_VERSION};
pub use synth::{generate_normal, inject_defect};
pub use types::{DatasetSpec, DefectMix, DefectType, Mask, PairedSample, Split};

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset spec: field `{field}`: {reason}")]
    InvalidSpec { field: String, reason: String },

    #[error("defect injection failed after {attempts} attempts: {reason}")]
    DefectDegenerate { attempts: usize, reason: String },

    #[error("sample `{id}`: missing tensor file {path}")]
    MissingFile { id: String, path: PathBuf },

    #[error("manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },

    #[error("sample `{id}`: {detail}")]
    SampleInvalid { id: String, detail: String },

    #[error(transparent)]
    Core(#[from] misdd_core::CoreError),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;
