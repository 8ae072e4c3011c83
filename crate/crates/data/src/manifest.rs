//! On-disk dataset manifest: a JSON echo of the generating spec plus
//! one record per sample. Serialization is deterministic (fixed struct
//! field order, no maps), so identical specs produce identical bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::types::{DatasetSpec, DefectType, Split};
use crate::{DataError, Result};

pub const MANIFEST_FORMAT: &str = "misdd-dataset";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FileSet {
    pub rgb: String,
    pub depth: String,
    pub mask: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    pub class_name: String,
    pub split: Split,
    pub label: u8,
    pub defect_type: Option<DefectType>,
    pub files: FileSet,
    /// Mean absolute per-pixel change each channel received inside the
    /// ground-truth mask (0 for normals). Lets downstream checks verify
    /// e.g. that rgb-only defects left depth below the noise floor.
    pub mean_abs_delta_rgb: f64,
    pub mean_abs_delta_depth: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub spec: DatasetSpec,
    /// True when the test split cannot support ranking metrics (only
    /// one image-level label present).
    pub test_split_degenerate: bool,
    pub samples: Vec<SampleRecord>,
}

impl Manifest {
    pub fn to_json_bytes(&self) -> Result<Vec<u8>> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        Ok(bytes)
    }

    pub fn from_json_bytes(path: &Path, bytes: &[u8]) -> Result<Manifest> {
        let manifest: Manifest =
            serde_json::from_slice(bytes).map_err(|e| DataError::Manifest {
                path: path.to_path_buf(),
                reason: format!("parse failure: {e}"),
            })?;
        manifest.check_consistency(path)?;
        Ok(manifest)
    }

    fn check_consistency(&self, path: &Path) -> Result<()> {
        let fail = |reason: String| {
            Err(DataError::Manifest {
                path: path.to_path_buf(),
                reason,
            })
        };
        if self.format != MANIFEST_FORMAT {
            return fail(format!("unexpected format `{}`", self.format));
        }
        if self.version != MANIFEST_VERSION {
            return fail(format!(
                "unsupported version {} (expected {MANIFEST_VERSION})",
                self.version
            ));
        }
        self.spec.validate()?;
        let mut ids: Vec<&str> = self.samples.iter().map(|s| s.id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.samples.len() {
            return fail("duplicate sample ids".into());
        }
        for s in &self.samples {
            if s.split == Split::Train && s.label != 0 {
                return fail(format!("training sample `{}` has label {}", s.id, s.label));
            }
            if (s.label == 1) != s.defect_type.is_some() {
                return fail(format!(
                    "sample `{}`: label {} inconsistent with defect_type {:?}",
                    s.id, s.label, s.defect_type
                ));
            }
        }
        Ok(())
    }
}
