//! Run-directory file formats: resolved config echo, CSV tables, raw score
//! maps, heatmap overlays, and atomic directory writes.

use std::fs;
use std::path::{Path, PathBuf};

use misdd_core::tensorfile::{write_tensor, RawTensor};
use misdd_core::Tensor;
use misdd_data::{DefectType, PairedSample};
use misdd_model::{
    MissingLevel, MissingType, ModelConfig, TextTemplates, TrainConfig,
};
use serde::{Deserialize, Serialize};

use crate::{CliError, Result};

/// Exact-count summary of one applied missing schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleCounts {
    pub n: usize,
    pub rgb_missing: usize,
    pub td_missing: usize,
}

/// The fully resolved configuration of a training run, echoed into the run
/// directory and reloaded by evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: String,
    pub arch: ModelConfig,
    pub train: TrainConfig,
    pub missing_type: MissingType,
    pub eta: f64,
    pub missing_level: MissingLevel,
    pub k_shot: Option<usize>,
    /// Human-readable ablation tag derived from the train flags.
    pub ablation: String,
    pub templates: TextTemplates,
    pub warmup_from: Option<String>,
    pub schedule_train: ScheduleCounts,
}

impl RunConfig {
    pub fn save(&self, run_dir: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        fs::write(run_dir.join("config.json"), bytes)?;
        Ok(())
    }

    pub fn load(run_dir: &Path) -> Result<RunConfig> {
        let path = run_dir.join("config.json");
        let bytes = fs::read(&path).map_err(|e| CliError::Runtime {
            detail: format!("cannot read run config `{}`: {e}", path.display()),
        })?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

/// Ablation tag for a train config: `full`, or the disabled switches
/// joined by `+` (e.g. `no-ccp+no-scl`).
pub fn ablation_tag(cfg: &TrainConfig) -> String {
    let mut off = Vec::new();
    if !cfg.use_ccp {
        off.push("no-ccp");
    }
    if !cfg.use_msp {
        off.push("no-msp");
    }
    if !cfg.use_map {
        off.push("no-map");
    }
    if !cfg.use_scl {
        off.push("no-scl");
    }
    if off.is_empty() {
        "full".into()
    } else {
        off.join("+")
    }
}

/// Applies an ablation tag (the format produced by [`ablation_tag`]) to a
/// train config.
pub fn apply_ablation(cfg: &mut TrainConfig, tag: &str) -> Result<()> {
    if tag == "full" {
        return Ok(());
    }
    for part in tag.split('+') {
        match part {
            "no-ccp" => cfg.use_ccp = false,
            "no-msp" => cfg.use_msp = false,
            "no-map" => cfg.use_map = false,
            "no-scl" => cfg.use_scl = false,
            other => {
                return Err(CliError::Usage {
                    detail: format!(
                        "unknown ablation `{other}` (expected `full` or a `+`-joined \
                         combination of no-ccp, no-msp, no-map, no-scl)"
                    ),
                })
            }
        }
    }
    Ok(())
}

/// Minimal CSV writer: the emitted values are known to be comma- and
/// quote-free (identifiers, enum names, formatted numbers).
pub struct CsvWriter {
    path: PathBuf,
    lines: Vec<String>,
}

impl CsvWriter {
    pub fn new(path: &Path, header: &[&str]) -> CsvWriter {
        CsvWriter {
            path: path.to_path_buf(),
            lines: vec![header.join(",")],
        }
    }

    pub fn row(&mut self, fields: &[String]) {
        debug_assert!(
            fields.iter().all(|f| !f.contains(',') && !f.contains('"') && !f.contains('\n')),
            "CSV fields must not need quoting: {fields:?}"
        );
        self.lines.push(fields.join(","));
    }

    pub fn finish(self) -> Result<()> {
        let mut text = self.lines.join("\n");
        text.push('\n');
        fs::write(&self.path, text)?;
        Ok(())
    }
}

/// `{:.6}` for reported metrics: stable, presentational precision.
pub fn fmt_metric(v: f64) -> String {
    format!("{v:.6}")
}

/// Shortest round-trip decimal for raw scores.
pub fn fmt_exact(v: f64) -> String {
    format!("{v}")
}

pub fn defect_type_name(d: Option<DefectType>) -> &'static str {
    match d {
        None => "none",
        Some(DefectType::RgbOnly) => "rgb_only",
        Some(DefectType::DepthOnly) => "depth_only",
        Some(DefectType::Combined) => "combined",
    }
}

/// Writes `dir` contents atomically: the builder fills a `.tmp` sibling,
/// which is renamed over the target only after it is complete.
pub fn write_dir_atomic(
    target: &Path,
    build: impl FnOnce(&Path) -> Result<()>,
) -> Result<()> {
    let name = target
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| CliError::Runtime {
            detail: format!("`{}` has no valid directory name", target.display()),
        })?;
    let tmp = target.with_file_name(format!(".{name}.tmp"));
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir_all(&tmp)?;
    build(&tmp)?;
    if target.exists() {
        fs::remove_dir_all(target)?;
    }
    fs::rename(&tmp, target)?;
    Ok(())
}

/// Saves the raw pixel map alongside a PNG overlay on the sample's
/// available modality (RGB luminance when present, otherwise depth).
pub fn export_heatmap(
    dir: &Path,
    sample: &PairedSample,
    rgb_present: bool,
    s_px: &Tensor,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_tensor(
        &dir.join(format!("{}.bin", sample.id)),
        &RawTensor::from_matrix(s_px),
    )?;

    let (h, w) = s_px.shape();
    let base = |r: usize, c: usize| -> f64 {
        if rgb_present {
            (sample.rgb[0].get(r, c) + sample.rgb[1].get(r, c) + sample.rgb[2].get(r, c)) / 3.0
        } else {
            sample.depth.get(r, c)
        }
    };
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for r in 0..h {
        for c in 0..w {
            let b = base(r, c).clamp(0.0, 1.0);
            let heat = s_px.get(r, c).clamp(0.0, 1.0);
            let red = b + heat * (1.0 - b);
            let other = b * (1.0 - heat);
            img.put_pixel(
                c as u32,
                r as u32,
                image::Rgb([
                    (red * 255.0).round() as u8,
                    (other * 255.0).round() as u8,
                    (other * 255.0).round() as u8,
                ]),
            );
        }
    }
    img.save(dir.join(format!("{}.png", sample.id)))
        .map_err(|e| CliError::Runtime {
            detail: format!("PNG export for `{}` failed: {e}", sample.id),
        })?;
    Ok(())
}
