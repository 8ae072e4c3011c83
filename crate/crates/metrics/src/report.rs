//! Per-class metric aggregation for a full evaluation run.

use misdd_core::Tensor;

use crate::aupro::aupro_both;
use crate::auroc::auroc;
use crate::regions::{connected_components, BinaryMask};
use crate::{MetricsError, Result};

/// One evaluated test sample: its class, image-level label and score,
/// and the pixel-level prediction against the ground-truth mask.
pub struct ScoredSample {
    pub class_name: String,
    /// 1 = anomalous, 0 = normal.
    pub label: u8,
    pub image_score: f64,
    pub pixel_map: Tensor,
    pub gt_mask: BinaryMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub i_auroc: f64,
    pub p_auroc: f64,
    pub aupro_paper: f64,
    pub aupro_standard: f64,
    pub n_images: usize,
    pub n_regions: usize,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    /// One entry per class, in first-appearance order.
    pub per_class: Vec<(String, MetricsReport)>,
    /// Arithmetic mean of each metric over classes; counts are summed.
    pub mean: MetricsReport,
}

/// Evaluate a run: group samples by class (first-appearance order),
/// compute all four metrics per class, and average over classes.
pub fn evaluate_run(samples: &[ScoredSample], tau: f64, fpr_limit: f64) -> Result<RunReport> {
    if samples.is_empty() {
        return Err(MetricsError::Empty("evaluate_run of zero samples".into()));
    }
    let mut class_order: Vec<&str> = Vec::new();
    for s in samples {
        if !class_order.iter().any(|c| *c == s.class_name) {
            class_order.push(&s.class_name);
        }
    }

    let mut per_class = Vec::with_capacity(class_order.len());
    for class in class_order {
        let group: Vec<&ScoredSample> =
            samples.iter().filter(|s| s.class_name == class).collect();

        let scores: Vec<f64> = group.iter().map(|s| s.image_score).collect();
        let labels: Vec<u8> = group.iter().map(|s| s.label).collect();
        let i_auroc = auroc(&scores, &labels).map_err(|e| match e {
            MetricsError::SingleClass { metric, detail } => MetricsError::SingleClass {
                metric,
                detail: format!("class {class}: {detail}"),
            },
            other => other,
        })?;

        let maps: Vec<Tensor> = group.iter().map(|s| s.pixel_map.clone()).collect();
        let masks: Vec<BinaryMask> = group.iter().map(|s| s.gt_mask.clone()).collect();

        let mut flat_scores = Vec::new();
        let mut flat_labels = Vec::new();
        for (map, mask) in maps.iter().zip(&masks) {
            if (map.rows(), map.cols()) != (mask.height(), mask.width()) {
                return Err(MetricsError::ShapeMismatch(format!(
                    "class {class}: {}x{} map vs {}x{} mask",
                    map.rows(),
                    map.cols(),
                    mask.height(),
                    mask.width()
                )));
            }
            for r in 0..map.rows() {
                for c in 0..map.cols() {
                    flat_scores.push(map.get(r, c));
                    flat_labels.push(mask.get(r, c) as u8);
                }
            }
        }
        let p_auroc = auroc(&flat_scores, &flat_labels).map_err(|e| match e {
            MetricsError::SingleClass { detail, .. } => MetricsError::SingleClass {
                metric: "p_auroc".into(),
                detail: format!("class {class}: {detail}"),
            },
            other => other,
        })?;

        let (aupro_paper, aupro_standard) = aupro_both(&maps, &masks, tau, fpr_limit)?;
        let n_regions = masks.iter().map(|m| connected_components(m).len()).sum();

        per_class.push((
            class.to_string(),
            MetricsReport {
                i_auroc,
                p_auroc,
                aupro_paper,
                aupro_standard,
                n_images: group.len(),
                n_regions,
            },
        ));
    }

    let n = per_class.len() as f64;
    let mean = MetricsReport {
        i_auroc: per_class.iter().map(|(_, m)| m.i_auroc).sum::<f64>() / n,
        p_auroc: per_class.iter().map(|(_, m)| m.p_auroc).sum::<f64>() / n,
        aupro_paper: per_class.iter().map(|(_, m)| m.aupro_paper).sum::<f64>() / n,
        aupro_standard: per_class.iter().map(|(_, m)| m.aupro_standard).sum::<f64>() / n,
        n_images: per_class.iter().map(|(_, m)| m.n_images).sum(),
        n_regions: per_class.iter().map(|(_, m)| m.n_regions).sum(),
    };

    Ok(RunReport { per_class, mean })
}
