//! Sample and dataset-spec types shared by the generator and loaders.

use misdd_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::{DataError, Result};

/// Binary H×W ground-truth mask (1 = anomalous pixel).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn from_bytes(height: usize, width: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), height * width, "mask size mismatch");
        assert!(data.iter().all(|&b| b <= 1), "mask bytes must be 0/1");
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col] != 0
    }

    pub fn set(&mut self, row: usize, col: usize, v: bool) {
        self.data[row * self.width + col] = v as u8;
    }

    pub fn bytes(&self) -> &[u8] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b != 0).count()
    }

    pub fn any(&self) -> bool {
        self.data.iter().any(|&b| b != 0)
    }

    /// Union of two masks of identical shape.
    pub fn union(&self, other: &Mask) -> Mask {
        assert_eq!(
            (self.height, self.width),
            (other.height, other.width),
            "mask shape mismatch"
        );
        Mask {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a | b)
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefectType {
    RgbOnly,
    DepthOnly,
    Combined,
}

impl DefectType {
    pub const ALL: [DefectType; 3] = [
        DefectType::RgbOnly,
        DefectType::DepthOnly,
        DefectType::Combined,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            DefectType::RgbOnly => "rgb_only",
            DefectType::DepthOnly => "depth_only",
            DefectType::Combined => "combined",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// One paired RGB/depth sample with pixel-accurate ground truth.
#[derive(Debug, Clone)]
pub struct PairedSample {
    pub id: String,
    pub class_name: String,
    /// Three H×W channel planes, each in [0,1].
    pub rgb: [Tensor; 3],
    /// One H×W plane in [0,1].
    pub depth: Tensor,
    pub gt_mask: Mask,
    /// 0 = normal, 1 = anomalous.
    pub label: u8,
}

impl PairedSample {
    pub fn height(&self) -> usize {
        self.depth.rows()
    }

    pub fn width(&self) -> usize {
        self.depth.cols()
    }

    /// Check the cross-field invariants: consistent shapes, values in
    /// [0,1], and mask/label agreement.
    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        let fail = |detail: String| {
            Err(DataError::SampleInvalid {
                id: self.id.clone(),
                detail,
            })
        };
        for (name, plane) in self
            .rgb
            .iter()
            .enumerate()
            .map(|(i, p)| (format!("rgb[{i}]"), p))
            .chain(std::iter::once(("depth".to_string(), &self.depth)))
        {
            if plane.shape() != (h, w) {
                return fail(format!(
                    "{name} is {}x{}, expected {h}x{w}",
                    plane.rows(),
                    plane.cols()
                ));
            }
            if !plane.data().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
                return fail(format!("{name} has values outside [0,1]"));
            }
        }
        if (self.gt_mask.height(), self.gt_mask.width()) != (h, w) {
            return fail("gt_mask shape differs from image".into());
        }
        match self.label {
            0 if self.gt_mask.any() => fail("normal sample with nonzero mask".into()),
            1 if !self.gt_mask.any() => fail("anomalous sample with all-zero mask".into()),
            0 | 1 => Ok(()),
            other => fail(format!("label {other} not in {{0,1}}")),
        }
    }
}

/// Proportions of anomalous test samples per defect type; must sum to 1.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct DefectMix {
    pub rgb_only: f64,
    pub depth_only: f64,
    pub combined: f64,
}

impl Default for DefectMix {
    fn default() -> Self {
        Self {
            rgb_only: 1.0 / 3.0,
            depth_only: 1.0 / 3.0,
            combined: 1.0 / 3.0,
        }
    }
}

impl DefectMix {
    pub fn proportions(&self) -> [f64; 3] {
        [self.rgb_only, self.depth_only, self.combined]
    }

    /// Exact per-type counts for `n` anomalous samples via largest
    /// remainder, ties broken in declaration order.
    pub fn counts(&self, n: usize) -> [usize; 3] {
        let props = self.proportions();
        let mut counts = [0usize; 3];
        let mut remainders: Vec<(usize, f64)> = Vec::new();
        let mut assigned = 0usize;
        for (i, p) in props.iter().enumerate() {
            let exact = p * n as f64;
            counts[i] = exact.floor() as usize;
            assigned += counts[i];
            remainders.push((i, exact - exact.floor()));
        }
        remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        for k in 0..n.saturating_sub(assigned) {
            counts[remainders[k % 3].0] += 1;
        }
        counts
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetSpec {
    pub classes: Vec<String>,
    pub n_train_normal: usize,
    pub n_test_normal: usize,
    pub n_test_anomalous: usize,
    pub image_size: usize,
    pub defect_mix: DefectMix,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            classes: ["weave", "foam", "grid", "marble"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            n_train_normal: 25,
            n_test_normal: 10,
            n_test_anomalous: 20,
            image_size: 64,
            defect_mix: DefectMix::default(),
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let invalid = |field: &str, reason: String| {
            Err(DataError::InvalidSpec {
                field: field.into(),
                reason,
            })
        };
        if self.classes.is_empty() {
            return invalid("classes", "at least one class required".into());
        }
        for c in &self.classes {
            if !crate::synth::known_classes().contains(&c.as_str()) {
                return invalid(
                    "classes",
                    format!(
                        "unknown class `{c}` (available: {})",
                        crate::synth::known_classes().join(", ")
                    ),
                );
            }
        }
        let mut sorted = self.classes.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.classes.len() {
            return invalid("classes", "duplicate class name".into());
        }
        if self.n_train_normal < 1 {
            return invalid("n_train_normal", "must be at least 1".into());
        }
        if self.image_size < 16 {
            return invalid("image_size", format!("{} < 16", self.image_size));
        }
        let mix = self.defect_mix.proportions();
        if mix.iter().any(|p| !(0.0..=1.0).contains(p) || !p.is_finite()) {
            return invalid("defect_mix", "proportions must lie in [0,1]".into());
        }
        let sum: f64 = mix.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return invalid("defect_mix", format!("proportions sum to {sum}, not 1"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_spec_is_valid() {
        DatasetSpec::default().validate().unwrap();
    }

    #[test]
    fn bad_mix_is_rejected_naming_the_field() {
        let spec = DatasetSpec {
            defect_mix: DefectMix {
                rgb_only: 0.5,
                depth_only: 0.5,
                combined: 0.5,
            },
            ..DatasetSpec::default()
        };
        match spec.validate() {
            Err(DataError::InvalidSpec { field, .. }) => assert_eq!(field, "defect_mix"),
            other => panic!("expected InvalidSpec, got {other:?}"),
        }
    }

    #[test]
    fn tiny_image_is_rejected() {
        let spec = DatasetSpec {
            image_size: 8,
            ..DatasetSpec::default()
        };
        assert!(matches!(
            spec.validate(),
            Err(DataError::InvalidSpec { field, .. }) if field == "image_size"
        ));
    }

    #[test]
    fn zero_train_normals_rejected() {
        let spec = DatasetSpec {
            n_train_normal: 0,
            ..DatasetSpec::default()
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn mix_counts_use_largest_remainder() {
        let mix = DefectMix::default();
        assert_eq!(mix.counts(20), [7, 7, 6]);
        assert_eq!(mix.counts(3), [1, 1, 1]);
        assert_eq!(mix.counts(0), [0, 0, 0]);
        let pure = DefectMix {
            rgb_only: 1.0,
            depth_only: 0.0,
            combined: 0.0,
        };
        assert_eq!(pure.counts(5), [5, 0, 0]);
    }

    #[test]
    fn mask_union_and_counts() {
        let mut a = Mask::zeros(2, 2);
        a.set(0, 0, true);
        let mut b = Mask::zeros(2, 2);
        b.set(1, 1, true);
        let u = a.union(&b);
        assert_eq!(u.count(), 2);
        assert!(u.get(0, 0) && u.get(1, 1));
    }
}
