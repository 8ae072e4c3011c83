//! Missing-modality specification and per-sample schedules.
//!
//! A schedule assigns every sample a modality indicator `⟨m_rgb, m_3d⟩`
//! (1 = present). Exactly `round(η·n)` samples lose the named modality;
//! for `both`, two disjoint groups of `round(η·n/2)` samples each lose one
//! modality. No sample ever loses both.

use misdd_core::{derive_seed, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{ModelError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MissingType {
    #[serde(rename = "rgb")]
    Rgb,
    #[serde(rename = "3d")]
    ThreeD,
    #[serde(rename = "both")]
    Both,
    #[serde(rename = "none")]
    None,
}

impl MissingType {
    pub fn as_str(&self) -> &'static str {
        match self {
            MissingType::Rgb => "rgb",
            MissingType::ThreeD => "3d",
            MissingType::Both => "both",
            MissingType::None => "none",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "rgb" => Ok(MissingType::Rgb),
            "3d" => Ok(MissingType::ThreeD),
            "both" => Ok(MissingType::Both),
            "none" => Ok(MissingType::None),
            other => Err(ModelError::Missing {
                detail: format!("unknown missing type `{other}` (expected rgb|3d|both|none)"),
            }),
        }
    }
}

/// Where the dropout happens: zeroed input image vs. zeroed encoder output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum MissingLevel {
    #[default]
    #[serde(rename = "input")]
    Input,
    #[serde(rename = "feature")]
    Feature,
}

impl MissingLevel {
    pub fn as_str(&self) -> &'static str {
        match self {
            MissingLevel::Input => "input",
            MissingLevel::Feature => "feature",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "input" => Ok(MissingLevel::Input),
            "feature" => Ok(MissingLevel::Feature),
            other => Err(ModelError::Missing {
                detail: format!("unknown missing level `{other}` (expected input|feature)"),
            }),
        }
    }
}

/// Full description of a missing-modality experiment cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MissingSpec {
    pub missing_type: MissingType,
    pub eta: f64,
    pub seed: u64,
    pub level: MissingLevel,
}

impl MissingSpec {
    pub fn complete(seed: u64) -> Self {
        MissingSpec {
            missing_type: MissingType::None,
            eta: 0.0,
            seed,
            level: MissingLevel::Input,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.eta) || !self.eta.is_finite() {
            return Err(ModelError::Missing {
                detail: format!("missing rate eta {} outside [0, 1]", self.eta),
            });
        }
        Ok(())
    }
}

/// Per-sample presence flags; `true` means the modality is available.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityIndicator {
    pub rgb: bool,
    #[serde(rename = "3d")]
    pub td: bool,
}

impl ModalityIndicator {
    pub const COMPLETE: ModalityIndicator = ModalityIndicator { rgb: true, td: true };
    pub const RGB_MISSING: ModalityIndicator = ModalityIndicator { rgb: false, td: true };
    pub const TD_MISSING: ModalityIndicator = ModalityIndicator { rgb: true, td: false };

    /// At least one modality must remain; `⟨0,0⟩` is never a valid state.
    pub fn is_valid(&self) -> bool {
        self.rgb || self.td
    }
}

/// Draws the indicator assignment for `n` samples.
///
/// The subset is chosen by a seeded shuffle keyed on `(spec.seed, label)`,
/// so distinct splits (distinct labels) get independent assignments while
/// the whole schedule stays reproducible. Indicators are returned in the
/// original sample order.
pub fn sample_schedule(n: usize, spec: &MissingSpec, label: &str) -> Result<Vec<ModalityIndicator>> {
    spec.validate()?;
    let mut indicators = vec![ModalityIndicator::COMPLETE; n];
    if spec.missing_type == MissingType::None || n == 0 {
        return Ok(indicators);
    }

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, label));
    order.shuffle(&mut rng);

    match spec.missing_type {
        MissingType::Rgb | MissingType::ThreeD => {
            let k = (spec.eta * n as f64).round() as usize;
            let missing = if spec.missing_type == MissingType::Rgb {
                ModalityIndicator::RGB_MISSING
            } else {
                ModalityIndicator::TD_MISSING
            };
            for &i in order.iter().take(k) {
                indicators[i] = missing;
            }
        }
        MissingType::Both => {
            let k2 = (spec.eta * n as f64 / 2.0).round() as usize;
            if 2 * k2 > n {
                return Err(ModelError::Missing {
                    detail: format!(
                        "cannot assign two disjoint groups of {k2} among {n} samples"
                    ),
                });
            }
            for &i in order.iter().take(k2) {
                indicators[i] = ModalityIndicator::RGB_MISSING;
            }
            for &i in order.iter().skip(k2).take(k2) {
                indicators[i] = ModalityIndicator::TD_MISSING;
            }
        }
        MissingType::None => unreachable!(),
    }

    debug_assert!(indicators.iter().all(ModalityIndicator::is_valid));
    Ok(indicators)
}

/// Zeroes the planes of missing modalities in place (input-level dropout).
pub fn apply_input_level(rgb: &mut [Tensor; 3], depth: &mut [Tensor; 3], ind: ModalityIndicator) {
    if !ind.rgb {
        for plane in rgb.iter_mut() {
            *plane = Tensor::zeros(plane.rows(), plane.cols());
        }
    }
    if !ind.td {
        for plane in depth.iter_mut() {
            *plane = Tensor::zeros(plane.rows(), plane.cols());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(t: MissingType, eta: f64, seed: u64) -> MissingSpec {
        MissingSpec {
            missing_type: t,
            eta,
            seed,
            level: MissingLevel::Input,
        }
    }

    fn counts(inds: &[ModalityIndicator]) -> (usize, usize) {
        (
            inds.iter().filter(|i| !i.rgb).count(),
            inds.iter().filter(|i| !i.td).count(),
        )
    }

    #[test]
    fn exact_counts_across_types_and_rates() {
        let n = 1000;
        for &t in &[MissingType::Rgb, MissingType::ThreeD, MissingType::Both] {
            for &eta in &[0.3, 0.5, 0.7] {
                let inds = sample_schedule(n, &spec(t, eta, 11), "schedule.test").unwrap();
                assert_eq!(inds.len(), n);
                assert!(inds.iter().all(ModalityIndicator::is_valid), "no sample may lose both");
                let (rgb_missing, td_missing) = counts(&inds);
                let k = (eta * n as f64).round() as usize;
                let k2 = (eta * n as f64 / 2.0).round() as usize;
                match t {
                    MissingType::Rgb => assert_eq!((rgb_missing, td_missing), (k, 0)),
                    MissingType::ThreeD => assert_eq!((rgb_missing, td_missing), (0, k)),
                    MissingType::Both => assert_eq!((rgb_missing, td_missing), (k2, k2)),
                    MissingType::None => unreachable!(),
                }
            }
        }
    }

    #[test]
    fn both_groups_are_disjoint() {
        let inds = sample_schedule(100, &spec(MissingType::Both, 1.0, 3), "schedule.train").unwrap();
        let (rgb_missing, td_missing) = counts(&inds);
        assert_eq!((rgb_missing, td_missing), (50, 50));
        assert!(inds.iter().all(ModalityIndicator::is_valid));
    }

    #[test]
    fn none_and_zero_rate_leave_everything_present() {
        let inds = sample_schedule(40, &spec(MissingType::None, 0.9, 1), "s").unwrap();
        assert!(inds.iter().all(|i| *i == ModalityIndicator::COMPLETE));
        let inds = sample_schedule(40, &spec(MissingType::Both, 0.0, 1), "s").unwrap();
        assert!(inds.iter().all(|i| *i == ModalityIndicator::COMPLETE));
    }

    #[test]
    fn full_rate_single_modality() {
        let inds = sample_schedule(25, &spec(MissingType::Rgb, 1.0, 2), "s").unwrap();
        assert!(inds.iter().all(|i| *i == ModalityIndicator::RGB_MISSING));
    }

    #[test]
    fn schedules_are_deterministic_and_label_separated() {
        let s = spec(MissingType::Both, 0.5, 9);
        let a = sample_schedule(200, &s, "schedule.train").unwrap();
        let b = sample_schedule(200, &s, "schedule.train").unwrap();
        assert_eq!(a, b);
        let c = sample_schedule(200, &s, "schedule.test").unwrap();
        assert_ne!(a, c, "different labels must draw different subsets");
    }

    #[test]
    fn invalid_rates_and_overfull_both_are_rejected() {
        assert!(sample_schedule(10, &spec(MissingType::Rgb, 1.5, 0), "s").is_err());
        assert!(sample_schedule(10, &spec(MissingType::Rgb, -0.1, 0), "s").is_err());
        // n odd at eta=1.0: two disjoint halves cannot cover 2·round(n/2) > n.
        assert!(sample_schedule(9, &spec(MissingType::Both, 1.0, 0), "s").is_err());
    }

    #[test]
    fn input_level_zeroing_is_selective() {
        let mk = || {
            [
                Tensor::filled(4, 4, 0.5),
                Tensor::filled(4, 4, 0.25),
                Tensor::filled(4, 4, 0.75),
            ]
        };
        let mut rgb = mk();
        let mut depth = mk();
        apply_input_level(&mut rgb, &mut depth, ModalityIndicator::RGB_MISSING);
        assert!(rgb.iter().all(|p| p.data().iter().all(|&v| v == 0.0)));
        assert_eq!(depth[0].get(0, 0), 0.5, "present modality untouched");

        let mut rgb = mk();
        let mut depth = mk();
        apply_input_level(&mut rgb, &mut depth, ModalityIndicator::TD_MISSING);
        assert_eq!(rgb[2].get(1, 1), 0.75);
        assert!(depth.iter().all(|p| p.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn serde_names_match_cli_vocabulary() {
        assert_eq!(serde_json::to_string(&MissingType::ThreeD).unwrap(), "\"3d\"");
        assert_eq!(serde_json::to_string(&MissingLevel::Feature).unwrap(), "\"feature\"");
        let spec: MissingSpec = serde_json::from_str(
            "{\"missing_type\":\"both\",\"eta\":0.5,\"seed\":7,\"level\":\"input\"}",
        )
        .unwrap();
        assert_eq!(spec.missing_type, MissingType::Both);
    }
}
