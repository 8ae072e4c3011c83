//! Area under the ROC curve.
//!
//! The curve is swept over the ascending sorted unique scores and
//! integrated by trapezoid; with ties sharing a threshold this equals
//! the Mann-Whitney pair statistic with ties counted 1/2. Both views
//! reduce to one integer accumulation — `2·(correctly ordered pairs) +
//! (tied pairs)` over `2·P·N` — evaluated here without floating-point
//! drift and divided exactly once.

use misdd_core::Tensor;

use crate::regions::BinaryMask;
use crate::{MetricsError, Result};

/// AUROC of scalar scores against binary labels (1 = positive).
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(MetricsError::ShapeMismatch(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(MetricsError::Empty("auroc of zero samples".into()));
    }
    let pos_total = labels.iter().filter(|&&l| l != 0).count() as u128;
    let neg_total = labels.len() as u128 - pos_total;
    if pos_total == 0 || neg_total == 0 {
        return Err(MetricsError::SingleClass {
            metric: "auroc".into(),
            detail: format!("{pos_total} positives, {neg_total} negatives"),
        });
    }

    // Ascending sweep. At each distinct score, positives there beat every
    // negative strictly below and tie with negatives at the same score.
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[a]
            .partial_cmp(&scores[b])
            .expect("non-finite score")
            .then(a.cmp(&b))
    });

    let mut twice_wins: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let mut pos_here: u128 = 0;
        let mut neg_here: u128 = 0;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] != 0 {
                pos_here += 1;
            } else {
                neg_here += 1;
            }
            j += 1;
        }
        twice_wins += pos_here * (2 * neg_below + neg_here);
        neg_below += neg_here;
        i = j;
    }

    Ok(twice_wins as f64 / (2 * pos_total * neg_total) as f64)
}

/// Pixel-level AUROC: plain AUROC over the flattened concatenation of
/// every map against every ground-truth mask.
pub fn p_auroc(maps: &[Tensor], gt_masks: &[BinaryMask]) -> Result<f64> {
    if maps.len() != gt_masks.len() {
        return Err(MetricsError::ShapeMismatch(format!(
            "{} maps vs {} masks",
            maps.len(),
            gt_masks.len()
        )));
    }
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (m, (map, mask)) in maps.iter().zip(gt_masks).enumerate() {
        if (map.rows(), map.cols()) != (mask.height(), mask.width()) {
            return Err(MetricsError::ShapeMismatch(format!(
                "map {m}: {}x{} map vs {}x{} mask",
                map.rows(),
                map.cols(),
                mask.height(),
                mask.width()
            )));
        }
        for r in 0..map.rows() {
            for c in 0..map.cols() {
                scores.push(map.get(r, c));
                labels.push(mask.get(r, c) as u8);
            }
        }
    }
    auroc(&scores, &labels).map_err(|e| match e {
        MetricsError::SingleClass { detail, .. } => MetricsError::SingleClass {
            metric: "p_auroc".into(),
            detail,
        },
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use crate::oracle::SplitMix64;
    use proptest::prelude::*;

    #[test]
    fn perfect_separation() {
        let a = auroc(&[0.9, 0.8, 0.1, 0.2], &[1, 1, 0, 0]).unwrap();
        assert_eq!(a, 1.0);
    }

    #[test]
    fn three_of_four_pairs_ordered() {
        let a = auroc(&[0.9, 0.6, 0.4, 0.2], &[1, 0, 1, 0]).unwrap();
        assert_eq!(a, 0.75);
    }

    #[test]
    fn perfect_inversion() {
        let a = auroc(&[0.1, 0.2, 0.9, 0.8], &[1, 1, 0, 0]).unwrap();
        assert_eq!(a, 0.0);
    }

    #[test]
    fn all_ties_give_half() {
        let a = auroc(&[0.5, 0.5, 0.5, 0.5], &[1, 0, 1, 0]).unwrap();
        assert_eq!(a, 0.5);
    }

    #[test]
    fn single_class_is_an_error() {
        assert!(auroc(&[0.1, 0.2], &[1, 1]).is_err());
        assert!(auroc(&[0.1, 0.2], &[0, 0]).is_err());
    }

    #[test]
    fn p_auroc_of_exact_mask_is_one() {
        let map = Tensor::from_vec(2, 2, vec![0.0, 1.0, 1.0, 0.0]);
        let mask = BinaryMask::from_u8(2, 2, &[0, 1, 1, 0]);
        assert_eq!(p_auroc(&[map], &[mask]).unwrap(), 1.0);
    }

    #[test]
    fn p_auroc_of_constant_map_is_half() {
        let map = Tensor::filled(2, 2, 0.7);
        let mask = BinaryMask::from_u8(2, 2, &[0, 1, 0, 0]);
        assert_eq!(p_auroc(&[map], &[mask]).unwrap(), 0.5);
    }

    #[test]
    fn p_auroc_reduces_to_flat_auroc() {
        let mut rng = SplitMix64::new(31);
        let map = Tensor::from_fn(4, 4, |_, _| rng.next_f64());
        let mask_bits: Vec<u8> = (0..16).map(|_| (rng.next_f64() < 0.3) as u8).collect();
        if mask_bits.iter().all(|&b| b == 0) {
            return; // degenerate draw; covered by the error tests
        }
        let mask = BinaryMask::from_u8(4, 4, &mask_bits);
        let flat_scores: Vec<f64> = map.data().to_vec();
        let direct = auroc(&flat_scores, &mask_bits).unwrap();
        assert_eq!(p_auroc(&[map], &[mask]).unwrap(), direct);
    }

    proptest! {
        #[test]
        fn matches_pairwise_oracle(seed in 0u64..500) {
            let mut rng = SplitMix64::new(seed);
            let n = 2 + (rng.next_u64() % 30) as usize;
            // Quantized scores to force ties.
            let scores: Vec<f64> =
                (0..n).map(|_| (rng.next_u64() % 8) as f64 / 7.0).collect();
            let mut labels: Vec<u8> = (0..n).map(|_| (rng.next_u64() % 2) as u8).collect();
            labels[0] = 1;
            labels[n - 1] = 0;
            let fast = auroc(&scores, &labels).unwrap();
            let slow = oracle::auroc_pairwise(&scores, &labels);
            prop_assert!((fast - slow).abs() < 1e-12);
        }

        #[test]
        fn monotone_transform_invariance(seed in 0u64..200) {
            let mut rng = SplitMix64::new(seed.wrapping_add(777));
            let n = 2 + (rng.next_u64() % 20) as usize;
            let scores: Vec<f64> = (0..n).map(|_| rng.next_f64() * 2.0 - 1.0).collect();
            let mut labels: Vec<u8> = (0..n).map(|_| (rng.next_u64() % 2) as u8).collect();
            labels[0] = 1;
            labels[n - 1] = 0;
            let transformed: Vec<f64> = scores.iter().map(|&s| (3.0 * s).exp()).collect();
            let a = auroc(&scores, &labels).unwrap();
            let b = auroc(&transformed, &labels).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn complement_under_negation(seed in 0u64..200) {
            let mut rng = SplitMix64::new(seed.wrapping_add(1234));
            let n = 2 + (rng.next_u64() % 20) as usize;
            let scores: Vec<f64> =
                (0..n).map(|_| (rng.next_u64() % 5) as f64 / 4.0).collect();
            let mut labels: Vec<u8> = (0..n).map(|_| (rng.next_u64() % 2) as u8).collect();
            labels[0] = 1;
            labels[n - 1] = 0;
            let negated: Vec<f64> = scores.iter().map(|&s| -s).collect();
            let a = auroc(&scores, &labels).unwrap();
            let b = auroc(&negated, &labels).unwrap();
            prop_assert!((a + b - 1.0).abs() < 1e-12);
        }
    }
}
