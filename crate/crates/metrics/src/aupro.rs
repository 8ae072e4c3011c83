//! Area under the per-region-overlap curve, in two conventions.
//!
//! Both variants binarize the score maps at every distinct score value
//! with the left-closed rule P(f) = {score ≥ f} and treat the curve as
//! piecewise constant between consecutive values.
//!
//! * [`aupro_paper`] thresholds each region's IoU at τ and integrates
//!   the resulting PRO over the score axis f ∈ [0, 1]. The IoU of region
//!   R_k is computed against the union of predicted components that
//!   intersect R_k.
//! * [`aupro_standard`] integrates mean per-region recall over the
//!   global false-positive rate up to a limit (right-continuous step
//!   integration), normalized by that limit.
//!
//! One descending union-find sweep over the pixels produces both curves
//! in near-linear time; the brute-force oracles in [`crate::oracle`]
//! recompute them per threshold from scratch.

use misdd_core::Tensor;

use crate::regions::{connected_components, BinaryMask, NEIGHBORS_8};
use crate::{MetricsError, Result};

pub const DEFAULT_IOU_TAU: f64 = 0.3;
pub const DEFAULT_FPR_LIMIT: f64 = 0.3;

/// Paper-literal AUPRO: PRO(f) = (1/N)·Σ_k 1[IoU_k(f) ≥ τ], integrated
/// over the score axis [0, 1].
pub fn aupro_paper(maps: &[Tensor], gt_masks: &[BinaryMask], tau: f64) -> Result<f64> {
    Ok(sweep(maps, gt_masks, tau, DEFAULT_FPR_LIMIT)?.0)
}

/// FPR-limited AUPRO: mean per-region recall integrated over global
/// FPR ∈ [0, fpr_limit], normalized by the limit.
pub fn aupro_standard(maps: &[Tensor], gt_masks: &[BinaryMask], fpr_limit: f64) -> Result<f64> {
    Ok(sweep(maps, gt_masks, DEFAULT_IOU_TAU, fpr_limit)?.1)
}

/// Both AUPRO variants from a single sweep.
pub fn aupro_both(
    maps: &[Tensor],
    gt_masks: &[BinaryMask],
    tau: f64,
    fpr_limit: f64,
) -> Result<(f64, f64)> {
    sweep(maps, gt_masks, tau, fpr_limit)
}

struct RegionStats {
    area: u64,
    /// Activated pixels inside the region: |R_k ∩ P(f)|.
    hit: u64,
    /// Total size of predicted components touching the region.
    comp_size: u64,
    above_tau: bool,
    dirty_stamp: u32,
}

struct UnionFind {
    parent: Vec<u32>,
    size: Vec<u32>,
    /// Sorted region ids touched by the component rooted here.
    regions: Vec<Vec<u32>>,
}

impl UnionFind {
    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let grand = self.parent[self.parent[x as usize] as usize];
            self.parent[x as usize] = grand;
            x = grand;
        }
        x
    }
}

fn sweep(
    maps: &[Tensor],
    gt_masks: &[BinaryMask],
    tau: f64,
    fpr_limit: f64,
) -> Result<(f64, f64)> {
    if maps.is_empty() {
        return Err(MetricsError::Empty("aupro of zero maps".into()));
    }
    if maps.len() != gt_masks.len() {
        return Err(MetricsError::ShapeMismatch(format!(
            "{} maps vs {} masks",
            maps.len(),
            gt_masks.len()
        )));
    }
    assert!(tau > 0.0 && tau <= 1.0, "tau {tau} outside (0,1]");
    assert!(
        fpr_limit > 0.0 && fpr_limit <= 1.0,
        "fpr_limit {fpr_limit} outside (0,1]"
    );

    // Flatten all images into one pixel array; components never cross
    // image boundaries, so neighbor lookups stay within each image.
    let mut offsets = Vec::with_capacity(maps.len());
    let mut total = 0usize;
    for (i, (map, mask)) in maps.iter().zip(gt_masks).enumerate() {
        if (map.rows(), map.cols()) != (mask.height(), mask.width()) {
            return Err(MetricsError::ShapeMismatch(format!(
                "map {i}: {}x{} map vs {}x{} mask",
                map.rows(),
                map.cols(),
                mask.height(),
                mask.width()
            )));
        }
        offsets.push(total);
        total += map.rows() * map.cols();
    }

    let mut scores = vec![0.0f64; total];
    let mut region_of = vec![0u32; total]; // region id + 1; 0 = background
    let mut regions: Vec<RegionStats> = Vec::new();

    for (i, (map, mask)) in maps.iter().zip(gt_masks).enumerate() {
        let w = map.cols();
        for r in 0..map.rows() {
            for c in 0..w {
                let v = map.get(r, c);
                if !(0.0..=1.0).contains(&v) {
                    return Err(MetricsError::OutOfRange {
                        metric: "aupro".into(),
                        value: v,
                    });
                }
                scores[offsets[i] + r * w + c] = v;
            }
        }
        for region in connected_components(mask) {
            let id = regions.len() as u32;
            for &(r, c) in &region.pixels {
                region_of[offsets[i] + r * w + c] = id + 1;
            }
            regions.push(RegionStats {
                area: region.area() as u64,
                hit: 0,
                comp_size: 0,
                above_tau: false,
                dirty_stamp: 0,
            });
        }
    }

    let n_regions = regions.len();
    if n_regions == 0 {
        return Err(MetricsError::Degenerate {
            metric: "aupro".into(),
            detail: "ground truth contains no anomalous region".into(),
        });
    }
    let neg_total = total as u64 - regions.iter().map(|r| r.area).sum::<u64>();
    if neg_total == 0 {
        return Err(MetricsError::Degenerate {
            metric: "aupro".into(),
            detail: "no normal pixels".into(),
        });
    }

    // Pixels in descending score order (index-ascending within ties).
    let mut order: Vec<u32> = (0..total as u32).collect();
    order.sort_by(|&a, &b| {
        scores[b as usize]
            .partial_cmp(&scores[a as usize])
            .expect("non-finite score")
            .then(a.cmp(&b))
    });

    let mut uf = UnionFind {
        parent: vec![0; total],
        size: vec![0; total],
        regions: vec![Vec::new(); total],
    };
    let mut active = vec![false; total];
    let mut neg_active = 0u64;
    let mut above_tau_count = 0u64;
    let mut dirty: Vec<u32> = Vec::new();
    let mut stamp = 0u32;

    // Geometry lookup: image index and width per flat pixel.
    let image_of = {
        let mut v = vec![0u32; total];
        for (i, &off) in offsets.iter().enumerate() {
            let end = if i + 1 < offsets.len() {
                offsets[i + 1]
            } else {
                total
            };
            for slot in &mut v[off..end] {
                *slot = i as u32;
            }
        }
        v
    };

    // Sweep points in descending-threshold order.
    let mut points: Vec<(f64, f64, f64, f64)> = Vec::new(); // (score, pro_paper, fpr, mean_recall)

    let mut cursor = 0usize;
    while cursor < total {
        let score = scores[order[cursor] as usize];
        stamp += 1;

        // Activate every pixel at this score.
        while cursor < total && scores[order[cursor] as usize] == score {
            let p = order[cursor];
            cursor += 1;
            let pi = p as usize;
            active[pi] = true;
            uf.parent[pi] = p;
            uf.size[pi] = 1;
            let rid = region_of[pi];
            if rid != 0 {
                let k = (rid - 1) as usize;
                regions[k].hit += 1;
                regions[k].comp_size += 1;
                uf.regions[pi] = vec![rid - 1];
                mark_dirty(&mut regions, &mut dirty, stamp, rid - 1);
            } else {
                uf.regions[pi].clear();
                neg_active += 1;
            }

            // Union with active 8-neighbors inside the same image.
            let img = image_of[pi] as usize;
            let off = offsets[img];
            let w = maps[img].cols();
            let h = maps[img].rows();
            let local = pi - off;
            let (r, c) = (local / w, local % w);
            for (dr, dc) in NEIGHBORS_8 {
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                    continue;
                }
                let q = off + nr as usize * w + nc as usize;
                if active[q] {
                    union(&mut uf, &mut regions, &mut dirty, stamp, p, q as u32);
                }
            }
        }

        // Re-evaluate the IoU indicator for regions affected in this batch.
        for &k in &dirty {
            let reg = &mut regions[k as usize];
            let iou =
                reg.hit as f64 / (reg.area + reg.comp_size - reg.hit) as f64;
            let now = iou >= tau;
            if now != reg.above_tau {
                reg.above_tau = now;
                if now {
                    above_tau_count += 1;
                } else {
                    above_tau_count -= 1;
                }
            }
        }
        dirty.clear();

        let pro_paper = above_tau_count as f64 / n_regions as f64;
        let mut recall_sum = 0.0;
        for reg in &regions {
            recall_sum += reg.hit as f64 / reg.area as f64;
        }
        let mean_recall = recall_sum / n_regions as f64;
        let fpr = neg_active as f64 / neg_total as f64;
        points.push((score, pro_paper, fpr, mean_recall));
    }

    Ok((
        integrate_over_scores(&points),
        integrate_over_fpr(&points, fpr_limit),
    ))
}

fn mark_dirty(regions: &mut [RegionStats], dirty: &mut Vec<u32>, stamp: u32, k: u32) {
    if regions[k as usize].dirty_stamp != stamp {
        regions[k as usize].dirty_stamp = stamp;
        dirty.push(k);
    }
}

fn union(
    uf: &mut UnionFind,
    regions: &mut [RegionStats],
    dirty: &mut Vec<u32>,
    stamp: u32,
    x: u32,
    y: u32,
) {
    let rx = uf.find(x);
    let ry = uf.find(y);
    if rx == ry {
        return;
    }
    // Larger component absorbs the smaller; ties break on lower index so
    // the merge order is deterministic.
    let (big, small) = if uf.size[rx as usize] > uf.size[ry as usize]
        || (uf.size[rx as usize] == uf.size[ry as usize] && rx < ry)
    {
        (rx, ry)
    } else {
        (ry, rx)
    };
    let z_big = uf.size[big as usize] as u64;
    let z_small = uf.size[small as usize] as u64;

    // Merge the sorted region lists; a region gaining a new component
    // grows its touching-component mass by the other side's size.
    let small_list = std::mem::take(&mut uf.regions[small as usize]);
    let big_list = std::mem::take(&mut uf.regions[big as usize]);
    let mut merged = Vec::with_capacity(big_list.len() + small_list.len());
    let (mut i, mut j) = (0, 0);
    while i < big_list.len() || j < small_list.len() {
        let pick_big = j >= small_list.len()
            || (i < big_list.len() && big_list[i] <= small_list[j]);
        if pick_big {
            let k = big_list[i];
            if j < small_list.len() && small_list[j] == k {
                j += 1; // region touches both sides: total mass unchanged
            } else {
                regions[k as usize].comp_size += z_small;
                mark_dirty(regions, dirty, stamp, k);
            }
            merged.push(k);
            i += 1;
        } else {
            let k = small_list[j];
            regions[k as usize].comp_size += z_big;
            mark_dirty(regions, dirty, stamp, k);
            merged.push(k);
            j += 1;
        }
    }

    uf.parent[small as usize] = big;
    uf.size[big as usize] += uf.size[small as usize];
    uf.regions[big as usize] = merged;
}

/// ∫ PRO(f) df over f ∈ [0,1]: PRO is constant on (s_{i-1}, s_i], and
/// zero above the largest score.
fn integrate_over_scores(points: &[(f64, f64, f64, f64)]) -> f64 {
    let mut integral = 0.0;
    let mut prev = 0.0;
    for &(score, pro, _, _) in points.iter().rev() {
        integral += (score - prev) * pro;
        prev = score;
    }
    integral
}

/// Right-continuous step integral of mean recall over FPR ∈ [0, limit],
/// normalized by the limit. Starts from the sentinel (0, 0).
fn integrate_over_fpr(points: &[(f64, f64, f64, f64)], limit: f64) -> f64 {
    let mut integral = 0.0;
    let mut x = 0.0;
    let mut v = 0.0;
    for &(_, _, fpr, recall) in points {
        if fpr > x {
            if x < limit {
                integral += (fpr.min(limit) - x) * v;
            }
            x = fpr;
        }
        v = recall; // at equal FPR the later (larger-recall) point wins
    }
    if x < limit {
        integral += (limit - x) * v;
    }
    integral / limit
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use crate::oracle::SplitMix64;
    use proptest::prelude::*;

    fn mask_from(rows: usize, cols: usize, ones: &[(usize, usize)]) -> BinaryMask {
        let mut m = BinaryMask::zeros(rows, cols);
        for &(r, c) in ones {
            m.set(r, c, true);
        }
        m
    }

    #[test]
    fn perfect_prediction_is_one() {
        // Map identical to the ground truth (scores in {0,1}): every
        // threshold in (0,1] binarizes to exactly the mask.
        let mask = mask_from(4, 4, &[(1, 1), (1, 2), (2, 1)]);
        let map = Tensor::from_fn(4, 4, |r, c| if mask.get(r, c) { 1.0 } else { 0.0 });
        let v = aupro_paper(&[map.clone()], &[mask.clone()], 0.3).unwrap();
        assert!((v - 1.0).abs() < 1e-12, "paper {v}");
        let s = aupro_standard(&[map], &[mask], 0.3).unwrap();
        assert!((s - 1.0).abs() < 1e-12, "standard {s}");
    }

    #[test]
    fn all_zero_prediction_is_zero() {
        let mask = mask_from(4, 4, &[(0, 0), (3, 3)]);
        let map = Tensor::zeros(4, 4);
        assert_eq!(aupro_paper(&[map.clone()], &[mask.clone()], 0.3).unwrap(), 0.0);
        assert_eq!(aupro_standard(&[map], &[mask], 0.3).unwrap(), 0.0);
    }

    #[test]
    fn no_region_is_an_error() {
        let map = Tensor::zeros(2, 2);
        let mask = BinaryMask::zeros(2, 2);
        assert!(aupro_paper(&[map], &[mask], 0.3).is_err());
    }

    #[test]
    fn out_of_range_map_is_rejected() {
        let mask = mask_from(2, 2, &[(0, 0)]);
        let map = Tensor::from_vec(2, 2, vec![0.5, 1.5, 0.0, 0.0]);
        assert!(matches!(
            aupro_paper(&[map], &[mask], 0.3),
            Err(MetricsError::OutOfRange { .. })
        ));
    }

    #[test]
    fn three_level_instance_matches_oracle() {
        // 6×6 with three score levels and two regions.
        let mut rng = SplitMix64::new(99);
        let map = Tensor::from_fn(6, 6, |_, _| (rng.next_u64() % 3) as f64 / 2.0);
        let mask = mask_from(6, 6, &[(0, 0), (0, 1), (4, 4), (4, 5), (5, 4)]);
        let fast = aupro_paper(&[map.clone()], &[mask.clone()], 0.3).unwrap();
        let slow = oracle::aupro_paper_bruteforce(&[map.clone()], &[mask.clone()], 0.3);
        assert!((fast - slow).abs() < 1e-12, "{fast} vs {slow}");
        let fast_s = aupro_standard(&[map.clone()], &[mask.clone()], 0.3).unwrap();
        let slow_s = oracle::aupro_standard_bruteforce(&[map], &[mask], 0.3);
        assert!((fast_s - slow_s).abs() < 1e-12, "{fast_s} vs {slow_s}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(120))]
        #[test]
        fn sweep_matches_bruteforce(seed in 0u64..100_000) {
            let mut rng = SplitMix64::new(seed);
            let n_maps = 1 + (rng.next_u64() % 3) as usize;
            let mut maps = Vec::new();
            let mut masks = Vec::new();
            let mut any_region = false;
            let mut any_neg = false;
            for _ in 0..n_maps {
                let h = 2 + (rng.next_u64() % 7) as usize;
                let w = 2 + (rng.next_u64() % 7) as usize;
                let levels = 1 + rng.next_u64() % 6;
                maps.push(Tensor::from_fn(h, w, |_, _| {
                    (rng.next_u64() % (levels + 1)) as f64 / levels as f64
                }));
                let mut mask = BinaryMask::zeros(h, w);
                for r in 0..h {
                    for c in 0..w {
                        if rng.next_u64() % 4 == 0 {
                            mask.set(r, c, true);
                            any_region = true;
                        } else {
                            any_neg = true;
                        }
                    }
                }
                masks.push(mask);
            }
            prop_assume!(any_region && any_neg);
            let (fast_p, fast_s) = aupro_both(&maps, &masks, 0.3, 0.3).unwrap();
            let slow_p = oracle::aupro_paper_bruteforce(&maps, &masks, 0.3);
            let slow_s = oracle::aupro_standard_bruteforce(&maps, &masks, 0.3);
            prop_assert!((fast_p - slow_p).abs() < 1e-9, "paper {} vs {}", fast_p, slow_p);
            prop_assert!((fast_s - slow_s).abs() < 1e-9, "standard {} vs {}", fast_s, slow_s);
        }
    }
}
