//! Brute-force reference implementations used to validate the fast
//! metric code, plus a tiny deterministic RNG for test data.
//!
//! Everything here is deliberately written with different machinery
//! than the production paths: pairwise counting instead of a sort
//! sweep, per-threshold flood fills instead of an incremental
//! union-find. Quadratic or worse is fine — these only run in tests
//! and the acceptance harness on small instances.

use misdd_core::Tensor;

use crate::regions::BinaryMask;

/// SplitMix64: tiny, seedable, and stable across platforms.
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9e3779b97f4a7c15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1).
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }
}

/// O(P·N) AUROC: fraction of (positive, negative) pairs ranked
/// correctly, ties counting half.
pub fn auroc_pairwise(scores: &[f64], labels: &[u8]) -> f64 {
    let mut wins = 0.0f64;
    let mut pairs = 0.0f64;
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] == 0 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Independent 8-connected component labelling by flood fill.
/// Returns one pixel list per component, in first-pixel scan order.
pub fn flood_fill_components(mask: &BinaryMask) -> Vec<Vec<(usize, usize)>> {
    let (h, w) = (mask.height(), mask.width());
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    for sr in 0..h {
        for sc in 0..w {
            if !mask.get(sr, sc) || seen[sr * w + sc] {
                continue;
            }
            let mut comp = Vec::new();
            let mut stack = vec![(sr, sc)];
            seen[sr * w + sc] = true;
            while let Some((r, c)) = stack.pop() {
                comp.push((r, c));
                for dr in -1isize..=1 {
                    for dc in -1isize..=1 {
                        if dr == 0 && dc == 0 {
                            continue;
                        }
                        let (nr, nc) = (r as isize + dr, c as isize + dc);
                        if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                            continue;
                        }
                        let (nr, nc) = (nr as usize, nc as usize);
                        if mask.get(nr, nc) && !seen[nr * w + nc] {
                            seen[nr * w + nc] = true;
                            stack.push((nr, nc));
                        }
                    }
                }
            }
            comp.sort_unstable();
            out.push(comp);
        }
    }
    out
}

fn ascending_unique_scores(maps: &[Tensor]) -> Vec<f64> {
    let mut scores: Vec<f64> = maps
        .iter()
        .flat_map(|m| m.data().iter().copied())
        .collect();
    scores.sort_by(|a, b| a.partial_cmp(b).unwrap());
    scores.dedup();
    scores
}

struct ThresholdStats {
    /// Per region: (|R_k ∩ P|, |union of components touching R_k|).
    per_region: Vec<(u64, u64)>,
    fpr: f64,
}

/// Recompute everything at a single threshold from scratch.
fn stats_at(maps: &[Tensor], gt_masks: &[BinaryMask], threshold: f64) -> ThresholdStats {
    let mut per_region = Vec::new();
    let mut false_pos = 0u64;
    let mut neg_total = 0u64;
    for (map, mask) in maps.iter().zip(gt_masks) {
        let (h, w) = (map.rows(), map.cols());
        let mut pred = BinaryMask::zeros(h, w);
        for r in 0..h {
            for c in 0..w {
                if map.get(r, c) >= threshold {
                    pred.set(r, c, true);
                }
                if !mask.get(r, c) {
                    neg_total += 1;
                    if map.get(r, c) >= threshold {
                        false_pos += 1;
                    }
                }
            }
        }
        let pred_comps = flood_fill_components(&pred);
        for region in flood_fill_components(mask) {
            let in_region = |p: &(usize, usize)| region.binary_search(p).is_ok();
            let mut hit = 0u64;
            for p in &region {
                if pred.get(p.0, p.1) {
                    hit += 1;
                }
            }
            let mut touching_size = 0u64;
            for comp in &pred_comps {
                if comp.iter().any(in_region) {
                    touching_size += comp.len() as u64;
                }
            }
            per_region.push((hit, touching_size));
        }
    }
    ThresholdStats {
        per_region,
        fpr: false_pos as f64 / neg_total as f64,
    }
}

fn region_areas(gt_masks: &[BinaryMask]) -> Vec<u64> {
    gt_masks
        .iter()
        .flat_map(|m| flood_fill_components(m).into_iter().map(|c| c.len() as u64))
        .collect()
}

/// Reference for [`crate::aupro::aupro_paper`]: one flood fill per
/// distinct score value.
pub fn aupro_paper_bruteforce(maps: &[Tensor], gt_masks: &[BinaryMask], tau: f64) -> f64 {
    let areas = region_areas(gt_masks);
    let mut integral = 0.0;
    let mut prev = 0.0;
    for s in ascending_unique_scores(maps) {
        let stats = stats_at(maps, gt_masks, s);
        let mut above = 0usize;
        for (k, &(hit, touching)) in stats.per_region.iter().enumerate() {
            let iou = hit as f64 / (areas[k] + touching - hit) as f64;
            if iou >= tau {
                above += 1;
            }
        }
        let pro = above as f64 / areas.len() as f64;
        integral += (s - prev) * pro;
        prev = s;
    }
    integral
}

/// Reference for [`crate::aupro::aupro_standard`]: per-threshold
/// recompute, then right-continuous step integration from (0, 0).
pub fn aupro_standard_bruteforce(maps: &[Tensor], gt_masks: &[BinaryMask], fpr_limit: f64) -> f64 {
    let areas = region_areas(gt_masks);
    // Descending thresholds give non-decreasing FPR.
    let mut curve: Vec<(f64, f64)> = Vec::new();
    for s in ascending_unique_scores(maps).into_iter().rev() {
        let stats = stats_at(maps, gt_masks, s);
        let recall = stats
            .per_region
            .iter()
            .enumerate()
            .map(|(k, &(hit, _))| hit as f64 / areas[k] as f64)
            .sum::<f64>()
            / areas.len() as f64;
        curve.push((stats.fpr, recall));
    }
    let mut integral = 0.0;
    let mut x = 0.0;
    let mut v = 0.0;
    for (fpr, recall) in curve {
        if fpr > x {
            if x < fpr_limit {
                integral += (fpr.min(fpr_limit) - x) * v;
            }
            x = fpr;
        }
        v = recall;
    }
    if x < fpr_limit {
        integral += (fpr_limit - x) * v;
    }
    integral / fpr_limit
}
