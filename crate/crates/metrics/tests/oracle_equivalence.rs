//! Fast metric implementations vs brute-force oracles on a large batch
//! of randomized small instances. The oracles recompute everything per
//! threshold with independent machinery (pairwise counting, flood
//! fills), so agreement here pins down the sweep implementations.

use misdd_core::Tensor;
use misdd_metrics::oracle::{
    self, aupro_paper_bruteforce, aupro_standard_bruteforce, SplitMix64,
};
use misdd_metrics::{aupro_both, auroc, BinaryMask};

const TOL: f64 = 1e-9;

#[test]
fn auroc_matches_pairwise_oracle_on_random_instances() {
    let mut rng = SplitMix64::new(0x0a11_5eed);
    let mut checked = 0;
    for _ in 0..1000 {
        let n = 2 + (rng.next_u64() % 40) as usize;
        // Quantized scores force plenty of ties.
        let levels = 1 + rng.next_u64() % 8;
        let scores: Vec<f64> = (0..n)
            .map(|_| (rng.next_u64() % (levels + 1)) as f64 / levels as f64)
            .collect();
        let labels: Vec<u8> = (0..n).map(|_| (rng.next_u64() % 2) as u8).collect();
        if labels.iter().all(|&l| l == 0) || labels.iter().all(|&l| l == 1) {
            continue;
        }
        let fast = auroc(&scores, &labels).unwrap();
        let slow = oracle::auroc_pairwise(&scores, &labels);
        assert!(
            (fast - slow).abs() < 1e-12,
            "auroc {fast} vs oracle {slow} on {scores:?} {labels:?}"
        );
        checked += 1;
    }
    assert!(checked > 800, "only {checked} usable instances");
}

#[test]
fn aupro_matches_bruteforce_oracles_on_random_instances() {
    let mut rng = SplitMix64::new(0x0b5e_55ed);
    let mut checked = 0;
    for round in 0..1000 {
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
        if !(any_region && any_neg) {
            continue;
        }
        // Exercise non-default parameters on a slice of the rounds.
        let tau = if round % 3 == 0 { 0.5 } else { 0.3 };
        let limit = if round % 5 == 0 { 0.1 } else { 0.3 };
        let (fast_p, fast_s) = aupro_both(&maps, &masks, tau, limit).unwrap();
        let slow_p = aupro_paper_bruteforce(&maps, &masks, tau);
        let slow_s = aupro_standard_bruteforce(&maps, &masks, limit);
        assert!(
            (fast_p - slow_p).abs() < TOL,
            "round {round}: paper {fast_p} vs oracle {slow_p}"
        );
        assert!(
            (fast_s - slow_s).abs() < TOL,
            "round {round}: standard {fast_s} vs oracle {slow_s}"
        );
        checked += 1;
    }
    assert!(checked > 900, "only {checked} usable instances");
}
