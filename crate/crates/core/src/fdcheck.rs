//! Finite-difference verification of analytic gradients.
//!
//! The analytic gradient of every trainable parameter entry is compared
//! against a central difference (L(θ+ε) − L(θ−ε)) / 2ε of the supplied
//! loss function. Above a size cap the entries are subsampled on a
//! seeded stride so the check stays fast yet reproducible.

use std::collections::HashMap;

use crate::error::{CoreError, Result};
use crate::params::ParamStore;
use crate::seed::derive_seed;
use crate::tensor::Tensor;

/// Entries checked exhaustively up to this count; beyond it a seeded
/// subsample of roughly this many entries is used.
pub const FD_SUBSAMPLE_CAP: usize = 10_000;

#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_err: f64,
    /// Parameter name and flat entry index of the worst entry.
    pub worst_entry: Option<(String, usize)>,
    pub entries_checked: usize,
}

/// Relative error with a guard denominator at the finite-difference noise
/// scale: central differences on an O(1) loss leave absolute dust around
/// 1e-12 per evaluation, so gradient entries far below 1e-6 are
/// indistinguishable from zero and must not dominate the relative reading.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Verifies `analytic` gradients of `loss_fn` at the current parameter
/// values. `loss_fn` must be a pure function of the store; this is
/// enforced by evaluating it twice at the base point.
pub fn finite_difference_check(
    params: &mut ParamStore,
    analytic: &HashMap<String, Tensor>,
    loss_fn: impl Fn(&ParamStore) -> f64,
    epsilon: f64,
    seed: u64,
) -> Result<FdReport> {
    assert!(
        (1e-6..=1e-3).contains(&epsilon),
        "epsilon {epsilon} outside [1e-6, 1e-3]"
    );

    let base_a = loss_fn(params);
    let base_b = loss_fn(params);
    if base_a.to_bits() != base_b.to_bits() {
        return Err(CoreError::NonDeterministic {
            a: base_a,
            b: base_b,
        });
    }

    let trainable: Vec<String> = params
        .iter()
        .filter(|p| p.trainable)
        .map(|p| p.name.clone())
        .collect();
    let total_entries: usize = trainable.iter().map(|n| params.value(n).len()).sum();

    // Stride sampling: exhaustive when small, every `stride`-th entry
    // (seeded phase) when large.
    let stride = total_entries.div_ceil(FD_SUBSAMPLE_CAP).max(1);
    let phase = (derive_seed(seed, "fdcheck.phase") % stride as u64) as usize;

    let mut max_rel_err: f64 = 0.0;
    let mut worst_entry = None;
    let mut entries_checked = 0usize;
    let mut flat_index = 0usize;

    for name in &trainable {
        let n = params.value(name).len();
        let grad = analytic.get(name).ok_or_else(|| {
            CoreError::UnknownParameter(format!("missing analytic gradient for {name}"))
        })?;
        assert_eq!(
            grad.len(),
            n,
            "analytic gradient length mismatch for {name}"
        );

        for idx in 0..n {
            if (flat_index + phase) % stride != 0 {
                flat_index += 1;
                continue;
            }
            flat_index += 1;

            let original = params.value(name).data()[idx];

            params.get_mut(name).unwrap().value.data_mut()[idx] = original + epsilon;
            let plus = loss_fn(params);
            params.get_mut(name).unwrap().value.data_mut()[idx] = original - epsilon;
            let minus = loss_fn(params);
            params.get_mut(name).unwrap().value.data_mut()[idx] = original;

            let numeric = (plus - minus) / (2.0 * epsilon);
            let rel = relative_error(grad.data()[idx], numeric);
            if rel > max_rel_err {
                max_rel_err = rel;
                worst_entry = Some((name.clone(), idx));
            }
            entries_checked += 1;
        }
    }

    Ok(FdReport {
        max_rel_err,
        worst_entry,
        entries_checked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_loss_matches_exactly() {
        // L = ½‖θ‖², analytic gradient θ.
        let mut store = ParamStore::new();
        store
            .insert("theta", Tensor::from_vec(2, 2, vec![0.5, -1.5, 2.0, 0.25]), true)
            .unwrap();
        let mut analytic = HashMap::new();
        analytic.insert("theta".to_string(), store.value("theta").clone());

        let report = finite_difference_check(
            &mut store,
            &analytic,
            |s| 0.5 * s.value("theta").data().iter().map(|v| v * v).sum::<f64>(),
            1e-5,
            0,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-8, "err {}", report.max_rel_err);
        assert_eq!(report.entries_checked, 4);
    }

    #[test]
    fn frozen_parameters_are_excluded() {
        let mut store = ParamStore::new();
        store
            .insert("train", Tensor::from_vec(1, 1, vec![1.0]), true)
            .unwrap();
        store
            .insert("frozen", Tensor::from_vec(1, 1, vec![1.0]), false)
            .unwrap();
        let mut analytic = HashMap::new();
        analytic.insert("train".to_string(), Tensor::from_vec(1, 1, vec![2.0]));
        // No analytic gradient supplied for the frozen one: it must not
        // be requested.
        let report = finite_difference_check(
            &mut store,
            &analytic,
            |s| s.value("train").data()[0].powi(2) + s.value("frozen").data()[0],
            1e-5,
            0,
        )
        .unwrap();
        assert_eq!(report.entries_checked, 1);
        assert!(report.max_rel_err < 1e-9);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let mut store = ParamStore::new();
        store
            .insert("theta", Tensor::from_vec(1, 1, vec![1.0]), true)
            .unwrap();
        let mut analytic = HashMap::new();
        // Claim gradient 3.0 where the true gradient is 2θ = 2.0.
        analytic.insert("theta".to_string(), Tensor::from_vec(1, 1, vec![3.0]));
        let report = finite_difference_check(
            &mut store,
            &analytic,
            |s| s.value("theta").data()[0].powi(2),
            1e-5,
            0,
        )
        .unwrap();
        assert!(report.max_rel_err > 0.3);
        assert_eq!(report.worst_entry, Some(("theta".to_string(), 0)));
    }

    #[test]
    fn nondeterministic_loss_is_rejected() {
        use std::cell::Cell;
        let mut store = ParamStore::new();
        store
            .insert("theta", Tensor::from_vec(1, 1, vec![1.0]), true)
            .unwrap();
        let analytic = HashMap::new();
        let counter = Cell::new(0.0f64);
        let err = finite_difference_check(
            &mut store,
            &analytic,
            |_| {
                counter.set(counter.get() + 1.0);
                counter.get()
            },
            1e-5,
            0,
        );
        assert!(matches!(err, Err(CoreError::NonDeterministic { .. })));
    }
}
