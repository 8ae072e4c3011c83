//! Structural invariants of the prompted encoder and the score pipeline:
//! prompt row accounting inside and outside the injected blocks, frozen
//! parameters surviving training bit-for-bit, prompt-gradient routing
//! (shared vs. per-branch), and score/fusion range guarantees.

use misdd_core::{Graph, Tensor};
use misdd_model::{
    build_galleries, detect, forward_branch, harmonic, BoundParams, EncoderConfig, MissingLevel,
    Model, ModalityIndicator, ModelConfig, PromptActivation, PromptConfig, TextTemplates,
    TrainConfig, TrainContext, TrainSample, BRANCH_3D, BRANCH_RGB,
};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn arch() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            image_size: 16,
            patch_size: 8,
            depth: 3,
            width: 16,
            heads: 2,
            mlp_ratio: 2,
            prompt_depth: 2,
            feature_layers: vec![1, 3],
        },
        prompts: PromptConfig {
            l_ccp: 3,
            l_msp: 2,
            l_map: 4,
        },
        n_ctx: 2,
        text_depth: 1,
    }
}

fn planes(seed: u64) -> [Tensor; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mk = || Tensor::from_fn(16, 16, |_, _| rng.gen_range(0.0..1.0));
    [mk(), mk(), mk()]
}

fn sample(class: &str, i: u64, ind: ModalityIndicator) -> TrainSample {
    TrainSample {
        id: format!("{class}_{i}"),
        class_name: class.into(),
        rgb: planes(3000 + i),
        td: planes(3100 + i),
        ind,
        included: true,
    }
}

fn ctx(arch: ModelConfig, level: MissingLevel) -> TrainContext {
    TrainContext {
        arch,
        act: PromptActivation::default(),
        level,
        templates: TextTemplates::default(),
        skip_missing_terms: false,
    }
}

/// Prompted blocks carry exactly l_ccp + l_msp + l_map extra rows; blocks
/// past the injection depth and all exported features are prompt-free.
#[test]
fn prompt_rows_are_injected_then_stripped() {
    let arch = arch();
    let model = Model::init(arch.clone(), 11).unwrap();
    let seq = arch.encoder.seq_len();

    let cases = [
        (PromptActivation { ccp: true, msp: true, map: true }, 9),
        (PromptActivation { ccp: true, msp: false, map: false }, 3),
        (PromptActivation { ccp: false, msp: true, map: false }, 2),
        (PromptActivation { ccp: false, msp: false, map: true }, 4),
        (PromptActivation::NONE, 0),
    ];
    for (act, extra) in cases {
        assert_eq!(act.total_len(&arch.prompts), extra);
        let mut g = Graph::new();
        let mut bound = BoundParams::new();
        let out = forward_branch(
            &mut g,
            &mut bound,
            &model.store,
            &arch,
            act,
            BRANCH_RGB,
            &planes(500),
        )
        .unwrap();
        assert_eq!(out.block_rows.len(), arch.encoder.depth);
        for (j, &rows) in out.block_rows.iter().enumerate() {
            let expected = if j < arch.encoder.prompt_depth { seq + extra } else { seq };
            assert_eq!(rows, expected, "block {j} with extra={extra}");
        }
        for &(layer, node) in &out.layer_tokens {
            assert_eq!(
                g.value(node).rows(),
                seq,
                "export at layer {layer} must be prompt-stripped"
            );
        }
        assert_eq!(out.layer_tokens.len(), arch.encoder.feature_layers.len());
        let pooled = g.value(out.pooled);
        assert_eq!(pooled.shape(), (1, arch.encoder.width));
        assert!((pooled.frobenius_norm() - 1.0).abs() < 1e-9);
    }
}

/// Training moves only Θ; every frozen parameter is bit-identical after.
#[test]
fn frozen_parameters_survive_training_bitwise() {
    let arch = arch();
    let mut model = Model::init(arch.clone(), 12).unwrap();
    model.prepare_prompt_training();
    let before: Vec<(String, Vec<u64>)> = model
        .store
        .iter()
        .filter(|p| !p.trainable)
        .map(|p| (p.name.clone(), p.value.data().iter().map(|v| v.to_bits()).collect()))
        .collect();
    let theta_before: Vec<Vec<u64>> = model
        .store
        .iter()
        .filter(|p| p.trainable)
        .map(|p| p.value.data().iter().map(|v| v.to_bits()).collect())
        .collect();

    let samples = vec![
        sample("weave", 0, ModalityIndicator::COMPLETE),
        sample("weave", 1, ModalityIndicator::COMPLETE),
        sample("weave", 2, ModalityIndicator::TD_MISSING),
    ];
    let cfg = TrainConfig { epochs: 2, batch_size: 2, ..TrainConfig::default() };
    misdd_model::run_training(&mut model.store, &ctx(arch, MissingLevel::Feature), &samples, &cfg, 9)
        .unwrap();

    let after: Vec<(String, Vec<u64>)> = model
        .store
        .iter()
        .filter(|p| !p.trainable)
        .map(|p| (p.name.clone(), p.value.data().iter().map(|v| v.to_bits()).collect()))
        .collect();
    assert_eq!(before, after, "frozen bytes must be unchanged");

    let theta_after: Vec<Vec<u64>> = model
        .store
        .iter()
        .filter(|p| p.trainable)
        .map(|p| p.value.data().iter().map(|v| v.to_bits()).collect())
        .collect();
    assert_ne!(theta_before, theta_after, "Θ must actually move");
}

/// The consistency prompt is one shared leaf: its gradient under a joint
/// two-branch loss equals the sum of the single-branch gradients.
#[test]
fn shared_prompt_gradient_accumulates_across_branches() {
    let arch = arch();
    let mut model = Model::init(arch.clone(), 13).unwrap();
    model.prepare_prompt_training();
    let act = PromptActivation::default();
    let rgb = planes(600);
    let td = planes(601);

    let grad_for = |branches: &[(&str, &[Tensor; 3])]| {
        let mut g = Graph::new();
        let mut bound = BoundParams::new();
        let mut loss = None;
        for (name, p) in branches {
            let out =
                forward_branch(&mut g, &mut bound, &model.store, &arch, act, name, p).unwrap();
            let s = g.sum_all(out.pooled);
            loss = Some(match loss {
                Some(acc) => g.add(acc, s),
                None => s,
            });
        }
        let grads = g.backward(loss.unwrap());
        bound.gradient_map(&grads)
    };

    let both = grad_for(&[(BRANCH_RGB, &rgb), (BRANCH_3D, &td)]);
    let only_rgb = grad_for(&[(BRANCH_RGB, &rgb)]);
    let only_td = grad_for(&[(BRANCH_3D, &td)]);

    let ccp_both = &both["prompts.ccp"];
    let ccp_r = &only_rgb["prompts.ccp"];
    let ccp_t = &only_td["prompts.ccp"];
    for i in 0..ccp_both.len() {
        let sum = ccp_r.data()[i] + ccp_t.data()[i];
        assert!(
            (ccp_both.data()[i] - sum).abs() < 1e-12,
            "ccp entry {i}: joint {} vs summed {}",
            ccp_both.data()[i],
            sum
        );
    }

    // MSP weights and MAP prompts are per-branch: a single-branch loss
    // must route no gradient to the other branch's parameters.
    assert!(only_rgb.keys().all(|k| !k.contains(".3d.")));
    assert!(only_td.keys().all(|k| !k.contains(".rgb.")));
    assert!(only_rgb.contains_key("prompts.msp.rgb.w"));
    assert!(only_rgb.contains_key("prompts.map.rgb.0"));
    assert!(only_td.contains_key("prompts.map.3d.1"));
}

/// Detection stays in range and pixel maps match the input resolution for
/// every indicator/level combination, dummy branches included.
#[test]
fn detection_ranges_hold_across_missing_states() {
    let arch = arch();
    let model = Model::init(arch.clone(), 14).unwrap();
    for level in [MissingLevel::Input, MissingLevel::Feature] {
        let c = ctx(arch.clone(), level);
        let train = vec![
            sample("weave", 0, ModalityIndicator::COMPLETE),
            sample("weave", 1, ModalityIndicator::COMPLETE),
        ];
        let galleries = build_galleries(&model.store, &c, &train).unwrap();
        for (k, ind) in [
            ModalityIndicator::COMPLETE,
            ModalityIndicator::RGB_MISSING,
            ModalityIndicator::TD_MISSING,
        ]
        .into_iter()
        .enumerate()
        {
            let mut probe = sample("weave", 40 + k as u64, ind);
            if level == MissingLevel::Input {
                let zero = || Tensor::zeros(16, 16);
                if !ind.rgb {
                    probe.rgb = [zero(), zero(), zero()];
                }
                if !ind.td {
                    probe.td = [zero(), zero(), zero()];
                }
            }
            for bank in [false, true] {
                let out = detect(&model.store, &c, &galleries, &probe, bank).unwrap();
                assert!((0.0..=1.0).contains(&out.s_im));
                assert_eq!(out.s_px.shape(), (16, 16));
                assert!(out.s_px.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }
}

/// The fusion identities the score pipeline relies on, exact where the
/// arithmetic is exact.
#[test]
fn harmonic_identities_are_exact() {
    for a in [0.0, 0.25, 0.5, 1.0] {
        assert_eq!(harmonic(a, a), a, "H({a},{a})");
    }
    for b in [0.0, 0.1, 0.9, 1.0] {
        assert_eq!(harmonic(0.0, b), 0.0);
        assert_eq!(harmonic(b, 0.0), 0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for _ in 0..500 {
        let a: f64 = rng.gen_range(0.0..=1.0);
        let b: f64 = rng.gen_range(0.0..=1.0);
        let h = harmonic(a, b);
        assert!((0.0..=1.0).contains(&h));
        assert!(h <= a.max(b) + 1e-15);
        assert!(h <= 2.0 * a.min(b) + 1e-15);
        assert!((harmonic(a, b) - harmonic(b, a)).abs() < 1e-15, "symmetry");
    }
}
