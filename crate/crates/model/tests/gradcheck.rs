//! End-to-end gradient verification: the tape's analytic gradients for the
//! full contrastive objective — through the encoder, all three prompt
//! families, the cascade, and the text suffix — are compared entry by
//! entry against central finite differences on a two-sample problem.

use std::collections::HashMap;

use misdd_core::{finite_difference_check, Graph, ParamStore, Tensor};
use misdd_model::{
    build_semantic_duality, contrastive_nodes, forward_branch, BoundParams, BranchOutput,
    EncoderConfig, MissingLevel, Model, ModelConfig, PromptActivation, PromptConfig,
    TextTemplates, BRANCH_3D, BRANCH_RGB,
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
            l_ccp: 2,
            l_msp: 2,
            l_map: 2,
        },
        n_ctx: 4,
        text_depth: 2,
    }
}

fn planes(seed: u64) -> [Tensor; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mk = || Tensor::from_fn(16, 16, |_, _| rng.gen_range(0.0..1.0));
    [mk(), mk(), mk()]
}

struct Problem {
    arch: ModelConfig,
    act: PromptActivation,
    templates: TextTemplates,
    samples: Vec<([Tensor; 3], [Tensor; 3], bool, bool)>,
}

impl Problem {
    /// Builds the batch loss graph and returns (graph, bound, loss node).
    fn build(&self, store: &ParamStore) -> (Graph, BoundParams, misdd_core::NodeId) {
        let mut g = Graph::new();
        let mut bound = BoundParams::new();
        let duality = build_semantic_duality(
            &mut g,
            &mut bound,
            store,
            &self.arch,
            &self.templates,
            "weave",
            self.arch.n_ctx,
        )
        .unwrap();
        let mut totals = Vec::new();
        for (rgb, td, rgb_present, td_present) in &self.samples {
            let mut branch = |g: &mut Graph,
                              bound: &mut BoundParams,
                              name: &str,
                              p: &[Tensor; 3],
                              present: bool| {
                if !present {
                    // Feature-level dummy: the encoder is skipped entirely.
                    return None;
                }
                let out: BranchOutput =
                    forward_branch(g, bound, store, &self.arch, self.act, name, p).unwrap();
                Some(out.pooled)
            };
            let f_rgb = branch(&mut g, &mut bound, BRANCH_RGB, rgb, *rgb_present);
            let f_3d = branch(&mut g, &mut bound, BRANCH_3D, td, *td_present);
            let nodes =
                contrastive_nodes(&mut g, f_rgb, f_3d, duality.normal, duality.abnormal).unwrap();
            totals.push(nodes.total);
        }
        let mut sum = totals[0];
        for &t in &totals[1..] {
            sum = g.add(sum, t);
        }
        let loss = g.scale(sum, 1.0 / self.samples.len() as f64);
        (g, bound, loss)
    }

    fn loss_value(&self, store: &ParamStore) -> f64 {
        let (g, _, loss) = self.build(store);
        g.scalar(loss)
    }
}

#[test]
fn full_objective_gradients_match_finite_differences() {
    let arch = arch();
    let mut model = Model::init(arch.clone(), 4242).unwrap();
    model.prepare_prompt_training();

    let problem = Problem {
        arch,
        act: PromptActivation::default(),
        templates: TextTemplates::default(),
        samples: vec![
            (planes(1), planes(2), true, true),
            // The second sample runs with the rgb branch feature-missing,
            // so the dummy-compensation path is inside the checked graph.
            (planes(3), planes(4), false, true),
        ],
    };

    let (g, bound, loss) = problem.build(&model.store);
    let grads = g.backward(loss);
    let analytic: HashMap<String, Tensor> = bound.gradient_map(&grads);

    let theta: Vec<String> = model
        .store
        .iter()
        .filter(|p| p.trainable)
        .map(|p| p.name.clone())
        .collect();
    assert!(!theta.is_empty());
    for name in &theta {
        let grad = analytic
            .get(name)
            .unwrap_or_else(|| panic!("`{name}` received no gradient"));
        assert!(
            grad.data().iter().any(|&v| v != 0.0),
            "`{name}` has an all-zero gradient"
        );
    }
    // The learnable suffix must feel the abnormal term.
    assert!(analytic.contains_key("text.suffix"));

    let total_theta: usize = theta.iter().map(|n| model.store.value(n).len()).sum();
    let report = finite_difference_check(
        &mut model.store,
        &analytic,
        |store| problem.loss_value(store),
        1e-4,
        7,
    )
    .unwrap();

    println!(
        "finite-difference sweep: {} entries, max relative error {:.3e}",
        report.entries_checked, report.max_rel_err
    );
    assert_eq!(
        report.entries_checked, total_theta,
        "the check must be exhaustive at this scale"
    );
    assert!(
        report.max_rel_err < 1e-4,
        "max relative error {} at {:?}",
        report.max_rel_err,
        report.worst_entry
    );
}

#[test]
fn frozen_parameters_receive_no_updates_path() {
    // With prompt training prepared, nothing outside Θ may be trainable,
    // so the finite-difference sweep above is also a complete census of
    // what the optimizer may touch.
    let arch = arch();
    let mut model = Model::init(arch, 77).unwrap();
    model.prepare_prompt_training();
    for p in model.store.iter() {
        let in_theta = p.name.starts_with("prompts.") || p.name == "text.suffix";
        assert_eq!(p.trainable, in_theta, "{}", p.name);
    }
}
