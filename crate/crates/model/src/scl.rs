//! Symmetric contrastive training of the prompts and text suffix.
//!
//! Per sample, with unit-norm pooled features `F` and the class's text
//! pair `(Tⁿ, Tᵃⁿ)`, the objective is
//!
//! ```text
//! L = ‖F_rgb − Tⁿ‖ + ‖F_3d − Tⁿ‖ − ‖F_rgb − Tᵃⁿ‖ − ‖F_3d − Tᵃⁿ‖
//! ```
//!
//! Each distance lies in `[0, 2]` for unit vectors, so the total is
//! bounded in `[−4, 4]`. Missing-modality branches still contribute their
//! terms on the dummy features by default (the prompts learn to
//! compensate); `skip_missing_terms` drops them instead.

use misdd_core::{cosine_lr, derive_seed, Graph, NodeId, ParamStore, Sgd, SgdConfig, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, PromptActivation, TrainConfig};
use crate::encoder::{forward_branch, BRANCH_3D, BRANCH_RGB};
use crate::missing::{MissingLevel, ModalityIndicator};
use crate::model::BoundParams;
use crate::text::{build_semantic_duality, TextTemplates};
use crate::{ModelError, Result};

/// How far an embedding's norm may drift from 1 before it is rejected.
pub const UNIT_NORM_TOL: f64 = 1e-4;

/// Per-term view of one contrastive evaluation. Dropped terms are zero.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_rgb_n: f64,
    pub l_3d_n: f64,
    pub l_rgb_an: f64,
    pub l_3d_an: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn add(&mut self, other: &LossBreakdown) {
        self.l_rgb_n += other.l_rgb_n;
        self.l_3d_n += other.l_3d_n;
        self.l_rgb_an += other.l_rgb_an;
        self.l_3d_an += other.l_3d_an;
        self.total += other.total;
    }

    fn scale(&mut self, s: f64) {
        self.l_rgb_n *= s;
        self.l_3d_n *= s;
        self.l_rgb_an *= s;
        self.l_3d_an *= s;
        self.total *= s;
    }
}

fn check_unit_or_zero(v: &Tensor, context: &str, allow_zero: bool) -> Result<f64> {
    let norm = v.frobenius_norm();
    if allow_zero && norm == 0.0 {
        return Ok(0.0);
    }
    if (norm - 1.0).abs() > UNIT_NORM_TOL {
        return Err(ModelError::NormViolation {
            context: context.into(),
            norm,
        });
    }
    Ok(norm)
}

fn euclidean(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Pure-tensor contrastive loss. Visual features must be unit-norm — or
/// exactly zero, the feature-level dummy — within `UNIT_NORM_TOL`; text
/// embeddings must be unit-norm. `None` features have their terms dropped
/// (branch excluded by ablation or `skip_missing_terms`).
pub fn contrastive_loss(
    f_rgb: Option<&Tensor>,
    f_3d: Option<&Tensor>,
    normal: &Tensor,
    abnormal: &Tensor,
) -> Result<LossBreakdown> {
    if f_rgb.is_none() && f_3d.is_none() {
        return Err(ModelError::Missing {
            detail: "contrastive loss needs at least one visual feature".into(),
        });
    }
    check_unit_or_zero(normal, "normal text embedding", false)?;
    check_unit_or_zero(abnormal, "abnormal text embedding", false)?;
    let mut out = LossBreakdown::default();
    if let Some(f) = f_rgb {
        check_unit_or_zero(f, "rgb pooled feature", true)?;
        out.l_rgb_n = euclidean(f, normal);
        out.l_rgb_an = euclidean(f, abnormal);
    }
    if let Some(f) = f_3d {
        check_unit_or_zero(f, "3d pooled feature", true)?;
        out.l_3d_n = euclidean(f, normal);
        out.l_3d_an = euclidean(f, abnormal);
    }
    out.total = out.l_rgb_n + out.l_3d_n - out.l_rgb_an - out.l_3d_an;
    Ok(out)
}

/// `‖a − b‖₂` as a 1×1 graph node.
fn distance_node(g: &mut Graph, a: NodeId, b: NodeId) -> NodeId {
    let diff = g.sub(a, b);
    let sq = g.mul_elem(diff, diff);
    let total = g.sum_all(sq);
    g.sqrt(total)
}

/// The graph-side sample loss; `terms` mirrors [`LossBreakdown`] order
/// (rgb_n, 3d_n, rgb_an, 3d_an) with `None` for dropped terms.
pub struct SampleLossNodes {
    pub total: NodeId,
    pub terms: [Option<NodeId>; 4],
}

pub fn contrastive_nodes(
    g: &mut Graph,
    f_rgb: Option<NodeId>,
    f_3d: Option<NodeId>,
    normal: NodeId,
    abnormal: NodeId,
) -> Result<SampleLossNodes> {
    if f_rgb.is_none() && f_3d.is_none() {
        return Err(ModelError::Missing {
            detail: "contrastive loss needs at least one visual feature".into(),
        });
    }
    let rgb_n = f_rgb.map(|f| distance_node(g, f, normal));
    let td_n = f_3d.map(|f| distance_node(g, f, normal));
    let rgb_an = f_rgb.map(|f| distance_node(g, f, abnormal));
    let td_an = f_3d.map(|f| distance_node(g, f, abnormal));

    let mut total: Option<NodeId> = None;
    for t in [rgb_n, td_n].into_iter().flatten() {
        total = Some(match total {
            Some(acc) => g.add(acc, t),
            None => t,
        });
    }
    for t in [rgb_an, td_an].into_iter().flatten() {
        total = Some(match total {
            Some(acc) => g.sub(acc, t),
            None => g.scale(t, -1.0),
        });
    }
    Ok(SampleLossNodes {
        total: total.expect("at least one term exists"),
        terms: [rgb_n, td_n, rgb_an, td_an],
    })
}

/// One training sample, input-level dropout already applied to its planes.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub id: String,
    pub class_name: String,
    pub rgb: [Tensor; 3],
    pub td: [Tensor; 3],
    pub ind: ModalityIndicator,
    /// Few-shot exclusion: `false` keeps the sample out of loss and
    /// galleries entirely.
    pub included: bool,
}

/// Static context shared by training and evaluation forwards.
#[derive(Debug, Clone)]
pub struct TrainContext {
    pub arch: ModelConfig,
    pub act: PromptActivation,
    pub level: MissingLevel,
    pub templates: TextTemplates,
    pub skip_missing_terms: bool,
}

/// Marks which training samples stay complete in a K-shot run; everything
/// else is excluded from loss and galleries. Selection is per class with a
/// seeded draw.
pub fn few_shot_included(samples: &[TrainSample], k: usize, seed: u64) -> Result<Vec<bool>> {
    if k == 0 {
        return Err(ModelError::Config {
            field: "k_shot".into(),
            reason: "K must be at least 1".into(),
        });
    }
    let mut classes: Vec<&str> = Vec::new();
    for s in samples {
        if !classes.contains(&s.class_name.as_str()) {
            classes.push(&s.class_name);
        }
    }
    let mut included = vec![false; samples.len()];
    for class in classes {
        let idx: Vec<usize> = samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.class_name == class)
            .map(|(i, _)| i)
            .collect();
        if k > idx.len() {
            return Err(ModelError::Config {
                field: "k_shot".into(),
                reason: format!(
                    "K={k} exceeds the {} training samples of class `{class}`",
                    idx.len()
                ),
            });
        }
        let mut order = idx;
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("fewshot.{class}")));
        order.shuffle(&mut rng);
        for &i in order.iter().take(k) {
            included[i] = true;
        }
    }
    Ok(included)
}

struct BranchPlan {
    node: Option<NodeId>,
    value_is_dummy: bool,
}

/// Pooled-feature node for one branch of one sample, honoring the missing
/// level and the skip policy.
fn branch_feature(
    g: &mut Graph,
    bound: &mut BoundParams,
    store: &ParamStore,
    ctx: &TrainContext,
    branch: &str,
    planes: &[Tensor; 3],
    present: bool,
) -> Result<BranchPlan> {
    if !present && ctx.skip_missing_terms {
        return Ok(BranchPlan {
            node: None,
            value_is_dummy: true,
        });
    }
    if !present && ctx.level == MissingLevel::Feature {
        // Feature-level dropout: the encoder never runs; the pooled
        // feature is the zero vector.
        let d = ctx.arch.encoder.width;
        let node = g.leaf(Tensor::zeros(1, d), false);
        return Ok(BranchPlan {
            node: Some(node),
            value_is_dummy: true,
        });
    }
    // Input-level dummies were zeroed upstream; encode whatever is there.
    let out = forward_branch(g, bound, store, &ctx.arch, ctx.act, branch, planes)?;
    Ok(BranchPlan {
        node: Some(out.pooled),
        value_is_dummy: !present,
    })
}

/// Runs the prompt-training loop. Only Θ = {CCP, MSP weights, MAP, text
/// suffix} may be trainable when this is called. Returns one mean
/// [`LossBreakdown`] per epoch.
pub fn run_training(
    store: &mut ParamStore,
    ctx: &TrainContext,
    samples: &[TrainSample],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Vec<LossBreakdown>> {
    cfg.validate()?;
    ctx.arch.validate()?;
    for p in store.iter() {
        let in_theta = p.name.starts_with("prompts.") || p.name == "text.suffix";
        if p.trainable && !in_theta {
            return Err(ModelError::Config {
                field: "trainability".into(),
                reason: format!(
                    "`{}` is trainable; only prompts and the text suffix may train",
                    p.name
                ),
            });
        }
    }
    let included: Vec<usize> = samples
        .iter()
        .enumerate()
        .filter(|(_, s)| s.included)
        .map(|(i, _)| i)
        .collect();
    if included.is_empty() {
        return Err(ModelError::Config {
            field: "samples".into(),
            reason: "no training samples remain after exclusions".into(),
        });
    }

    let sgd_cfg = SgdConfig {
        lr: cfg.lr,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
        lr_min: cfg.lr_min,
    };
    let mut sgd = Sgd::new();
    let mut epochs = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(cfg.lr, cfg.lr_min, epoch, cfg.epochs);
        let mut order = included.clone();
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("epoch.{epoch}.shuffle")));
        order.shuffle(&mut rng);

        let mut epoch_sum = LossBreakdown::default();
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            store.zero_grads();
            let mut g = Graph::new();
            let mut bound = BoundParams::new();
            let mut text_pairs: Vec<(String, NodeId, NodeId)> = Vec::new();
            let mut sample_totals = Vec::with_capacity(chunk.len());
            let mut batch_breakdown = LossBreakdown::default();

            for &i in chunk {
                let s = &samples[i];
                let (t_n, t_an) = match text_pairs.iter().find(|(c, _, _)| *c == s.class_name) {
                    Some((_, n, a)) => (*n, *a),
                    None => {
                        let duality = build_semantic_duality(
                            &mut g,
                            &mut bound,
                            store,
                            &ctx.arch,
                            &ctx.templates,
                            &s.class_name,
                            ctx.arch.n_ctx,
                        )?;
                        text_pairs.push((s.class_name.clone(), duality.normal, duality.abnormal));
                        (duality.normal, duality.abnormal)
                    }
                };

                let rgb = branch_feature(&mut g, &mut bound, store, ctx, BRANCH_RGB, &s.rgb, s.ind.rgb)?;
                let td = branch_feature(&mut g, &mut bound, store, ctx, BRANCH_3D, &s.td, s.ind.td)?;

                for (plan, context) in [(&rgb, "rgb pooled feature"), (&td, "3d pooled feature")] {
                    if let Some(node) = plan.node {
                        let value = g.value(node);
                        check_unit_or_zero(value, context, plan.value_is_dummy)
                            .map_err(|e| match e {
                                ModelError::NormViolation { context, norm } => {
                                    ModelError::NormViolation {
                                        context: format!("{context} (sample {})", s.id),
                                        norm,
                                    }
                                }
                                other => other,
                            })?;
                    }
                }

                let nodes = contrastive_nodes(&mut g, rgb.node, td.node, t_n, t_an)?;
                let term_value = |t: Option<NodeId>| t.map_or(0.0, |t| g.scalar(t));
                batch_breakdown.add(&LossBreakdown {
                    l_rgb_n: term_value(nodes.terms[0]),
                    l_3d_n: term_value(nodes.terms[1]),
                    l_rgb_an: term_value(nodes.terms[2]),
                    l_3d_an: term_value(nodes.terms[3]),
                    total: g.scalar(nodes.total),
                });
                sample_totals.push(nodes.total);
            }

            let mut total = sample_totals[0];
            for &t in &sample_totals[1..] {
                total = g.add(total, t);
            }
            let batch_loss = g.scale(total, 1.0 / sample_totals.len() as f64);
            let value = g.scalar(batch_loss);
            if !value.is_finite() {
                return Err(ModelError::NonFinite {
                    context: "contrastive loss".into(),
                    epoch,
                    step,
                });
            }

            let grads = g.backward(batch_loss);
            bound.accumulate(&grads, store)?;
            sgd.step(store, &sgd_cfg, lr);
            epoch_sum.add(&batch_breakdown);
        }
        epoch_sum.scale(1.0 / included.len() as f64);
        epochs.push(epoch_sum);
    }
    Ok(epochs)
}
