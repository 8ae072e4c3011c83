//! Dual-branch vision transformer with prompt injection sites.
//!
//! Both branches share one architecture but own separate parameters; the
//! depth branch consumes a single-channel depth map replicated to three
//! channels. Blocks are pre-norm residual: `x + attn(ln1(x))` followed by
//! `x + mlp(ln2(x))`, where the attention uses one joint value/query/key
//! projection per head. Prompts are refined and prepended at blocks
//! `0..prompt_depth` and stripped again right after each block, so exported
//! features never contain prompt rows.

use misdd_core::{cosine_lr, derive_seed, Graph, NodeId, ParamStore, Sgd, SgdConfig, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{EncoderConfig, ModelConfig, PromptActivation, TrainConfig};
use crate::model::BoundParams;
use crate::prompts::{generate_msp, refine_prompt, value_of, AttnSite};
use crate::{ModelError, Result};

pub const BRANCH_RGB: &str = "rgb";
pub const BRANCH_3D: &str = "3d";
pub const BRANCHES: [&str; 2] = [BRANCH_RGB, BRANCH_3D];

pub const LN_EPS: f64 = 1e-5;
pub const UNIT_EPS: f64 = 1e-12;
/// Fraction of patch tokens masked during warmup reconstruction.
pub const WARMUP_MASK_RATIO: f64 = 0.4;

/// Splits three image planes into flattened per-patch rows
/// (channel-major: all of channel 0's pixels, then 1, then 2).
pub fn extract_patches(planes: &[Tensor; 3], patch: usize) -> Tensor {
    let h = planes[0].rows();
    let w = planes[0].cols();
    assert!(h % patch == 0 && w % patch == 0, "image {h}x{w} not divisible by patch {patch}");
    let grid_y = h / patch;
    let grid_x = w / patch;
    let mut rows = Vec::with_capacity(grid_y * grid_x * 3 * patch * patch);
    for gy in 0..grid_y {
        for gx in 0..grid_x {
            for plane in planes {
                for py in 0..patch {
                    for px in 0..patch {
                        rows.push(plane.get(gy * patch + py, gx * patch + px));
                    }
                }
            }
        }
    }
    Tensor::from_vec(grid_y * grid_x, 3 * patch * patch, rows)
}

/// Replicates a single-channel depth map into the three-plane layout the
/// patch embedding expects.
pub fn replicate_depth(depth: &Tensor) -> [Tensor; 3] {
    [depth.clone(), depth.clone(), depth.clone()]
}

/// Node ids of one block's parameters.
#[derive(Debug, Clone, Copy)]
pub struct BlockNodes {
    pub ln1_g: NodeId,
    pub ln1_b: NodeId,
    pub site: AttnSite,
    pub ln2_g: NodeId,
    pub ln2_b: NodeId,
    pub fc1_w: NodeId,
    pub fc1_b: NodeId,
    pub fc2_w: NodeId,
    pub fc2_b: NodeId,
}

pub fn bind_block(
    g: &mut Graph,
    bound: &mut BoundParams,
    store: &ParamStore,
    prefix: &str,
    heads: usize,
    head_dim: usize,
) -> BlockNodes {
    let mut n = |suffix: &str| bound.node(g, store, &format!("{prefix}.{suffix}"));
    BlockNodes {
        ln1_g: n("ln1.g"),
        ln1_b: n("ln1.b"),
        site: AttnSite {
            vw: n("attn.v.w"),
            vb: n("attn.v.b"),
            ow: n("attn.out.w"),
            ob: n("attn.out.b"),
            heads,
            head_dim,
        },
        ln2_g: n("ln2.g"),
        ln2_b: n("ln2.b"),
        fc1_w: n("mlp.fc1.w"),
        fc1_b: n("mlp.fc1.b"),
        fc2_w: n("mlp.fc2.w"),
        fc2_b: n("mlp.fc2.b"),
    }
}

/// Multi-head consistent self-attention over already-normalized tokens:
/// per head, `softmax(V Vᵀ/√d_k)·V`, heads concatenated and projected.
fn consistent_attention(g: &mut Graph, x: NodeId, site: &AttnSite) -> NodeId {
    let v = value_of(g, site, x);
    let scale = 1.0 / (site.head_dim as f64).sqrt();
    let mut heads = Vec::with_capacity(site.heads);
    for h in 0..site.heads {
        let lo = h * site.head_dim;
        let hi = lo + site.head_dim;
        let v_h = g.slice_cols(v, lo, hi);
        let v_t = g.transpose(v_h);
        let logits = g.matmul(v_h, v_t);
        let logits = g.scale(logits, scale);
        let probs = g.softmax_rows(logits);
        heads.push(g.matmul(probs, v_h));
    }
    let mut merged = heads[0];
    for &h in &heads[1..] {
        merged = g.concat_cols(merged, h);
    }
    let projected = g.matmul(merged, site.ow);
    g.add_row_broadcast(projected, site.ob)
}

/// Subtracts the mean over rows from every row, keeping only the
/// position-specific part of the stream.
///
/// Texture inputs give every token nearly the same embedding, and the
/// residual stream amplifies that shared direction without bound during
/// reconstruction training. Once it dominates, the value-value attention
/// logits saturate (every token looks like every other token and nothing
/// like an injected prompt row), so prompts are starved of attention mass
/// and unit-normalized features collapse onto one direction. Removing the
/// row mean after every residual update keeps the stream on the content
/// that differs between positions.
fn center_rows(g: &mut Graph, x: NodeId) -> NodeId {
    let n = g.value(x).rows();
    let averager = g.leaf(Tensor::filled(1, n, 1.0 / n as f64), false);
    let mean = g.matmul(averager, x);
    let neg_mean = g.scale(mean, -1.0);
    g.add_row_broadcast(x, neg_mean)
}

/// One pre-norm residual block; the stream is re-centered over positions
/// after each residual update.
pub fn block_forward(g: &mut Graph, x: NodeId, b: &BlockNodes) -> NodeId {
    let normed = g.layer_norm(x, b.ln1_g, b.ln1_b, LN_EPS);
    let attn = consistent_attention(g, normed, &b.site);
    let x = g.add(x, attn);
    let x = center_rows(g, x);

    let normed = g.layer_norm(x, b.ln2_g, b.ln2_b, LN_EPS);
    let h = g.matmul(normed, b.fc1_w);
    let h = g.add_row_broadcast(h, b.fc1_b);
    let h = g.gelu(h);
    let h = g.matmul(h, b.fc2_w);
    let mlp = g.add_row_broadcast(h, b.fc2_b);
    let x = g.add(x, mlp);
    center_rows(g, x)
}

/// Everything a branch forward exposes downstream.
#[derive(Debug)]
pub struct BranchOutput {
    /// Unit-norm pooled feature, `1×d`.
    pub pooled: NodeId,
    /// Pooled feature before unit normalization (projection output with the
    /// centering already applied). Calibration reads this while the centers
    /// are still zero.
    pub pooled_raw: NodeId,
    /// `(1-indexed block, tokens)` for each configured feature layer;
    /// tokens are the block outputs with prompts already stripped (class
    /// token still at row 0) and the per-layer centering subtracted.
    pub layer_tokens: Vec<(usize, NodeId)>,
    /// Row count entering each block (diagnostic for shape invariants).
    pub block_rows: Vec<usize>,
}

/// Embeds the input planes and runs every block, injecting prompts at
/// blocks `0..prompt_depth` when active.
pub fn forward_branch(
    g: &mut Graph,
    bound: &mut BoundParams,
    store: &ParamStore,
    arch: &ModelConfig,
    act: PromptActivation,
    branch: &str,
    planes: &[Tensor; 3],
) -> Result<BranchOutput> {
    let e = &arch.encoder;
    if planes[0].shape() != (e.image_size, e.image_size) {
        return Err(ModelError::Config {
            field: "image_size".into(),
            reason: format!(
                "input is {}x{}, encoder expects {}x{}",
                planes[0].rows(),
                planes[0].cols(),
                e.image_size,
                e.image_size
            ),
        });
    }
    let heads = e.heads;
    let head_dim = e.head_dim();
    let p = |suffix: &str| format!("vision.{branch}.{suffix}");

    // Patch embedding + class token + positional table.
    let patches = extract_patches(planes, e.patch_size);
    let patches = g.leaf(patches, false);
    let patch_w = bound.node(g, store, &p("patch.w"));
    let patch_b = bound.node(g, store, &p("patch.b"));
    let cls = bound.node(g, store, &p("cls"));
    let pos = bound.node(g, store, &p("pos"));
    let x = g.matmul(patches, patch_w);
    let x = g.add_row_broadcast(x, patch_b);
    let x = g.concat_rows(cls, x);
    let x = g.add(x, pos);
    let mut x = center_rows(g, x);

    // MSP is generated once from the embedded input and reused per site.
    let msp = if act.msp {
        let w = bound.node(g, store, &format!("prompts.msp.{branch}.w"));
        let b = bound.node(g, store, &format!("prompts.msp.{branch}.b"));
        Some(generate_msp(g, x, w, b, arch.prompts.l_msp, heads, head_dim))
    } else {
        None
    };

    let mut cascade: Option<NodeId> = None;
    let mut layer_tokens = Vec::new();
    let mut block_rows = Vec::new();

    for j in 0..e.depth {
        let block = bind_block(g, bound, store, &p(&format!("block{j}")), heads, head_dim);
        let inject = j < e.prompt_depth && act.any();
        let stacked = if inject {
            let vx = value_of(g, &block.site, x);
            let mut refined = Vec::new();
            if act.ccp {
                let ccp = bound.node(g, store, "prompts.ccp");
                let vp = value_of(g, &block.site, ccp);
                refined.push(refine_prompt(g, &block.site, vp, Some(vx)));
            }
            if let Some(msp) = msp {
                let vp = value_of(g, &block.site, msp);
                refined.push(refine_prompt(g, &block.site, vp, Some(vx)));
            }
            if act.map {
                let raw = bound.node(g, store, &format!("prompts.map.{branch}.{j}"));
                let effective = match cascade {
                    Some(c) => g.add(raw, c),
                    None => raw,
                };
                let vp = value_of(g, &block.site, effective);
                let r = refine_prompt(g, &block.site, vp, Some(vx));
                cascade = Some(r);
                refined.push(r);
            }
            refined.push(x);
            g.concat_rows_all(&refined)
        } else {
            x
        };
        block_rows.push(g.value(stacked).rows());

        let out = block_forward(g, stacked, &block);
        x = if inject {
            let total = g.value(out).rows();
            let strip = act.total_len(&arch.prompts);
            g.slice_rows(out, strip, total)
        } else {
            out
        };
        if e.feature_layers.contains(&(j + 1)) {
            // Exported tokens are centered per position; the next block still
            // sees the uncentered stream.
            let center = bound.node(g, store, &p(&format!("token_center.layer{n}", n = j + 1)));
            layer_tokens.push((j + 1, g.sub(x, center)));
        }
    }

    // Pooled feature: class-token output through the frozen projection.
    let lnf_g = bound.node(g, store, &p("ln_f.g"));
    let lnf_b = bound.node(g, store, &p("ln_f.b"));
    let proj = bound.node(g, store, &p("proj.w"));
    let normed = g.layer_norm(x, lnf_g, lnf_b, LN_EPS);
    let cls_row = g.slice_rows(normed, 0, 1);
    let projected = g.matmul(cls_row, proj);
    let pooled_center = bound.node(g, store, &p("pooled_center"));
    let pooled_raw = g.sub(projected, pooled_center);
    let pooled = g.unit_rows(pooled_raw, UNIT_EPS);

    let value = g.value(pooled);
    if !value.all_finite() {
        return Err(ModelError::NonFinite {
            context: format!("{branch} branch forward"),
            epoch: 0,
            step: 0,
        });
    }

    Ok(BranchOutput {
        pooled,
        pooled_raw,
        layer_tokens,
        block_rows,
    })
}

/// Masked-patch reconstruction loss for one sample and branch: embed with
/// the masked rows swapped for the mask token, run the plain blocks, decode
/// the masked rows, and measure mean squared error against the raw patches.
fn warmup_loss(
    g: &mut Graph,
    bound: &mut BoundParams,
    store: &ParamStore,
    e: &EncoderConfig,
    branch: &str,
    planes: &[Tensor; 3],
    masked: &[usize],
) -> NodeId {
    let p = |suffix: &str| format!("vision.{branch}.{suffix}");
    let heads = e.heads;
    let head_dim = e.head_dim();

    let patch_matrix = extract_patches(planes, e.patch_size);
    let target = g.leaf(patch_matrix.gather_rows(masked), false);
    let patches = g.leaf(patch_matrix, false);

    let patch_w = bound.node(g, store, &p("patch.w"));
    let patch_b = bound.node(g, store, &p("patch.b"));
    let cls = bound.node(g, store, &p("cls"));
    let pos = bound.node(g, store, &p("pos"));
    let x = g.matmul(patches, patch_w);
    let x = g.add_row_broadcast(x, patch_b);
    let x = g.concat_rows(cls, x);
    let mut x = g.add(x, pos);

    // Swap masked patch rows (offset by the class token) for the mask token.
    let mask_token = bound.node(g, store, &p("mask_token"));
    let rows: Vec<usize> = masked.iter().map(|&i| i + 1).collect();
    x = g.replace_rows(x, mask_token, &rows);
    x = center_rows(g, x);

    for j in 0..e.depth {
        let block = bind_block(g, bound, store, &p(&format!("block{j}")), heads, head_dim);
        x = block_forward(g, x, &block);
    }

    let dec_w = bound.node(g, store, &p("decoder.w"));
    let dec_b = bound.node(g, store, &p("decoder.b"));
    let hidden = g.gather_rows(x, &rows);
    let decoded = g.matmul(hidden, dec_w);
    let decoded = g.add_row_broadcast(decoded, dec_b);

    let diff = g.sub(decoded, target);
    let sq = g.mul_elem(diff, diff);
    let total = g.sum_all(sq);
    g.scale(total, 1.0 / (masked.len() * e.patch_dim()) as f64)
}

fn masked_indices(n_patches: usize, seed: u64, label: &str) -> Vec<usize> {
    let k = ((n_patches as f64 * WARMUP_MASK_RATIO).round() as usize).clamp(1, n_patches);
    let mut order: Vec<usize> = (0..n_patches).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, label));
    order.shuffle(&mut rng);
    let mut chosen: Vec<usize> = order.into_iter().take(k).collect();
    chosen.sort_unstable();
    chosen
}

/// One warmup sample: an id for mask seeding plus both modality plane sets.
pub struct WarmupSample {
    pub id: String,
    pub rgb: [Tensor; 3],
    pub td: [Tensor; 3],
}

/// Self-supervised warmup over both branches, followed by the centering
/// calibration. Returns per-epoch mean reconstruction losses. The caller
/// freezes the encoders afterwards.
pub fn run_warmup(
    store: &mut ParamStore,
    arch: &ModelConfig,
    samples: &[WarmupSample],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    let e = &arch.encoder;
    if samples.is_empty() {
        return Err(ModelError::Config {
            field: "samples".into(),
            reason: "warmup needs at least one training sample".into(),
        });
    }
    cfg.validate()?;
    let sgd_cfg = SgdConfig {
        lr: cfg.lr,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
        lr_min: cfg.lr_min,
    };
    let mut sgd = Sgd::new();
    let mut epoch_losses = Vec::with_capacity(cfg.warmup_epochs);

    for epoch in 0..cfg.warmup_epochs {
        let lr = cosine_lr(cfg.lr, cfg.lr_min, epoch, cfg.warmup_epochs);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("warmup.epoch.{epoch}.shuffle")));
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            store.zero_grads();
            let mut g = Graph::new();
            let mut bound = BoundParams::new();
            let mut terms = Vec::with_capacity(chunk.len() * 2);
            for &i in chunk {
                let s = &samples[i];
                for (branch, planes) in [(BRANCH_RGB, &s.rgb), (BRANCH_3D, &s.td)] {
                    let masked = masked_indices(
                        e.n_patches(),
                        seed,
                        &format!("warmup.mask.{branch}.{id}.{epoch}", id = s.id),
                    );
                    terms.push(warmup_loss(&mut g, &mut bound, store, e, branch, planes, &masked));
                }
            }
            let mut total = terms[0];
            for &t in &terms[1..] {
                total = g.add(total, t);
            }
            let batch_loss = g.scale(total, 1.0 / terms.len() as f64);
            let value = g.scalar(batch_loss);
            if !value.is_finite() {
                return Err(ModelError::NonFinite {
                    context: "warmup loss".into(),
                    epoch,
                    step,
                });
            }
            loss_sum += value * terms.len() as f64;
            loss_count += terms.len();

            let grads = g.backward(batch_loss);
            bound.accumulate(&grads, store)?;
            sgd.step(store, &sgd_cfg, lr);
        }
        epoch_losses.push(loss_sum / loss_count as f64);
    }
    calibrate_centers(store, arch, samples)?;
    Ok(epoch_losses)
}

/// Measures the mean projection output and the mean exported token rows over
/// the training samples and stores them as the branch centering parameters.
///
/// Reconstruction warmup grows a large sample-independent component in the
/// residual stream (the shared texture bed plus positional structure), which
/// would otherwise dominate every exported feature and collapse their cosine
/// geometry. Runs on the plain encoder with the centers still zero, so the
/// measured exports are the uncentered features.
fn calibrate_centers(
    store: &mut ParamStore,
    arch: &ModelConfig,
    samples: &[WarmupSample],
) -> Result<()> {
    let scale = 1.0 / samples.len() as f64;
    for branch in [BRANCH_RGB, BRANCH_3D] {
        let mut pooled_sum: Option<Tensor> = None;
        let mut token_sums: Vec<(usize, Tensor)> = Vec::new();
        for s in samples {
            let planes = if branch == BRANCH_RGB { &s.rgb } else { &s.td };
            let mut g = Graph::new();
            let mut bound = BoundParams::new();
            let out = forward_branch(
                &mut g,
                &mut bound,
                store,
                arch,
                PromptActivation::NONE,
                branch,
                planes,
            )?;
            let pooled = g.value(out.pooled_raw);
            match &mut pooled_sum {
                Some(sum) => sum.add_assign(pooled),
                None => pooled_sum = Some(pooled.clone()),
            }
            for (i, &(layer, node)) in out.layer_tokens.iter().enumerate() {
                let tokens = g.value(node);
                match token_sums.get_mut(i) {
                    Some((_, sum)) => sum.add_assign(tokens),
                    None => token_sums.push((layer, tokens.clone())),
                }
            }
        }
        if let Some(sum) = pooled_sum {
            let name = format!("vision.{branch}.pooled_center");
            store.get_mut(&name).expect("layout has pooled_center").value = sum.scale(scale);
        }
        for (layer, sum) in token_sums {
            let name = format!("vision.{branch}.token_center.layer{layer}");
            store.get_mut(&name).expect("layout has token_center").value = sum.scale(scale);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::PromptConfig;
    use crate::model::Model;

    fn tiny_arch() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                image_size: 16,
                patch_size: 8,
                depth: 3,
                width: 16,
                heads: 2,
                mlp_ratio: 2,
                prompt_depth: 2,
                feature_layers: vec![2, 3],
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

    fn planes(seed: u64, size: usize) -> [Tensor; 3] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mk = || {
            Tensor::from_fn(size, size, |_, _| rand::Rng::gen_range(&mut rng, 0.0..1.0))
        };
        [mk(), mk(), mk()]
    }

    #[test]
    fn patch_extraction_is_channel_major() {
        let planes = [
            Tensor::from_fn(4, 4, |i, j| (i * 4 + j) as f64),
            Tensor::from_fn(4, 4, |i, j| 100.0 + (i * 4 + j) as f64),
            Tensor::from_fn(4, 4, |i, j| 200.0 + (i * 4 + j) as f64),
        ];
        let patches = extract_patches(&planes, 2);
        assert_eq!(patches.shape(), (4, 12));
        // Patch (0,1) covers columns 2..4; its row starts with channel 0.
        assert_eq!(patches.row(1)[..4], [2.0, 3.0, 6.0, 7.0]);
        assert_eq!(patches.row(1)[4], 102.0);
        assert_eq!(patches.row(1)[8], 202.0);
        // Patch (1,0) covers rows 2..4.
        assert_eq!(patches.row(2)[..4], [8.0, 9.0, 12.0, 13.0]);
    }

    #[test]
    fn forward_shapes_track_prompt_activation() {
        let arch = tiny_arch();
        let m = Model::init(arch.clone(), 9).unwrap();
        let input = planes(1, 16);

        let mut g = Graph::new();
        let mut bound = BoundParams::new();
        let out = forward_branch(
            &mut g,
            &mut bound,
            &m.store,
            &arch,
            PromptActivation::default(),
            BRANCH_RGB,
            &input,
        )
        .unwrap();
        // 5 tokens + 3 prompts × length 2 at injected blocks, bare after.
        assert_eq!(out.block_rows, vec![11, 11, 5]);
        assert_eq!(out.layer_tokens.len(), 2);
        for (_, t) in &out.layer_tokens {
            assert_eq!(g.value(*t).shape(), (5, 16), "exports are prompt-stripped");
        }
        let pooled = g.value(out.pooled);
        assert_eq!(pooled.shape(), (1, 16));
        let norm: f64 = pooled.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);

        let mut g = Graph::new();
        let mut bound = BoundParams::new();
        let out = forward_branch(
            &mut g,
            &mut bound,
            &m.store,
            &arch,
            PromptActivation::NONE,
            BRANCH_RGB,
            &input,
        )
        .unwrap();
        assert_eq!(out.block_rows, vec![5, 5, 5]);
    }

    #[test]
    fn forward_is_deterministic_and_branch_separated() {
        let arch = tiny_arch();
        let m = Model::init(arch.clone(), 10).unwrap();
        let input = planes(2, 16);
        let run = |branch: &str| {
            let mut g = Graph::new();
            let mut bound = BoundParams::new();
            let out = forward_branch(
                &mut g,
                &mut bound,
                &m.store,
                &arch,
                PromptActivation::default(),
                branch,
                &input,
            )
            .unwrap();
            g.value(out.pooled).clone()
        };
        let a = run(BRANCH_RGB);
        let b = run(BRANCH_RGB);
        assert_eq!(a.data(), b.data());
        let c = run(BRANCH_3D);
        assert_ne!(a.data(), c.data(), "branches own separate weights");
    }

    #[test]
    fn zero_input_produces_finite_features() {
        let arch = tiny_arch();
        let m = Model::init(arch.clone(), 11).unwrap();
        let zero = [
            Tensor::zeros(16, 16),
            Tensor::zeros(16, 16),
            Tensor::zeros(16, 16),
        ];
        let mut g = Graph::new();
        let mut bound = BoundParams::new();
        let out = forward_branch(
            &mut g,
            &mut bound,
            &m.store,
            &arch,
            PromptActivation::default(),
            BRANCH_3D,
            &zero,
        )
        .unwrap();
        assert!(g.value(out.pooled).all_finite());
        for (_, t) in &out.layer_tokens {
            assert!(g.value(*t).all_finite());
        }
    }

    /// Smooth per-sample surfaces: masked patches are predictable from
    /// context, so reconstruction has signal to learn from.
    fn smooth_planes(phase: f64, size: usize) -> [Tensor; 3] {
        let mk = |c: f64| {
            Tensor::from_fn(size, size, |i, j| {
                let v = ((i as f64 * 0.37 + phase) .sin() + (j as f64 * 0.23 + c).cos()) / 4.0;
                0.5 + v
            })
        };
        [mk(0.0), mk(1.0), mk(2.0)]
    }

    #[test]
    fn warmup_descends_and_freezes_deterministically() {
        let arch = tiny_arch();
        let run = || {
            let mut m = Model::init(arch.clone(), 21).unwrap();
            let samples: Vec<WarmupSample> = (0..4)
                .map(|i| WarmupSample {
                    id: format!("s{i}"),
                    rgb: smooth_planes(i as f64 * 0.8, 16),
                    td: smooth_planes(i as f64 * 0.8 + 0.4, 16),
                })
                .collect();
            let cfg = TrainConfig {
                warmup_epochs: 6,
                batch_size: 2,
                ..TrainConfig::default()
            };
            let losses = run_warmup(&mut m.store, &arch, &samples, &cfg, 33).unwrap();
            m.freeze_vision();
            (m, losses)
        };
        let (m1, losses) = run();
        assert!(
            losses.last().unwrap() < losses.first().unwrap(),
            "reconstruction loss should descend: {losses:?}"
        );
        assert!(m1
            .store
            .iter()
            .filter(|p| p.name.starts_with("vision."))
            .all(|p| !p.trainable));

        let (m2, _) = run();
        for (a, b) in m1.store.iter().zip(m2.store.iter()) {
            assert_eq!(a.value.data(), b.value.data(), "{} must be reproducible", a.name);
        }
    }

    #[test]
    fn mask_selection_is_seeded_and_sized() {
        let a = masked_indices(64, 5, "warmup.mask.rgb.s0.0");
        let b = masked_indices(64, 5, "warmup.mask.rgb.s0.0");
        assert_eq!(a, b);
        assert_eq!(a.len(), 26, "40% of 64 patches, rounded");
        let c = masked_indices(64, 5, "warmup.mask.rgb.s0.1");
        assert_ne!(a, c);
        assert!(a.windows(2).all(|w| w[0] < w[1]), "sorted, distinct");
    }
}
