//! Feature galleries and the inference-time scoring pipeline.
//!
//! Training leaves behind three kinds of galleries: per-class text
//! embedding pairs, pooled visual features of normal training samples, and
//! (for the optional memory-bank branch) their per-layer token features.
//! Detection evaluates both visual branches — dummy inputs included — and
//! takes the branch maximum of harmonically fused image/pixel scores.

use std::collections::BTreeMap;
use std::path::Path;

use misdd_core::{load_checkpoint, save_checkpoint, Graph, ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::encoder::{forward_branch, BRANCHES, UNIT_EPS};
use crate::missing::MissingLevel;
use crate::model::BoundParams;
use crate::scl::{TrainContext, TrainSample, UNIT_NORM_TOL};
use crate::text::build_semantic_duality;
use crate::{ModelError, Result};

/// Softmax temperature converting cosine similarities into probabilities.
pub const TEMPERATURE: f64 = 0.07;

/// Value-level encoder outputs for one branch of one sample: the pooled
/// feature and the per-layer patch tokens (class token stripped, rows
/// unit-normalized; all zero for a feature-level dummy).
#[derive(Debug, Clone)]
pub struct BranchFeatures {
    pub pooled: Tensor,
    pub layers: Vec<(usize, Tensor)>,
}

/// Final scores for one sample: image-level scalar and pixel-level map at
/// input resolution, both in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct ScorePair {
    pub s_im: f64,
    pub s_px: Tensor,
}

/// The three gallery families plus any build warnings. A branch with no
/// present training samples simply has no entry.
#[derive(Debug, Clone, Default)]
pub struct Galleries {
    /// class → (normal, abnormal) unit-norm text embeddings.
    pub text: BTreeMap<String, (Tensor, Tensor)>,
    /// branch → n×d pooled features of present normal training samples.
    pub pooled: BTreeMap<String, Tensor>,
    /// branch → layer → (n·n_patches)×d token features.
    pub tokens: BTreeMap<String, BTreeMap<usize, Tensor>>,
    pub warnings: Vec<String>,
}

fn two_way_softmax(cos_normal: f64, cos_abnormal: f64) -> f64 {
    let a = cos_abnormal / TEMPERATURE;
    let n = cos_normal / TEMPERATURE;
    let m = a.max(n);
    let ea = (a - m).exp();
    ea / (ea + (n - m).exp())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn stack_rows(rows: &[Tensor]) -> Tensor {
    let mut out = rows[0].clone();
    for r in &rows[1..] {
        out = out.concat_rows(r);
    }
    out
}

/// Runs the encoder on one branch without tracking gradients and returns
/// plain-tensor features ready for galleries or scoring.
pub fn encode_branch_features(
    store: &ParamStore,
    ctx: &TrainContext,
    branch: &str,
    planes: &[Tensor; 3],
) -> Result<BranchFeatures> {
    let mut g = Graph::new();
    let mut bound = BoundParams::new();
    let out = forward_branch(&mut g, &mut bound, store, &ctx.arch, ctx.act, branch, planes)?;
    let pooled = g.value(out.pooled).clone();
    let layers = out
        .layer_tokens
        .iter()
        .map(|&(layer, node)| {
            let tokens = g.value(node);
            let patches = tokens.slice_rows(1, tokens.rows()).unit_rows(UNIT_EPS);
            (layer, patches)
        })
        .collect();
    Ok(BranchFeatures { pooled, layers })
}

/// All-zero features standing in for a feature-level missing branch.
pub fn dummy_branch_features(ctx: &TrainContext) -> BranchFeatures {
    let d = ctx.arch.encoder.width;
    let n_p = ctx.arch.encoder.n_patches();
    let layers = ctx
        .arch
        .encoder
        .feature_layers
        .iter()
        .map(|&layer| (layer, Tensor::zeros(n_p, d)))
        .collect();
    BranchFeatures {
        pooled: Tensor::zeros(1, d),
        layers,
    }
}

/// Builds the text, pooled, and token galleries from the included training
/// samples. Only branches whose modality indicator is 1 contribute; a
/// branch with zero present samples is left empty and flagged.
pub fn build_galleries(
    store: &ParamStore,
    ctx: &TrainContext,
    samples: &[TrainSample],
) -> Result<Galleries> {
    let mut out = Galleries::default();
    let mut pooled_rows: BTreeMap<&str, Vec<Tensor>> = BTreeMap::new();
    let mut token_rows: BTreeMap<&str, BTreeMap<usize, Vec<Tensor>>> = BTreeMap::new();

    for s in samples.iter().filter(|s| s.included) {
        if !out.text.contains_key(&s.class_name) {
            let mut g = Graph::new();
            let mut bound = BoundParams::new();
            let duality = build_semantic_duality(
                &mut g,
                &mut bound,
                store,
                &ctx.arch,
                &ctx.templates,
                &s.class_name,
                ctx.arch.n_ctx,
            )?;
            out.text.insert(
                s.class_name.clone(),
                (
                    g.value(duality.normal).clone(),
                    g.value(duality.abnormal).clone(),
                ),
            );
        }
        for (branch, planes, present) in
            [("rgb", &s.rgb, s.ind.rgb), ("3d", &s.td, s.ind.td)]
        {
            if !present {
                continue;
            }
            let feats = encode_branch_features(store, ctx, branch, planes)?;
            pooled_rows.entry(branch).or_default().push(feats.pooled);
            let per_layer = token_rows.entry(branch).or_default();
            for (layer, tokens) in feats.layers {
                per_layer.entry(layer).or_default().push(tokens);
            }
        }
    }

    for branch in BRANCHES {
        match pooled_rows.get(branch) {
            Some(rows) => {
                out.pooled.insert(branch.to_string(), stack_rows(rows));
            }
            None => out.warnings.push(format!(
                "gallery `{branch}` is empty: no training sample had that modality present"
            )),
        }
        if let Some(per_layer) = token_rows.get(branch) {
            let stacked = per_layer
                .iter()
                .map(|(&layer, rows)| (layer, stack_rows(rows)))
                .collect();
            out.tokens.insert(branch.to_string(), stacked);
        }
    }
    Ok(out)
}

impl Galleries {
    /// Persists the galleries in the checkpoint container format.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut store = ParamStore::new();
        for (class, (normal, abnormal)) in &self.text {
            store.insert(&format!("gallery.text.{class}.normal"), normal.clone(), false)?;
            store.insert(&format!("gallery.text.{class}.abnormal"), abnormal.clone(), false)?;
        }
        for (branch, rows) in &self.pooled {
            store.insert(&format!("gallery.{branch}.pooled"), rows.clone(), false)?;
        }
        for (branch, per_layer) in &self.tokens {
            for (layer, rows) in per_layer {
                store.insert(
                    &format!("gallery.{branch}.tokens.layer{layer}"),
                    rows.clone(),
                    false,
                )?;
            }
        }
        save_checkpoint(&store, dir)?;
        Ok(())
    }

    /// Loads galleries saved by [`Galleries::save`]. Branches without a
    /// pooled entry are re-flagged as empty.
    pub fn load(dir: &Path) -> Result<Galleries> {
        let store = load_checkpoint(dir)?;
        let mut out = Galleries::default();
        let mut halves: BTreeMap<String, (Option<Tensor>, Option<Tensor>)> = BTreeMap::new();
        for p in store.iter() {
            if let Some(rest) = p.name.strip_prefix("gallery.text.") {
                let (class, kind) = rest.rsplit_once('.').ok_or_else(|| ModelError::Gallery {
                    detail: format!("malformed gallery entry `{}`", p.name),
                })?;
                let slot = halves.entry(class.to_string()).or_default();
                match kind {
                    "normal" => slot.0 = Some(p.value.clone()),
                    "abnormal" => slot.1 = Some(p.value.clone()),
                    other => {
                        return Err(ModelError::Gallery {
                            detail: format!("unknown text gallery kind `{other}`"),
                        })
                    }
                }
            } else if let Some(rest) = p.name.strip_prefix("gallery.") {
                if let Some(branch) = rest.strip_suffix(".pooled") {
                    out.pooled.insert(branch.to_string(), p.value.clone());
                } else if let Some((branch, layer)) = rest.split_once(".tokens.layer") {
                    let layer: usize = layer.parse().map_err(|_| ModelError::Gallery {
                        detail: format!("malformed gallery entry `{}`", p.name),
                    })?;
                    out.tokens
                        .entry(branch.to_string())
                        .or_default()
                        .insert(layer, p.value.clone());
                } else {
                    return Err(ModelError::Gallery {
                        detail: format!("unrecognized gallery entry `{}`", p.name),
                    });
                }
            } else {
                return Err(ModelError::Gallery {
                    detail: format!("`{}` is not a gallery entry", p.name),
                });
            }
        }
        for (class, (normal, abnormal)) in halves {
            match (normal, abnormal) {
                (Some(n), Some(a)) => {
                    out.text.insert(class, (n, a));
                }
                _ => {
                    return Err(ModelError::Gallery {
                        detail: format!("text gallery for `{class}` is missing a half"),
                    })
                }
            }
        }
        for branch in BRANCHES {
            if !out.pooled.contains_key(branch) {
                out.warnings.push(format!(
                    "gallery `{branch}` is empty: no training sample had that modality present"
                ));
            }
        }
        Ok(out)
    }
}

fn check_unit(v: &Tensor, context: &str, allow_zero: bool) -> Result<()> {
    let norm = v.frobenius_norm();
    if allow_zero && norm == 0.0 {
        return Ok(());
    }
    if (norm - 1.0).abs() > UNIT_NORM_TOL {
        return Err(ModelError::NormViolation {
            context: context.into(),
            norm,
        });
    }
    Ok(())
}

/// Image-level anomaly probability of one branch: two-way softmax over the
/// cosine similarities to the (normal, abnormal) text embeddings. A zero
/// pooled feature (feature-level dummy) lands exactly on 0.5.
pub fn image_score(pooled: &Tensor, normal: &Tensor, abnormal: &Tensor) -> Result<f64> {
    check_unit(pooled, "pooled feature for image score", true)?;
    check_unit(normal, "normal text embedding", false)?;
    check_unit(abnormal, "abnormal text embedding", false)?;
    Ok(two_way_softmax(
        dot(pooled.data(), normal.data()),
        dot(pooled.data(), abnormal.data()),
    ))
}

/// Per-token anomaly probabilities of one layer, as a flat length-n_p map.
fn layer_token_probs(tokens: &Tensor, normal: &Tensor, abnormal: &Tensor) -> Vec<f64> {
    let unit = tokens.unit_rows(UNIT_EPS);
    (0..unit.rows())
        .map(|i| {
            let row = unit.row(i);
            two_way_softmax(dot(row, normal.data()), dot(row, abnormal.data()))
        })
        .collect()
}

/// Token-resolution anomaly map: per token per layer, the same two-way
/// softmax as the image score, averaged over the exported layers.
fn token_prob_grid(
    layers: &[(usize, Tensor)],
    normal: &Tensor,
    abnormal: &Tensor,
    expected_layers: &[usize],
    grid: usize,
) -> Result<Tensor> {
    let have: Vec<usize> = layers.iter().map(|&(l, _)| l).collect();
    if have != expected_layers {
        return Err(ModelError::Gallery {
            detail: format!("expected token features at layers {expected_layers:?}, got {have:?}"),
        });
    }
    let n_p = grid * grid;
    let mut acc = vec![0.0; n_p];
    for (_, tokens) in layers {
        if tokens.rows() != n_p {
            return Err(ModelError::Gallery {
                detail: format!("{} token rows for a {grid}×{grid} patch grid", tokens.rows()),
            });
        }
        for (a, p) in acc.iter_mut().zip(layer_token_probs(tokens, normal, abnormal)) {
            *a += p;
        }
    }
    let k = layers.len() as f64;
    Ok(Tensor::from_vec(grid, grid, acc.into_iter().map(|v| v / k).collect()))
}

/// Bilinear upsampling with corner alignment: output corners sample input
/// corners exactly, interior pixels interpolate.
pub fn bilinear_upsample(map: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let (in_h, in_w) = map.shape();
    let scale = |out_i: usize, out_n: usize, in_n: usize| -> f64 {
        if out_n <= 1 || in_n <= 1 {
            0.0
        } else {
            out_i as f64 * (in_n - 1) as f64 / (out_n - 1) as f64
        }
    };
    Tensor::from_fn(out_h, out_w, |i, j| {
        let y = scale(i, out_h, in_h);
        let x = scale(j, out_w, in_w);
        let y0 = y.floor() as usize;
        let x0 = x.floor() as usize;
        let y1 = (y0 + 1).min(in_h - 1);
        let x1 = (x0 + 1).min(in_w - 1);
        let dy = y - y0 as f64;
        let dx = x - x0 as f64;
        let top = map.get(y0, x0) * (1.0 - dx) + map.get(y0, x1) * dx;
        let bot = map.get(y1, x0) * (1.0 - dx) + map.get(y1, x1) * dx;
        top * (1.0 - dy) + bot * dy
    })
}

/// Pixel-level anomaly map of one branch at input resolution.
pub fn pixel_map(
    layers: &[(usize, Tensor)],
    normal: &Tensor,
    abnormal: &Tensor,
    expected_layers: &[usize],
    grid: usize,
    image_size: usize,
) -> Result<Tensor> {
    check_unit(normal, "normal text embedding", false)?;
    check_unit(abnormal, "abnormal text embedding", false)?;
    let grid_map = token_prob_grid(layers, normal, abnormal, expected_layers, grid)?;
    Ok(bilinear_upsample(&grid_map, image_size, image_size))
}

/// Harmonic mean with the zero-dominance convention `H(0,·) = 0`.
pub fn harmonic(a: f64, b: f64) -> f64 {
    if a == 0.0 || b == 0.0 {
        0.0
    } else {
        2.0 * a * b / (a + b)
    }
}

fn check_range(value: f64, context: &str) -> Result<()> {
    if !(0.0..=1.0).contains(&value) || !value.is_finite() {
        return Err(ModelError::ScoreRange {
            context: context.into(),
            value,
        });
    }
    Ok(())
}

/// Fuses the scalar image score into the pixel map elementwise.
pub fn harmonic_fuse(image_score: f64, map: &Tensor) -> Result<Tensor> {
    check_range(image_score, "image score for fusion")?;
    for &v in map.data() {
        check_range(v, "pixel map value for fusion")?;
    }
    Ok(map.map(|v| harmonic(image_score, v)))
}

/// Token-resolution memory-bank anomaly map: per token per layer,
/// `1 − max cosine` against the gallery's token entries, clamped to
/// `[0, 1]`, averaged over layers.
pub fn memory_bank_map(
    layers: &[(usize, Tensor)],
    gallery: &BTreeMap<usize, Tensor>,
    grid: usize,
) -> Result<Tensor> {
    if layers.is_empty() {
        return Err(ModelError::Gallery {
            detail: "memory-bank scoring needs at least one token layer".into(),
        });
    }
    let n_p = grid * grid;
    let mut acc = vec![0.0; n_p];
    for (layer, tokens) in layers {
        let entries = gallery.get(layer).ok_or_else(|| ModelError::Gallery {
            detail: format!("token gallery has no entries for layer {layer}"),
        })?;
        if entries.rows() == 0 {
            return Err(ModelError::Gallery {
                detail: format!("token gallery for layer {layer} is empty"),
            });
        }
        let unit = tokens.unit_rows(UNIT_EPS);
        for (i, a) in acc.iter_mut().enumerate() {
            let row = unit.row(i);
            let best = (0..entries.rows())
                .map(|e| dot(row, entries.row(e)))
                .fold(f64::NEG_INFINITY, f64::max);
            *a += (1.0 - best).clamp(0.0, 1.0);
        }
    }
    let k = layers.len() as f64;
    Ok(Tensor::from_vec(grid, grid, acc.into_iter().map(|v| v / k).collect()))
}

/// Full detection for one sample: both branches are always evaluated on
/// whatever inputs they have (dummies included); the final scores are the
/// branch maxima of the harmonically fused image/pixel predictions.
pub fn detect(
    store: &ParamStore,
    ctx: &TrainContext,
    galleries: &Galleries,
    sample: &TrainSample,
    use_memory_bank: bool,
) -> Result<ScorePair> {
    let (normal, abnormal) =
        galleries.text.get(&sample.class_name).ok_or_else(|| ModelError::Gallery {
            detail: format!("no text gallery for class `{}`", sample.class_name),
        })?;
    let arch = &ctx.arch.encoder;
    let grid = arch.grid();
    let mut s_im = f64::NEG_INFINITY;
    let mut s_px: Option<Tensor> = None;

    for (branch, planes, present) in [
        ("rgb", &sample.rgb, sample.ind.rgb),
        ("3d", &sample.td, sample.ind.td),
    ] {
        let feats = if !present && ctx.level == MissingLevel::Feature {
            dummy_branch_features(ctx)
        } else {
            encode_branch_features(store, ctx, branch, planes)?
        };
        let i_b = image_score(&feats.pooled, normal, abnormal)?;
        let mut grid_map =
            token_prob_grid(&feats.layers, normal, abnormal, &arch.feature_layers, grid)?;
        if use_memory_bank {
            if let Some(bank) = galleries.tokens.get(branch) {
                let mb = memory_bank_map(&feats.layers, bank, grid)?;
                grid_map = grid_map.zip(&mb, f64::max);
            }
        }
        let p_b = bilinear_upsample(&grid_map, arch.image_size, arch.image_size);
        let fused = harmonic_fuse(i_b, &p_b)?;
        s_im = s_im.max(i_b);
        s_px = Some(match s_px {
            Some(prev) => prev.zip(&fused, f64::max),
            None => fused,
        });
    }

    let s_px = s_px.expect("two branches always evaluated");
    check_range(s_im, "final image score")?;
    for &v in s_px.data() {
        check_range(v, "final pixel map value")?;
    }
    Ok(ScorePair { s_im, s_px })
}

/// Serializable per-sample record of the final scores (maps exported
/// separately as image files).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleScore {
    pub id: String,
    pub class_name: String,
    pub label: u8,
    pub s_im: f64,
}
