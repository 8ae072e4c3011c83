//! Parameter layout, initialization, checkpointing, and graph binding.

use std::collections::HashMap;
use std::f64::consts::TAU;
use std::path::Path;

use misdd_core::{
    derive_seed, load_checkpoint, save_checkpoint, Gradients, Graph, NodeId, ParamStore, Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::encoder::BRANCHES;
use crate::text::{TEXT_POS_ROWS, VOCAB_ROWS};
use crate::{ModelError, Result};

/// Standard deviation for randomly initialized weights.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq)]
enum InitKind {
    Gauss,
    Zeros,
    Ones,
    Eye,
}

#[derive(Debug, Clone)]
struct ParamSpecEntry {
    name: String,
    rows: usize,
    cols: usize,
    init: InitKind,
    trainable: bool,
}

fn block_entries(prefix: &str, d: usize, hidden: usize, trainable: bool, out: &mut Vec<ParamSpecEntry>) {
    let mut push = |suffix: &str, rows, cols, init| {
        out.push(ParamSpecEntry {
            name: format!("{prefix}.{suffix}"),
            rows,
            cols,
            init,
            trainable,
        });
    };
    push("ln1.g", 1, d, InitKind::Ones);
    push("ln1.b", 1, d, InitKind::Zeros);
    push("attn.v.w", d, d, InitKind::Gauss);
    push("attn.v.b", 1, d, InitKind::Zeros);
    push("attn.out.w", d, d, InitKind::Gauss);
    push("attn.out.b", 1, d, InitKind::Zeros);
    push("ln2.g", 1, d, InitKind::Ones);
    push("ln2.b", 1, d, InitKind::Zeros);
    push("mlp.fc1.w", d, hidden, InitKind::Gauss);
    push("mlp.fc1.b", 1, hidden, InitKind::Zeros);
    push("mlp.fc2.w", hidden, d, InitKind::Gauss);
    push("mlp.fc2.b", 1, d, InitKind::Zeros);
}

/// The complete parameter layout for an architecture, in checkpoint order.
fn param_layout(arch: &ModelConfig) -> Vec<ParamSpecEntry> {
    let e = &arch.encoder;
    let d = e.width;
    let hidden = d * e.mlp_ratio;
    let mut out = Vec::new();

    for branch in BRANCHES {
        let p = |suffix: &str| format!("vision.{branch}.{suffix}");
        let mut push = |name: String, rows, cols, init, trainable| {
            out.push(ParamSpecEntry {
                name,
                rows,
                cols,
                init,
                trainable,
            });
        };
        push(p("patch.w"), e.patch_dim(), d, InitKind::Gauss, true);
        push(p("patch.b"), 1, d, InitKind::Zeros, true);
        push(p("cls"), 1, d, InitKind::Gauss, true);
        push(p("pos"), e.seq_len(), d, InitKind::Gauss, true);
        for j in 0..e.depth {
            block_entries(&p(&format!("block{j}")), d, hidden, true, &mut out);
        }
        let mut push = |name: String, rows, cols, init, trainable| {
            out.push(ParamSpecEntry {
                name,
                rows,
                cols,
                init,
                trainable,
            });
        };
        push(p("ln_f.g"), 1, d, InitKind::Ones, true);
        push(p("ln_f.b"), 1, d, InitKind::Zeros, true);
        // The pooled-feature projection stays fixed so prompts can only act
        // through attention, never by re-steering the output map.
        push(p("proj.w"), d, d, InitKind::Eye, false);
        push(p("mask_token"), 1, d, InitKind::Gauss, true);
        push(p("decoder.w"), d, e.patch_dim(), InitKind::Gauss, true);
        push(p("decoder.b"), 1, e.patch_dim(), InitKind::Zeros, true);
        // Centering calibration, written once at the end of warmup: the mean
        // projection output and the mean exported token rows over the training
        // split. Subtracted at the export points so cosine geometry lives on
        // the sample-specific part of a feature instead of the shared texture
        // bed. Zero until calibrated; never touched by the optimizer.
        push(p("pooled_center"), 1, d, InitKind::Zeros, false);
        for &layer in &e.feature_layers {
            push(
                p(&format!("token_center.layer{layer}")),
                e.seq_len(),
                d,
                InitKind::Zeros,
                false,
            );
        }
    }

    out.push(ParamSpecEntry {
        name: "prompts.ccp".into(),
        rows: arch.prompts.l_ccp,
        cols: d,
        init: InitKind::Gauss,
        trainable: true,
    });
    for branch in BRANCHES {
        out.push(ParamSpecEntry {
            name: format!("prompts.msp.{branch}.w"),
            rows: d,
            cols: d,
            init: InitKind::Gauss,
            trainable: true,
        });
        out.push(ParamSpecEntry {
            name: format!("prompts.msp.{branch}.b"),
            rows: 1,
            cols: d,
            init: InitKind::Zeros,
            trainable: true,
        });
    }
    for branch in BRANCHES {
        for j in 0..e.prompt_depth {
            out.push(ParamSpecEntry {
                name: format!("prompts.map.{branch}.{j}"),
                rows: arch.prompts.l_map,
                cols: d,
                init: InitKind::Gauss,
                trainable: true,
            });
        }
    }

    // Text branch: frozen from initialization; only the suffix trains.
    let mut push = |name: &str, rows, cols, init, trainable| {
        out.push(ParamSpecEntry {
            name: name.into(),
            rows,
            cols,
            init,
            trainable,
        });
    };
    push("text.vocab", VOCAB_ROWS, d, InitKind::Gauss, false);
    push("text.pos", TEXT_POS_ROWS, d, InitKind::Gauss, false);
    for j in 0..arch.text_depth {
        block_entries(&format!("text.block{j}"), d, hidden, false, &mut out);
    }
    let mut push = |name: &str, rows, cols, init, trainable| {
        out.push(ParamSpecEntry {
            name: name.into(),
            rows,
            cols,
            init,
            trainable,
        });
    };
    push("text.ln_f.g", 1, d, InitKind::Ones, false);
    push("text.ln_f.b", 1, d, InitKind::Zeros, false);
    push("text.proj.w", d, d, InitKind::Eye, false);
    push("text.suffix", arch.n_ctx, d, InitKind::Gauss, true);

    out
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(1e-12);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (TAU * u2).cos()
}

fn materialize(entry: &ParamSpecEntry, seed: u64) -> Tensor {
    match entry.init {
        InitKind::Zeros => Tensor::zeros(entry.rows, entry.cols),
        InitKind::Ones => Tensor::filled(entry.rows, entry.cols, 1.0),
        InitKind::Eye => {
            assert_eq!(entry.rows, entry.cols, "{}: identity init needs a square shape", entry.name);
            Tensor::eye(entry.rows)
        }
        InitKind::Gauss => {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("init.{}", entry.name)));
            Tensor::from_fn(entry.rows, entry.cols, |_, _| INIT_STD * gaussian(&mut rng))
        }
    }
}

/// A named parameter store plus the architecture that shaped it.
#[derive(Debug, Clone)]
pub struct Model {
    pub store: ParamStore,
    pub arch: ModelConfig,
}

impl Model {
    pub fn init(arch: ModelConfig, seed: u64) -> Result<Model> {
        arch.validate()?;
        let mut store = ParamStore::new();
        for entry in param_layout(&arch) {
            let value = materialize(&entry, seed);
            store.insert(&entry.name, value, entry.trainable)?;
        }
        Ok(Model { store, arch })
    }

    /// Freezes both vision branches (perma-frozen after warmup).
    pub fn freeze_vision(&mut self) {
        self.store.freeze_prefix("vision.");
    }

    /// Restricts trainability to Θ = {CCP, MSP weights, MAP, text suffix}.
    pub fn prepare_prompt_training(&mut self) {
        for p in self.store.iter_mut() {
            p.trainable = p.name.starts_with("prompts.") || p.name == "text.suffix";
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_checkpoint(&self.store, dir).map_err(ModelError::from)
    }

    /// Loads a checkpoint and verifies it matches the architecture's layout
    /// (same names, same order, same shapes).
    pub fn load(dir: &Path, arch: ModelConfig) -> Result<Model> {
        arch.validate()?;
        let store = load_checkpoint(dir)?;
        let layout = param_layout(&arch);
        if store.len() != layout.len() {
            return Err(ModelError::Checkpoint {
                detail: format!(
                    "{}: expected {} parameters, found {}",
                    dir.display(),
                    layout.len(),
                    store.len()
                ),
            });
        }
        for (entry, param) in layout.iter().zip(store.iter()) {
            if entry.name != param.name {
                return Err(ModelError::Checkpoint {
                    detail: format!(
                        "parameter order mismatch: expected `{}`, found `{}`",
                        entry.name, param.name
                    ),
                });
            }
            if param.value.shape() != (entry.rows, entry.cols) {
                return Err(ModelError::Checkpoint {
                    detail: format!(
                        "`{}`: expected {}x{}, found {}x{}",
                        entry.name,
                        entry.rows,
                        entry.cols,
                        param.value.rows(),
                        param.value.cols()
                    ),
                });
            }
        }
        Ok(Model { store, arch })
    }

    /// Parameter-count rows grouped the way the report command prints them.
    pub fn params_report(&self) -> Vec<ParamGroupRow> {
        params_report(&self.store)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamGroupRow {
    pub label: &'static str,
    pub entries: usize,
    pub trainable_entries: usize,
}

pub const PARAM_GROUP_LABELS: [&str; 6] = [
    "vision encoder (frozen)",
    "text encoder (frozen)",
    "CCP",
    "MSP",
    "MAP",
    "text suffix",
];

fn group_of(name: &str) -> usize {
    if name.starts_with("vision.") {
        0
    } else if name == "text.suffix" {
        5
    } else if name.starts_with("text.") {
        1
    } else if name == "prompts.ccp" {
        2
    } else if name.starts_with("prompts.msp.") {
        3
    } else if name.starts_with("prompts.map.") {
        4
    } else {
        panic!("parameter `{name}` belongs to no report group");
    }
}

/// Groups every parameter into exactly one row; row sums therefore equal
/// the store totals by construction of `group_of`.
pub fn params_report(store: &ParamStore) -> Vec<ParamGroupRow> {
    let mut rows: Vec<ParamGroupRow> = PARAM_GROUP_LABELS
        .iter()
        .map(|&label| ParamGroupRow {
            label,
            entries: 0,
            trainable_entries: 0,
        })
        .collect();
    for p in store.iter() {
        let row = &mut rows[group_of(&p.name)];
        row.entries += p.value.len();
        if p.trainable {
            row.trainable_entries += p.value.len();
        }
    }
    rows
}

/// Caches one graph leaf per named parameter so shared parameters (CCP,
/// text embeddings used by several prompts) are a single node, and maps
/// gradients back to store names afterwards.
#[derive(Debug, Default)]
pub struct BoundParams {
    nodes: Vec<(String, NodeId)>,
    index: HashMap<String, NodeId>,
}

impl BoundParams {
    pub fn new() -> Self {
        Self::default()
    }

    /// Binds `name` as a graph leaf (once per graph).
    pub fn node(&mut self, g: &mut Graph, store: &ParamStore, name: &str) -> NodeId {
        if let Some(&id) = self.index.get(name) {
            return id;
        }
        let p = store
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        let id = g.leaf(p.value.clone(), p.trainable);
        self.nodes.push((name.to_string(), id));
        self.index.insert(name.to_string(), id);
        id
    }

    /// Adds every available leaf gradient into the store.
    pub fn accumulate(&self, grads: &Gradients, store: &mut ParamStore) -> Result<()> {
        for (name, id) in &self.nodes {
            if let Some(g) = grads.get(*id) {
                store.accumulate_grad(name, g)?;
            }
        }
        Ok(())
    }

    /// Gradients keyed by parameter name (missing = no gradient flowed).
    pub fn gradient_map(&self, grads: &Gradients) -> HashMap<String, Tensor> {
        let mut out = HashMap::new();
        for (name, id) in &self.nodes {
            if let Some(g) = grads.get(*id) {
                out.insert(name.clone(), g.clone());
            }
        }
        out
    }
}
