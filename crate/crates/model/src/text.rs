//! Toy text branch: a closed vocabulary, template-based prompt specs, a
//! small frozen transformer, and the normal/abnormal embedding pair.
//!
//! Normal prompts follow `[general template][class]`; abnormal prompts
//! append a state phrase and, in the learnable variant, `n_ctx` reserved
//! suffix slots whose embeddings are the only trainable text parameters.
//! The abnormal embedding is the unit-normalized mean over every
//! `state × {fixed, learnable}` variant.

use misdd_core::{Graph, NodeId, ParamStore};
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::encoder::{bind_block, block_forward, LN_EPS, UNIT_EPS};
use crate::model::BoundParams;
use crate::{ModelError, Result};

/// Closed word list. Indices are embedding-table rows; the two specials
/// below complete the table.
pub const VOCAB_WORDS: [&str; 62] = [
    "a",
    "the",
    "photo",
    "image",
    "of",
    "an",
    "flawless",
    "perfect",
    "normal",
    "abnormal",
    "damaged",
    "broken",
    "defective",
    "widget",
    "surface",
    "texture",
    "object",
    "part",
    "item",
    "sample",
    "weave",
    "foam",
    "grid",
    "marble",
    "fabric",
    "sponge",
    "lattice",
    "stone",
    "with",
    "without",
    "crack",
    "cracks",
    "hole",
    "holes",
    "contamination",
    "contaminated",
    "scratch",
    "scratches",
    "dent",
    "dents",
    "stain",
    "stains",
    "blemish",
    "chip",
    "pit",
    "bump",
    "mark",
    "flaw",
    "defect",
    "spot",
    "discoloration",
    "rough",
    "smooth",
    "clean",
    "intact",
    "good",
    "bad",
    "pristine",
    "material",
    "pattern",
    "panel",
    "tile",
];

pub const BOS_ID: usize = VOCAB_WORDS.len();
pub const EOS_ID: usize = VOCAB_WORDS.len() + 1;
/// Embedding-table rows: every word plus the two specials.
pub const VOCAB_ROWS: usize = VOCAB_WORDS.len() + 2;
/// Maximum sequence length (rows of the positional table).
pub const TEXT_POS_ROWS: usize = 16;

/// Suffix slots get ids past the embedding table; their rows come from the
/// trainable suffix parameter instead.
pub fn suffix_id(slot: usize) -> usize {
    VOCAB_ROWS + slot
}

pub fn is_suffix_id(id: usize) -> bool {
    id >= VOCAB_ROWS
}

pub fn word_id(word: &str) -> Option<usize> {
    VOCAB_WORDS.iter().position(|&w| w == word)
}

/// General template and state phrases; overridable from a JSON file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextTemplates {
    /// Must contain `{}` where the class name goes.
    pub general: String,
    pub states: Vec<String>,
}

impl Default for TextTemplates {
    fn default() -> Self {
        TextTemplates {
            general: "a photo of a {}".into(),
            states: vec![
                "with crack".into(),
                "with hole".into(),
                "with contamination".into(),
                "damaged".into(),
            ],
        }
    }
}

impl TextTemplates {
    pub fn from_json_bytes(bytes: &[u8]) -> Result<Self> {
        let t: TextTemplates = serde_json::from_slice(bytes).map_err(|e| ModelError::Text {
            detail: format!("template file: {e}"),
        })?;
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.general.contains("{}") {
            return Err(ModelError::Text {
                detail: "general template must contain `{}`".into(),
            });
        }
        if self.states.is_empty() {
            return Err(ModelError::Text {
                detail: "state list must not be empty".into(),
            });
        }
        Ok(())
    }
}

/// One prompt to tokenize: normal prompts carry no state and no suffix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextPromptSpec {
    pub class_name: String,
    pub state: Option<String>,
    pub n_ctx: usize,
}

impl TextPromptSpec {
    pub fn normal(class_name: &str) -> Self {
        TextPromptSpec {
            class_name: class_name.into(),
            state: None,
            n_ctx: 0,
        }
    }

    pub fn abnormal(class_name: &str, state: &str, n_ctx: usize) -> Self {
        TextPromptSpec {
            class_name: class_name.into(),
            state: Some(state.into()),
            n_ctx,
        }
    }
}

/// Maps a prompt spec to token ids (no begin/end markers; those are added
/// by the encoder). Suffix slots map to the reserved trailing ids.
pub fn tokenize(templates: &TextTemplates, spec: &TextPromptSpec) -> Result<Vec<usize>> {
    templates.validate()?;
    let mut text = templates.general.replace("{}", &spec.class_name);
    if let Some(state) = &spec.state {
        if !state.is_empty() {
            text.push(' ');
            text.push_str(state);
        }
    }
    let mut ids = Vec::new();
    for word in text.split_whitespace() {
        let lower = word.to_lowercase();
        let id = word_id(&lower).ok_or_else(|| ModelError::Text {
            detail: format!("word `{lower}` is not in the fixed vocabulary"),
        })?;
        ids.push(id);
    }
    for slot in 0..spec.n_ctx {
        ids.push(suffix_id(slot));
    }
    Ok(ids)
}

/// Encodes a token id sequence to a unit-norm `1×d` embedding: wrap with
/// begin/end markers, embed, add positions, run the frozen blocks, then
/// project the end-token state.
pub fn encode_text(
    g: &mut Graph,
    bound: &mut BoundParams,
    store: &ParamStore,
    arch: &ModelConfig,
    ids: &[usize],
) -> Result<NodeId> {
    if ids.is_empty() {
        return Err(ModelError::Text {
            detail: "cannot encode an empty token sequence".into(),
        });
    }
    let seq_len = ids.len() + 2;
    if seq_len > TEXT_POS_ROWS {
        return Err(ModelError::Text {
            detail: format!("sequence length {seq_len} exceeds positional table {TEXT_POS_ROWS}"),
        });
    }
    for &id in ids {
        if is_suffix_id(id) && id - VOCAB_ROWS >= arch.n_ctx {
            return Err(ModelError::Text {
                detail: format!("suffix id {id} outside the {} reserved slots", arch.n_ctx),
            });
        }
    }

    let vocab = bound.node(g, store, "text.vocab");
    let suffix = bound.node(g, store, "text.suffix");

    // Gather embedding rows, splitting the sequence into runs that read
    // from the vocabulary table vs. the trainable suffix rows.
    let full: Vec<usize> = std::iter::once(BOS_ID)
        .chain(ids.iter().copied())
        .chain(std::iter::once(EOS_ID))
        .collect();
    let mut segments: Vec<NodeId> = Vec::new();
    let mut run: Vec<usize> = Vec::new();
    let mut run_is_suffix = false;
    let flush = |g: &mut Graph, run: &mut Vec<usize>, is_suffix: bool, segments: &mut Vec<NodeId>| {
        if run.is_empty() {
            return;
        }
        let src = if is_suffix { suffix } else { vocab };
        let rows: Vec<usize> = if is_suffix {
            run.iter().map(|&id| id - VOCAB_ROWS).collect()
        } else {
            run.clone()
        };
        segments.push(g.gather_rows(src, &rows));
        run.clear();
    };
    for &id in &full {
        let this_suffix = is_suffix_id(id);
        if this_suffix != run_is_suffix {
            flush(g, &mut run, run_is_suffix, &mut segments);
            run_is_suffix = this_suffix;
        }
        run.push(id);
    }
    flush(g, &mut run, run_is_suffix, &mut segments);

    let embedded = if segments.len() == 1 {
        segments[0]
    } else {
        g.concat_rows_all(&segments)
    };
    let pos_table = bound.node(g, store, "text.pos");
    let pos = g.slice_rows(pos_table, 0, seq_len);
    let mut x = g.add(embedded, pos);

    let heads = arch.encoder.heads;
    let head_dim = arch.encoder.head_dim();
    for j in 0..arch.text_depth {
        let block = bind_block(g, bound, store, &format!("text.block{j}"), heads, head_dim);
        x = block_forward(g, x, &block);
    }

    let lnf_g = bound.node(g, store, "text.ln_f.g");
    let lnf_b = bound.node(g, store, "text.ln_f.b");
    let proj = bound.node(g, store, "text.proj.w");
    let normed = g.layer_norm(x, lnf_g, lnf_b, LN_EPS);
    let end_row = g.slice_rows(normed, seq_len - 1, seq_len);
    let projected = g.matmul(end_row, proj);
    Ok(g.unit_rows(projected, UNIT_EPS))
}

/// The normal/abnormal embedding pair for one class, plus a degeneracy
/// flag raised when the two embeddings (nearly) coincide.
#[derive(Debug, Clone, Copy)]
pub struct SemanticDuality {
    pub normal: NodeId,
    pub abnormal: NodeId,
    pub degenerate: bool,
}

/// Cosine threshold above which the pair counts as degenerate.
pub const DEGENERATE_COS: f64 = 1.0 - 1e-4;

/// Builds the class's embedding pair. The abnormal side ensembles every
/// state with both the fixed (no suffix) and learnable (`n_ctx` suffix
/// slots) variants; states are ensembled in sorted order so the result is
/// independent of the order the caller lists them in.
pub fn build_semantic_duality(
    g: &mut Graph,
    bound: &mut BoundParams,
    store: &ParamStore,
    arch: &ModelConfig,
    templates: &TextTemplates,
    class_name: &str,
    n_ctx: usize,
) -> Result<SemanticDuality> {
    templates.validate()?;
    let normal_ids = tokenize(templates, &TextPromptSpec::normal(class_name))?;
    let normal = encode_text(g, bound, store, arch, &normal_ids)?;

    let mut states = templates.states.clone();
    states.sort();
    let mut variants = Vec::with_capacity(states.len() * 2);
    for state in &states {
        for n_ctx in [0, n_ctx] {
            let ids = tokenize(templates, &TextPromptSpec::abnormal(class_name, state, n_ctx))?;
            variants.push(encode_text(g, bound, store, arch, &ids)?);
        }
    }
    let mut sum = variants[0];
    for &v in &variants[1..] {
        sum = g.add(sum, v);
    }
    let mean = g.scale(sum, 1.0 / variants.len() as f64);
    let abnormal = g.unit_rows(mean, UNIT_EPS);

    let cos: f64 = g
        .value(normal)
        .data()
        .iter()
        .zip(g.value(abnormal).data())
        .map(|(a, b)| a * b)
        .sum();
    Ok(SemanticDuality {
        normal,
        abnormal,
        degenerate: cos > DEGENERATE_COS,
    })
}
