//! Cross-modal prompt generation and refinement.
//!
//! Three prompt types are prepended to the token sequence at every
//! injection site (blocks `0..prompt_depth`):
//!
//! * **CCP** — one trainable `l×d` matrix shared by both branches.
//! * **MSP** — generated once per branch forward from the embedded input
//!   via a single-weight attention pass, pooled to `l` rows, and reused at
//!   every site.
//! * **MAP** — one trainable `l×d` matrix per branch per site, cascaded:
//!   the refined prompt of site `j` is added to the raw parameter of site
//!   `j+1` before that site's refinement.
//!
//! Refinement attends over the raw stack `[P; X]` with the site's own
//! (frozen) attention projections: value vectors double as queries and
//! keys, only the `l` prompt rows are used as queries, and the bare
//! attention output — no residual, no normalization — becomes the refined
//! prompt.

use misdd_core::{Graph, NodeId};

/// Value/query/key projections of one attention site, pre-bound as graph
/// nodes, plus the head layout.
#[derive(Debug, Clone, Copy)]
pub struct AttnSite {
    pub vw: NodeId,
    pub vb: NodeId,
    pub ow: NodeId,
    pub ob: NodeId,
    pub heads: usize,
    pub head_dim: usize,
}

/// Projects `x` through the site's value map: `x·W_v + b_v`.
pub fn value_of(g: &mut Graph, site: &AttnSite, x: NodeId) -> NodeId {
    let xv = g.matmul(x, site.vw);
    g.add_row_broadcast(xv, site.vb)
}

/// One consistent-attention refinement of an `l×d` prompt against token
/// values. `vp` must be `value_of(prompt)`; `vx`, if present, is
/// `value_of(tokens)` and may be shared across the prompts refined at the
/// same site. Returns the refined `l×d` prompt.
pub fn refine_prompt(g: &mut Graph, site: &AttnSite, vp: NodeId, vx: Option<NodeId>) -> NodeId {
    let stack_v = match vx {
        Some(vx) => g.concat_rows(vp, vx),
        None => vp,
    };
    let scale = 1.0 / (site.head_dim as f64).sqrt();
    let mut head_outputs = Vec::with_capacity(site.heads);
    for h in 0..site.heads {
        let lo = h * site.head_dim;
        let hi = lo + site.head_dim;
        let sv_h = g.slice_cols(stack_v, lo, hi);
        let q_h = g.slice_cols(vp, lo, hi);
        let sv_t = g.transpose(sv_h);
        let logits = g.matmul(q_h, sv_t);
        let logits = g.scale(logits, scale);
        let probs = g.softmax_rows(logits);
        head_outputs.push(g.matmul(probs, sv_h));
    }
    let merged = concat_cols_all(g, &head_outputs);
    let projected = g.matmul(merged, site.ow);
    g.add_row_broadcast(projected, site.ob)
}

/// Generates the modality-specific prompt from the embedded input tokens.
///
/// A single `d×d` weight (plus bias) per branch serves as the joint
/// value/query/key projection; the attention output over all tokens is
/// then mean-pooled over `l_msp` contiguous row groups.
pub fn generate_msp(
    g: &mut Graph,
    embedded: NodeId,
    w: NodeId,
    b: NodeId,
    l_msp: usize,
    heads: usize,
    head_dim: usize,
) -> NodeId {
    let v = {
        let xv = g.matmul(embedded, w);
        g.add_row_broadcast(xv, b)
    };
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut head_outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let lo = h * head_dim;
        let hi = lo + head_dim;
        let v_h = g.slice_cols(v, lo, hi);
        let v_t = g.transpose(v_h);
        let logits = g.matmul(v_h, v_t);
        let logits = g.scale(logits, scale);
        let probs = g.softmax_rows(logits);
        head_outputs.push(g.matmul(probs, v_h));
    }
    let attended = concat_cols_all(g, &head_outputs);

    let n = g.value(attended).rows();
    assert!(n >= l_msp, "cannot pool {n} rows into {l_msp} prompt rows");
    let mut pooled = Vec::with_capacity(l_msp);
    for i in 0..l_msp {
        let start = i * n / l_msp;
        let end = (i + 1) * n / l_msp;
        let slice = g.slice_rows(attended, start, end);
        pooled.push(g.mean_pool_rows(slice));
    }
    concat_rows_all_nodes(g, &pooled)
}

fn concat_cols_all(g: &mut Graph, ids: &[NodeId]) -> NodeId {
    let mut out = ids[0];
    for &id in &ids[1..] {
        out = g.concat_cols(out, id);
    }
    out
}

fn concat_rows_all_nodes(g: &mut Graph, ids: &[NodeId]) -> NodeId {
    if ids.len() == 1 {
        ids[0]
    } else {
        g.concat_rows_all(ids)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use misdd_core::Tensor;

    fn site_1d(g: &mut Graph) -> AttnSite {
        let vw = g.leaf(Tensor::eye(1), false);
        let vb = g.leaf(Tensor::zeros(1, 1), false);
        AttnSite {
            vw,
            vb,
            ow: vw,
            ob: vb,
            heads: 1,
            head_dim: 1,
        }
    }

    /// Hand evaluation on a 2-row stack: with d = 1, identity weights and
    /// zero bias, the refined prompt is row 0 of
    /// `softmax([p; x][p; x]ᵀ) · [p; x]`.
    #[test]
    fn scalar_refinement_matches_hand_softmax() {
        let p = 0.7;
        let x = 1.3;
        let mut g = Graph::new();
        let site = site_1d(&mut g);
        let pl = g.leaf(Tensor::filled(1, 1, p), false);
        let xl = g.leaf(Tensor::filled(1, 1, x), false);
        let vp = value_of(&mut g, &site, pl);
        let vx = value_of(&mut g, &site, xl);
        let refined = refine_prompt(&mut g, &site, vp, Some(vx));

        let (epp, epx) = ((p * p).exp(), (p * x).exp());
        let expected = (epp * p + epx * x) / (epp + epx);
        assert!((g.value(refined).get(0, 0) - expected).abs() < 1e-12);
    }

    /// With no tokens available the prompt attends over itself alone.
    #[test]
    fn refinement_without_tokens_degenerates_to_self_attention() {
        let mut g = Graph::new();
        let site = site_1d(&mut g);
        let pl = g.leaf(Tensor::filled(1, 1, 0.4), false);
        let vp = value_of(&mut g, &site, pl);
        let refined = refine_prompt(&mut g, &site, vp, None);
        // softmax over a single logit is 1, so the prompt is returned as-is.
        assert!((g.value(refined).get(0, 0) - 0.4).abs() < 1e-12);
    }

    /// Single head, single token: softmax(1×1) = 1, so MSP reduces to the
    /// projected token `W·x` (zero bias), replicated by pooling.
    #[test]
    fn single_token_msp_is_the_projected_token() {
        let d = 3;
        let mut g = Graph::new();
        let w = Tensor::from_fn(d, d, |i, j| ((i + 2 * j) as f64).sin() * 0.3);
        let x = Tensor::from_vec(1, d, vec![0.2, -0.4, 0.9]);
        let expected = x.matmul(&w);
        let wl = g.leaf(w, false);
        let bl = g.leaf(Tensor::zeros(1, d), false);
        let xl = g.leaf(x, false);
        let msp = generate_msp(&mut g, xl, wl, bl, 1, 1, d);
        let got = g.value(msp);
        for j in 0..d {
            assert!((got.get(0, j) - expected.get(0, j)).abs() < 1e-12);
        }
    }

    /// All-zero input: value vectors are the bias row, attention is uniform,
    /// and every pooled prompt row equals that constant row.
    #[test]
    fn zero_input_msp_has_constant_rows() {
        let d = 4;
        let n = 6;
        let l = 2;
        let mut g = Graph::new();
        let w = g.leaf(Tensor::from_fn(d, d, |i, j| 0.1 * (i as f64) - 0.05 * (j as f64)), false);
        let bias = Tensor::from_vec(1, d, vec![0.3, -0.2, 0.05, 0.7]);
        let b = g.leaf(bias.clone(), false);
        let x = g.leaf(Tensor::zeros(n, d), false);
        let msp = generate_msp(&mut g, x, w, b, l, 2, 2);
        let got = g.value(msp);
        assert_eq!(got.shape(), (l, d));
        for i in 0..l {
            for j in 0..d {
                assert!((got.get(i, j) - bias.get(0, j)).abs() < 1e-12);
            }
        }
    }

    /// With a single pooled row the prompt is the global token mean of the
    /// attention output, which is invariant to input token order.
    #[test]
    fn global_mean_pooling_is_permutation_invariant() {
        let d = 4;
        let n = 5;
        let rows: Vec<f64> = (0..n * d).map(|i| ((i * 37 % 11) as f64) / 7.0 - 0.6).collect();
        let x = Tensor::from_vec(n, d, rows);
        let perm = [3usize, 0, 4, 1, 2];
        let x_perm = x.gather_rows(&perm);

        let w = Tensor::from_fn(d, d, |i, j| 0.2 * ((i * 3 + j) as f64).cos());
        let b = Tensor::from_vec(1, d, vec![0.1, 0.0, -0.3, 0.2]);

        let run = |input: Tensor| {
            let mut g = Graph::new();
            let wl = g.leaf(w.clone(), false);
            let bl = g.leaf(b.clone(), false);
            let xl = g.leaf(input, false);
            let msp = generate_msp(&mut g, xl, wl, bl, 1, 2, 2);
            g.value(msp).clone()
        };
        let a = run(x);
        let c = run(x_perm);
        for j in 0..d {
            assert!((a.get(0, j) - c.get(0, j)).abs() < 1e-9);
        }
    }

    /// Refined prompt row count and width never depend on the token count.
    #[test]
    fn refinement_preserves_prompt_shape() {
        let (l, n, d) = (3, 7, 4);
        let mut g = Graph::new();
        let vw = g.leaf(Tensor::from_fn(d, d, |i, j| 0.05 * ((i + j) as f64)), false);
        let vb = g.leaf(Tensor::zeros(1, d), false);
        let site = AttnSite {
            vw,
            vb,
            ow: vw,
            ob: vb,
            heads: 2,
            head_dim: 2,
        };
        let p = g.leaf(Tensor::from_fn(l, d, |i, j| 0.1 * (i as f64) + 0.01 * (j as f64)), false);
        let x = g.leaf(Tensor::from_fn(n, d, |i, j| 0.02 * ((i * j) as f64) - 0.3), false);
        let vp = value_of(&mut g, &site, p);
        let vx = value_of(&mut g, &site, x);
        let refined = refine_prompt(&mut g, &site, vp, Some(vx));
        assert_eq!(g.value(refined).shape(), (l, d));
    }
}
