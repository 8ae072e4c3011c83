//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! A [`Graph`] records every operation eagerly: each call computes the
//! forward value immediately and appends a node remembering its parents.
//! [`Graph::backward`] then walks the tape once in reverse, accumulating
//! gradients in a fixed order so results are bit-reproducible.
//!
//! Gradients are only propagated into subgraphs that can reach a
//! gradient-requiring leaf; frozen weights participate in the forward
//! pass at full speed without ever allocating gradient buffers.

use crate::tensor::Tensor;

/// Handle to a node on the tape. Only valid for the graph that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    MulElem(NodeId, NodeId),
    Scale(NodeId, f64),
    /// (n×d) + (1×d) bias row added to every row.
    AddRowBroadcast(NodeId, NodeId),
    ConcatRows(NodeId, NodeId),
    ConcatCols(NodeId, NodeId),
    SliceRows(NodeId, usize, usize),
    SliceCols(NodeId, usize, usize),
    GatherRows(NodeId, Vec<usize>),
    /// Rows listed in `.2` replaced by the single `.1` row (1×d).
    ReplaceRows(NodeId, NodeId, Vec<usize>),
    SoftmaxRows(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    },
    Gelu(NodeId),
    MeanPoolRows(NodeId),
    /// Row-wise unit normalization with norm clamped below by eps.
    UnitRows(NodeId, f64),
    SumAll(NodeId),
    /// Elementwise square root; derivative denominator clamped at 1e-12.
    Sqrt(NodeId),
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
}

/// Result of a backward pass: per-node gradients (present only for nodes
/// that require gradients and are reachable from the loss).
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        assert_eq!(v.shape(), (1, 1), "scalar() on non-scalar node");
        v.data()[0]
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Inserts an input tensor. `requires_grad` marks trainable leaves;
    /// constants and frozen weights should pass `false`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(Op::Leaf, value, requires_grad)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).matmul(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::MatMul(a, b), value, ng)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).transpose();
        let ng = self.needs(a);
        self.push(Op::Transpose(a), value, ng)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).add(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Add(a, b), value, ng)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).sub(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Sub(a, b), value, ng)
    }

    pub fn mul_elem(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).mul_elem(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::MulElem(a, b), value, ng)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let value = self.value(a).scale(s);
        let ng = self.needs(a);
        self.push(Op::Scale(a, s), value, ng)
    }

    /// Adds a 1×d bias row to every row of an n×d tensor.
    pub fn add_row_broadcast(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let xv = self.value(x);
        let bv = self.value(bias);
        assert_eq!(bv.rows(), 1, "bias must be a single row");
        assert_eq!(xv.cols(), bv.cols(), "bias width mismatch");
        let mut value = xv.clone();
        for i in 0..value.rows() {
            for (v, b) in value.row_mut(i).iter_mut().zip(bv.row(0)) {
                *v += b;
            }
        }
        let ng = self.needs(x) || self.needs(bias);
        self.push(Op::AddRowBroadcast(x, bias), value, ng)
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).concat_rows(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::ConcatRows(a, b), value, ng)
    }

    /// Stacks several nodes vertically, top to bottom.
    pub fn concat_rows_all(&mut self, ids: &[NodeId]) -> NodeId {
        assert!(!ids.is_empty(), "concat_rows_all of nothing");
        let mut acc = ids[0];
        for &id in &ids[1..] {
            acc = self.concat_rows(acc, id);
        }
        acc
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).concat_cols(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::ConcatCols(a, b), value, ng)
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        let value = self.value(a).slice_rows(start, end);
        let ng = self.needs(a);
        self.push(Op::SliceRows(a, start, end), value, ng)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        let value = self.value(a).slice_cols(start, end);
        let ng = self.needs(a);
        self.push(Op::SliceCols(a, start, end), value, ng)
    }

    pub fn gather_rows(&mut self, a: NodeId, indices: &[usize]) -> NodeId {
        let value = self.value(a).gather_rows(indices);
        let ng = self.needs(a);
        self.push(Op::GatherRows(a, indices.to_vec()), value, ng)
    }

    /// Replaces the listed rows of `x` with the single `replacement` row.
    pub fn replace_rows(&mut self, x: NodeId, replacement: NodeId, rows: &[usize]) -> NodeId {
        let rv = self.value(replacement);
        assert_eq!(rv.rows(), 1, "replacement must be a single row");
        assert_eq!(rv.cols(), self.value(x).cols(), "replacement width mismatch");
        let row = rv.row(0).to_vec();
        let mut value = self.value(x).clone();
        for &r in rows {
            value.row_mut(r).copy_from_slice(&row);
        }
        let ng = self.needs(x) || self.needs(replacement);
        self.push(Op::ReplaceRows(x, replacement, rows.to_vec()), value, ng)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).softmax_rows();
        let ng = self.needs(a);
        self.push(Op::SoftmaxRows(a), value, ng)
    }

    /// Per-row layer normalization with affine parameters (1×d each).
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let value = layer_norm_forward(self.value(x), self.value(gamma), self.value(beta), eps);
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(Op::LayerNorm { x, gamma, beta, eps }, value, ng)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(gelu);
        let ng = self.needs(a);
        self.push(Op::Gelu(a), value, ng)
    }

    /// Column means of an n×d tensor as a 1×d row.
    pub fn mean_pool_rows(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).mean_rows();
        let ng = self.needs(a);
        self.push(Op::MeanPoolRows(a), value, ng)
    }

    /// Scales every row to unit Euclidean norm (norm clamped at `eps`).
    pub fn unit_rows(&mut self, a: NodeId, eps: f64) -> NodeId {
        let value = self.value(a).unit_rows(eps);
        let ng = self.needs(a);
        self.push(Op::UnitRows(a, eps), value, ng)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let value = Tensor::from_vec(1, 1, vec![self.value(a).sum()]);
        let ng = self.needs(a);
        self.push(Op::SumAll(a), value, ng)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(f64::sqrt);
        let ng = self.needs(a);
        self.push(Op::Sqrt(a), value, ng)
    }

    /// Reverse pass from a 1×1 loss node. Returns per-node gradients.
    pub fn backward(&self, root: NodeId) -> Gradients {
        assert_eq!(
            self.value(root).shape(),
            (1, 1),
            "backward root must be scalar"
        );
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::filled(1, 1, 1.0));

        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.backward_node(i, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Gradients { grads }
    }

    fn backward_node(&self, i: usize, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    let bt = self.value(*b).transpose();
                    accum(grads, *a, dy.matmul(&bt));
                }
                if self.needs(*b) {
                    let at = self.value(*a).transpose();
                    accum(grads, *b, at.matmul(dy));
                }
            }
            Op::Transpose(a) => {
                if self.needs(*a) {
                    accum(grads, *a, dy.transpose());
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    accum(grads, *a, dy.clone());
                }
                if self.needs(*b) {
                    accum(grads, *b, dy.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    accum(grads, *a, dy.clone());
                }
                if self.needs(*b) {
                    accum(grads, *b, dy.scale(-1.0));
                }
            }
            Op::MulElem(a, b) => {
                if self.needs(*a) {
                    accum(grads, *a, dy.mul_elem(self.value(*b)));
                }
                if self.needs(*b) {
                    accum(grads, *b, dy.mul_elem(self.value(*a)));
                }
            }
            Op::Scale(a, s) => {
                if self.needs(*a) {
                    accum(grads, *a, dy.scale(*s));
                }
            }
            Op::AddRowBroadcast(x, bias) => {
                if self.needs(*x) {
                    accum(grads, *x, dy.clone());
                }
                if self.needs(*bias) {
                    let mut db = Tensor::zeros(1, dy.cols());
                    for r in 0..dy.rows() {
                        for (acc, v) in db.row_mut(0).iter_mut().zip(dy.row(r)) {
                            *acc += v;
                        }
                    }
                    accum(grads, *bias, db);
                }
            }
            Op::ConcatRows(a, b) => {
                let ra = self.value(*a).rows();
                if self.needs(*a) {
                    accum(grads, *a, dy.slice_rows(0, ra));
                }
                if self.needs(*b) {
                    accum(grads, *b, dy.slice_rows(ra, dy.rows()));
                }
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).cols();
                if self.needs(*a) {
                    accum(grads, *a, dy.slice_cols(0, ca));
                }
                if self.needs(*b) {
                    accum(grads, *b, dy.slice_cols(ca, dy.cols()));
                }
            }
            Op::SliceRows(a, start, end) => {
                if self.needs(*a) {
                    let src = self.value(*a);
                    let mut da = Tensor::zeros(src.rows(), src.cols());
                    for (r, dst) in (*start..*end).enumerate() {
                        da.row_mut(dst).copy_from_slice(dy.row(r));
                    }
                    accum(grads, *a, da);
                }
            }
            Op::SliceCols(a, start, end) => {
                if self.needs(*a) {
                    let src = self.value(*a);
                    let mut da = Tensor::zeros(src.rows(), src.cols());
                    for r in 0..src.rows() {
                        da.row_mut(r)[*start..*end].copy_from_slice(dy.row(r));
                    }
                    accum(grads, *a, da);
                }
            }
            Op::GatherRows(a, indices) => {
                if self.needs(*a) {
                    let src = self.value(*a);
                    let mut da = Tensor::zeros(src.rows(), src.cols());
                    for (r, &src_row) in indices.iter().enumerate() {
                        for (acc, v) in da.row_mut(src_row).iter_mut().zip(dy.row(r)) {
                            *acc += v;
                        }
                    }
                    accum(grads, *a, da);
                }
            }
            Op::ReplaceRows(x, replacement, rows) => {
                if self.needs(*x) {
                    let mut dx = dy.clone();
                    for &r in rows {
                        dx.row_mut(r).fill(0.0);
                    }
                    accum(grads, *x, dx);
                }
                if self.needs(*replacement) {
                    let mut dr = Tensor::zeros(1, dy.cols());
                    for &r in rows {
                        for (acc, v) in dr.row_mut(0).iter_mut().zip(dy.row(r)) {
                            *acc += v;
                        }
                    }
                    accum(grads, *replacement, dr);
                }
            }
            Op::SoftmaxRows(a) => {
                if self.needs(*a) {
                    let y = &node.value;
                    let mut dx = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let dyr = dy.row(r);
                        let dot: f64 = yr.iter().zip(dyr).map(|(a, b)| a * b).sum();
                        for (out, (&yv, &dv)) in
                            dx.row_mut(r).iter_mut().zip(yr.iter().zip(dyr))
                        {
                            *out = yv * (dv - dot);
                        }
                    }
                    accum(grads, *a, dx);
                }
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                layer_norm_backward(self, *x, *gamma, *beta, *eps, dy, grads);
            }
            Op::Gelu(a) => {
                if self.needs(*a) {
                    let da = self.value(*a).zip(dy, |x, d| d * gelu_grad(x));
                    accum(grads, *a, da);
                }
            }
            Op::MeanPoolRows(a) => {
                if self.needs(*a) {
                    let src = self.value(*a);
                    let inv = 1.0 / src.rows() as f64;
                    let mut da = Tensor::zeros(src.rows(), src.cols());
                    for r in 0..src.rows() {
                        for (out, v) in da.row_mut(r).iter_mut().zip(dy.row(0)) {
                            *out = v * inv;
                        }
                    }
                    accum(grads, *a, da);
                }
            }
            Op::UnitRows(a, eps) => {
                if self.needs(*a) {
                    let x = self.value(*a);
                    let y = &node.value;
                    let mut dx = Tensor::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        let norm = x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                        if norm > *eps {
                            // d(x/‖x‖) = (dy − y (y·dy)) / ‖x‖
                            let dot: f64 =
                                y.row(r).iter().zip(dy.row(r)).map(|(a, b)| a * b).sum();
                            for (out, (&yv, &dv)) in dx
                                .row_mut(r)
                                .iter_mut()
                                .zip(y.row(r).iter().zip(dy.row(r)))
                            {
                                *out = (dv - yv * dot) / norm;
                            }
                        } else {
                            // Clamped branch: y = x/eps is linear in x.
                            for (out, &dv) in dx.row_mut(r).iter_mut().zip(dy.row(r)) {
                                *out = dv / *eps;
                            }
                        }
                    }
                    accum(grads, *a, dx);
                }
            }
            Op::SumAll(a) => {
                if self.needs(*a) {
                    let src = self.value(*a);
                    accum(grads, *a, Tensor::filled(src.rows(), src.cols(), dy.data()[0]));
                }
            }
            Op::Sqrt(a) => {
                if self.needs(*a) {
                    let da = node.value.zip(dy, |y, d| d / (2.0 * y.max(1e-12)));
                    accum(grads, *a, da);
                }
            }
        }
    }
}

fn accum(grads: &mut [Option<Tensor>], id: NodeId, t: Tensor) {
    match &mut grads[id.0] {
        Some(g) => g.add_assign(&t),
        slot @ None => *slot = Some(t),
    }
}

fn layer_norm_forward(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
    assert_eq!(gamma.shape(), (1, x.cols()), "layer_norm gamma shape");
    assert_eq!(beta.shape(), (1, x.cols()), "layer_norm beta shape");
    let d = x.cols() as f64;
    let mut out = Tensor::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let inv = 1.0 / (var + eps).sqrt();
        for (j, out_v) in out.row_mut(r).iter_mut().enumerate() {
            *out_v = gamma.data()[j] * (row[j] - mean) * inv + beta.data()[j];
        }
    }
    out
}

fn layer_norm_backward(
    graph: &Graph,
    x_id: NodeId,
    gamma_id: NodeId,
    beta_id: NodeId,
    eps: f64,
    dy: &Tensor,
    grads: &mut [Option<Tensor>],
) {
    let x = graph.value(x_id);
    let gamma = graph.value(gamma_id);
    let d = x.cols() as f64;

    let mut dx = Tensor::zeros(x.rows(), x.cols());
    let mut dgamma = Tensor::zeros(1, x.cols());
    let mut dbeta = Tensor::zeros(1, x.cols());

    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let inv = 1.0 / (var + eps).sqrt();

        // dxhat = dy * gamma; accumulate the two row means needed below.
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..x.cols() {
            let xhat = (row[j] - mean) * inv;
            let dxh = dy.row(r)[j] * gamma.data()[j];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xhat;
            dgamma.data_mut()[j] += dy.row(r)[j] * xhat;
            dbeta.data_mut()[j] += dy.row(r)[j];
        }
        mean_dxhat /= d;
        mean_dxhat_xhat /= d;

        for j in 0..x.cols() {
            let xhat = (row[j] - mean) * inv;
            let dxh = dy.row(r)[j] * gamma.data()[j];
            dx.row_mut(r)[j] = inv * (dxh - mean_dxhat - xhat * mean_dxhat_xhat);
        }
    }

    if graph.needs(x_id) {
        accum(grads, x_id, dx);
    }
    if graph.needs(gamma_id) {
        accum(grads, gamma_id, dgamma);
    }
    if graph.needs(beta_id) {
        accum(grads, beta_id, dbeta);
    }
}

const GELU_C0: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_C1: f64 = 0.044715;

/// Gaussian error linear unit (tanh approximation).
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C0 * (x + GELU_C1 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C0 * (x + GELU_C1 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C0 * (1.0 + 3.0 * GELU_C1 * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central-difference check of a scalar graph function against the
    /// tape gradient for a single leaf.
    fn check_against_fd(
        build: impl Fn(&mut Graph, NodeId) -> NodeId,
        x0: Tensor,
        tol: f64,
    ) {
        let mut g = Graph::new();
        let x = g.leaf(x0.clone(), true);
        let loss = build(&mut g, x);
        let grads = g.backward(loss);
        let analytic = grads.get(x).expect("leaf gradient missing").clone();

        let eps = 1e-6;
        for idx in 0..x0.len() {
            let eval = |v: f64| {
                let mut probe = x0.clone();
                probe.data_mut()[idx] = v;
                let mut g = Graph::new();
                let x = g.leaf(probe, false);
                let loss = build(&mut g, x);
                g.scalar(loss)
            };
            let base = x0.data()[idx];
            let numeric = (eval(base + eps) - eval(base - eps)) / (2.0 * eps);
            let a = analytic.data()[idx];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            assert!(
                rel < tol,
                "entry {idx}: analytic {a} vs numeric {numeric} (rel {rel})"
            );
        }
    }

    fn demo_tensor(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut state = seed.wrapping_add(0x12345);
        Tensor::from_fn(rows, cols, |_, _| {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((state >> 33) % 2001) as f64 / 1000.0 - 1.0
        })
    }

    #[test]
    fn matmul_gradient() {
        let w = demo_tensor(3, 2, 9);
        check_against_fd(
            |g, x| {
                let w = g.leaf(w.clone(), false);
                let y = g.matmul(x, w);
                let sq = g.mul_elem(y, y);
                g.sum_all(sq)
            },
            demo_tensor(2, 3, 1),
            1e-6,
        );
    }

    #[test]
    fn softmax_gradient() {
        check_against_fd(
            |g, x| {
                let s = g.softmax_rows(x);
                let sq = g.mul_elem(s, s);
                g.sum_all(sq)
            },
            demo_tensor(3, 4, 2),
            1e-6,
        );
    }

    #[test]
    fn layer_norm_gradient() {
        let gamma = demo_tensor(1, 5, 42);
        let beta = demo_tensor(1, 5, 43);
        check_against_fd(
            |g, x| {
                let gamma = g.leaf(gamma.clone(), false);
                let beta = g.leaf(beta.clone(), false);
                let y = g.layer_norm(x, gamma, beta, 1e-5);
                let sq = g.mul_elem(y, y);
                g.sum_all(sq)
            },
            demo_tensor(3, 5, 3),
            1e-5,
        );
    }

    #[test]
    fn layer_norm_param_gradients() {
        // Gradients w.r.t. gamma and beta via the generic leaf checker:
        // treat gamma as the probed leaf.
        let x = demo_tensor(3, 4, 11);
        check_against_fd(
            |g, gamma| {
                let x = g.leaf(x.clone(), false);
                let beta = g.leaf(Tensor::zeros(1, 4), false);
                let y = g.layer_norm(x, gamma, beta, 1e-5);
                let sq = g.mul_elem(y, y);
                g.sum_all(sq)
            },
            demo_tensor(1, 4, 12),
            1e-6,
        );
    }

    #[test]
    fn gelu_gradient() {
        check_against_fd(
            |g, x| {
                let y = g.gelu(x);
                g.sum_all(y)
            },
            demo_tensor(2, 4, 5),
            1e-6,
        );
    }

    #[test]
    fn unit_rows_gradient() {
        check_against_fd(
            |g, x| {
                let y = g.unit_rows(x, 1e-12);
                let sq = g.mul_elem(y, y);
                let t = demo_tensor(2, 4, 77);
                let t = g.leaf(t, false);
                let m = g.mul_elem(sq, t);
                g.sum_all(m)
            },
            demo_tensor(2, 4, 6),
            1e-6,
        );
    }

    #[test]
    fn gather_replace_slice_gradients() {
        check_against_fd(
            |g, x| {
                let gathered = g.gather_rows(x, &[2, 0, 2, 1]);
                let rep = g.leaf(demo_tensor(1, 3, 50), true);
                let replaced = g.replace_rows(gathered, rep, &[1]);
                let sliced = g.slice_rows(replaced, 0, 3);
                let sq = g.mul_elem(sliced, sliced);
                g.sum_all(sq)
            },
            demo_tensor(3, 3, 7),
            1e-6,
        );
    }

    #[test]
    fn sqrt_distance_gradient() {
        // Euclidean distance of two unit-normalized rows — the exact op
        // chain the contrastive loss uses.
        let other = demo_tensor(1, 4, 21);
        check_against_fd(
            |g, x| {
                let xu = g.unit_rows(x, 1e-12);
                let other = g.leaf(other.clone(), false);
                let ou = g.unit_rows(other, 1e-12);
                let diff = g.sub(xu, ou);
                let sq = g.mul_elem(diff, diff);
                let s = g.sum_all(sq);
                g.sqrt(s)
            },
            demo_tensor(1, 4, 22),
            1e-5,
        );
    }

    #[test]
    fn broadcast_and_mean_pool_gradients() {
        check_against_fd(
            |g, x| {
                let bias = g.leaf(demo_tensor(1, 3, 30), false);
                let y = g.add_row_broadcast(x, bias);
                let pooled = g.mean_pool_rows(y);
                let sq = g.mul_elem(pooled, pooled);
                g.sum_all(sq)
            },
            demo_tensor(4, 3, 8),
            1e-6,
        );
    }

    #[test]
    fn concat_and_transpose_gradients() {
        check_against_fd(
            |g, x| {
                let t = g.transpose(x);
                let back = g.transpose(t);
                let joined = g.concat_rows(x, back);
                let cols = g.concat_cols(joined, joined);
                let sq = g.mul_elem(cols, cols);
                g.sum_all(sq)
            },
            demo_tensor(2, 3, 13),
            1e-6,
        );
    }

    #[test]
    fn shared_node_gradient_accumulates() {
        // f(x) = sum(x⊙x) via two paths sharing x: gradient must be the
        // sum of both contributions (2x + 2x = 4x at each entry after
        // doubling), matching finite differences.
        check_against_fd(
            |g, x| {
                let a = g.mul_elem(x, x);
                let b = g.mul_elem(x, x);
                let s = g.add(a, b);
                g.sum_all(s)
            },
            demo_tensor(2, 2, 14),
            1e-6,
        );
    }

    #[test]
    fn frozen_leaf_gets_no_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(demo_tensor(2, 2, 15), false);
        let w = g.leaf(demo_tensor(2, 2, 16), true);
        let y = g.matmul(x, w);
        let s = g.sum_all(y);
        let grads = g.backward(s);
        assert!(grads.get(x).is_none());
        assert!(grads.get(w).is_some());
    }

    #[test]
    fn consistent_attention_hand_value() {
        // Two tokens, one head, d_k = 1, identity projection,
        // V = [[1],[0]]: rows of softmax(VV^T) are softmax([1,0]) and
        // softmax([0,0]); attending over V gives e/(1+e) and 1/2.
        let mut g = Graph::new();
        let v = g.leaf(Tensor::from_vec(2, 1, vec![1.0, 0.0]), false);
        let vt = g.transpose(v);
        let logits = g.matmul(v, vt);
        let attn = g.softmax_rows(logits);
        let out = g.matmul(attn, v);
        let e = std::f64::consts::E;
        let want0 = e / (1.0 + e);
        assert!((g.value(out).get(0, 0) - want0).abs() < 1e-12);
        assert!((g.value(out).get(1, 0) - 0.5).abs() < 1e-12);
    }
}
