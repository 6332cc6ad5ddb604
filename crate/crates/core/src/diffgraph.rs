//! Define-by-run reverse-mode differentiation for the encoder graph.
//!
//! Every operation evaluates its forward value eagerly when the node is
//! created. Nodes are appended in creation order, so the node vector is
//! already a topological order and the backward pass is a single reverse
//! sweep. All arithmetic is `f64`.
//!
//! The op set is deliberately small: it covers exactly what the codec's
//! training pipeline needs (dense layers, 1×1/3×3 convolutions, fixed
//! sparse linear maps, learned polyphase ×2 upsampling, quantizer
//! relaxations, the soft/hard MED predictor and the discretized Laplace
//! rate).

use std::sync::Arc;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("unsupported kernel size {0} (expected 1 or 3)")]
    UnsupportedKernel(usize),
    #[error("node {0} does not belong to this graph")]
    UnknownNode(usize),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
}

pub type Result<T> = std::result::Result<T, GraphError>;

/// Dense row-major n-dimensional array of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(GraphError::ShapeMismatch {
                op: "tensor",
                detail: format!("shape {:?} needs {} values, got {}", shape, n, data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![1], data: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node inside a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Compressed sparse row matrix used for fixed linear maps.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    pub rows: usize,
    pub cols: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl SparseMatrix {
    /// Builds a CSR matrix from per-row `(column, weight)` lists.
    pub fn from_rows(cols: usize, rows: &[Vec<(usize, f64)>]) -> Self {
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for r in rows {
            for &(c, w) in r {
                debug_assert!(c < cols);
                col_idx.push(c);
                values.push(w);
            }
            row_ptr.push(col_idx.len());
        }
        Self { rows: rows.len(), cols, row_ptr, col_idx, values }
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.rows)
            .map(|r| {
                (self.row_ptr[r]..self.row_ptr[r + 1])
                    .map(|k| self.values[k] * x[self.col_idx[k]])
                    .sum()
            })
            .collect()
    }

    fn apply_transpose_acc(&self, g: &[f64], out: &mut [f64]) {
        for (r, &gr) in g.iter().enumerate() {
            if gr == 0.0 {
                continue;
            }
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                out[self.col_idx[k]] += self.values[k] * gr;
            }
        }
    }
}

/// Axis selector for the polyphase upsampler.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

/// Polyphase layout of a symmetric 8-tap ×2 interpolation filter described
/// by its four half-taps `g`. Entry `(offset, tap)` means input sample
/// `k + offset` is weighted by `g[tap]` for output `2k + phase`.
pub const UPSAMPLE_PHASES: [[(isize, usize); 4]; 2] = [
    [(-2, 0), (-1, 2), (0, 3), (1, 1)],
    [(-1, 1), (0, 3), (1, 2), (2, 0)],
];

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId),
    Relu(NodeId),
    Clamp(NodeId, f64, f64),
    Square(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Reshape(NodeId),
    Dense { x: NodeId, w: NodeId, b: NodeId, rows: usize, n_in: usize, n_out: usize },
    Conv2d { x: NodeId, k: NodeId, b: NodeId, c_in: usize, c_out: usize, h: usize, w: usize, ks: usize },
    Gather { x: NodeId, idx: Arc<Vec<Option<usize>>> },
    Concat(Vec<NodeId>),
    Sparse { x: NodeId, m: Arc<SparseMatrix> },
    Upsample { x: NodeId, taps: NodeId, axis: Axis },
    SoftRound { x: NodeId, t: f64 },
    SteRound(NodeId),
    MedSoft { ctx: NodeId, t: f64 },
    MedHard(NodeId),
    LaplaceRate { x: NodeId, mu: NodeId, log_scale: NodeId, min_prob: f64 },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// A define-by-run computation graph.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `id`, or zeros when no path from the loss reached it.
    pub fn get_or_zeros(&self, id: NodeId, len: usize) -> Vec<f64> {
        self.get(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; len])
    }
}

fn mismatch(op: &'static str, detail: String) -> GraphError {
    GraphError::ShapeMismatch { op, detail }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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

    fn val(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value.data
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].value.shape
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(GraphError::UnknownNode(id.0))
        }
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Leaf, t, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Leaf, t, false)
    }

    fn same_len(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        self.check(a)?;
        self.check(b)?;
        if self.val(a).len() != self.val(b).len() {
            return Err(mismatch(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_len("add", a, b)?;
        let data = self.val(a).iter().zip(self.val(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Add(a, b), Tensor { shape, data }, rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_len("sub", a, b)?;
        let data = self.val(a).iter().zip(self.val(b)).map(|(x, y)| x - y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Sub(a, b), Tensor { shape, data }, rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_len("mul", a, b)?;
        let data = self.val(a).iter().zip(self.val(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Mul(a, b), Tensor { shape, data }, rg))
    }

    pub fn scale(&mut self, a: NodeId, f: f64) -> Result<NodeId> {
        self.check(a)?;
        let data = self.val(a).iter().map(|x| x * f).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(Op::Scale(a, f), Tensor { shape, data }, rg))
    }

    /// `a + c` for a constant tensor `c` of the same length.
    pub fn add_const(&mut self, a: NodeId, c: &[f64]) -> Result<NodeId> {
        self.check(a)?;
        if c.len() != self.val(a).len() {
            return Err(mismatch("add_const", format!("{} vs {}", self.val(a).len(), c.len())));
        }
        let data = self.val(a).iter().zip(c).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(Op::AddConst(a), Tensor { shape, data }, rg))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let data = self.val(a).iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(Op::Relu(a), Tensor { shape, data }, rg))
    }

    /// Elementwise clamp; the gradient is zero where the clamp is active.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        self.check(a)?;
        let data = self.val(a).iter().map(|&x| x.clamp(lo, hi)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(Op::Clamp(a, lo, hi), Tensor { shape, data }, rg))
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let data = self.val(a).iter().map(|x| x * x).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(Op::Square(a), Tensor { shape, data }, rg))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let s = self.val(a).iter().sum();
        let rg = self.rg(a);
        Ok(self.push(Op::Sum(a), Tensor::scalar(s), rg))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let n = self.val(a).len();
        if n == 0 {
            return Err(GraphError::InvalidArgument { op: "mean", detail: "empty tensor".into() });
        }
        let s: f64 = self.val(a).iter().sum();
        let rg = self.rg(a);
        Ok(self.push(Op::Mean(a), Tensor::scalar(s / n as f64), rg))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        self.check(a)?;
        let t = Tensor::new(shape, self.val(a).to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(Op::Reshape(a), t, rg))
    }

    /// Fully connected layer applied to every row of `x`.
    ///
    /// `x` is `[rows × n_in]` (or `[n_in]`), `w` is `[n_out × n_in]` and
    /// `b` is `[n_out]`; the result is `[rows × n_out]`.
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(x)?;
        self.check(w)?;
        self.check(b)?;
        let ws = self.shape(w);
        if ws.len() != 2 {
            return Err(mismatch("dense", format!("weights must be 2-D, got {:?}", ws)));
        }
        let (n_out, n_in) = (ws[0], ws[1]);
        if self.val(b).len() != n_out {
            return Err(mismatch("dense", format!("bias {} vs {} outputs", self.val(b).len(), n_out)));
        }
        let xs = self.shape(x);
        let (rows, vector_input) = match xs.len() {
            1 if xs[0] == n_in => (1, true),
            2 if xs[1] == n_in => (xs[0], false),
            _ => return Err(mismatch("dense", format!("input {:?} vs weights {:?}", xs, ws))),
        };
        let (xv, wv, bv) = (self.val(x), self.val(w), self.val(b));
        let mut out = vec![0.0; rows * n_out];
        for r in 0..rows {
            let xr = &xv[r * n_in..(r + 1) * n_in];
            let orow = &mut out[r * n_out..(r + 1) * n_out];
            for (i, o) in orow.iter_mut().enumerate() {
                let wr = &wv[i * n_in..(i + 1) * n_in];
                let mut acc = bv[i];
                for (wij, xj) in wr.iter().zip(xr) {
                    acc += wij * xj;
                }
                *o = acc;
            }
        }
        let shape = if vector_input { vec![n_out] } else { vec![rows, n_out] };
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Op::Dense { x, w, b, rows, n_in, n_out }, Tensor { shape, data: out }, rg))
    }

    /// Same-size zero-padded cross-correlation; `x` is `[C_in × H × W]`,
    /// `k` is `[C_out × C_in × ks × ks]` with `ks ∈ {1, 3}`.
    pub fn conv2d(&mut self, x: NodeId, k: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(x)?;
        self.check(k)?;
        self.check(b)?;
        let ks_shape = self.shape(k).to_vec();
        let xs = self.shape(x).to_vec();
        if ks_shape.len() != 4 || ks_shape[2] != ks_shape[3] {
            return Err(mismatch("conv2d", format!("kernel {:?}", ks_shape)));
        }
        let ks = ks_shape[2];
        if ks != 1 && ks != 3 {
            return Err(GraphError::UnsupportedKernel(ks));
        }
        if xs.len() != 3 || xs[0] != ks_shape[1] {
            return Err(mismatch("conv2d", format!("input {:?} vs kernel {:?}", xs, ks_shape)));
        }
        let (c_out, c_in, h, w) = (ks_shape[0], xs[0], xs[1], xs[2]);
        if self.val(b).len() != c_out {
            return Err(mismatch("conv2d", format!("bias {} vs {}", self.val(b).len(), c_out)));
        }
        let out = conv2d_forward(self.val(x), self.val(k), self.val(b), c_in, c_out, h, w, ks);
        let rg = self.rg(x) || self.rg(k) || self.rg(b);
        Ok(self.push(
            Op::Conv2d { x, k, b, c_in, c_out, h, w, ks },
            Tensor { shape: vec![c_out, h, w], data: out },
            rg,
        ))
    }

    /// `out[i] = x[idx[i]]`, with `None` entries producing 0.
    pub fn gather(&mut self, x: NodeId, idx: Arc<Vec<Option<usize>>>, shape: Vec<usize>) -> Result<NodeId> {
        self.check(x)?;
        let xv = self.val(x);
        if let Some(bad) = idx.iter().flatten().find(|&&i| i >= xv.len()) {
            return Err(mismatch("gather", format!("index {} out of range {}", bad, xv.len())));
        }
        let data: Vec<f64> = idx.iter().map(|i| i.map_or(0.0, |i| xv[i])).collect();
        let t = Tensor::new(shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(Op::Gather { x, idx }, t, rg))
    }

    /// Flat concatenation; the result is 1-D.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let mut data = Vec::new();
        let mut rg = false;
        for &p in parts {
            self.check(p)?;
            data.extend_from_slice(self.val(p));
            rg |= self.rg(p);
        }
        let n = data.len();
        Ok(self.push(Op::Concat(parts.to_vec()), Tensor { shape: vec![n], data }, rg))
    }

    /// Fixed sparse linear map `m · x` (x flattened).
    pub fn sparse_linear(&mut self, x: NodeId, m: Arc<SparseMatrix>) -> Result<NodeId> {
        self.check(x)?;
        if self.val(x).len() != m.cols {
            return Err(mismatch("sparse_linear", format!("{} vs {}", self.val(x).len(), m.cols)));
        }
        let data = m.apply(self.val(x));
        let rg = self.rg(x);
        let rows = m.rows;
        Ok(self.push(Op::Sparse { x, m }, Tensor { shape: vec![rows], data }, rg))
    }

    /// Learned ×2 upsampling of a `[C × H × W]` tensor along one axis with
    /// the polyphase layout [`UPSAMPLE_PHASES`]; border samples are
    /// replicated and the output is cropped to `out_len`.
    pub fn upsample(&mut self, x: NodeId, taps: NodeId, axis: Axis, out_len: usize) -> Result<NodeId> {
        self.check(x)?;
        self.check(taps)?;
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || self.val(taps).len() != 4 {
            return Err(mismatch("upsample", format!("input {:?}, taps {}", xs, self.val(taps).len())));
        }
        let in_len = match axis {
            Axis::Rows => xs[1],
            Axis::Cols => xs[2],
        };
        if out_len > 2 * in_len || out_len == 0 || in_len == 0 {
            return Err(mismatch("upsample", format!("cannot map {} samples to {}", in_len, out_len)));
        }
        let g: [f64; 4] = self.val(taps).try_into().expect("four taps");
        let shape = match axis {
            Axis::Rows => vec![xs[0], out_len, xs[2]],
            Axis::Cols => vec![xs[0], xs[1], out_len],
        };
        let data = upsample_forward(self.val(x), &g, &xs, axis, out_len);
        let rg = self.rg(x) || self.rg(taps);
        Ok(self.push(Op::Upsample { x, taps, axis }, Tensor { shape, data }, rg))
    }

    pub fn softround(&mut self, x: NodeId, t: f64) -> Result<NodeId> {
        self.check(x)?;
        if !(t > 0.0) {
            return Err(GraphError::InvalidArgument { op: "softround", detail: format!("t = {}", t) });
        }
        let data = self.val(x).iter().map(|&v| crate::quantize::softround_value(v, t)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(Op::SoftRound { x, t }, Tensor { shape, data }, rg))
    }

    /// Hard rounding forward, identity backward.
    pub fn ste_round(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let data = self.val(x).iter().map(|&v| crate::quantize::round_half_away(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(Op::SteRound(x), Tensor { shape, data }, rg))
    }

    /// Soft MED over rows `(a, b, c)` of a `[P × 3]` tensor.
    pub fn med_soft(&mut self, ctx: NodeId, t: f64) -> Result<NodeId> {
        let p = self.med_rows("med_soft", ctx)?;
        if !(t > 0.0) {
            return Err(GraphError::InvalidArgument { op: "med_soft", detail: format!("t = {}", t) });
        }
        let v = self.val(ctx);
        let data = (0..p)
            .map(|r| crate::context::med_predict_soft(v[3 * r], v[3 * r + 1], v[3 * r + 2], t))
            .collect();
        let rg = self.rg(ctx);
        Ok(self.push(Op::MedSoft { ctx, t }, Tensor { shape: vec![p], data }, rg))
    }

    /// Hard MED forward; backward routes the gradient through the branch
    /// that was selected.
    pub fn med_hard(&mut self, ctx: NodeId) -> Result<NodeId> {
        let p = self.med_rows("med_hard", ctx)?;
        let v = self.val(ctx);
        let data = (0..p).map(|r| med_real(v[3 * r], v[3 * r + 1], v[3 * r + 2]).0).collect();
        let rg = self.rg(ctx);
        Ok(self.push(Op::MedHard(ctx), Tensor { shape: vec![p], data }, rg))
    }

    fn med_rows(&self, op: &'static str, ctx: NodeId) -> Result<usize> {
        self.check(ctx)?;
        let s = self.shape(ctx);
        if s.len() != 2 || s[1] != 3 {
            return Err(mismatch(op, format!("expected [P x 3], got {:?}", s)));
        }
        Ok(s[0])
    }

    /// Total code length in bits of `x` under discretized Laplace
    /// distributions with means `mu` and scales `exp(log_scale)`.
    /// Probabilities are floored at `min_prob`; the gradient is zero where
    /// the floor is active.
    pub fn laplace_rate(&mut self, x: NodeId, mu: NodeId, log_scale: NodeId, min_prob: f64) -> Result<NodeId> {
        self.same_len("laplace_rate", x, mu)?;
        self.same_len("laplace_rate", x, log_scale)?;
        let (xv, mv, sv) = (self.val(x), self.val(mu), self.val(log_scale));
        let mut bits = 0.0;
        for i in 0..xv.len() {
            let p = crate::entropy::laplace_interval_prob(xv[i] - mv[i], sv[i].exp(), f64::exp);
            bits -= p.max(min_prob).log2();
        }
        let rg = self.rg(x) || self.rg(mu) || self.rg(log_scale);
        Ok(self.push(Op::LaplaceRate { x, mu, log_scale, min_prob }, Tensor::scalar(bits), rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        self.check(loss)?;
        let ls = self.shape(loss);
        if self.val(loss).len() != 1 {
            return Err(GraphError::NotScalar(ls.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.backprop_node(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        for g in grads.iter().flatten() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(GraphError::NonFinite("backward"));
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[id];
        let acc = |target: NodeId, grads: &mut [Option<Vec<f64>>], f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[target.0].requires_grad {
                return;
            }
            let len = self.nodes[target.0].value.data.len();
            let slot = grads[target.0].get_or_insert_with(|| vec![0.0; len]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, grads, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*b, grads, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            }
            Op::Sub(a, b) => {
                acc(*a, grads, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*b, grads, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s -= g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                acc(*a, grads, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * bv[i];
                    }
                });
                acc(*b, grads, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * av[i];
                    }
                });
            }
            Op::Scale(a, f) => acc(*a, grads, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g * f)),
            Op::AddConst(a) | Op::Reshape(a) | Op::SteRound(a) => {
                acc(*a, grads, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g))
            }
            Op::Relu(a) => {
                let av = self.val(*a);
                acc(*a, grads, &mut |s| {
                    for i in 0..s.len() {
                        if av[i] > 0.0 {
                            s[i] += g[i];
                        }
                    }
                });
            }
            Op::Clamp(a, lo, hi) => {
                let av = self.val(*a);
                acc(*a, grads, &mut |s| {
                    for i in 0..s.len() {
                        if av[i] > *lo && av[i] < *hi {
                            s[i] += g[i];
                        }
                    }
                });
            }
            Op::Square(a) => {
                let av = self.val(*a);
                acc(*a, grads, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += 2.0 * av[i] * g[i];
                    }
                });
            }
            Op::Sum(a) => acc(*a, grads, &mut |s| s.iter_mut().for_each(|s| *s += g[0])),
            Op::Mean(a) => {
                let n = self.val(*a).len() as f64;
                acc(*a, grads, &mut |s| s.iter_mut().for_each(|s| *s += g[0] / n));
            }
            Op::Dense { x, w, b, rows, n_in, n_out } => {
                let (rows, n_in, n_out) = (*rows, *n_in, *n_out);
                let (xv, wv) = (self.val(*x), self.val(*w));
                acc(*x, grads, &mut |s| {
                    for r in 0..rows {
                        let gr = &g[r * n_out..(r + 1) * n_out];
                        let sr = &mut s[r * n_in..(r + 1) * n_in];
                        for (i, gi) in gr.iter().enumerate() {
                            if *gi == 0.0 {
                                continue;
                            }
                            let wr = &wv[i * n_in..(i + 1) * n_in];
                            for (sj, wij) in sr.iter_mut().zip(wr) {
                                *sj += gi * wij;
                            }
                        }
                    }
                });
                acc(*w, grads, &mut |s| {
                    for r in 0..rows {
                        let gr = &g[r * n_out..(r + 1) * n_out];
                        let xr = &xv[r * n_in..(r + 1) * n_in];
                        for (i, gi) in gr.iter().enumerate() {
                            if *gi == 0.0 {
                                continue;
                            }
                            let sw = &mut s[i * n_in..(i + 1) * n_in];
                            for (sij, xj) in sw.iter_mut().zip(xr) {
                                *sij += gi * xj;
                            }
                        }
                    }
                });
                acc(*b, grads, &mut |s| {
                    for r in 0..rows {
                        for i in 0..n_out {
                            s[i] += g[r * n_out + i];
                        }
                    }
                });
            }
            Op::Conv2d { x, k, b, c_in, c_out, h, w, ks } => {
                let (xv, kv) = (self.val(*x), self.val(*k));
                let (c_in, c_out, h, w, ks) = (*c_in, *c_out, *h, *w, *ks);
                let r = (ks / 2) as isize;
                let hw = h * w;
                acc(*x, grads, &mut |s| {
                    for co in 0..c_out {
                        for ci in 0..c_in {
                            for di in 0..ks {
                                for dj in 0..ks {
                                    let wt = kv[((co * c_in + ci) * ks + di) * ks + dj];
                                    if wt == 0.0 {
                                        continue;
                                    }
                                    let (oi, oj) = (di as isize - r, dj as isize - r);
                                    for i in 0..h {
                                        let ii = i as isize + oi;
                                        if ii < 0 || ii >= h as isize {
                                            continue;
                                        }
                                        for j in 0..w {
                                            let jj = j as isize + oj;
                                            if jj < 0 || jj >= w as isize {
                                                continue;
                                            }
                                            s[ci * hw + ii as usize * w + jj as usize] += wt * g[co * hw + i * w + j];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                acc(*k, grads, &mut |s| {
                    for co in 0..c_out {
                        for ci in 0..c_in {
                            for di in 0..ks {
                                for dj in 0..ks {
                                    let (oi, oj) = (di as isize - r, dj as isize - r);
                                    let mut t = 0.0;
                                    for i in 0..h {
                                        let ii = i as isize + oi;
                                        if ii < 0 || ii >= h as isize {
                                            continue;
                                        }
                                        for j in 0..w {
                                            let jj = j as isize + oj;
                                            if jj < 0 || jj >= w as isize {
                                                continue;
                                            }
                                            t += g[co * hw + i * w + j] * xv[ci * hw + ii as usize * w + jj as usize];
                                        }
                                    }
                                    s[((co * c_in + ci) * ks + di) * ks + dj] += t;
                                }
                            }
                        }
                    }
                });
                acc(*b, grads, &mut |s| {
                    for co in 0..c_out {
                        s[co] += g[co * hw..(co + 1) * hw].iter().sum::<f64>();
                    }
                });
            }
            Op::Gather { x, idx } => acc(*x, grads, &mut |s| {
                for (gi, i) in g.iter().zip(idx.iter()) {
                    if let Some(i) = i {
                        s[*i] += gi;
                    }
                }
            }),
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.val(*p).len();
                    let gp = &g[off..off + n];
                    acc(*p, grads, &mut |s| s.iter_mut().zip(gp).for_each(|(s, g)| *s += g));
                    off += n;
                }
            }
            Op::Sparse { x, m } => acc(*x, grads, &mut |s| m.apply_transpose_acc(g, s)),
            Op::Upsample { x, taps, axis } => {
                let xs = self.shape(*x).to_vec();
                let tv: [f64; 4] = self.val(*taps).try_into().expect("four taps");
                let xv = self.val(*x);
                let out_len = match axis {
                    Axis::Rows => node.value.shape[1],
                    Axis::Cols => node.value.shape[2],
                };
                acc(*x, grads, &mut |s| upsample_backward_input(g, &tv, &xs, *axis, out_len, s));
                acc(*taps, grads, &mut |s| upsample_backward_taps(g, xv, &xs, *axis, out_len, s));
            }
            Op::SoftRound { x, t } => {
                let xv = self.val(*x);
                acc(*x, grads, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * crate::quantize::softround_derivative(xv[i], *t);
                    }
                });
            }
            Op::MedSoft { ctx, t } => {
                let v = self.val(*ctx);
                acc(*ctx, grads, &mut |s| {
                    for (r, gr) in g.iter().enumerate() {
                        let d = med_soft_grad(v[3 * r], v[3 * r + 1], v[3 * r + 2], *t);
                        for k in 0..3 {
                            s[3 * r + k] += gr * d[k];
                        }
                    }
                });
            }
            Op::MedHard(ctx) => {
                let v = self.val(*ctx);
                acc(*ctx, grads, &mut |s| {
                    for (r, gr) in g.iter().enumerate() {
                        let d = med_real(v[3 * r], v[3 * r + 1], v[3 * r + 2]).1;
                        for k in 0..3 {
                            s[3 * r + k] += gr * d[k];
                        }
                    }
                });
            }
            Op::LaplaceRate { x, mu, log_scale, min_prob } => {
                let (xv, mv, sv) = (self.val(*x), self.val(*mu), self.val(*log_scale));
                let n = xv.len();
                let mut dx = vec![0.0; n];
                let mut ds = vec![0.0; n];
                for i in 0..n {
                    let (dpx, dps, p) = laplace_prob_grads(xv[i] - mv[i], sv[i].exp());
                    if p <= *min_prob {
                        continue;
                    }
                    let f = -g[0] / (p * std::f64::consts::LN_2);
                    dx[i] = f * dpx;
                    ds[i] = f * dps;
                }
                acc(*x, grads, &mut |s| s.iter_mut().zip(&dx).for_each(|(s, d)| *s += d));
                acc(*mu, grads, &mut |s| s.iter_mut().zip(&dx).for_each(|(s, d)| *s -= d));
                acc(*log_scale, grads, &mut |s| s.iter_mut().zip(&ds).for_each(|(s, d)| *s += d));
            }
        }
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_forward(
    x: &[f64],
    k: &[f64],
    b: &[f64],
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    ks: usize,
) -> Vec<f64> {
    let hw = h * w;
    let r = (ks / 2) as isize;
    let mut out = vec![0.0; c_out * hw];
    for co in 0..c_out {
        let o = &mut out[co * hw..(co + 1) * hw];
        o.iter_mut().for_each(|v| *v = b[co]);
        for ci in 0..c_in {
            let xc = &x[ci * hw..(ci + 1) * hw];
            for di in 0..ks {
                for dj in 0..ks {
                    let wt = k[((co * c_in + ci) * ks + di) * ks + dj];
                    if wt == 0.0 {
                        continue;
                    }
                    let (oi, oj) = (di as isize - r, dj as isize - r);
                    for i in 0..h {
                        let ii = i as isize + oi;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        let xrow = &xc[ii as usize * w..(ii as usize + 1) * w];
                        let orow = &mut o[i * w..(i + 1) * w];
                        for j in 0..w {
                            let jj = j as isize + oj;
                            if jj < 0 || jj >= w as isize {
                                continue;
                            }
                            orow[j] += wt * xrow[jj as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Iterates `(outer, in_base, out_base, stride)` lines of a `[C × H × W]`
/// tensor along `axis`.
fn lines(xs: &[usize], axis: Axis, out_len: usize) -> Vec<(usize, usize, usize)> {
    let (c, h, w) = (xs[0], xs[1], xs[2]);
    let mut v = Vec::new();
    match axis {
        Axis::Cols => {
            for ch in 0..c {
                for i in 0..h {
                    v.push(((ch * h + i) * w, (ch * h + i) * out_len, 1));
                }
            }
        }
        Axis::Rows => {
            for ch in 0..c {
                for j in 0..w {
                    v.push((ch * h * w + j, ch * out_len * w + j, w));
                }
            }
        }
    }
    v
}

fn axis_len(xs: &[usize], axis: Axis) -> usize {
    match axis {
        Axis::Rows => xs[1],
        Axis::Cols => xs[2],
    }
}

#[inline]
fn clamp_index(k: usize, off: isize, n: usize) -> usize {
    (k as isize + off).clamp(0, n as isize - 1) as usize
}

pub(crate) fn upsample_forward(x: &[f64], g: &[f64; 4], xs: &[usize], axis: Axis, out_len: usize) -> Vec<f64> {
    let n = axis_len(xs, axis);
    let total = xs.iter().product::<usize>() / n * out_len;
    let mut out = vec![0.0; total];
    for (ib, ob, st) in lines(xs, axis, out_len) {
        for m in 0..out_len {
            let (k, ph) = (m / 2, m % 2);
            let mut acc = 0.0;
            for &(off, tap) in &UPSAMPLE_PHASES[ph] {
                acc += g[tap] * x[ib + clamp_index(k, off, n) * st];
            }
            out[ob + m * st] = acc;
        }
    }
    out
}

fn upsample_backward_input(g: &[f64], taps: &[f64; 4], xs: &[usize], axis: Axis, out_len: usize, s: &mut [f64]) {
    let n = axis_len(xs, axis);
    for (ib, ob, st) in lines(xs, axis, out_len) {
        for m in 0..out_len {
            let (k, ph) = (m / 2, m % 2);
            let gm = g[ob + m * st];
            for &(off, tap) in &UPSAMPLE_PHASES[ph] {
                s[ib + clamp_index(k, off, n) * st] += taps[tap] * gm;
            }
        }
    }
}

fn upsample_backward_taps(g: &[f64], x: &[f64], xs: &[usize], axis: Axis, out_len: usize, s: &mut [f64]) {
    let n = axis_len(xs, axis);
    for (ib, ob, st) in lines(xs, axis, out_len) {
        for m in 0..out_len {
            let (k, ph) = (m / 2, m % 2);
            let gm = g[ob + m * st];
            for &(off, tap) in &UPSAMPLE_PHASES[ph] {
                s[tap] += gm * x[ib + clamp_index(k, off, n) * st];
            }
        }
    }
}

/// Hard MED on reals plus the gradient of the selected branch.
fn med_real(a: f64, b: f64, c: f64) -> (f64, [f64; 3]) {
    let (mn, mx) = if a <= b { (a, b) } else { (b, a) };
    let a_is_min = a <= b;
    if c >= mx {
        (mn, if a_is_min { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] })
    } else if c <= mn {
        (mx, if a_is_min { [0.0, 1.0, 0.0] } else { [1.0, 0.0, 0.0] })
    } else {
        (a + b - c, [1.0, 1.0, -1.0])
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn med_soft_grad(a: f64, b: f64, c: f64, t: f64) -> [f64; 3] {
    let a_is_min = a <= b;
    let (mn, mx) = if a_is_min { (a, b) } else { (b, a) };
    let s_max = sigmoid((c - mx) / t);
    let s_min = sigmoid((mn - c) / t);
    let ds_max = s_max * (1.0 - s_max) / t;
    let ds_min = s_min * (1.0 - s_min) / t;
    let plane = a + b - c;
    let d_plane = 1.0 - s_max - s_min;
    let d_mn = s_max + (mx - plane) * ds_min;
    let d_mx = s_min - (mn - plane) * ds_max;
    let d_c = (mn - plane) * ds_max - (mx - plane) * ds_min - d_plane;
    let (da, db) = if a_is_min { (d_mn, d_mx) } else { (d_mx, d_mn) };
    [da + d_plane, db + d_plane, d_c]
}

/// Returns `(∂p/∂u, ∂p/∂log b, p)` for `p = F(u + ½) − F(u − ½)`.
fn laplace_prob_grads(u: f64, b: f64) -> (f64, f64, f64) {
    let dens = |z: f64| (-(z.abs()) / b).exp() / (2.0 * b);
    let (hi, lo) = (u + 0.5, u - 0.5);
    let p = crate::entropy::laplace_interval_prob(u, b, f64::exp);
    let (fh, fl) = (dens(hi), dens(lo));
    (fh - fl, -(hi * fh - lo * fl), p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central finite differences of `f` with respect to every element of
    /// every input, compared against backward gradients.
    fn check_gradients<F>(inputs: Vec<Tensor>, f: F, h: f64, tol: f64)
    where
        F: Fn(&mut Graph, &[NodeId]) -> NodeId,
    {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().cloned().map(|t| g.param(t)).collect();
        let loss = f(&mut g, &ids);
        let grads = g.backward(loss).unwrap();
        for (k, t) in inputs.iter().enumerate() {
            let analytic = grads.get_or_zeros(ids[k], t.len());
            for e in 0..t.len() {
                let eval = |delta: f64| {
                    let mut ins = inputs.clone();
                    ins[k].data_mut()[e] += delta;
                    let mut g = Graph::new();
                    let ids: Vec<NodeId> = ins.into_iter().map(|t| g.param(t)).collect();
                    let l = f(&mut g, &ids);
                    g.value(l).data()[0]
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic[e];
                let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1.0);
                assert!(rel < tol, "input {} elem {}: fd {} vs analytic {}", k, e, fd, a);
            }
        }
    }

    #[test]
    fn dense_identity_and_zero_input() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let w = g.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = g.constant(Tensor::zeros(vec![2]));
        let y = g.dense(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0]);

        let x0 = g.constant(Tensor::zeros(vec![3]));
        let w3 = g.constant(Tensor::new(vec![2, 3], vec![0.3, -1.0, 2.0, 4.0, 5.0, 6.0]).unwrap());
        let b3 = g.constant(Tensor::new(vec![2], vec![0.25, -7.0]).unwrap());
        let y = g.dense(x0, w3, b3).unwrap();
        assert_eq!(g.value(y).data(), &[0.25, -7.0]);
    }

    #[test]
    fn dense_matches_brute_force_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, vec![3]);
        let w = rand_tensor(&mut rng, vec![3, 3]);
        let b = rand_tensor(&mut rng, vec![3]);
        let mut g = Graph::new();
        let (xi, wi, bi) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
        let y = g.dense(xi, wi, bi).unwrap();
        for i in 0..3 {
            let mut expect = b.data()[i];
            for j in 0..3 {
                expect += w.data()[i * 3 + j] * x.data()[j];
            }
            assert!((g.value(y).data()[i] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn dense_rejects_mismatch() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(vec![4]));
        let w = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![2]));
        assert!(matches!(g.dense(x, w, b), Err(GraphError::ShapeMismatch { .. })));
    }

    #[test]
    fn conv_identity_kernels() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, vec![2, 4, 5]);
        let mut g = Graph::new();
        let xi = g.constant(x.clone());
        let k1 = g.constant(Tensor::new(vec![2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = g.constant(Tensor::zeros(vec![2]));
        let y = g.conv2d(xi, k1, b).unwrap();
        assert_eq!(g.value(y).data(), x.data());

        let mut delta = vec![0.0; 2 * 2 * 9];
        delta[4] = 1.0; // co 0, ci 0, centre
        delta[(2 + 1) * 9 + 4] = 1.0; // co 1, ci 1, centre
        let k3 = g.constant(Tensor::new(vec![2, 2, 3, 3], delta).unwrap());
        let y = g.conv2d(xi, k3, b).unwrap();
        assert_eq!(g.value(y).data(), x.data());
    }

    #[test]
    fn conv_matches_direct_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_tensor(&mut rng, vec![1, 4, 4]);
        let k = rand_tensor(&mut rng, vec![1, 1, 3, 3]);
        let mut g = Graph::new();
        let (xi, ki) = (g.constant(x.clone()), g.constant(k.clone()));
        let b = g.constant(Tensor::new(vec![1], vec![0.5]).unwrap());
        let y = g.conv2d(xi, ki, b).unwrap();
        for i in 0..4i32 {
            for j in 0..4i32 {
                let mut s = 0.5;
                for di in -1..=1i32 {
                    for dj in -1..=1i32 {
                        let (ii, jj) = (i + di, j + dj);
                        if (0..4).contains(&ii) && (0..4).contains(&jj) {
                            s += k.data()[((di + 1) * 3 + dj + 1) as usize] * x.data()[(ii * 4 + jj) as usize];
                        }
                    }
                }
                assert!((g.value(y).data()[(i * 4 + j) as usize] - s).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn conv_rejects_even_kernel() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(vec![1, 4, 4]));
        let k = g.constant(Tensor::zeros(vec![1, 1, 2, 2]));
        let b = g.constant(Tensor::zeros(vec![1]));
        assert_eq!(g.conv2d(x, k, b), Err(GraphError::UnsupportedKernel(2)));
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![3], vec![1.5, -2.0, 0.25]).unwrap());
        let sq = g.square(x).unwrap();
        let l = g.sum(sq).unwrap();
        let gr = g.backward(l).unwrap();
        assert_eq!(gr.get(x).unwrap(), &[3.0, -4.0, 0.5]);
    }

    #[test]
    fn ste_passes_gradient_through() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![2], vec![1.3, -0.7]).unwrap());
        let r = g.ste_round(x).unwrap();
        assert_eq!(g.value(r).data(), &[1.0, -1.0]);
        let l = g.sum(r).unwrap();
        assert_eq!(g.backward(l).unwrap().get(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_foreign_nodes() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(vec![2]));
        assert_eq!(g.backward(x).unwrap_err(), GraphError::NotScalar(vec![2]));
        assert_eq!(g.backward(NodeId(99)).unwrap_err(), GraphError::UnknownNode(99));
    }

    #[test]
    fn finite_differences_dense_relu_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let rows = rng.gen_range(1..5);
            let n_in = rng.gen_range(1..8);
            let n_out = rng.gen_range(1..8);
            let inputs = vec![
                rand_tensor(&mut rng, vec![rows, n_in]),
                rand_tensor(&mut rng, vec![n_out, n_in]),
                rand_tensor(&mut rng, vec![n_out]),
            ];
            check_gradients(
                inputs,
                |g, ids| {
                    let y = g.dense(ids[0], ids[1], ids[2]).unwrap();
                    let s = g.square(y).unwrap();
                    g.sum(s).unwrap()
                },
                1e-4,
                1e-4,
            );
        }
    }

    #[test]
    fn finite_differences_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for ks in [1, 3] {
            let inputs = vec![
                rand_tensor(&mut rng, vec![2, 4, 5]),
                rand_tensor(&mut rng, vec![3, 2, ks, ks]),
                rand_tensor(&mut rng, vec![3]),
            ];
            check_gradients(
                inputs,
                |g, ids| {
                    let y = g.conv2d(ids[0], ids[1], ids[2]).unwrap();
                    let s = g.square(y).unwrap();
                    g.mean(s).unwrap()
                },
                1e-4,
                1e-4,
            );
        }
    }

    #[test]
    fn finite_differences_upsample() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let inputs = vec![rand_tensor(&mut rng, vec![2, 3, 4]), rand_tensor(&mut rng, vec![4])];
        check_gradients(
            inputs,
            |g, ids| {
                let a = g.upsample(ids[0], ids[1], Axis::Cols, 7).unwrap();
                let b = g.upsample(a, ids[1], Axis::Rows, 6).unwrap();
                let s = g.square(b).unwrap();
                g.sum(s).unwrap()
            },
            1e-4,
            1e-4,
        );
    }

    #[test]
    fn finite_differences_laplace_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let n = 6;
        let x = Tensor::new(vec![n], (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap();
        let mu = Tensor::new(vec![n], (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let ls = Tensor::new(vec![n], (0..n).map(|_| rng.gen_range(-1.0..1.5)).collect()).unwrap();
        check_gradients(vec![x, mu, ls], |g, ids| g.laplace_rate(ids[0], ids[1], ids[2], 1e-12).unwrap(), 1e-5, 1e-4);
    }

    #[test]
    fn finite_differences_med_soft_and_gather() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let x = rand_tensor(&mut rng, vec![6]);
        let idx = Arc::new(vec![Some(0), Some(1), Some(2), Some(3), None, Some(5), Some(5), Some(4), Some(1)]);
        check_gradients(
            vec![x],
            move |g, ids| {
                let c = g.gather(ids[0], idx.clone(), vec![3, 3]).unwrap();
                let m = g.med_soft(c, 0.5).unwrap();
                let s = g.square(m).unwrap();
                g.sum(s).unwrap()
            },
            1e-4,
            1e-4,
        );
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let x = rand_tensor(&mut rng, vec![4, 3]);
        let w = rand_tensor(&mut rng, vec![2, 3]);
        let b = rand_tensor(&mut rng, vec![2]);
        let mut g = Graph::new();
        let (xi, wi, bi) = (g.param(x), g.param(w), g.param(b));
        let y = g.dense(xi, wi, bi).unwrap();
        let r = g.relu(y).unwrap();
        let l1 = g.sum(r).unwrap();
        let sq = g.square(y).unwrap();
        let l2 = g.mean(sq).unwrap();
        let both = g.add(l1, l2).unwrap();
        let (g1, g2, g12) = (g.backward(l1).unwrap(), g.backward(l2).unwrap(), g.backward(both).unwrap());
        for id in [xi, wi, bi] {
            for ((a, b), c) in g1.get(id).unwrap().iter().zip(g2.get(id).unwrap()).zip(g12.get(id).unwrap()) {
                assert!((a + b - c).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn tensor_shape_invariant() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }
}
