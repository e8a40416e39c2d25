//! Dense row-major `f64` tensors and a define-by-run gradient tape.
//!
//! Every operation is recorded on a [`Tape`] as it executes and returns a
//! [`Var`] handle. Calling [`Tape::backward`] on a scalar node walks the
//! recording in reverse and accumulates gradients into every node that
//! requires them.
//!
//! Broadcasting is limited to leading batch dimensions: a matrix operand of
//! [`Tape::matmul`] or a bias in [`Tape::add_row_bias`] applies to every row
//! of the flattened leading dimensions, nothing more.
//!
//! Gradient policy: `backward` zeroes all stored gradients before it starts,
//! so the tape can be reused for repeated backward passes. [`Tape::clear`]
//! drops every recorded node.

use thiserror::Error;

/// Epsilon added to the variance in [`Tape::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} needs {expected} values, got {got}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value in {op}")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("tape is empty")]
    EmptyTape,
    #[error("{0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// An n-dimensional array of `f64` values stored in row-major order.
///
/// A tensor with an empty shape is a scalar holding one value.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(TensorError::Shape {
                    op: "from_rows",
                    lhs: vec![cols],
                    rhs: vec![row.len()],
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// Size of the last dimension (1 for scalars).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Product of every dimension except the last.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            n => self.shape[..n - 1].iter().product(),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A contiguous block of rows that forms one independent sequence inside a
/// batched activation matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sum(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Vec<Segment>,
        // Per segment, per head, a len×len row-major block of attention
        // weights (upper triangle zero).
        probs: Vec<Vec<f64>>,
    },
    WindowMse {
        pred: Var,
        target: Vec<f64>,
        // d loss / d (squared error of element) folded per row.
        row_scale: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Records operations for reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    /// Records a leaf. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`Tape::backward`], if the node was
    /// reached.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad.as_ref().map(|g| Tensor {
            shape: node.value.shape.clone(),
            data: g.clone(),
        })
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, op_name: &'static str, value: Tensor, inputs: &[Var], op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, requires_grad, op))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (&self.value(a).shape, &self.value(b).shape);
        if sa != sb {
            return Err(TensorError::Shape {
                op,
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        Ok(())
    }

    /// `a[.., k] · b[k, n]`; leading dimensions of `a` are batch rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape.is_empty() || tb.shape.len() != 2 || ta.cols() != tb.shape[0] {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: ta.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.shape[1]);
        let mut out = vec![0.0; m * n];
        gemm_nn(&ta.data, &tb.data, m, k, n, &mut out);
        let mut shape = ta.shape.clone();
        *shape.last_mut().unwrap() = n;
        self.record("matmul", Tensor { shape, data: out }, &[a, b], Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.record("add", value, &[a, b], Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.record("sub", value, &[a, b], Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.record("mul", value, &[a, b], Op::Mul(a, b))
    }

    /// Adds a vector of width `cols(x)` to every row of `x`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tb.shape.len() != 1 || tb.shape[0] != tx.cols() {
            return Err(TensorError::Shape {
                op: "add_row_bias",
                lhs: tx.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let n = tx.cols();
        let mut value = tx.clone();
        for row in value.data.chunks_exact_mut(n) {
            for (o, b) in row.iter_mut().zip(&tb.data) {
                *o += b;
            }
        }
        self.record("add_row_bias", value, &[x, bias], Op::AddRowBias(x, bias))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let mut value = self.value(x).clone();
        value.data.iter_mut().for_each(|v| *v *= factor);
        self.record("scale", value, &[x], Op::Scale(x, factor))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let mut value = self.value(x).clone();
        value.data.iter_mut().for_each(|v| *v = v.max(0.0));
        self.record("relu", value, &[x], Op::Relu(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data.iter().sum();
        self.record("sum", Tensor::scalar(total), &[x], Op::Sum(x))
    }

    /// Softmax over the last dimension, stabilized by subtracting the row max.
    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if !tx.is_finite() {
            return Err(TensorError::NonFinite { op: "softmax_lastdim" });
        }
        if tx.cols() == 0 {
            return Err(TensorError::Contract("softmax over an empty last dimension".into()));
        }
        let mut value = tx.clone();
        let n = value.cols();
        for row in value.data.chunks_exact_mut(n) {
            softmax_in_place(row);
        }
        self.record("softmax_lastdim", value, &[x], Op::Softmax(x))
    }

    /// Normalizes each last-dimension slice to zero mean and unit
    /// (population) variance, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let n = tx.cols();
        if tg.shape != [n] || tb.shape != [n] {
            return Err(TensorError::Shape {
                op: "layer_norm",
                lhs: tx.shape.clone(),
                rhs: tg.shape.clone(),
            });
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; rows * n];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * n];
        for r in 0..rows {
            let row = &tx.data[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..n {
                let xh = (row[c] - mean) * is;
                xhat[r * n + c] = xh;
                out[r * n + c] = xh * tg.data[c] + tb.data[c];
            }
        }
        let value = Tensor {
            shape: tx.shape.clone(),
            data: out,
        };
        self.record(
            "layer_norm",
            value,
            &[x, gain, bias],
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    /// Multi-head scaled dot-product attention with a causal mask.
    ///
    /// `q`, `k`, `v` are `[rows × d]`; each segment is an independent
    /// sequence, and row `i` of a segment attends to rows `0..=i` of the same
    /// segment only.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize, segments: &[Segment]) -> Result<Var> {
        self.same_shape("causal_attention", q, k)?;
        self.same_shape("causal_attention", q, v)?;
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        if tq.shape.len() != 2 {
            return Err(TensorError::Contract("attention inputs must be 2-d".into()));
        }
        let (rows, d) = (tq.shape[0], tq.shape[1]);
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::Contract(format!("{heads} heads do not divide width {d}")));
        }
        check_segments(segments, rows)?;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = vec![0.0; rows * d];
        let mut probs = Vec::with_capacity(segments.len() * heads);
        let mut scores = Vec::new();
        for seg in segments {
            let n = seg.len;
            for h in 0..heads {
                let col = h * dh;
                let mut p = vec![0.0; n * n];
                for i in 0..n {
                    let qi = &tq.data[(seg.start + i) * d + col..][..dh];
                    scores.clear();
                    for j in 0..=i {
                        let kj = &tk.data[(seg.start + j) * d + col..][..dh];
                        scores.push(dot(qi, kj) * scale);
                    }
                    softmax_in_place(&mut scores);
                    let oi = &mut out[(seg.start + i) * d + col..][..dh];
                    for (j, &w) in scores.iter().enumerate() {
                        p[i * n + j] = w;
                        let vj = &tv.data[(seg.start + j) * d + col..][..dh];
                        for (o, x) in oi.iter_mut().zip(vj) {
                            *o += w * x;
                        }
                    }
                }
                probs.push(p);
            }
        }
        let value = Tensor {
            shape: vec![rows, d],
            data: out,
        };
        self.record(
            "causal_attention",
            value,
            &[q, k, v],
            Op::CausalAttention {
                q,
                k,
                v,
                heads,
                segments: segments.to_vec(),
                probs,
            },
        )
    }

    /// Masked patch-wise mean squared error averaged over windows.
    ///
    /// For each segment (one training window) the loss is the mean, over
    /// rows whose `mask` entry is set, of the row MSE between `pred` and
    /// `target`. The batch loss is the mean of the per-window losses, summed
    /// in ascending order so that it does not depend on window order.
    pub fn window_mse(&mut self, pred: Var, target: &Tensor, mask: &[bool], segments: &[Segment]) -> Result<Var> {
        let tp = self.value(pred);
        if tp.shape != target.shape || tp.shape.len() != 2 {
            return Err(TensorError::Shape {
                op: "window_mse",
                lhs: tp.shape.clone(),
                rhs: target.shape.clone(),
            });
        }
        let (rows, h) = (tp.shape[0], tp.shape[1]);
        if mask.len() != rows {
            return Err(TensorError::Shape {
                op: "window_mse",
                lhs: vec![rows],
                rhs: vec![mask.len()],
            });
        }
        check_segments(segments, rows)?;
        if segments.is_empty() {
            return Err(TensorError::Contract("window_mse needs at least one window".into()));
        }
        let windows = segments.len() as f64;
        let mut row_scale = vec![0.0; rows];
        let mut per_window = Vec::with_capacity(segments.len());
        for seg in segments {
            let active = mask[seg.start..seg.start + seg.len].iter().filter(|&&m| m).count();
            if active == 0 {
                return Err(TensorError::Contract("window has no token with a full target".into()));
            }
            let mut acc = 0.0;
            for r in seg.start..seg.start + seg.len {
                if !mask[r] {
                    continue;
                }
                let se: f64 = tp.data[r * h..(r + 1) * h]
                    .iter()
                    .zip(&target.data[r * h..(r + 1) * h])
                    .map(|(p, t)| (p - t) * (p - t))
                    .sum();
                acc += se / h as f64;
                row_scale[r] = 1.0 / (h as f64 * active as f64 * windows);
            }
            per_window.push(acc / active as f64);
        }
        per_window.sort_by(f64::total_cmp);
        let loss = per_window.iter().sum::<f64>() / windows;
        self.record(
            "window_mse",
            Tensor::scalar(loss),
            &[pred],
            Op::WindowMse {
                pred,
                target: target.data.clone(),
                row_scale,
            },
        )
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(TensorError::EmptyTape);
        }
        if loss.0 >= self.nodes.len() {
            return Err(TensorError::Contract("loss is not recorded on this tape".into()));
        }
        if !self.value(loss).is_scalar() {
            return Err(TensorError::NonScalarLoss(self.value(loss).shape.clone()));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let Some(g) = node.grad.as_deref() else {
                continue;
            };
            backprop(before, node, g);
        }
        Ok(())
    }
}

/// Gradient buffer of an input node, allocated on first use; `None` when the
/// input does not require a gradient.
fn grad_of(nodes: &mut [Node], v: Var) -> Option<&mut Vec<f64>> {
    let node = &mut nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    let n = node.value.data.len();
    Some(node.grad.get_or_insert_with(|| vec![0.0; n]))
}

fn backprop(nodes: &mut [Node], node: &Node, g: &[f64]) {
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let ta = nodes[a.0].value.clone();
            let tb = nodes[b.0].value.clone();
            let (m, k, n) = (ta.rows(), ta.cols(), tb.shape[1]);
            if let Some(ga) = grad_of(nodes, *a) {
                gemm_nt(g, &tb.data, m, n, k, ga);
            }
            if let Some(gb) = grad_of(nodes, *b) {
                gemm_tn(&ta.data, g, m, k, n, gb);
            }
        }
        Op::Add(a, b) => {
            for v in [a, b] {
                if let Some(gv) = grad_of(nodes, *v) {
                    axpy(1.0, g, gv);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = grad_of(nodes, *a) {
                axpy(1.0, g, ga);
            }
            if let Some(gb) = grad_of(nodes, *b) {
                axpy(-1.0, g, gb);
            }
        }
        Op::Mul(a, b) => {
            let (ta, tb) = (nodes[a.0].value.data.clone(), nodes[b.0].value.data.clone());
            if let Some(ga) = grad_of(nodes, *a) {
                for ((o, gi), bi) in ga.iter_mut().zip(g).zip(&tb) {
                    *o += gi * bi;
                }
            }
            if let Some(gb) = grad_of(nodes, *b) {
                for ((o, gi), ai) in gb.iter_mut().zip(g).zip(&ta) {
                    *o += gi * ai;
                }
            }
        }
        Op::AddRowBias(x, bias) => {
            if let Some(gx) = grad_of(nodes, *x) {
                axpy(1.0, g, gx);
            }
            if let Some(gb) = grad_of(nodes, *bias) {
                let n = gb.len();
                for row in g.chunks_exact(n) {
                    axpy(1.0, row, gb);
                }
            }
        }
        Op::Scale(x, factor) => {
            if let Some(gx) = grad_of(nodes, *x) {
                axpy(*factor, g, gx);
            }
        }
        Op::Relu(x) => {
            let tx = nodes[x.0].value.data.clone();
            if let Some(gx) = grad_of(nodes, *x) {
                for ((o, gi), xi) in gx.iter_mut().zip(g).zip(&tx) {
                    if *xi > 0.0 {
                        *o += gi;
                    }
                }
            }
        }
        Op::Sum(x) => {
            if let Some(gx) = grad_of(nodes, *x) {
                gx.iter_mut().for_each(|o| *o += g[0]);
            }
        }
        Op::Softmax(x) => {
            if let Some(gx) = grad_of(nodes, *x) {
                let n = out.cols();
                for ((y, gy), o) in out.data.chunks_exact(n).zip(g.chunks_exact(n)).zip(gx.chunks_exact_mut(n)) {
                    let inner = dot(y, gy);
                    for c in 0..n {
                        o[c] += y[c] * (gy[c] - inner);
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let n = out.cols();
            let tg = nodes[gain.0].value.data.clone();
            if let Some(gg) = grad_of(nodes, *gain) {
                for (gy, xh) in g.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                    for c in 0..n {
                        gg[c] += gy[c] * xh[c];
                    }
                }
            }
            if let Some(gb) = grad_of(nodes, *bias) {
                for gy in g.chunks_exact(n) {
                    axpy(1.0, gy, gb);
                }
            }
            if let Some(gx) = grad_of(nodes, *x) {
                let mut dxhat = vec![0.0; n];
                for (r, (gy, xh)) in g.chunks_exact(n).zip(xhat.chunks_exact(n)).enumerate() {
                    for c in 0..n {
                        dxhat[c] = gy[c] * tg[c];
                    }
                    let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                    let mean_dx = dot(&dxhat, xh) / n as f64;
                    let o = &mut gx[r * n..(r + 1) * n];
                    for c in 0..n {
                        o[c] += inv_std[r] * (dxhat[c] - mean_d - xh[c] * mean_dx);
                    }
                }
            }
        }
        Op::CausalAttention {
            q,
            k,
            v,
            heads,
            segments,
            probs,
        } => attention_backward(nodes, [*q, *k, *v], *heads, segments, probs, g),
        Op::WindowMse { pred, target, row_scale } => {
            let tp = nodes[pred.0].value.data.clone();
            if let Some(gp) = grad_of(nodes, *pred) {
                let h = target.len() / row_scale.len();
                for (r, &s) in row_scale.iter().enumerate() {
                    if s == 0.0 {
                        continue;
                    }
                    for c in r * h..(r + 1) * h {
                        gp[c] += g[0] * s * 2.0 * (tp[c] - target[c]);
                    }
                }
            }
        }
    }
}

fn attention_backward(nodes: &mut [Node], qkv: [Var; 3], heads: usize, segments: &[Segment], probs: &[Vec<f64>], g: &[f64]) {
    let [q, k, v] = qkv;
    let tq = nodes[q.0].value.data.clone();
    let tk = nodes[k.0].value.data.clone();
    let tv = nodes[v.0].value.data.clone();
    let d = nodes[q.0].value.cols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut gq = vec![0.0; tq.len()];
    let mut gk = vec![0.0; tk.len()];
    let mut gv = vec![0.0; tv.len()];
    let mut dp = Vec::new();
    for (s, seg) in segments.iter().enumerate() {
        let n = seg.len;
        for h in 0..heads {
            let p = &probs[s * heads + h];
            let col = h * dh;
            for i in 0..n {
                let gi = &g[(seg.start + i) * d + col..][..dh];
                dp.clear();
                for j in 0..=i {
                    let row_j = (seg.start + j) * d + col;
                    let w = p[i * n + j];
                    axpy(w, gi, &mut gv[row_j..row_j + dh]);
                    dp.push(dot(gi, &tv[row_j..row_j + dh]));
                }
                let inner: f64 = dp.iter().enumerate().map(|(j, x)| p[i * n + j] * x).sum();
                let row_i = (seg.start + i) * d + col;
                for j in 0..=i {
                    let ds = p[i * n + j] * (dp[j] - inner) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let row_j = (seg.start + j) * d + col;
                    for c in 0..dh {
                        gq[row_i + c] += ds * tk[row_j + c];
                        gk[row_j + c] += ds * tq[row_i + c];
                    }
                }
            }
        }
    }
    for (var, local) in [(q, gq), (k, gk), (v, gv)] {
        if let Some(acc) = grad_of(nodes, var) {
            axpy(1.0, &local, acc);
        }
    }
}

fn check_segments(segments: &[Segment], rows: usize) -> Result<()> {
    let mut next = 0;
    for seg in segments {
        if seg.start != next || seg.len == 0 {
            return Err(TensorError::Contract(format!(
                "segments must tile the rows contiguously; found {seg:?} at row {next}"
            )));
        }
        next += seg.len;
    }
    if next != rows {
        return Err(TensorError::Contract(format!("segments cover {next} of {rows} rows")));
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (o, v) in y.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

/// `out[m×n] += a[m×k] · b[k×n]`
fn gemm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            axpy(aip, &b[p * n..(p + 1) * n], orow);
        }
    }
}

/// `out[m×k] += g[m×n] · b[k×n]ᵀ`
fn gemm_nt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            out[i * k + p] += dot(grow, &b[p * n..(p + 1) * n]);
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · g[m×n]`
fn gemm_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            axpy(aip, grow, &mut out[p * n..(p + 1) * n]);
        }
    }
}
