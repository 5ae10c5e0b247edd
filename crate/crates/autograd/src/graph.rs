//! Tape of recorded operations and the reverse sweep over it.
//!
//! Nodes are appended in execution order, so the node index is already a
//! topological order; `backward` walks it once in reverse.

use crate::error::{Result, TensorError};
use crate::kernels::{axis_extents, gemm_nn, gemm_nt, gemm_tn};
use crate::tensor::{numel, Tensor};

const F64_BYTES: usize = std::mem::size_of::<f64>();

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the right operand of an elementwise op is laid over the left one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    /// rhs shape is a trailing suffix of lhs shape: rhs index = i % rhs.len()
    Suffix,
    /// rhs shape (minus trailing ones) is a leading prefix: rhs index = i / inner
    Prefix { inner: usize },
}

impl Bcast {
    fn detect(lhs: &[usize], rhs: &[usize]) -> Option<Self> {
        if lhs == rhs {
            return Some(Bcast::Same);
        }
        if rhs.len() <= lhs.len() && lhs[lhs.len() - rhs.len()..] == *rhs {
            return Some(Bcast::Suffix);
        }
        let trimmed = match rhs.iter().rposition(|&d| d != 1) {
            Some(p) => &rhs[..=p],
            None => &rhs[..0],
        };
        if trimmed.len() <= lhs.len() && lhs[..trimmed.len()] == *trimmed {
            return Some(Bcast::Prefix {
                inner: numel(&lhs[trimmed.len()..]),
            });
        }
        None
    }

    #[inline]
    fn rhs_index(self, i: usize, rhs_len: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Suffix => i % rhs_len,
            Bcast::Prefix { inner } => i / inner,
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add { a: Var, b: Var, bcast: Bcast },
    Sub { a: Var, b: Var, bcast: Bcast },
    Mul { a: Var, b: Var, bcast: Bcast },
    Scale { a: Var, s: f64 },
    AddScalar { a: Var },
    MatMul { a: Var, b: Var, dims: MatDims },
    Transpose { a: Var, batch: usize, rows: usize, cols: usize },
    Permute { a: Var, axes: Vec<usize> },
    Reshape { a: Var },
    Narrow { a: Var, axis: usize, start: usize },
    Tanh { a: Var },
    Sigmoid { a: Var },
    Relu { a: Var },
    Softmax { a: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, mean: Vec<f64>, rstd: Vec<f64> },
    Conv1d { x: Var, kernel: Var, groups: usize },
    SumAxis { a: Var, axis: usize },
    SumAll { a: Var },
    GatherRows { a: Var, idx: Vec<usize> },
    ScatterRows { a: Var, idx: Vec<usize> },
    MaxRows { a: Var, argmax: Vec<usize> },
    CrossEntropy { logits: Var, label: usize, probs: Vec<f64> },
    PinvInit { a: Var, alpha: f64, row: usize, col: usize },
}

#[derive(Debug, Clone, Copy)]
struct MatDims {
    batch: usize,
    m: usize,
    p: usize,
    q: usize,
    a_batched: bool,
    b_batched: bool,
    trans_b: bool,
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Records a forward computation and differentiates it in reverse.
///
/// The graph also tracks the bytes held by live data and gradient buffers.
/// `peak_bytes` is the running maximum, sampled at every op boundary; a fresh
/// graph starts from zero, so one graph per forward+backward pass gives a
/// per-pass figure.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    live_bytes: usize,
    peak_bytes: usize,
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

    pub fn live_bytes(&self) -> usize {
        self.live_bytes
    }

    pub fn peak_bytes(&self) -> usize {
        self.peak_bytes
    }

    fn alloc(&mut self, elems: usize) {
        self.live_bytes += elems * F64_BYTES;
        self.peak_bytes = self.peak_bytes.max(self.live_bytes);
    }

    fn release(&mut self, elems: usize) {
        self.live_bytes -= elems * F64_BYTES;
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        self.alloc(data.len());
        self.nodes.push(Node {
            shape,
            data,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ── leaves and accessors ────────────────────────────────────────

    /// Records a leaf holding a copy of `t`; it is differentiable iff
    /// `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Records a non-differentiable leaf, taking ownership of the buffer.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.data.clone()).expect("node shape is consistent")
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.node(v).grad.as_deref()
    }

    /// Drops every retained gradient (leaf gradients included).
    pub fn zero_grad(&mut self) {
        let mut freed = 0;
        for n in &mut self.nodes {
            if let Some(g) = n.grad.take() {
                freed += g.len();
            }
        }
        self.release(freed);
    }

    // ── elementwise ─────────────────────────────────────────────────

    fn binary(&mut self, a: Var, b: Var, name: &'static str) -> Result<(Bcast, Vec<usize>)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let bcast = Bcast::detect(sa, sb).ok_or_else(|| TensorError::dim(name, sa, sb))?;
        Ok((bcast, sa.to_vec()))
    }

    fn zip_with(&self, a: Var, b: Var, bcast: Bcast, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let (da, db) = (self.value(a), self.value(b));
        match bcast {
            Bcast::Same => da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect(),
            _ => da
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, db[bcast.rhs_index(i, db.len())]))
                .collect(),
        }
    }

    /// `a + b`; `b` may broadcast as a trailing suffix or leading prefix of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (bcast, shape) = self.binary(a, b, "add")?;
        let data = self.zip_with(a, b, bcast, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, data, Op::Add { a, b, bcast }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (bcast, shape) = self.binary(a, b, "sub")?;
        let data = self.zip_with(a, b, bcast, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, data, Op::Sub { a, b, bcast }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (bcast, shape) = self.binary(a, b, "mul")?;
        let data = self.zip_with(a, b, bcast, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, data, Op::Mul { a, b, bcast }, rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let data = self.value(a).iter().map(|x| x * s).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(shape, data, Op::Scale { a, s }, rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let data = self.value(a).iter().map(|x| x + s).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(shape, data, Op::AddScalar { a }, rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let data = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(shape, data, op, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh { a })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid { a })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu { a })
    }

    // ── linear algebra ──────────────────────────────────────────────

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let name = if trans_b { "matmul_nt" } else { "matmul" };
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(TensorError::dim(name, &sa, &sb));
        }
        let (m, p) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (pb, q) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if p != pb {
            return Err(TensorError::dim(name, &sa, &sb));
        }
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let batch_shape = if ba == bb || bb.is_empty() {
            ba.to_vec()
        } else if ba.is_empty() {
            bb.to_vec()
        } else {
            return Err(TensorError::dim(name, &sa, &sb));
        };
        let dims = MatDims {
            batch: numel(&batch_shape),
            m,
            p,
            q,
            a_batched: !ba.is_empty(),
            b_batched: !bb.is_empty(),
            trans_b,
        };
        let mut out = vec![0.0; dims.batch * m * q];
        let (da, db) = (self.value(a), self.value(b));
        for bi in 0..dims.batch {
            let ao = if dims.a_batched { bi * m * p } else { 0 };
            let bo = if dims.b_batched { bi * p * q } else { 0 };
            let c = &mut out[bi * m * q..(bi + 1) * m * q];
            if trans_b {
                gemm_nt(&da[ao..ao + m * p], &db[bo..bo + p * q], c, m, p, q);
            } else {
                gemm_nn(&da[ao..ao + m * p], &db[bo..bo + p * q], c, m, p, q);
            }
        }
        let mut shape = batch_shape;
        shape.extend([m, q]);
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, out, Op::MatMul { a, b, dims }, rg))
    }

    /// Matrix product over the last two axes. Leading batch axes must match,
    /// or one side may be a plain 2-D matrix shared across the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 {
            return Err(TensorError::arg("transpose", format!("need rank >= 2, got {shape:?}")));
        }
        let (rows, cols) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let batch = numel(&shape[..shape.len() - 2]);
        let out = transpose_batched(self.value(a), batch, rows, cols);
        let mut new_shape = shape;
        let r = new_shape.len();
        new_shape.swap(r - 2, r - 1);
        let rg = self.rg(&[a]);
        Ok(self.push(new_shape, out, Op::Transpose { a, batch, rows, cols }, rg))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&x| x >= shape.len() || std::mem::replace(&mut seen[x], true)) {
            return Err(TensorError::arg("permute", format!("{axes:?} is not a permutation of rank {}", shape.len())));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&x| shape[x]).collect();
        let out = permute_data(self.value(a), &shape, axes);
        let rg = self.rg(&[a]);
        Ok(self.push(out_shape, out, Op::Permute { a, axes: axes.to_vec() }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(a).len() {
            return Err(TensorError::dim("reshape", self.shape(a), shape));
        }
        let data = self.value(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(shape.to_vec(), data, Op::Reshape { a }, rg))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(TensorError::arg(
                "narrow",
                format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, n, inner) = axis_extents(&shape, axis);
        let src = self.value(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(&[a]);
        Ok(self.push(out_shape, out, Op::Narrow { a, axis, start }, rg))
    }

    // ── normalization and attention pieces ─────────────────────────

    /// Numerically stable softmax along `axis` (max subtracted first).
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::arg("softmax", format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, n, inner) = axis_extents(&shape, axis);
        let src = self.value(a);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let mx = (0..n).map(|k| src[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..n {
                    let e = (src[at(k)] - mx).exp();
                    out[at(k)] = e;
                    z += e;
                }
                for k in 0..n {
                    out[at(k)] /= z;
                }
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(shape, out, Op::Softmax { a, axis }, rg))
    }

    /// Normalizes each row over the last axis, then applies `gain` and `bias`
    /// (both of length = last axis). `eps` sits inside the square root.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let f = *shape.last().ok_or_else(|| TensorError::arg("layer_norm", "scalar input"))?;
        for p in [gain, bias] {
            if self.shape(p) != [f] {
                return Err(TensorError::dim("layer_norm", &shape, self.shape(p)));
            }
        }
        let rows = self.value(x).len() / f;
        let (src, g, b) = (self.value(x), self.value(gain), self.value(bias));
        let mut out = vec![0.0; src.len()];
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &src[r * f..(r + 1) * f];
            let mean = row.iter().sum::<f64>() / f as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / f as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for j in 0..f {
                out[r * f + j] = (row[j] - mean) * rstd * g[j] + b[j];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm { x, gain, bias, mean: means, rstd: rstds },
            rg,
        ))
    }

    /// Length-3 cross-correlation along the last axis with zero padding, so the
    /// output length equals the input length.
    ///
    /// `kernel` is either `[3]` (shared by every row) or `[G, 3]`, in which case
    /// the leading axis of `x` must be `G` and group `g` uses kernel row `g`.
    pub fn conv1d_depthwise(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        let groups = match sk.as_slice() {
            [3] => 1,
            [g, 3] if sx.first() == Some(g) && sx.len() >= 2 => *g,
            _ => return Err(TensorError::dim("conv1d_depthwise", &sx, &sk)),
        };
        let len = *sx.last().expect("rank checked above");
        let (src, k) = (self.value(x), self.value(kernel));
        let rows = src.len() / len;
        let rows_per_group = rows / groups;
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let kk = &k[(r / rows_per_group) * 3..(r / rows_per_group) * 3 + 3];
            let row = &src[r * len..(r + 1) * len];
            let o = &mut out[r * len..(r + 1) * len];
            for i in 0..len {
                let mut s = kk[1] * row[i];
                if i > 0 {
                    s += kk[0] * row[i - 1];
                }
                if i + 1 < len {
                    s += kk[2] * row[i + 1];
                }
                o[i] = s;
            }
        }
        let rg = self.rg(&[x, kernel]);
        Ok(self.push(sx, out, Op::Conv1d { x, kernel, groups }, rg))
    }

    // ── reductions and row selection ───────────────────────────────

    /// Sums over `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::arg("sum_axis", format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, n, inner) = axis_extents(&shape, axis);
        let src = self.value(a);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let base = (o * n + k) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let rg = self.rg(&[a]);
        Ok(self.push(out_shape, out, Op::SumAxis { a, axis }, rg))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let n = *self
            .shape(a)
            .get(axis)
            .ok_or_else(|| TensorError::arg("mean_axis", format!("axis {axis} out of range")))?;
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(&[a]);
        self.push(Vec::new(), vec![s], Op::SumAll { a }, rg)
    }

    /// Selects rows (slices along axis 0) in the given order.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let rows = *shape.first().ok_or_else(|| TensorError::arg("gather_rows", "scalar input"))?;
        if idx.is_empty() || idx.iter().any(|&i| i >= rows) {
            return Err(TensorError::arg("gather_rows", format!("indices must be non-empty and < {rows}")));
        }
        let w = self.value(a).len() / rows;
        let src = self.value(a);
        let mut out = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            out.extend_from_slice(&src[i * w..(i + 1) * w]);
        }
        let mut out_shape = shape;
        out_shape[0] = idx.len();
        let rg = self.rg(&[a]);
        Ok(self.push(out_shape, out, Op::GatherRows { a, idx: idx.to_vec() }, rg))
    }

    /// Places row `r` of `a` at row `idx[r]` of a zero tensor with `rows` rows.
    /// Indices must be distinct.
    pub fn scatter_rows(&mut self, a: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.first() != Some(&idx.len()) {
            return Err(TensorError::dim("scatter_rows", &shape, &[idx.len()]));
        }
        let mut seen = vec![false; rows];
        if idx.iter().any(|&i| i >= rows || std::mem::replace(&mut seen[i], true)) {
            return Err(TensorError::arg("scatter_rows", format!("indices must be distinct and < {rows}")));
        }
        let w = self.value(a).len() / idx.len();
        let src = self.value(a);
        let mut out = vec![0.0; rows * w];
        for (r, &i) in idx.iter().enumerate() {
            out[i * w..(i + 1) * w].copy_from_slice(&src[r * w..(r + 1) * w]);
        }
        let mut out_shape = shape;
        out_shape[0] = rows;
        let rg = self.rg(&[a]);
        Ok(self.push(out_shape, out, Op::ScatterRows { a, idx: idx.to_vec() }, rg))
    }

    /// Elementwise maximum over axis 0 (first maximum wins ties).
    pub fn max_rows(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let rows = *shape.first().ok_or_else(|| TensorError::arg("max_rows", "scalar input"))?;
        let src = self.value(a);
        let w = src.len() / rows;
        let mut out = src[..w].to_vec();
        let mut argmax = vec![0usize; w];
        for r in 1..rows {
            for c in 0..w {
                if src[r * w + c] > out[c] {
                    out[c] = src[r * w + c];
                    argmax[c] = r;
                }
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(shape[1..].to_vec(), out, Op::MaxRows { a, argmax }, rg))
    }

    /// `-log softmax(logits)[label]` for a single logit vector.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let z = self.value(logits);
        if label >= z.len() {
            return Err(TensorError::arg(
                "cross_entropy",
                format!("label {label} out of range for {} classes", z.len()),
            ));
        }
        let mx = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + z.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        let probs: Vec<f64> = z.iter().map(|v| (v - lse).exp()).collect();
        let loss = lse - z[label];
        let rg = self.rg(&[logits]);
        Ok(self.push(Vec::new(), vec![loss], Op::CrossEntropy { logits, label, probs }, rg))
    }

    /// Newton–Schulz starting point `aᵀ / (‖a‖₁·‖a‖∞)` for a square matrix.
    /// Differentiable, including through the norm scale (at the argmax
    /// column and row).
    pub fn pinv_init(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let n = match shape.as_slice() {
            [r, c] if r == c => *r,
            _ => return Err(TensorError::arg("pinv_init", format!("expected a square matrix, got {shape:?}"))),
        };
        let src = self.value(a);
        let (mut col, mut n1) = (0, f64::NEG_INFINITY);
        for j in 0..n {
            let s: f64 = (0..n).map(|i| src[i * n + j].abs()).sum();
            if s > n1 {
                n1 = s;
                col = j;
            }
        }
        let (mut row, mut ninf) = (0, f64::NEG_INFINITY);
        for i in 0..n {
            let s: f64 = src[i * n..(i + 1) * n].iter().map(|v| v.abs()).sum();
            if s > ninf {
                ninf = s;
                row = i;
            }
        }
        if !(n1 > 0.0 && ninf > 0.0) {
            return Err(TensorError::arg("pinv_init", "matrix has no nonzero entries"));
        }
        let alpha = 1.0 / (n1 * ninf);
        let mut out = transpose_batched(src, 1, n, n);
        out.iter_mut().for_each(|v| *v *= alpha);
        let rg = self.rg(&[a]);
        Ok(self.push(shape, out, Op::PinvInit { a, alpha, row, col }, rg))
    }

    // ── reverse sweep ──────────────────────────────────────────────

    fn accumulate(&mut self, idx: usize, g: Vec<f64>) {
        let fresh = g.len();
        match &mut self.nodes[idx].grad {
            Some(buf) => {
                buf.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
            }
            slot @ None => {
                *slot = Some(g);
                self.alloc(fresh);
            }
        }
    }

    /// Back-propagates from a scalar `loss`. Leaf gradients accumulate across
    /// calls until [`Graph::zero_grad`]; intermediate gradients are released
    /// as soon as their node has been processed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::arg(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        if !self.requires_grad(loss) {
            return Err(TensorError::arg("backward", "loss does not depend on any differentiable tensor"));
        }
        self.accumulate(loss.0, vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[idx].grad.take() else {
                continue;
            };
            let contributions = self.input_grads(idx, &g);
            for (input, grad) in contributions {
                self.accumulate(input.0, grad);
            }
            self.release(g.len());
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn input_grads(&self, idx: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[idx];
        let mut out = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf => {}
            Op::Add { a, b, bcast } | Op::Sub { a, b, bcast } => {
                let sign = if matches!(node.op, Op::Sub { .. }) { -1.0 } else { 1.0 };
                if self.wants(*a) {
                    out.push((*a, g.to_vec()));
                }
                if self.wants(*b) {
                    let nb = self.value(*b).len();
                    let mut gb = vec![0.0; nb];
                    for (i, &gi) in g.iter().enumerate() {
                        gb[bcast.rhs_index(i, nb)] += sign * gi;
                    }
                    out.push((*b, gb));
                }
            }
            Op::Mul { a, b, bcast } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let nb = vb.len();
                if self.wants(*a) {
                    let ga = g.iter().enumerate().map(|(i, &gi)| gi * vb[bcast.rhs_index(i, nb)]).collect();
                    out.push((*a, ga));
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; nb];
                    for (i, (&gi, &ai)) in g.iter().zip(va).enumerate() {
                        gb[bcast.rhs_index(i, nb)] += gi * ai;
                    }
                    out.push((*b, gb));
                }
            }
            Op::Scale { a, s } => out.push((*a, g.iter().map(|v| v * s).collect())),
            Op::AddScalar { a } | Op::Reshape { a } => out.push((*a, g.to_vec())),
            Op::MatMul { a, b, dims } => {
                let d = *dims;
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, p, q) = (d.m, d.p, d.q);
                if self.wants(*a) {
                    let mut ga = vec![0.0; va.len()];
                    for bi in 0..d.batch {
                        let ao = if d.a_batched { bi * m * p } else { 0 };
                        let bo = if d.b_batched { bi * p * q } else { 0 };
                        let gs = &g[bi * m * q..(bi + 1) * m * q];
                        let dst = &mut ga[ao..ao + m * p];
                        if d.trans_b {
                            // c = a·bᵀ, b: [q,p] → da = g·b
                            gemm_nn(gs, &vb[bo..bo + p * q], dst, m, q, p);
                        } else {
                            gemm_nt(gs, &vb[bo..bo + p * q], dst, m, q, p);
                        }
                    }
                    out.push((*a, ga));
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; vb.len()];
                    for bi in 0..d.batch {
                        let ao = if d.a_batched { bi * m * p } else { 0 };
                        let bo = if d.b_batched { bi * p * q } else { 0 };
                        let gs = &g[bi * m * q..(bi + 1) * m * q];
                        let dst = &mut gb[bo..bo + p * q];
                        if d.trans_b {
                            // db = gᵀ·a : [q,p]
                            gemm_tn(gs, &va[ao..ao + m * p], dst, q, m, p);
                        } else {
                            // db = aᵀ·g : [p,q]
                            gemm_tn(&va[ao..ao + m * p], gs, dst, p, m, q);
                        }
                    }
                    out.push((*b, gb));
                }
            }
            Op::Transpose { a, batch, rows, cols } => {
                out.push((*a, transpose_batched(g, *batch, *cols, *rows)));
            }
            Op::Permute { a, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &x) in axes.iter().enumerate() {
                    inverse[x] = i;
                }
                out.push((*a, permute_data(g, &node.shape, &inverse)));
            }
            Op::Narrow { a, axis, start } => {
                let src_shape = self.shape(*a);
                let (outer, n, inner) = axis_extents(src_shape, *axis);
                let len = node.shape[*axis];
                let mut ga = vec![0.0; self.value(*a).len()];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    ga[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                out.push((*a, ga));
            }
            Op::Tanh { a } => {
                let ga = g.iter().zip(&node.data).map(|(gi, y)| gi * (1.0 - y * y)).collect();
                out.push((*a, ga));
            }
            Op::Sigmoid { a } => {
                let ga = g.iter().zip(&node.data).map(|(gi, y)| gi * y * (1.0 - y)).collect();
                out.push((*a, ga));
            }
            Op::Relu { a } => {
                let ga = g
                    .iter()
                    .zip(self.value(*a))
                    .map(|(gi, &x)| if x > 0.0 { *gi } else { 0.0 })
                    .collect();
                out.push((*a, ga));
            }
            Op::Softmax { a, axis } => {
                let (outer, n, inner) = axis_extents(&node.shape, *axis);
                let y = &node.data;
                let mut ga = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * n + k) * inner + i;
                        let dot: f64 = (0..n).map(|k| g[at(k)] * y[at(k)]).sum();
                        for k in 0..n {
                            ga[at(k)] = y[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
                out.push((*a, ga));
            }
            Op::LayerNorm { x, gain, bias, mean, rstd } => {
                let src = self.value(*x);
                let gv = self.value(*gain);
                let f = gv.len();
                let rows = src.len() / f;
                let mut gx = vec![0.0; src.len()];
                let mut ggain = vec![0.0; f];
                let mut gbias = vec![0.0; f];
                let mut xhat = vec![0.0; f];
                let mut dxhat = vec![0.0; f];
                for r in 0..rows {
                    let gr = &g[r * f..(r + 1) * f];
                    for j in 0..f {
                        xhat[j] = (src[r * f + j] - mean[r]) * rstd[r];
                        dxhat[j] = gr[j] * gv[j];
                        ggain[j] += gr[j] * xhat[j];
                        gbias[j] += gr[j];
                    }
                    let m1 = dxhat.iter().sum::<f64>() / f as f64;
                    let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / f as f64;
                    for j in 0..f {
                        gx[r * f + j] = rstd[r] * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                if self.wants(*x) {
                    out.push((*x, gx));
                }
                if self.wants(*gain) {
                    out.push((*gain, ggain));
                }
                if self.wants(*bias) {
                    out.push((*bias, gbias));
                }
            }
            Op::Conv1d { x, kernel, groups } => {
                let src = self.value(*x);
                let k = self.value(*kernel);
                let len = *node.shape.last().expect("conv output has rank >= 1");
                let rows = src.len() / len;
                let per = rows / groups;
                let mut gx = vec![0.0; src.len()];
                let mut gk = vec![0.0; k.len()];
                for r in 0..rows {
                    let ko = (r / per) * 3;
                    let row = &src[r * len..(r + 1) * len];
                    let gr = &g[r * len..(r + 1) * len];
                    for i in 0..len {
                        gx[r * len + i] += k[ko + 1] * gr[i];
                        gk[ko + 1] += gr[i] * row[i];
                        if i > 0 {
                            gx[r * len + i - 1] += k[ko] * gr[i];
                            gk[ko] += gr[i] * row[i - 1];
                        }
                        if i + 1 < len {
                            gx[r * len + i + 1] += k[ko + 2] * gr[i];
                            gk[ko + 2] += gr[i] * row[i + 1];
                        }
                    }
                }
                if self.wants(*x) {
                    out.push((*x, gx));
                }
                if self.wants(*kernel) {
                    out.push((*kernel, gk));
                }
            }
            Op::SumAxis { a, axis } => {
                let (outer, n, inner) = axis_extents(self.shape(*a), *axis);
                let mut ga = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for k in 0..n {
                        let base = (o * n + k) * inner;
                        ga[base..base + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                out.push((*a, ga));
            }
            Op::SumAll { a } => out.push((*a, vec![g[0]; self.value(*a).len()])),
            Op::GatherRows { a, idx } => {
                let w = g.len() / idx.len();
                let mut ga = vec![0.0; self.value(*a).len()];
                for (r, &i) in idx.iter().enumerate() {
                    for c in 0..w {
                        ga[i * w + c] += g[r * w + c];
                    }
                }
                out.push((*a, ga));
            }
            Op::ScatterRows { a, idx } => {
                let w = self.value(*a).len() / idx.len();
                let mut ga = Vec::with_capacity(idx.len() * w);
                for &i in idx {
                    ga.extend_from_slice(&g[i * w..(i + 1) * w]);
                }
                out.push((*a, ga));
            }
            Op::MaxRows { a, argmax } => {
                let w = argmax.len();
                let mut ga = vec![0.0; self.value(*a).len()];
                for (c, &r) in argmax.iter().enumerate() {
                    ga[r * w + c] += g[c];
                }
                out.push((*a, ga));
            }
            Op::CrossEntropy { logits, label, probs } => {
                let mut gl: Vec<f64> = probs.iter().map(|p| p * g[0]).collect();
                gl[*label] -= g[0];
                out.push((*logits, gl));
            }
            Op::PinvInit { a, alpha, row, col } => {
                let src = self.value(*a);
                let n = node.shape[0];
                // d(αAᵀ) = α·dAᵀ + Aᵀ·dα
                let mut ga = transpose_batched(g, 1, n, n);
                ga.iter_mut().for_each(|v| *v *= alpha);
                // s = Σ_ij g_ij·(Aᵀ)_ij
                let s: f64 = (0..n)
                    .flat_map(|i| (0..n).map(move |j| (i, j)))
                    .map(|(i, j)| g[i * n + j] * src[j * n + i])
                    .sum();
                let n1: f64 = (0..n).map(|i| src[i * n + col].abs()).sum();
                let ninf: f64 = src[row * n..(row + 1) * n].iter().map(|v| v.abs()).sum();
                for i in 0..n {
                    let v = src[i * n + col];
                    ga[i * n + col] -= s * alpha * v.signum() / n1;
                }
                for j in 0..n {
                    let v = src[row * n + j];
                    ga[row * n + j] -= s * alpha * v.signum() / ninf;
                }
                out.push((*a, ga));
            }
        }
        out.retain(|(v, _)| self.wants(*v));
        out
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn transpose_batched(src: &[f64], batch: usize, rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for b in 0..batch {
        let o = b * rows * cols;
        for r in 0..rows {
            for c in 0..cols {
                out[o + c * rows + r] = src[o + r * cols + c];
            }
        }
    }
    out
}

fn permute_data(src: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&x| shape[x]).collect();
    let strides: Vec<usize> = axes.iter().map(|&x| in_strides[x]).collect();
    let mut out = Vec::with_capacity(src.len());
    let mut counter = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..src.len() {
        out.push(src[offset]);
        for d in (0..rank).rev() {
            counter[d] += 1;
            offset += strides[d];
            if counter[d] < out_shape[d] {
                break;
            }
            offset -= strides[d] * out_shape[d];
            counter[d] = 0;
        }
    }
    out
}
