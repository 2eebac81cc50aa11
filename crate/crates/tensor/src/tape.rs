//! Reverse-mode gradient tape.
//!
//! Nodes are appended in evaluation order, so walking the node list backwards
//! visits every node after all of its consumers.

use std::rc::Rc;

use crate::linalg::{gemm, View, ViewMut};
use crate::mask::AttentionMask;
use crate::{Tensor, TensorError};

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that created
/// it and only until that tape is cleared.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

pub(crate) enum Op {
    Leaf,
    MatMul { a: usize, b: usize, trans_b: bool },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddRow { x: usize, bias: usize },
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Gelu(usize),
    Sum(usize),
    Mean(usize),
    Gather { src: usize, rows: Vec<usize>, frozen: Option<usize> },
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceCols { x: usize, start: usize },
    WhereRows { mask: Vec<bool>, a: usize, b: usize },
    Dropout { x: usize, keep: Vec<f64> },
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    Attention(Box<AttentionSaved>),
    Additive(Box<AdditiveSaved>),
    GruStep(Box<GruSaved>),
    Score { z: usize, table: usize, cands: Vec<usize> },
    Bce { logits: usize, labels: Vec<f64>, weights: Vec<f64>, wsum: f64 },
}

pub(crate) struct AttentionSaved {
    q: usize,
    k: usize,
    v: usize,
    mask: Rc<AttentionMask>,
    heads: usize,
    scale: f64,
    probs: Vec<f64>,
}

pub(crate) struct AdditiveSaved {
    q: usize,
    k: usize,
    w: usize,
    values: usize,
    mask: Rc<AttentionMask>,
    probs: Vec<f64>,
}

pub(crate) struct GruSaved {
    gx: usize,
    h: usize,
    w_hh: usize,
    b_hh: usize,
    active: Option<Vec<bool>>,
    r: Vec<f64>,
    z: Vec<f64>,
    n: Vec<f64>,
    hn: Vec<f64>,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records differentiable operations and replays them backwards.
///
/// A tape is single-threaded and meant to live for one training step; call
/// [`Tape::clear`] (or build a fresh tape) between steps.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Row-wise softmax over the `allowed` entries; disallowed entries get 0.
fn masked_softmax(scores: &mut [f64], allowed: &[bool]) {
    let mut max = f64::NEG_INFINITY;
    for (s, &ok) in scores.iter().zip(allowed) {
        if ok && *s > max {
            max = *s;
        }
    }
    let mut sum = 0.0;
    for (s, &ok) in scores.iter_mut().zip(allowed) {
        if ok {
            *s = (*s - max).exp();
            sum += *s;
        } else {
            *s = 0.0;
        }
    }
    for s in scores.iter_mut() {
        *s /= sum;
    }
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

    /// Drops every recorded node and gradient.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Places a tensor on the tape as a leaf.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that accumulates a gradient.
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

    /// Gradient of the last `backward` call with respect to `v`. Tracked
    /// nodes the loss did not depend on get a zero gradient.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let data = match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => vec![0.0; node.value.numel()],
        };
        Some(Tensor::from_vec(node.value.shape(), data).expect("gradient shape"))
    }

    // ---------------------------------------------------------------- linalg

    /// `a [m x k] * b [k x n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.matmul_impl(a, b, false)
    }

    /// `a [m x k] * b^T` with `b` stored as `[n x k]` (linear-layer weights).
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, TensorError> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(shape_err("matmul", sa, sb));
        }
        let mut out = vec![0.0; m * n];
        let bview = if trans_b {
            View::tr(bv.data(), 0, k)
        } else {
            View::rm(bv.data(), 0, n)
        };
        gemm(m, k, n, 1.0, View::rm(av.data(), 0, k), bview, 0.0, ViewMut::rm(&mut out, 0, n));
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(
            Tensor::from_vec(&[m, n], out)?,
            Op::MatMul { a: a.0, b: b.0, trans_b },
            rg,
        ))
    }

    // ----------------------------------------------------------- elementwise

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
        if sa != sb {
            return Err(shape_err(op, sa, sb));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_vec(av.shape(), data).expect("same shape");
        let rg = self.rg(&[a.0, b.0]);
        self.push(out, op, rg)
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let xv = &self.nodes[x.0].value;
        let data = xv.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::from_vec(xv.shape(), data).expect("same shape");
        let rg = self.rg(&[x.0]);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a.0, b.0), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a.0, b.0), |x, y| x - y))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a.0, b.0), |x, y| x * y))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.map(x, Op::Scale(x.0, c), |v| v * c)
    }

    /// Adds `bias [n]` to every row of `x [.., n]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (xv, bv) = (&self.nodes[x.0].value, &self.nodes[bias.0].value);
        if bv.shape().len() != 1 || bv.numel() != xv.cols() {
            return Err(shape_err("add_row", xv.shape(), bv.shape()));
        }
        let n = xv.cols();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(n.max(1)) {
            for (v, b) in row.iter_mut().zip(bv.data()) {
                *v += b;
            }
        }
        let out = Tensor::from_vec(xv.shape(), data)?;
        let rg = self.rg(&[x.0, bias.0]);
        Ok(self.push(out, Op::AddRow { x: x.0, bias: bias.0 }, rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, Op::Sigmoid(x.0), sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, Op::Tanh(x.0), f64::tanh)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, Op::Relu(x.0), |v| v.max(0.0))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, Op::Gelu(x.0), gelu)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.data().iter().sum();
        let rg = self.rg(&[x.0]);
        self.push(Tensor::scalar(s), Op::Sum(x.0), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, TensorError> {
        let xv = &self.nodes[x.0].value;
        if xv.numel() == 0 {
            return Err(TensorError::Contract("mean of an empty tensor".into()));
        }
        let s = xv.data().iter().sum::<f64>() / xv.numel() as f64;
        let rg = self.rg(&[x.0]);
        Ok(self.push(Tensor::scalar(s), Op::Mean(x.0), rg))
    }

    // ----------------------------------------------------------- row algebra

    /// Gathers rows of a 2-D tensor.
    pub fn gather_rows(&mut self, src: Var, rows: &[usize]) -> Result<Var, TensorError> {
        self.gather_impl(src, rows, None)
    }

    /// Row lookup into an embedding table whose row `pad_id` is kept frozen:
    /// its gradient is always zero.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize], pad_id: usize) -> Result<Var, TensorError> {
        self.gather_impl(table, ids, Some(pad_id))
    }

    fn gather_impl(&mut self, src: Var, rows: &[usize], frozen: Option<usize>) -> Result<Var, TensorError> {
        let sv = &self.nodes[src.0].value;
        if sv.shape().len() != 2 {
            return Err(shape_err("gather_rows", sv.shape(), &[rows.len()]));
        }
        let (n, d) = (sv.shape()[0], sv.shape()[1]);
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= n {
                return Err(TensorError::Vocab { id: r, rows: n });
            }
            data.extend_from_slice(sv.row(r));
        }
        let out = Tensor::from_vec(&[rows.len(), d], data)?;
        let rg = self.rg(&[src.0]);
        Ok(self.push(
            out,
            Op::Gather {
                src: src.0,
                rows: rows.to_vec(),
                frozen,
            },
            rg,
        ))
    }

    /// Stacks 2-D tensors with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat of zero tensors".into()))?;
        let cols = self.nodes[first.0].value.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let v = &self.nodes[p.0].value;
            if v.shape().len() != 2 || v.cols() != cols {
                return Err(shape_err("concat_rows", self.nodes[first.0].value.shape(), v.shape()));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(Tensor::from_vec(&[rows, cols], data)?, Op::ConcatRows(ids), rg))
    }

    /// Joins 2-D tensors with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat of zero tensors".into()))?;
        let rows = self.nodes[first.0].value.rows();
        let mut total = 0;
        for p in parts {
            let v = &self.nodes[p.0].value;
            if v.shape().len() != 2 || v.rows() != rows {
                return Err(shape_err("concat_cols", self.nodes[first.0].value.shape(), v.shape()));
            }
            total += v.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.nodes[p.0].value.row(r));
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(Tensor::from_vec(&[rows, total], data)?, Op::ConcatCols(ids), rg))
    }

    /// Columns `start..start + len` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let xv = &self.nodes[x.0].value;
        if xv.shape().len() != 2 || start + len > xv.cols() {
            return Err(shape_err("slice_cols", xv.shape(), &[start, len]));
        }
        let rows = xv.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let rg = self.rg(&[x.0]);
        Ok(self.push(Tensor::from_vec(&[rows, len], data)?, Op::SliceCols { x: x.0, start }, rg))
    }

    /// Row `r` of the result comes from `a` when `mask[r]`, else from `b`.
    pub fn where_rows(&mut self, mask: &[bool], a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("where_rows", a, b)?;
        let av = &self.nodes[a.0].value;
        if mask.len() != av.rows() {
            return Err(shape_err("where_rows", av.shape(), &[mask.len()]));
        }
        let c = av.cols();
        let bv = &self.nodes[b.0].value;
        let mut data = Vec::with_capacity(av.numel());
        for (r, &m) in mask.iter().enumerate() {
            data.extend_from_slice(if m { av.row(r) } else { bv.row(r) });
        }
        let out = Tensor::from_vec(av.shape(), data)?;
        debug_assert_eq!(out.cols(), c);
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(
            out,
            Op::WhereRows {
                mask: mask.to_vec(),
                a: a.0,
                b: b.0,
            },
            rg,
        ))
    }

    /// Inverted dropout with a caller-supplied keep mask (`true` = keep).
    pub fn dropout(&mut self, x: Var, keep: &[bool], p: f64) -> Result<Var, TensorError> {
        let xv = &self.nodes[x.0].value;
        if keep.len() != xv.numel() {
            return Err(shape_err("dropout", xv.shape(), &[keep.len()]));
        }
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Contract(format!("dropout probability {p} outside [0, 1)")));
        }
        let s = 1.0 / (1.0 - p);
        let keep: Vec<f64> = keep.iter().map(|&k| if k { s } else { 0.0 }).collect();
        let data = xv.data().iter().zip(&keep).map(|(v, k)| v * k).collect();
        let out = Tensor::from_vec(xv.shape(), data)?;
        let rg = self.rg(&[x.0]);
        Ok(self.push(out, Op::Dropout { x: x.0, keep }, rg))
    }

    // -------------------------------------------------------------- nn parts

    /// Standardizes each row over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, TensorError> {
        if eps <= 0.0 {
            return Err(TensorError::Contract("layer_norm eps must be positive".into()));
        }
        let xv = &self.nodes[x.0].value;
        let d = xv.cols();
        let (gv, bv) = (&self.nodes[gain.0].value, &self.nodes[bias.0].value);
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(shape_err("layer_norm", xv.shape(), gv.shape()));
        }
        let rows = xv.rows();
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = xv.row(r);
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for c in 0..d {
                let xh = (row[c] - mu) * inv;
                xhat[r * d + c] = xh;
                out[r * d + c] = xh * gv.data()[c] + bv.data()[c];
            }
        }
        let out = Tensor::from_vec(xv.shape(), out)?;
        let rg = self.rg(&[x.0, gain.0, bias.0]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Multi-head scaled dot-product attention over a batch of windows.
    ///
    /// `q`, `k` are `[batch*len, dk]` and `v` is `[batch*len, dv]`, laid out
    /// sequence-major. Heads split `dk` and `dv` evenly. Scores are multiplied
    /// by `scale` (typically `1/sqrt(dk/heads)`); disallowed entries get zero
    /// weight.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        mask: &Rc<AttentionMask>,
        heads: usize,
        scale: f64,
    ) -> Result<Var, TensorError> {
        let (b, l) = (mask.batch(), mask.len());
        let (qv, kv, vv) = (&self.nodes[q.0].value, &self.nodes[k.0].value, &self.nodes[v.0].value);
        let dk = qv.cols();
        let dv = vv.cols();
        if qv.shape() != kv.shape() || qv.shape().len() != 2 || qv.rows() != b * l {
            return Err(shape_err("attention", qv.shape(), kv.shape()));
        }
        if vv.shape().len() != 2 || vv.rows() != b * l {
            return Err(shape_err("attention", qv.shape(), vv.shape()));
        }
        if heads == 0 || dk % heads != 0 || dv % heads != 0 {
            return Err(TensorError::Contract(format!(
                "{heads} heads do not divide widths {dk} / {dv}"
            )));
        }
        let (hk, hv) = (dk / heads, dv / heads);
        let mut probs = vec![0.0; b * heads * l * l];
        let mut out = vec![0.0; b * l * dv];
        for bi in 0..b {
            for h in 0..heads {
                let p_off = (bi * heads + h) * l * l;
                let p = &mut probs[p_off..p_off + l * l];
                gemm(
                    l,
                    hk,
                    l,
                    scale,
                    View::rm(qv.data(), bi * l * dk + h * hk, dk),
                    View::tr(kv.data(), bi * l * dk + h * hk, dk),
                    0.0,
                    ViewMut::rm(p, 0, l),
                );
                for i in 0..l {
                    masked_softmax(&mut p[i * l..(i + 1) * l], mask.row(bi, i));
                }
                gemm(
                    l,
                    l,
                    hv,
                    1.0,
                    View::rm(p, 0, l),
                    View::rm(vv.data(), bi * l * dv + h * hv, dv),
                    0.0,
                    ViewMut::rm(&mut out, bi * l * dv + h * hv, dv),
                );
            }
        }
        let out = Tensor::from_vec(&[b * l, dv], out)?;
        let rg = self.rg(&[q.0, k.0, v.0]);
        Ok(self.push(
            out,
            Op::Attention(Box::new(AttentionSaved {
                q: q.0,
                k: k.0,
                v: v.0,
                mask: Rc::clone(mask),
                heads,
                scale,
                probs,
            })),
            rg,
        ))
    }

    /// Additive attention pooling: for query row `i` and key row `j` of the
    /// same window, `score_ij = w . sigmoid(q_i + k_j)`; output row `i` is the
    /// masked-softmax-weighted sum of `values`.
    pub fn additive_attention(
        &mut self,
        q: Var,
        k: Var,
        w: Var,
        values: Var,
        mask: &Rc<AttentionMask>,
    ) -> Result<Var, TensorError> {
        let (b, l) = (mask.batch(), mask.len());
        let (qv, kv) = (&self.nodes[q.0].value, &self.nodes[k.0].value);
        let (wv, vv) = (&self.nodes[w.0].value, &self.nodes[values.0].value);
        let da = qv.cols();
        if qv.shape() != kv.shape() || qv.shape().len() != 2 || qv.rows() != b * l || wv.shape() != [da] {
            return Err(shape_err("additive_attention", qv.shape(), kv.shape()));
        }
        if vv.shape().len() != 2 || vv.rows() != b * l {
            return Err(shape_err("additive_attention", qv.shape(), vv.shape()));
        }
        let dv = vv.cols();
        let wd = wv.data();
        let mut probs = vec![0.0; b * l * l];
        let mut out = vec![0.0; b * l * dv];
        for bi in 0..b {
            for i in 0..l {
                let allowed = mask.row(bi, i);
                let qi = qv.row(bi * l + i);
                let p = &mut probs[(bi * l + i) * l..(bi * l + i + 1) * l];
                for j in 0..l {
                    if !allowed[j] {
                        continue;
                    }
                    let kj = kv.row(bi * l + j);
                    p[j] = qi.iter().zip(kj).zip(wd).map(|((a, c), w)| w * sigmoid(a + c)).sum();
                }
                masked_softmax(p, allowed);
                let o = &mut out[(bi * l + i) * dv..(bi * l + i + 1) * dv];
                for j in 0..l {
                    if p[j] == 0.0 {
                        continue;
                    }
                    for (ov, vj) in o.iter_mut().zip(vv.row(bi * l + j)) {
                        *ov += p[j] * vj;
                    }
                }
            }
        }
        let out = Tensor::from_vec(&[b * l, dv], out)?;
        let rg = self.rg(&[q.0, k.0, w.0, values.0]);
        Ok(self.push(
            out,
            Op::Additive(Box::new(AdditiveSaved {
                q: q.0,
                k: k.0,
                w: w.0,
                values: values.0,
                mask: Rc::clone(mask),
                probs,
            })),
            rg,
        ))
    }

    /// One GRU recurrence given the precomputed input projection
    /// `gx = x W_ih^T + b_ih` (`[batch, 3h]`, gate order reset, update, new).
    ///
    /// Rows with `active[r] == false` pass `h` through unchanged.
    pub fn gru_step(
        &mut self,
        gx: Var,
        h: Var,
        w_hh: Var,
        b_hh: Var,
        active: Option<&[bool]>,
    ) -> Result<Var, TensorError> {
        let (gxv, hv) = (&self.nodes[gx.0].value, &self.nodes[h.0].value);
        let (wv, bv) = (&self.nodes[w_hh.0].value, &self.nodes[b_hh.0].value);
        let hd = hv.cols();
        let rows = hv.rows();
        if hv.shape().len() != 2 || gxv.shape() != [rows, 3 * hd] {
            return Err(shape_err("gru_step", gxv.shape(), hv.shape()));
        }
        if wv.shape() != [3 * hd, hd] || bv.shape() != [3 * hd] {
            return Err(shape_err("gru_step", wv.shape(), bv.shape()));
        }
        if let Some(a) = active {
            if a.len() != rows {
                return Err(shape_err("gru_step", hv.shape(), &[a.len()]));
            }
        }
        let mut hn = vec![0.0; rows * 3 * hd];
        gemm(
            rows,
            hd,
            3 * hd,
            1.0,
            View::rm(hv.data(), 0, hd),
            View::tr(wv.data(), 0, hd),
            0.0,
            ViewMut::rm(&mut hn, 0, 3 * hd),
        );
        for row in hn.chunks_mut(3 * hd) {
            for (x, b) in row.iter_mut().zip(bv.data()) {
                *x += b;
            }
        }
        let mut r = vec![0.0; rows * hd];
        let mut z = vec![0.0; rows * hd];
        let mut n = vec![0.0; rows * hd];
        let mut out = vec![0.0; rows * hd];
        let gxd = gxv.data();
        for row in 0..rows {
            let live = active.is_none_or(|a| a[row]);
            for c in 0..hd {
                let o = row * hd + c;
                let hprev = hv.data()[o];
                if !live {
                    out[o] = hprev;
                    continue;
                }
                let g = row * 3 * hd;
                let rv = sigmoid(gxd[g + c] + hn[g + c]);
                let zv = sigmoid(gxd[g + hd + c] + hn[g + hd + c]);
                let nv = (gxd[g + 2 * hd + c] + rv * hn[g + 2 * hd + c]).tanh();
                r[o] = rv;
                z[o] = zv;
                n[o] = nv;
                out[o] = (1.0 - zv) * nv + zv * hprev;
            }
        }
        let out = Tensor::from_vec(&[rows, hd], out)?;
        let rg = self.rg(&[gx.0, h.0, w_hh.0, b_hh.0]);
        Ok(self.push(
            out,
            Op::GruStep(Box::new(GruSaved {
                gx: gx.0,
                h: h.0,
                w_hh: w_hh.0,
                b_hh: b_hh.0,
                active: active.map(<[bool]>::to_vec),
                r,
                z,
                n,
                hn,
            })),
            rg,
        ))
    }

    /// Full GRU cell `h' = (1 - z) * n + z * h` from raw input `x [batch, d_in]`.
    #[allow(clippy::too_many_arguments)]
    pub fn gru_cell(
        &mut self,
        x: Var,
        h: Var,
        w_ih: Var,
        w_hh: Var,
        b_ih: Var,
        b_hh: Var,
    ) -> Result<Var, TensorError> {
        let proj = self.matmul_nt(x, w_ih)?;
        let gx = self.add_row(proj, b_ih)?;
        self.gru_step(gx, h, w_hh, b_hh, None)
    }

    /// Dot products of each row `z[r]` with `table[cands[r * width + c]]`,
    /// giving a `[rows, width]` score matrix.
    pub fn score_candidates(&mut self, z: Var, table: Var, cands: &[usize], width: usize) -> Result<Var, TensorError> {
        let (zv, tv) = (&self.nodes[z.0].value, &self.nodes[table.0].value);
        let d = zv.cols();
        if zv.shape().len() != 2 || tv.shape().len() != 2 || tv.cols() != d {
            return Err(shape_err("score_candidates", zv.shape(), tv.shape()));
        }
        let rows = zv.rows();
        if cands.len() != rows * width {
            return Err(shape_err("score_candidates", &[rows, width], &[cands.len()]));
        }
        let vocab = tv.rows();
        let mut out = vec![0.0; rows * width];
        for r in 0..rows {
            let zr = zv.row(r);
            for c in 0..width {
                let id = cands[r * width + c];
                if id >= vocab {
                    return Err(TensorError::Vocab { id, rows: vocab });
                }
                out[r * width + c] = zr.iter().zip(tv.row(id)).map(|(a, b)| a * b).sum();
            }
        }
        let rg = self.rg(&[z.0, table.0]);
        Ok(self.push(
            Tensor::from_vec(&[rows, width], out)?,
            Op::Score {
                z: z.0,
                table: table.0,
                cands: cands.to_vec(),
            },
            rg,
        ))
    }

    /// Weighted mean binary cross-entropy on raw logits, in the
    /// `max(x, 0) - x y + ln(1 + e^-|x|)` form.
    ///
    /// With all weights zero the loss is 0.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f64], weights: Option<&[f64]>) -> Result<Var, TensorError> {
        let lv = &self.nodes[logits.0].value;
        let n = lv.numel();
        if n == 0 {
            return Err(TensorError::Contract("binary cross-entropy over zero logits".into()));
        }
        if labels.len() != n {
            return Err(shape_err("bce_with_logits", lv.shape(), &[labels.len()]));
        }
        if labels.iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(TensorError::Contract("labels must be 0 or 1".into()));
        }
        let weights = match weights {
            Some(w) if w.len() != n => return Err(shape_err("bce_with_logits", lv.shape(), &[w.len()])),
            Some(w) => w.to_vec(),
            None => vec![1.0; n],
        };
        let wsum: f64 = weights.iter().sum();
        let mut total = 0.0;
        for ((&x, &y), &w) in lv.data().iter().zip(labels).zip(&weights) {
            if w != 0.0 {
                total += w * (x.max(0.0) - x * y + (-x.abs()).exp().ln_1p());
            }
        }
        let loss = if wsum > 0.0 { total / wsum } else { 0.0 };
        let rg = self.rg(&[logits.0]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                logits: logits.0,
                labels: labels.to_vec(),
                weights,
                wsum,
            },
            rg,
        ))
    }

    // -------------------------------------------------------------- backward

    /// Accumulates d(loss)/d(node) for every tracked node the loss depends on.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = self.grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !matches!(node.op, Op::Leaf) {
                backprop(&self.nodes, &mut self.grads, id, &g);
            } else {
                self.grads[id] = Some(g);
            }
        }
        Ok(())
    }
}

fn acc<'g>(nodes: &[Node], grads: &'g mut [Option<Vec<f64>>], id: usize) -> Option<&'g mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let n = nodes[id].value.numel();
    Some(grads[id].get_or_insert_with(|| vec![0.0; n]))
}

fn acc_scaled(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: usize, g: &[f64], s: f64) {
    if let Some(dst) = acc(nodes, grads, id) {
        for (d, v) in dst.iter_mut().zip(g) {
            *d += s * v;
        }
    }
}

fn backprop(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: usize, g: &[f64]) {
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::MatMul { a, b, trans_b } => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k) = (av.shape()[0], av.shape()[1]);
            let n = out.shape()[1];
            if let Some(da) = acc(nodes, grads, *a) {
                // da = g * op(b)^T
                let bt = if *trans_b {
                    View::rm(bv.data(), 0, k)
                } else {
                    View::tr(bv.data(), 0, n)
                };
                gemm(m, n, k, 1.0, View::rm(g, 0, n), bt, 1.0, ViewMut::rm(da, 0, k));
            }
            if let Some(db) = acc(nodes, grads, *b) {
                if *trans_b {
                    // db [n x k] = g^T a
                    gemm(n, m, k, 1.0, View::tr(g, 0, n), View::rm(av.data(), 0, k), 1.0, ViewMut::rm(db, 0, k));
                } else {
                    // db [k x n] = a^T g
                    gemm(k, m, n, 1.0, View::tr(av.data(), 0, k), View::rm(g, 0, n), 1.0, ViewMut::rm(db, 0, n));
                }
            }
        }
        Op::Add(a, b) => {
            acc_scaled(nodes, grads, *a, g, 1.0);
            acc_scaled(nodes, grads, *b, g, 1.0);
        }
        Op::Sub(a, b) => {
            acc_scaled(nodes, grads, *a, g, 1.0);
            acc_scaled(nodes, grads, *b, g, -1.0);
        }
        Op::Mul(a, b) => {
            let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
            if let Some(da) = acc(nodes, grads, *a) {
                for ((d, gi), y) in da.iter_mut().zip(g).zip(bv) {
                    *d += gi * y;
                }
            }
            if let Some(db) = acc(nodes, grads, *b) {
                for ((d, gi), x) in db.iter_mut().zip(g).zip(av) {
                    *d += gi * x;
                }
            }
        }
        Op::Scale(x, c) => acc_scaled(nodes, grads, *x, g, *c),
        Op::AddRow { x, bias } => {
            acc_scaled(nodes, grads, *x, g, 1.0);
            let n = out.cols();
            if let Some(db) = acc(nodes, grads, *bias) {
                for row in g.chunks(n.max(1)) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
            }
        }
        Op::Sigmoid(x) => {
            if let Some(dx) = acc(nodes, grads, *x) {
                for ((d, gi), y) in dx.iter_mut().zip(g).zip(out.data()) {
                    *d += gi * y * (1.0 - y);
                }
            }
        }
        Op::Tanh(x) => {
            if let Some(dx) = acc(nodes, grads, *x) {
                for ((d, gi), y) in dx.iter_mut().zip(g).zip(out.data()) {
                    *d += gi * (1.0 - y * y);
                }
            }
        }
        Op::Relu(x) => {
            let xv = nodes[*x].value.data();
            if let Some(dx) = acc(nodes, grads, *x) {
                for ((d, gi), v) in dx.iter_mut().zip(g).zip(xv) {
                    if *v > 0.0 {
                        *d += gi;
                    }
                }
            }
        }
        Op::Gelu(x) => {
            let xv = nodes[*x].value.data();
            if let Some(dx) = acc(nodes, grads, *x) {
                for ((d, gi), v) in dx.iter_mut().zip(g).zip(xv) {
                    *d += gi * gelu_grad(*v);
                }
            }
        }
        Op::Sum(x) => {
            if let Some(dx) = acc(nodes, grads, *x) {
                dx.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::Mean(x) => {
            if let Some(dx) = acc(nodes, grads, *x) {
                let s = g[0] / dx.len() as f64;
                dx.iter_mut().for_each(|d| *d += s);
            }
        }
        Op::Gather { src, rows, frozen } => {
            let d = out.cols();
            if let Some(ds) = acc(nodes, grads, *src) {
                for (i, &r) in rows.iter().enumerate() {
                    if Some(r) == *frozen {
                        continue;
                    }
                    for (a, b) in ds[r * d..(r + 1) * d].iter_mut().zip(&g[i * d..(i + 1) * d]) {
                        *a += b;
                    }
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for &p in parts {
                let n = nodes[p].value.numel();
                acc_scaled(nodes, grads, p, &g[off..off + n], 1.0);
                off += n;
            }
        }
        Op::ConcatCols(parts) => {
            let total = out.cols();
            let rows = out.rows();
            let mut col = 0;
            for &p in parts {
                let c = nodes[p].value.cols();
                if let Some(dp) = acc(nodes, grads, p) {
                    for r in 0..rows {
                        for j in 0..c {
                            dp[r * c + j] += g[r * total + col + j];
                        }
                    }
                }
                col += c;
            }
        }
        Op::SliceCols { x, start } => {
            let len = out.cols();
            let c = nodes[*x].value.cols();
            if let Some(dx) = acc(nodes, grads, *x) {
                for r in 0..out.rows() {
                    for j in 0..len {
                        dx[r * c + start + j] += g[r * len + j];
                    }
                }
            }
        }
        Op::WhereRows { mask, a, b } => {
            let c = out.cols();
            for (id, pick) in [(*a, true), (*b, false)] {
                if let Some(dst) = acc(nodes, grads, id) {
                    for (r, &m) in mask.iter().enumerate() {
                        if m == pick {
                            for j in 0..c {
                                dst[r * c + j] += g[r * c + j];
                            }
                        }
                    }
                }
            }
        }
        Op::Dropout { x, keep } => {
            if let Some(dx) = acc(nodes, grads, *x) {
                for ((d, gi), k) in dx.iter_mut().zip(g).zip(keep) {
                    *d += gi * k;
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
            let d = out.cols();
            let rows = out.rows();
            let gv = nodes[*gain].value.data();
            if let Some(dg) = acc(nodes, grads, *gain) {
                for r in 0..rows {
                    for c in 0..d {
                        dg[c] += g[r * d + c] * xhat[r * d + c];
                    }
                }
            }
            if let Some(db) = acc(nodes, grads, *bias) {
                for r in 0..rows {
                    for c in 0..d {
                        db[c] += g[r * d + c];
                    }
                }
            }
            if let Some(dx) = acc(nodes, grads, *x) {
                let mut dxh = vec![0.0; d];
                for r in 0..rows {
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for c in 0..d {
                        dxh[c] = g[r * d + c] * gv[c];
                        m1 += dxh[c];
                        m2 += dxh[c] * xhat[r * d + c];
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    for c in 0..d {
                        dx[r * d + c] += inv_std[r] * (dxh[c] - m1 - xhat[r * d + c] * m2);
                    }
                }
            }
        }
        Op::Attention(s) => attention_backward(nodes, grads, s, g),
        Op::Additive(s) => additive_backward(nodes, grads, s, g),
        Op::GruStep(s) => gru_backward(nodes, grads, s, g),
        Op::Score { z, table, cands } => {
            let (zv, tv) = (&nodes[*z].value, &nodes[*table].value);
            let d = zv.cols();
            let width = out.cols();
            let rows = out.rows();
            if let Some(dz) = acc(nodes, grads, *z) {
                for r in 0..rows {
                    for c in 0..width {
                        let gi = g[r * width + c];
                        let e = tv.row(cands[r * width + c]);
                        for (a, b) in dz[r * d..(r + 1) * d].iter_mut().zip(e) {
                            *a += gi * b;
                        }
                    }
                }
            }
            if let Some(dt) = acc(nodes, grads, *table) {
                for r in 0..rows {
                    let zr = zv.row(r);
                    for c in 0..width {
                        let gi = g[r * width + c];
                        let id = cands[r * width + c];
                        for (a, b) in dt[id * d..(id + 1) * d].iter_mut().zip(zr) {
                            *a += gi * b;
                        }
                    }
                }
            }
        }
        Op::Bce {
            logits,
            labels,
            weights,
            wsum,
        } => {
            if *wsum <= 0.0 {
                return;
            }
            let lv = nodes[*logits].value.data();
            if let Some(dl) = acc(nodes, grads, *logits) {
                for i in 0..lv.len() {
                    dl[i] += g[0] * weights[i] * (sigmoid(lv[i]) - labels[i]) / wsum;
                }
            }
        }
    }
}

fn attention_backward(nodes: &[Node], grads: &mut [Option<Vec<f64>>], s: &AttentionSaved, g: &[f64]) {
    let (qv, kv, vv) = (&nodes[s.q].value, &nodes[s.k].value, &nodes[s.v].value);
    let (b, l) = (s.mask.batch(), s.mask.len());
    let (dk, dv) = (qv.cols(), vv.cols());
    let (hk, hv) = (dk / s.heads, dv / s.heads);
    let mut dq = vec![0.0; qv.numel()];
    let mut dkk = vec![0.0; kv.numel()];
    let mut dvv = vec![0.0; vv.numel()];
    let mut dp = vec![0.0; l * l];
    for bi in 0..b {
        for h in 0..s.heads {
            let p_off = (bi * s.heads + h) * l * l;
            let p = &s.probs[p_off..p_off + l * l];
            let vo = bi * l * dv + h * hv;
            let ko = bi * l * dk + h * hk;
            // dV = P^T dO
            gemm(l, l, hv, 1.0, View::tr(p, 0, l), View::rm(g, vo, dv), 1.0, ViewMut::rm(&mut dvv, vo, dv));
            // dP = dO V^T
            gemm(l, hv, l, 1.0, View::rm(g, vo, dv), View::tr(vv.data(), vo, dv), 0.0, ViewMut::rm(&mut dp, 0, l));
            // dS = P * (dP - rowsum(P * dP))
            for i in 0..l {
                let pr = &p[i * l..(i + 1) * l];
                let dr = &mut dp[i * l..(i + 1) * l];
                let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, c)| a * c).sum();
                for (d, pi) in dr.iter_mut().zip(pr) {
                    *d = pi * (*d - dot);
                }
            }
            gemm(l, l, hk, s.scale, View::rm(&dp, 0, l), View::rm(kv.data(), ko, dk), 1.0, ViewMut::rm(&mut dq, ko, dk));
            gemm(l, l, hk, s.scale, View::tr(&dp, 0, l), View::rm(qv.data(), ko, dk), 1.0, ViewMut::rm(&mut dkk, ko, dk));
        }
    }
    acc_scaled(nodes, grads, s.q, &dq, 1.0);
    acc_scaled(nodes, grads, s.k, &dkk, 1.0);
    acc_scaled(nodes, grads, s.v, &dvv, 1.0);
}

fn additive_backward(nodes: &[Node], grads: &mut [Option<Vec<f64>>], s: &AdditiveSaved, g: &[f64]) {
    let (qv, kv) = (&nodes[s.q].value, &nodes[s.k].value);
    let (wv, vv) = (&nodes[s.w].value, &nodes[s.values].value);
    let (b, l) = (s.mask.batch(), s.mask.len());
    let da = qv.cols();
    let dv = vv.cols();
    let wd = wv.data();
    let mut dq = vec![0.0; qv.numel()];
    let mut dk = vec![0.0; kv.numel()];
    let mut dw = vec![0.0; da];
    let mut dval = vec![0.0; vv.numel()];
    let mut ds = vec![0.0; l];
    for bi in 0..b {
        for i in 0..l {
            let row = bi * l + i;
            let p = &s.probs[row * l..(row + 1) * l];
            let go = &g[row * dv..(row + 1) * dv];
            let mut dot = 0.0;
            for j in 0..l {
                if p[j] == 0.0 {
                    ds[j] = 0.0;
                    continue;
                }
                let vj = vv.row(bi * l + j);
                let dpj: f64 = go.iter().zip(vj).map(|(a, c)| a * c).sum();
                ds[j] = dpj;
                dot += p[j] * dpj;
                for (d, gi) in dval[(bi * l + j) * dv..(bi * l + j + 1) * dv].iter_mut().zip(go) {
                    *d += p[j] * gi;
                }
            }
            let qi = qv.row(row);
            for j in 0..l {
                if p[j] == 0.0 {
                    continue;
                }
                let dsj = p[j] * (ds[j] - dot);
                if dsj == 0.0 {
                    continue;
                }
                let kj = kv.row(bi * l + j);
                for c in 0..da {
                    let t = sigmoid(qi[c] + kj[c]);
                    dw[c] += dsj * t;
                    let dpre = dsj * wd[c] * t * (1.0 - t);
                    dq[row * da + c] += dpre;
                    dk[(bi * l + j) * da + c] += dpre;
                }
            }
        }
    }
    acc_scaled(nodes, grads, s.q, &dq, 1.0);
    acc_scaled(nodes, grads, s.k, &dk, 1.0);
    acc_scaled(nodes, grads, s.w, &dw, 1.0);
    acc_scaled(nodes, grads, s.values, &dval, 1.0);
}

fn gru_backward(nodes: &[Node], grads: &mut [Option<Vec<f64>>], s: &GruSaved, g: &[f64]) {
    let hv = &nodes[s.h].value;
    let wv = &nodes[s.w_hh].value;
    let hd = hv.cols();
    let rows = hv.rows();
    let mut dh = vec![0.0; rows * hd];
    // gradient w.r.t. the pre-activation blocks [r, z, n] of both projections
    let mut dgx = vec![0.0; rows * 3 * hd];
    let mut dhl = vec![0.0; rows * 3 * hd];
    for row in 0..rows {
        let live = s.active.as_ref().is_none_or(|a| a[row]);
        for c in 0..hd {
            let o = row * hd + c;
            if !live {
                dh[o] += g[o];
                continue;
            }
            let (r, z, n) = (s.r[o], s.z[o], s.n[o]);
            let gb = row * 3 * hd;
            let hn_n = s.hn[gb + 2 * hd + c];
            let dn = g[o] * (1.0 - z);
            let dz = g[o] * (hv.data()[o] - n);
            dh[o] += g[o] * z;
            let dn_pre = dn * (1.0 - n * n);
            let dr_pre = dn_pre * hn_n * r * (1.0 - r);
            let dz_pre = dz * z * (1.0 - z);
            dgx[gb + c] = dr_pre;
            dgx[gb + hd + c] = dz_pre;
            dgx[gb + 2 * hd + c] = dn_pre;
            dhl[gb + c] = dr_pre;
            dhl[gb + hd + c] = dz_pre;
            dhl[gb + 2 * hd + c] = dn_pre * r;
        }
    }
    acc_scaled(nodes, grads, s.gx, &dgx, 1.0);
    if let Some(db) = acc(nodes, grads, s.b_hh) {
        for row in dhl.chunks(3 * hd) {
            for (d, v) in db.iter_mut().zip(row) {
                *d += v;
            }
        }
    }
    if let Some(dw) = acc(nodes, grads, s.w_hh) {
        // dW [3h x h] = dhl^T h
        gemm(3 * hd, rows, hd, 1.0, View::tr(&dhl, 0, 3 * hd), View::rm(hv.data(), 0, hd), 1.0, ViewMut::rm(dw, 0, hd));
    }
    if nodes[s.h].requires_grad {
        // dh += dhl W
        gemm(rows, 3 * hd, hd, 1.0, View::rm(&dhl, 0, 3 * hd), View::rm(wv.data(), 0, hd), 1.0, ViewMut::rm(&mut dh, 0, hd));
        acc_scaled(nodes, grads, s.h, &dh, 1.0);
    }
}
