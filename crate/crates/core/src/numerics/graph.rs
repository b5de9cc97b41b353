//! Reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every forward operation as a node holding its output
//! value. [`Graph::backward`] walks the nodes in reverse creation order,
//! which is a valid topological order because inputs always precede their
//! consumers. Nodes that cannot reach a trainable leaf are skipped, so frozen
//! sub-networks only pay for input gradients.

use std::sync::Arc;

use super::tensor::{gemm_nn, gemm_nt, gemm_tn};
use super::{ParamGrads, ParamId, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, transpose_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { x: Var, bias: Var },
    Scale(Var, S),
    Offset(Var),
    Tanh(Var),
    Sigmoid(Var),
    Gelu(Var),
    Square(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<S>, rstd: Vec<S> },
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
    Reshape(Var),
    SwapAxes12(Var),
    GatherRows { x: Var, idx: Arc<Vec<usize>> },
    Sum(Var),
    Conv1d { x: Var, kernel: Var },
    ClampNorm { x: Var, max: S },
}

#[derive(Clone, Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Forward tape plus the bookkeeping needed to map gradients back onto a
/// [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    params: Vec<(Var, ParamId)>,
    frozen_prefixes: Vec<String>,
    grad_enabled: bool,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            frozen_prefixes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A graph whose parameters never require gradients.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    /// Parameters whose name starts with `prefix` enter as constants.
    pub fn freeze_prefix(&mut self, prefix: impl Into<String>) {
        self.frozen_prefixes.push(prefix.into());
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool, name: &str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push_unchecked(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push_unchecked(value, Op::Leaf, false)
    }

    /// Leaf that receives a gradient regardless of any parameter store.
    pub fn input(&mut self, value: Tensor<S>) -> Var {
        self.push_unchecked(value, Op::Leaf, self.grad_enabled)
    }

    /// Inserts a parameter as a leaf. Frozen parameters and inference
    /// graphs produce constant leaves.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        let name = store.name(id);
        let trainable =
            self.grad_enabled && !self.frozen_prefixes.iter().any(|p| name.starts_with(p));
        let v = self.push_unchecked(store.get(id).clone(), Op::Leaf, trainable);
        if trainable {
            self.params.push((v, id));
        }
        v
    }

    /// `x · w` where `x: [.., k]` and `w: [k, n]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if wv.rank() != 2 || xv.rank() == 0 || xv.cols() != wv.shape()[0] {
            return Err(Error::dim(
                "matmul",
                format!("{:?} x {:?}", xv.shape(), wv.shape()),
            ));
        }
        let out = xv.matmul(wv)?;
        let ng = self.ng(&[x, w]);
        self.push(out, Op::MatMul(x, w), ng, "matmul")
    }

    /// Batched product of `a: [B, m, k]` with `b: [B, k, n]`, or with
    /// `b: [B, n, k]` when `transpose_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let bad = || {
            Error::dim(
                "batch_matmul",
                format!("{:?} x {:?} (transpose_b={transpose_b})", av.shape(), bv.shape()),
            )
        };
        if av.rank() != 3 || bv.rank() != 3 || av.shape()[0] != bv.shape()[0] {
            return Err(bad());
        }
        let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let n = if transpose_b {
            if bv.shape()[2] != k {
                return Err(bad());
            }
            bv.shape()[1]
        } else {
            if bv.shape()[1] != k {
                return Err(bad());
            }
            bv.shape()[2]
        };
        let mut out = vec![S::zero(); batch * m * n];
        for bi in 0..batch {
            let a_blk = &av.data()[bi * m * k..(bi + 1) * m * k];
            let b_blk = &bv.data()[bi * k * n..(bi + 1) * k * n];
            let c_blk = &mut out[bi * m * n..(bi + 1) * m * n];
            if transpose_b {
                gemm_nt(a_blk, b_blk, c_blk, m, k, n);
            } else {
                gemm_nn(a_blk, b_blk, c_blk, m, k, n);
            }
        }
        let ng = self.ng(&[a, b]);
        self.push(
            Tensor::from_parts(vec![batch, m, n], out),
            Op::BatchMatMul { a, b, transpose_b },
            ng,
            "batch_matmul",
        )
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(S, S) -> S,
        op: Op<S>,
    ) -> Result<Var> {
        let out = self
            .value(a)
            .zip_map(self.value(b), f)
            .map_err(|_| Error::dim(name, format!("{:?} vs {:?}", self.shape(a), self.shape(b))))?;
        let ng = self.ng(&[a, b]);
        self.push(out, op, ng, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds `bias: [c]` to every row of `x: [.., c]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let c = xv.cols();
        if bv.len() != c || xv.rank() == 0 {
            return Err(Error::dim(
                "add_row",
                format!("{:?} + {:?}", xv.shape(), bv.shape()),
            ));
        }
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(c) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let shape = xv.shape().to_vec();
        let ng = self.ng(&[x, bias]);
        self.push(Tensor::from_parts(shape, out), Op::AddRow { x, bias }, ng, "add_row")
    }

    pub fn scale(&mut self, x: Var, c: S) -> Result<Var> {
        let out = self.value(x).map(|v| v * c);
        let ng = self.ng(&[x]);
        self.push(out, Op::Scale(x, c), ng, "scale")
    }

    /// `x + c` element-wise.
    pub fn offset(&mut self, x: Var, c: S) -> Result<Var> {
        let out = self.value(x).map(|v| v + c);
        let ng = self.ng(&[x]);
        self.push(out, Op::Offset(x), ng, "offset")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.tanh());
        let ng = self.ng(&[x]);
        self.push(out, Op::Tanh(x), ng, "tanh")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sigmoid);
        let ng = self.ng(&[x]);
        self.push(out, Op::Sigmoid(x), ng, "sigmoid")
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| gelu(v).0);
        let ng = self.ng(&[x]);
        self.push(out, Op::Gelu(x), ng, "gelu")
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v * v);
        let ng = self.ng(&[x]);
        self.push(out, Op::Square(x), ng, "square")
    }

    /// Softmax over the trailing axis with max-subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.masked_softmax(x, None)
    }

    /// Softmax over the trailing axis restricted to entries where `mask` is
    /// true. Masked entries get weight 0; fully masked rows are all zero.
    pub fn masked_softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let xv = self.value(x);
        if let Some(m) = mask {
            if m.len() != xv.len() {
                return Err(Error::dim(
                    "masked_softmax",
                    format!("mask of {} for {:?}", m.len(), xv.shape()),
                ));
            }
        }
        let c = xv.cols();
        if c == 0 {
            return Err(Error::dim("softmax", "empty trailing axis"));
        }
        let mut out = xv.data().to_vec();
        for (r, row) in out.chunks_mut(c).enumerate() {
            let keep = |j: usize| mask.map_or(true, |m| m[r * c + j]);
            softmax_row(row, keep);
        }
        let shape = xv.shape().to_vec();
        let ng = self.ng(&[x]);
        self.push(Tensor::from_parts(shape, out), Op::Softmax(x), ng, "softmax")
    }

    /// Log-softmax over the trailing axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(c) {
            let m = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = row.iter().map(|&v| (v - m).exp()).sum::<S>().ln() + m;
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let shape = xv.shape().to_vec();
        let ng = self.ng(&[x]);
        self.push(Tensor::from_parts(shape, out), Op::LogSoftmax(x), ng, "log_softmax")
    }

    /// Layer normalization over the trailing axis with affine `gain`, `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: S) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(Error::dim("layer_norm", format!("{:?}", xv.shape())));
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = xv.rows();
        let mut xhat = vec![S::zero(); xv.len()];
        let mut rstd = vec![S::zero(); rows];
        let mut out = vec![S::zero(); xv.len()];
        let cs = S::from_usize_lossy(c);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<S>() / cs;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / cs;
            let rs = S::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        let shape = xv.shape().to_vec();
        let ng = self.ng(&[x, gain, bias]);
        self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
            "layer_norm",
        )
    }

    /// Concatenates along the trailing axis; leading axes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat", "no inputs"))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let mut cols = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(Error::dim(
                    "concat",
                    format!("{:?} vs leading {lead:?}", s),
                ));
            }
            cols.push(*s.last().unwrap());
        }
        let total: usize = cols.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &c) in parts.iter().zip(&cols) {
                out.extend_from_slice(&self.value(p).data()[r * c..(r + 1) * c]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let ng = self.ng(parts);
        self.push(Tensor::from_parts(shape, out), Op::Concat(parts.to_vec()), ng, "concat")
    }

    /// Columns `start..start + len` of the trailing axis.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if xv.rank() == 0 || start + len > c {
            return Err(Error::dim(
                "slice",
                format!("{start}..{} of {:?}", start + len, xv.shape()),
            ));
        }
        let mut out = Vec::with_capacity(xv.rows() * len);
        for r in 0..xv.rows() {
            out.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let ng = self.ng(&[x]);
        self.push(Tensor::from_parts(shape, out), Op::Slice { x, start }, ng, "slice")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let ng = self.ng(&[x]);
        Ok(self.push_unchecked(out, Op::Reshape(x), ng))
    }

    /// `[a, b, c, d] -> [a, c, b, d]`.
    pub fn swap_axes12(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 4 {
            return Err(Error::dim("swap_axes12", format!("{:?}", xv.shape())));
        }
        let s = xv.shape();
        let (a, b, c, d) = (s[0], s[1], s[2], s[3]);
        let out = swap12(xv.data(), a, b, c, d);
        let ng = self.ng(&[x]);
        Ok(self.push_unchecked(
            Tensor::from_parts(vec![a, c, b, d], out),
            Op::SwapAxes12(x),
            ng,
        ))
    }

    /// Selects rows (leading axes flattened) by index; rows may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (rows, c) = (xv.rows(), xv.cols());
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= rows {
                return Err(Error::dim(
                    "gather_rows",
                    format!("row {i} of {rows}"),
                ));
            }
            out.extend_from_slice(xv.row(i));
        }
        let ng = self.ng(&[x]);
        Ok(self.push_unchecked(
            Tensor::from_parts(vec![idx.len(), c], out),
            Op::GatherRows {
                x,
                idx: Arc::new(idx.to_vec()),
            },
            ng,
        ))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), ng, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let s = self.sum(x)?;
        self.scale(s, S::one() / S::from_usize_lossy(n.max(1)))
    }

    /// Same-length 1-D convolution with zero padding.
    /// `x: [B, T, c_in]`, `kernel: [k, c_in, c_out]` with `k` odd.
    pub fn conv1d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (xv, kv) = (self.value(x), self.value(kernel));
        if kv.rank() != 3 || kv.shape()[0] % 2 == 0 {
            return Err(Error::Config(format!(
                "conv1d kernel must be [k odd, c_in, c_out], got {:?}",
                kv.shape()
            )));
        }
        if xv.rank() != 3 || xv.shape()[2] != kv.shape()[1] {
            return Err(Error::dim(
                "conv1d",
                format!("{:?} * {:?}", xv.shape(), kv.shape()),
            ));
        }
        let (b, t, cin) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let (k, cout) = (kv.shape()[0], kv.shape()[2]);
        let half = k / 2;
        let mut out = vec![S::zero(); b * t * cout];
        for bi in 0..b {
            for ti in 0..t {
                let o = &mut out[(bi * t + ti) * cout..(bi * t + ti + 1) * cout];
                for j in 0..k {
                    let src = ti as isize + j as isize - half as isize;
                    if src < 0 || src >= t as isize {
                        continue;
                    }
                    let xrow = &xv.data()[(bi * t + src as usize) * cin..][..cin];
                    let w = &kv.data()[j * cin * cout..(j + 1) * cin * cout];
                    gemm_nn(xrow, w, o, 1, cin, cout);
                }
            }
        }
        let ng = self.ng(&[x, kernel]);
        self.push(
            Tensor::from_parts(vec![b, t, cout], out),
            Op::Conv1d { x, kernel },
            ng,
            "conv1d",
        )
    }

    /// Projects each trailing-axis vector onto the ball of radius `max`.
    pub fn clamp_norm(&mut self, x: Var, max: S) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(c) {
            let n = row.iter().map(|&v| v * v).sum::<S>().sqrt();
            if n > max {
                let s = max / n;
                for v in row.iter_mut() {
                    *v *= s;
                }
            }
        }
        let shape = xv.shape().to_vec();
        let ng = self.ng(&[x]);
        self.push(Tensor::from_parts(shape, out), Op::ClampNorm { x, max }, ng, "clamp_norm")
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::from_parts(
            self.shape(loss).to_vec(),
            vec![S::one()],
        ));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, gout: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let node = &self.nodes[i];
        let want = |v: Var| self.nodes[v.0].needs_grad;
        let g = gout.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(x, w) => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (m, k, n) = (xv.rows(), xv.cols(), wv.shape()[1]);
                if want(*x) {
                    let mut dx = vec![S::zero(); m * k];
                    gemm_nt(g, wv.data(), &mut dx, m, n, k);
                    accumulate(grads, *x, xv.shape(), dx);
                }
                if want(*w) {
                    let mut dw = vec![S::zero(); k * n];
                    gemm_tn(xv.data(), g, &mut dw, k, m, n);
                    accumulate(grads, *w, wv.shape(), dw);
                }
            }
            Op::BatchMatMul { a, b, transpose_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = node.value.shape()[2];
                if want(*a) {
                    let mut da = vec![S::zero(); batch * m * k];
                    for bi in 0..batch {
                        let gb = &g[bi * m * n..(bi + 1) * m * n];
                        let bb = &bv.data()[bi * k * n..(bi + 1) * k * n];
                        let d = &mut da[bi * m * k..(bi + 1) * m * k];
                        if *transpose_b {
                            // b: [n, k]; da = g · b
                            gemm_nn(gb, bb, d, m, n, k);
                        } else {
                            // b: [k, n]; da = g · bᵀ
                            gemm_nt(gb, bb, d, m, n, k);
                        }
                    }
                    accumulate(grads, *a, av.shape(), da);
                }
                if want(*b) {
                    let mut db = vec![S::zero(); batch * k * n];
                    for bi in 0..batch {
                        let gb = &g[bi * m * n..(bi + 1) * m * n];
                        let ab = &av.data()[bi * m * k..(bi + 1) * m * k];
                        let d = &mut db[bi * k * n..(bi + 1) * k * n];
                        if *transpose_b {
                            // db: [n, k] = gᵀ · a
                            gemm_tn(gb, ab, d, n, m, k);
                        } else {
                            // db: [k, n] = aᵀ · g
                            gemm_tn(ab, gb, d, k, m, n);
                        }
                    }
                    accumulate(grads, *b, bv.shape(), db);
                }
            }
            Op::Add(a, b) => {
                if want(*a) {
                    accumulate(grads, *a, gout.shape(), g.to_vec());
                }
                if want(*b) {
                    accumulate(grads, *b, gout.shape(), g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if want(*a) {
                    accumulate(grads, *a, gout.shape(), g.to_vec());
                }
                if want(*b) {
                    accumulate(grads, *b, gout.shape(), g.iter().map(|&v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if want(*a) {
                    let d = g.iter().zip(bv.data()).map(|(&gi, &bi)| gi * bi).collect();
                    accumulate(grads, *a, av.shape(), d);
                }
                if want(*b) {
                    let d = g.iter().zip(av.data()).map(|(&gi, &ai)| gi * ai).collect();
                    accumulate(grads, *b, bv.shape(), d);
                }
            }
            Op::AddRow { x, bias } => {
                if want(*x) {
                    accumulate(grads, *x, gout.shape(), g.to_vec());
                }
                if want(*bias) {
                    let c = gout.cols();
                    let mut db = vec![S::zero(); c];
                    for row in g.chunks(c) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(grads, *bias, self.shape(*bias), db);
                }
            }
            Op::Scale(x, c) => {
                if want(*x) {
                    accumulate(grads, *x, gout.shape(), g.iter().map(|&v| v * *c).collect());
                }
            }
            Op::Offset(x) | Op::Reshape(x) => {
                if want(*x) {
                    accumulate(grads, *x, self.shape(*x), g.to_vec());
                }
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                let d = g
                    .iter()
                    .zip(y)
                    .map(|(&gi, &yi)| gi * (S::one() - yi * yi))
                    .collect();
                accumulate(grads, *x, gout.shape(), d);
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let d = g
                    .iter()
                    .zip(y)
                    .map(|(&gi, &yi)| gi * yi * (S::one() - yi))
                    .collect();
                accumulate(grads, *x, gout.shape(), d);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                let d = g
                    .iter()
                    .zip(xv)
                    .map(|(&gi, &xi)| gi * gelu(xi).1)
                    .collect();
                accumulate(grads, *x, gout.shape(), d);
            }
            Op::Square(x) => {
                let xv = self.value(*x).data();
                let two = S::lit(2.0);
                let d = g.iter().zip(xv).map(|(&gi, &xi)| two * gi * xi).collect();
                accumulate(grads, *x, gout.shape(), d);
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let c = gout.cols();
                let mut d = vec![S::zero(); y.len()];
                for ((drow, yrow), grow) in d.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                    let dot: S = yrow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        drow[j] = yrow[j] * (grow[j] - dot);
                    }
                }
                accumulate(grads, *x, gout.shape(), d);
            }
            Op::LogSoftmax(x) => {
                let y = node.value.data();
                let c = gout.cols();
                let mut d = vec![S::zero(); y.len()];
                for ((drow, yrow), grow) in d.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                    let gs: S = grow.iter().copied().sum();
                    for j in 0..c {
                        drow[j] = grow[j] - yrow[j].exp() * gs;
                    }
                }
                accumulate(grads, *x, gout.shape(), d);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let c = gout.cols();
                let cs = S::from_usize_lossy(c);
                let gv = self.value(*gain).data();
                if want(*x) {
                    let mut dx = vec![S::zero(); g.len()];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let grow = &g[r * c..(r + 1) * c];
                        let hrow = &xhat[r * c..(r + 1) * c];
                        let mut s1 = S::zero();
                        let mut s2 = S::zero();
                        for j in 0..c {
                            let dh = grow[j] * gv[j];
                            s1 += dh;
                            s2 += dh * hrow[j];
                        }
                        for j in 0..c {
                            let dh = grow[j] * gv[j];
                            dx[r * c + j] = rs * (dh - s1 / cs - hrow[j] * s2 / cs);
                        }
                    }
                    accumulate(grads, *x, gout.shape(), dx);
                }
                if want(*gain) {
                    let mut dg = vec![S::zero(); c];
                    for (grow, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            dg[j] += grow[j] * hrow[j];
                        }
                    }
                    accumulate(grads, *gain, self.shape(*gain), dg);
                }
                if want(*bias) {
                    let mut db = vec![S::zero(); c];
                    for grow in g.chunks(c) {
                        for j in 0..c {
                            db[j] += grow[j];
                        }
                    }
                    accumulate(grads, *bias, self.shape(*bias), db);
                }
            }
            Op::Concat(parts) => {
                let total = gout.cols();
                let rows = gout.rows();
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if want(p) {
                        let mut d = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            d.extend_from_slice(&g[r * total + offset..r * total + offset + c]);
                        }
                        accumulate(grads, p, self.shape(p), d);
                    }
                    offset += c;
                }
            }
            Op::Slice { x, start } => {
                let xv = self.value(*x);
                let (c, len) = (xv.cols(), gout.cols());
                let mut d = vec![S::zero(); xv.len()];
                for r in 0..xv.rows() {
                    d[r * c + start..r * c + start + len]
                        .copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                accumulate(grads, *x, xv.shape(), d);
            }
            Op::SwapAxes12(x) => {
                let s = gout.shape();
                let d = swap12(g, s[0], s[1], s[2], s[3]);
                accumulate(grads, *x, self.shape(*x), d);
            }
            Op::GatherRows { x, idx } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut d = vec![S::zero(); xv.len()];
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        d[i * c + j] += g[k * c + j];
                    }
                }
                accumulate(grads, *x, xv.shape(), d);
            }
            Op::Sum(x) => {
                let xv = self.value(*x);
                accumulate(grads, *x, xv.shape(), vec![g[0]; xv.len()]);
            }
            Op::Conv1d { x, kernel } => {
                let (xv, kv) = (self.value(*x), self.value(*kernel));
                let (b, t, cin) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let (k, cout) = (kv.shape()[0], kv.shape()[2]);
                let half = k / 2;
                let mut dx = want(*x).then(|| vec![S::zero(); xv.len()]);
                let mut dk = want(*kernel).then(|| vec![S::zero(); kv.len()]);
                for bi in 0..b {
                    for ti in 0..t {
                        let go = &g[(bi * t + ti) * cout..(bi * t + ti + 1) * cout];
                        for j in 0..k {
                            let src = ti as isize + j as isize - half as isize;
                            if src < 0 || src >= t as isize {
                                continue;
                            }
                            let xoff = (bi * t + src as usize) * cin;
                            let w = &kv.data()[j * cin * cout..(j + 1) * cin * cout];
                            if let Some(dx) = dx.as_mut() {
                                gemm_nt(go, w, &mut dx[xoff..xoff + cin], 1, cout, cin);
                            }
                            if let Some(dk) = dk.as_mut() {
                                let xrow = &xv.data()[xoff..xoff + cin];
                                gemm_tn(
                                    xrow,
                                    go,
                                    &mut dk[j * cin * cout..(j + 1) * cin * cout],
                                    cin,
                                    1,
                                    cout,
                                );
                            }
                        }
                    }
                }
                if let Some(dx) = dx {
                    accumulate(grads, *x, xv.shape(), dx);
                }
                if let Some(dk) = dk {
                    accumulate(grads, *kernel, kv.shape(), dk);
                }
            }
            Op::ClampNorm { x, max } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut d = g.to_vec();
                for (r, drow) in d.chunks_mut(c).enumerate() {
                    let u = xv.row(r);
                    let n = u.iter().map(|&v| v * v).sum::<S>().sqrt();
                    if n > *max {
                        // J = (max/n)(I − û ûᵀ), symmetric.
                        let dot: S = u.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum();
                        let s = *max / n;
                        for j in 0..c {
                            drow[j] = s * (drow[j] - u[j] * dot / (n * n));
                        }
                    }
                }
                accumulate(grads, *x, xv.shape(), d);
            }
        }
    }

    /// Gradients of every trainable parameter leaf, summed per parameter.
    /// Parameters the loss does not reach get zeros.
    pub fn param_grads(&self, grads: &Gradients<S>, store: &ParamStore<S>) -> ParamGrads<S> {
        let mut out = store.zero_grads();
        self.add_param_grads(grads, &mut out);
        out
    }

    /// Adds this graph's parameter gradients into `acc`.
    pub fn add_param_grads(&self, grads: &Gradients<S>, acc: &mut ParamGrads<S>) {
        for &(v, id) in &self.params {
            if let Some(g) = grads.get(v) {
                let dst = acc.get_mut(id);
                for (a, &b) in dst.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
        }
    }
}

/// Result of [`Graph::backward`]: one optional gradient per node.
#[derive(Clone, Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn accumulate<S: Scalar>(grads: &mut [Option<Tensor<S>>], v: Var, shape: &[usize], d: Vec<S>) {
    match &mut grads[v.0] {
        Some(t) => {
            for (a, b) in t.data_mut().iter_mut().zip(d) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(Tensor::from_parts(shape.to_vec(), d)),
    }
}

fn swap12<S: Scalar>(src: &[S], a: usize, b: usize, c: usize, d: usize) -> Vec<S> {
    let mut out = vec![S::zero(); src.len()];
    for i in 0..a {
        for j in 0..b {
            for k in 0..c {
                let from = ((i * b + j) * c + k) * d;
                let to = ((i * c + k) * b + j) * d;
                out[to..to + d].copy_from_slice(&src[from..from + d]);
            }
        }
    }
    out
}

pub(crate) fn softmax_row<S: Scalar>(row: &mut [S], keep: impl Fn(usize) -> bool) {
    let mut m = S::neg_infinity();
    for (j, &v) in row.iter().enumerate() {
        if keep(j) && v > m {
            m = v;
        }
    }
    if m == S::neg_infinity() {
        row.iter_mut().for_each(|v| *v = S::zero());
        return;
    }
    let mut total = S::zero();
    for (j, v) in row.iter_mut().enumerate() {
        if keep(j) {
            *v = (*v - m).exp();
            total += *v;
        } else {
            *v = S::zero();
        }
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub(crate) fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// GELU value and derivative (tanh approximation).
fn gelu<S: Scalar>(x: S) -> (S, S) {
    let half = S::lit(0.5);
    let k = S::lit((2.0 / std::f64::consts::PI).sqrt());
    let c = S::lit(0.044715);
    let inner = k * (x + c * x * x * x);
    let t = inner.tanh();
    let y = half * x * (S::one() + t);
    let dinner = k * (S::one() + S::lit(3.0) * c * x * x);
    let dy = half * (S::one() + t) + half * x * (S::one() - t * t) * dinner;
    (y, dy)
}
