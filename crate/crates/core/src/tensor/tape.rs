//! Reverse-mode autodiff tape.
//!
//! Nodes are appended in execution order, so the vector itself is a topological
//! order and backward is a single reverse sweep. Tensors on the tape are
//! immutable once written; a fresh tape is built per training step. Every op
//! validates shapes up front and checks its output for NaN/Inf before the node
//! is committed.

use std::rc::Rc;

use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};
use crate::num::Scalar;

/// Handle to a node on a [`Tape`]. Only valid for the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Escape hatch for differentiable operations whose forward pass runs outside
/// the closed op set (the splat renderer registers itself through this).
pub trait TapeOp<T: Scalar> {
    fn name(&self) -> &'static str;

    /// Returns one gradient per input (None = no gradient flows to that input).
    fn backward(
        &self,
        upstream: &Tensor<T>,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>>;
}

enum Op<T: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBiasRow(Var, Var),
    AddBiasChan(Var, Var),
    Matmul(Var, Var),
    MatmulNT(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Abs(Var),
    Clamp(Var, T, T),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    },
    Conv2d {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
    },
    ConvT2d {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
    },
    Concat {
        a: Var,
        b: Var,
        axis: usize,
    },
    Reshape(Var),
    SliceCols {
        x: Var,
        start: usize,
        len: usize,
    },
    Sum(Var),
    Mean(Var),
    GlobalAvgPool(Var),
    BceWithLogits {
        logits: Var,
        targets: Var,
    },
    Custom {
        inputs: Vec<Var>,
        op: Rc<dyn TapeOp<T>>,
    },
}

impl<T: Scalar> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddBiasRow(a, b)
            | Op::AddBiasChan(a, b)
            | Op::Matmul(a, b)
            | Op::MatmulNT(a, b)
            | Op::Concat { a, b, .. }
            | Op::BceWithLogits {
                logits: a,
                targets: b,
            } => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Abs(a)
            | Op::Clamp(a, _, _)
            | Op::Softmax(a)
            | Op::Reshape(a)
            | Op::SliceCols { x: a, .. }
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::GlobalAvgPool(a) => vec![*a],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Conv2d { x, w, .. } | Op::ConvT2d { x, w, .. } => vec![*x, *w],
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node<T: Scalar> {
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
}

/// Per-tape gradient buffers returned by [`Tape::backward`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Registers a trainable leaf (gradients will be tracked).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true)
    }

    /// Registers a constant leaf (no gradient tracking; backward prunes the
    /// whole subtree hanging off it).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, what: &str) -> Result<Var> {
        value.ensure_finite(what)?;
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut out = self.nodes[a.0].value.clone();
        out.axpy(T::one(), &self.nodes[b.0].value)?;
        self.push(Op::Add(a, b), out, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let mut out = self.nodes[a.0].value.clone();
        out.axpy(-T::one(), &self.nodes[b.0].value)?;
        self.push(Op::Sub(a, b), out, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::from_vec(self.shape(a).to_vec().as_slice(), data)?;
        self.push(Op::Mul(a, b), out, "mul")
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.nodes[a.0].value.map(|v| v * c);
        self.push(Op::Scale(a, c), out, "scale")
    }

    /// `x[N,d] + bias[d]` broadcast over rows.
    pub fn add_bias_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xs, bs) = (self.shape(x), self.shape(bias));
        if xs.len() != 2 || bs.len() != 1 || xs[1] != bs[0] {
            return Err(Error::Shape(format!("add_bias_row: {xs:?} + {bs:?}")));
        }
        let (n, d) = (xs[0], xs[1]);
        let mut data = self.nodes[x.0].value.data().to_vec();
        let b = self.nodes[bias.0].value.data();
        for r in 0..n {
            for c in 0..d {
                data[r * d + c] += b[c];
            }
        }
        let out = Tensor::from_vec(&[n, d], data)?;
        self.push(Op::AddBiasRow(x, bias), out, "add_bias_row")
    }

    /// `x[C,H,W] + bias[C]` broadcast over each channel plane.
    pub fn add_bias_chan(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xs, bs) = (self.shape(x).to_vec(), self.shape(bias).to_vec());
        if xs.len() != 3 || bs.len() != 1 || xs[0] != bs[0] {
            return Err(Error::Shape(format!("add_bias_chan: {xs:?} + {bs:?}")));
        }
        let plane = xs[1] * xs[2];
        let mut data = self.nodes[x.0].value.data().to_vec();
        let b = self.nodes[bias.0].value.data().to_vec();
        for (c, &bv) in b.iter().enumerate() {
            for v in &mut data[c * plane..(c + 1) * plane] {
                *v += bv;
            }
        }
        let out = Tensor::from_vec(&xs, data)?;
        self.push(Op::AddBiasChan(x, bias), out, "add_bias_chan")
    }

    // ---- matmul family ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape(format!("matmul: {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
            m,
            k,
            n,
        );
        let out = Tensor::from_vec(&[m, n], data)?;
        self.push(Op::Matmul(a, b), out, "matmul")
    }

    /// `a[m,k] * b[n,k]^T -> [m,n]` (used for Q.K^T in attention).
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::Shape(format!("matmul_nt: {sa:?} x {sb:?}^T")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let data = kernels::matmul_nt(
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
            m,
            k,
            n,
        );
        let out = Tensor::from_vec(&[m, n], data)?;
        self.push(Op::MatmulNT(a, b), out, "matmul_nt")
    }

    // ---- nonlinearities ----

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.nodes[a.0].value.map(|v| v.max(T::zero()));
        self.push(Op::Relu(a), out, "relu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.nodes[a.0].value.map(sigmoid_scalar);
        self.push(Op::Sigmoid(a), out, "sigmoid")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.nodes[a.0].value.map(|v| v.tanh());
        self.push(Op::Tanh(a), out, "tanh")
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let out = self.nodes[a.0].value.map(|v| v.abs());
        self.push(Op::Abs(a), out, "abs")
    }

    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Result<Var> {
        if lo > hi {
            return Err(Error::Validation(format!("clamp: lo {lo} > hi {hi}")));
        }
        let out = self.nodes[a.0].value.map(|v| v.max(lo).min(hi));
        self.push(Op::Clamp(a, lo, hi), out, "clamp")
    }

    /// Row softmax over the last axis of a 2D tensor (numerically stabilized).
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::Shape(format!("softmax expects 2D, got {s:?}")));
        }
        let (n, d) = (s[0], s[1]);
        let x = self.nodes[a.0].value.data();
        let mut data = vec![T::zero(); n * d];
        for r in 0..n {
            let row = &x[r * d..(r + 1) * d];
            let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut denom = T::zero();
            for (o, &v) in data[r * d..(r + 1) * d].iter_mut().zip(row) {
                let e = (v - mx).exp();
                *o = e;
                denom += e;
            }
            for o in &mut data[r * d..(r + 1) * d] {
                *o /= denom;
            }
        }
        let out = Tensor::from_vec(&[n, d], data)?;
        self.push(Op::Softmax(a), out, "softmax")
    }

    /// Layer normalization over the last axis of `x[N,d]` with learned
    /// per-feature gain and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (xs, gs, bs) = (
            self.shape(x).to_vec(),
            self.shape(gamma).to_vec(),
            self.shape(beta).to_vec(),
        );
        if xs.len() != 2 || gs != [xs[1]] || bs != [xs[1]] {
            return Err(Error::Shape(format!(
                "layer_norm: x {xs:?}, gamma {gs:?}, beta {bs:?}"
            )));
        }
        if eps <= T::zero() {
            return Err(Error::Validation("layer_norm eps must be positive".into()));
        }
        let (n, d) = (xs[0], xs[1]);
        let xv = self.nodes[x.0].value.data();
        let g = self.nodes[gamma.0].value.data();
        let b = self.nodes[beta.0].value.data();
        let inv_d = T::one() / T::of(d as f64);
        let mut data = vec![T::zero(); n * d];
        for r in 0..n {
            let row = &xv[r * d..(r + 1) * d];
            let mut mean = T::zero();
            for &v in row {
                mean += v;
            }
            mean *= inv_d;
            let mut var = T::zero();
            for &v in row {
                var += (v - mean) * (v - mean);
            }
            var *= inv_d;
            let rstd = T::one() / (var + eps).sqrt();
            for (c, o) in data[r * d..(r + 1) * d].iter_mut().enumerate() {
                *o = (row[c] - mean) * rstd * g[c] + b[c];
            }
        }
        let out = Tensor::from_vec(&[n, d], data)?;
        self.push(Op::LayerNorm { x, gamma, beta, eps }, out, "layer_norm")
    }

    // ---- convolutions ----

    /// `x[cin,h,w] (*) w[cout,cin,kh,kw]`, zero padding, square stride.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] {
            return Err(Error::Shape(format!("conv2d: x {xs:?}, w {ws:?}")));
        }
        if stride == 0 {
            return Err(Error::Validation("conv2d stride must be >= 1".into()));
        }
        let (cin, h, wd) = (xs[0], xs[1], xs[2]);
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::Shape(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {h}x{wd}+{pad}"
            )));
        }
        let (oh, ow) = kernels::conv2d_shape(h, wd, kh, kw, stride, pad);
        let cols = kernels::im2col(self.nodes[x.0].value.data(), cin, h, wd, kh, kw, stride, pad);
        let data = kernels::matmul(
            self.nodes[w.0].value.data(),
            &cols,
            cout,
            cin * kh * kw,
            oh * ow,
        );
        let out = Tensor::from_vec(&[cout, oh, ow], data)?;
        self.push(Op::Conv2d { x, w, stride, pad }, out, "conv2d")
    }

    /// Transposed convolution (upsampling adjoint of [`Tape::conv2d`]).
    /// Weight layout is `[cin, cout, kh, kw]`.
    pub fn conv2d_transpose(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 3 || ws.len() != 4 || ws[0] != xs[0] {
            return Err(Error::Shape(format!("conv2d_transpose: x {xs:?}, w {ws:?}")));
        }
        if stride == 0 {
            return Err(Error::Validation("conv2d_transpose stride must be >= 1".into()));
        }
        let (cin, h, wd) = (xs[0], xs[1], xs[2]);
        let (cout, kh, kw) = (ws[1], ws[2], ws[3]);
        if (h - 1) * stride + kh < 2 * pad || (wd - 1) * stride + kw < 2 * pad {
            return Err(Error::Shape("conv2d_transpose: padding exceeds output".into()));
        }
        let (oh, ow) = kernels::convt2d_shape(h, wd, kh, kw, stride, pad);
        // y = col2im(W^T x) over the geometry of the adjoint convolution
        // [cout,oh,ow] -> [cin,h,w].
        let w_t = kernels::transpose(self.nodes[w.0].value.data(), cin, cout * kh * kw);
        let cols = kernels::matmul(
            &w_t,
            self.nodes[x.0].value.data(),
            cout * kh * kw,
            cin,
            h * wd,
        );
        let data = kernels::col2im(&cols, cout, oh, ow, kh, kw, stride, pad);
        let out = Tensor::from_vec(&[cout, oh, ow], data)?;
        self.push(Op::ConvT2d { x, w, stride, pad }, out, "conv2d_transpose")
    }

    // ---- shape ops ----

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len() || axis >= sa.len() {
            return Err(Error::Shape(format!("concat axis {axis}: {sa:?} ++ {sb:?}")));
        }
        for (i, (&da, &db)) in sa.iter().zip(&sb).enumerate() {
            if i != axis && da != db {
                return Err(Error::Shape(format!("concat axis {axis}: {sa:?} ++ {sb:?}")));
            }
        }
        let outer: usize = sa[..axis].iter().product();
        let inner: usize = sa[axis + 1..].iter().product();
        let (ca, cb) = (sa[axis], sb[axis]);
        let mut shape = sa.clone();
        shape[axis] = ca + cb;
        let av = self.nodes[a.0].value.data();
        let bv = self.nodes[b.0].value.data();
        let mut data = Vec::with_capacity(av.len() + bv.len());
        for o in 0..outer {
            data.extend_from_slice(&av[o * ca * inner..(o + 1) * ca * inner]);
            data.extend_from_slice(&bv[o * cb * inner..(o + 1) * cb * inner]);
        }
        let out = Tensor::from_vec(&shape, data)?;
        self.push(Op::Concat { a, b, axis }, out, "concat")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.nodes[a.0].value.len() {
            return Err(Error::Shape(format!(
                "reshape {:?} -> {shape:?}",
                self.shape(a)
            )));
        }
        let out = Tensor::from_vec(shape, self.nodes[a.0].value.data().to_vec())?;
        self.push(Op::Reshape(a), out, "reshape")
    }

    /// Column slice of a 2D tensor: `x[:, start..start+len]`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || start + len > s[1] || len == 0 {
            return Err(Error::Shape(format!(
                "slice_cols [{start}..{}] of {s:?}",
                start + len
            )));
        }
        let (n, d) = (s[0], s[1]);
        let xv = self.nodes[x.0].value.data();
        let mut data = Vec::with_capacity(n * len);
        for r in 0..n {
            data.extend_from_slice(&xv[r * d + start..r * d + start + len]);
        }
        let out = Tensor::from_vec(&[n, len], data)?;
        self.push(Op::SliceCols { x, start, len }, out, "slice_cols")
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let mut acc = T::zero();
        for &v in self.nodes[a.0].value.data() {
            acc += v;
        }
        self.push(Op::Sum(a), Tensor::scalar(acc), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.nodes[a.0].value.len();
        if n == 0 {
            return Err(Error::Shape("mean of empty tensor".into()));
        }
        let mut acc = T::zero();
        for &v in self.nodes[a.0].value.data() {
            acc += v;
        }
        let out = Tensor::scalar(acc / T::of(n as f64));
        self.push(Op::Mean(a), out, "mean")
    }

    /// `[C,H,W] -> [1,C]` spatial average (bottleneck pooling for the bit head).
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 {
            return Err(Error::Shape(format!("global_avg_pool expects CHW, got {s:?}")));
        }
        let (c, plane) = (s[0], s[1] * s[2]);
        let x = self.nodes[a.0].value.data();
        let inv = T::one() / T::of(plane as f64);
        let data: Vec<T> = (0..c)
            .map(|ci| {
                let mut acc = T::zero();
                for &v in &x[ci * plane..(ci + 1) * plane] {
                    acc += v;
                }
                acc * inv
            })
            .collect();
        let out = Tensor::from_vec(&[1, c], data)?;
        self.push(Op::GlobalAvgPool(a), out, "global_avg_pool")
    }

    /// Mean binary cross-entropy on raw logits (numerically stable form).
    pub fn bce_with_logits(&mut self, logits: Var, targets: Var) -> Result<Var> {
        self.same_shape(logits, targets, "bce_with_logits")?;
        let z = self.nodes[logits.0].value.data();
        let t = self.nodes[targets.0].value.data();
        let mut acc = T::zero();
        for (&zi, &ti) in z.iter().zip(t) {
            // max(z,0) - z*t + ln(1 + exp(-|z|))
            acc += zi.max(T::zero()) - zi * ti + (T::one() + (-zi.abs()).exp()).ln();
        }
        let out = Tensor::scalar(acc / T::of(z.len() as f64));
        self.push(Op::BceWithLogits { logits, targets }, out, "bce_with_logits")
    }

    /// Convenience composite: `mean(|a - b|)`, the L1 losses used everywhere.
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let ad = self.abs(d)?;
        self.mean(ad)
    }

    /// Registers a node whose forward value was computed externally.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor<T>, op: Rc<dyn TapeOp<T>>) -> Result<Var> {
        let name = op.name();
        self.push(
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            output,
            name,
        )
    }

    // ---- backward ----

    /// Reverse sweep from a scalar root. The tape is immutable during the
    /// sweep, so several backward passes can run from different roots over the
    /// same forward state (the harmonization step relies on this).
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::Shape(format!(
                "backward root must be scalar, got {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(up) = grads[i].take() else { continue };
            self.propagate(i, &up, &mut grads)?;
            grads[i] = Some(up);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(acc) => acc.axpy(T::one(), &g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    #[allow(clippy::too_many_lines)]
    fn propagate(&self, i: usize, up: &Tensor<T>, grads: &mut Vec<Option<Tensor<T>>>) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, up.clone())?;
                self.accumulate(grads, *b, up.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, up.clone())?;
                self.accumulate(grads, *b, up.map(|v| -v))?;
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let ga = elementwise_prod(up, bv);
                let gb = elementwise_prod(up, av);
                self.accumulate(grads, *a, ga)?;
                self.accumulate(grads, *b, gb)?;
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, up.map(|v| v * *c))?;
            }
            Op::AddBiasRow(x, bias) => {
                self.accumulate(grads, *x, up.clone())?;
                if self.nodes[bias.0].requires_grad {
                    let d = self.nodes[bias.0].value.len();
                    let n = up.len() / d;
                    let mut g = vec![T::zero(); d];
                    for r in 0..n {
                        for c in 0..d {
                            g[c] += up.data()[r * d + c];
                        }
                    }
                    self.accumulate(grads, *bias, Tensor::from_vec(&[d], g)?)?;
                }
            }
            Op::AddBiasChan(x, bias) => {
                self.accumulate(grads, *x, up.clone())?;
                if self.nodes[bias.0].requires_grad {
                    let c = self.nodes[bias.0].value.len();
                    let plane = up.len() / c;
                    let g: Vec<T> = (0..c)
                        .map(|ci| {
                            let mut acc = T::zero();
                            for &v in &up.data()[ci * plane..(ci + 1) * plane] {
                                acc += v;
                            }
                            acc
                        })
                        .collect();
                    self.accumulate(grads, *bias, Tensor::from_vec(&[c], g)?)?;
                }
            }
            Op::Matmul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.nodes[a.0].requires_grad {
                    let ga = kernels::matmul_nt(up.data(), self.nodes[b.0].value.data(), m, n, k);
                    self.accumulate(grads, *a, Tensor::from_vec(&[m, k], ga)?)?;
                }
                if self.nodes[b.0].requires_grad {
                    let at = kernels::transpose(self.nodes[a.0].value.data(), m, k);
                    let gb = kernels::matmul(&at, up.data(), k, m, n);
                    self.accumulate(grads, *b, Tensor::from_vec(&[k, n], gb)?)?;
                }
            }
            Op::MatmulNT(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[0]);
                if self.nodes[a.0].requires_grad {
                    let ga = kernels::matmul(up.data(), self.nodes[b.0].value.data(), m, n, k);
                    self.accumulate(grads, *a, Tensor::from_vec(&[m, k], ga)?)?;
                }
                if self.nodes[b.0].requires_grad {
                    let ut = kernels::transpose(up.data(), m, n);
                    let gb = kernels::matmul(&ut, self.nodes[a.0].value.data(), n, m, k);
                    self.accumulate(grads, *b, Tensor::from_vec(&[n, k], gb)?)?;
                }
            }
            Op::Relu(a) => {
                let x = &self.nodes[a.0].value;
                let g = binary_map(up, x, |u, xv| if xv > T::zero() { u } else { T::zero() });
                self.accumulate(grads, *a, g)?;
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                let g = binary_map(up, y, |u, yv| u * yv * (T::one() - yv));
                self.accumulate(grads, *a, g)?;
            }
            Op::Tanh(a) => {
                let y = &node.value;
                let g = binary_map(up, y, |u, yv| u * (T::one() - yv * yv));
                self.accumulate(grads, *a, g)?;
            }
            Op::Abs(a) => {
                let x = &self.nodes[a.0].value;
                // Subgradient 0 at exactly zero.
                let g = binary_map(up, x, |u, xv| {
                    if xv > T::zero() {
                        u
                    } else if xv < T::zero() {
                        -u
                    } else {
                        T::zero()
                    }
                });
                self.accumulate(grads, *a, g)?;
            }
            Op::Clamp(a, lo, hi) => {
                let x = &self.nodes[a.0].value;
                let (lo, hi) = (*lo, *hi);
                let g = binary_map(up, x, |u, xv| {
                    if xv >= lo && xv <= hi {
                        u
                    } else {
                        T::zero()
                    }
                });
                self.accumulate(grads, *a, g)?;
            }
            Op::Softmax(a) => {
                // dx = y .* (dy - <y, dy>) per row.
                let y = &node.value;
                let s = y.shape();
                let (n, d) = (s[0], s[1]);
                let mut g = vec![T::zero(); n * d];
                for r in 0..n {
                    let yr = &y.data()[r * d..(r + 1) * d];
                    let ur = &up.data()[r * d..(r + 1) * d];
                    let mut dot = T::zero();
                    for (&yv, &uv) in yr.iter().zip(ur) {
                        dot += yv * uv;
                    }
                    for (c, gv) in g[r * d..(r + 1) * d].iter_mut().enumerate() {
                        *gv = yr[c] * (ur[c] - dot);
                    }
                }
                self.accumulate(grads, *a, Tensor::from_vec(&[n, d], g)?)?;
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let xs = self.shape(*x);
                let (n, d) = (xs[0], xs[1]);
                let xv = self.nodes[x.0].value.data();
                let gv = self.nodes[gamma.0].value.data();
                let inv_d = T::one() / T::of(d as f64);
                let mut gx = vec![T::zero(); n * d];
                let mut gg = vec![T::zero(); d];
                let mut gb = vec![T::zero(); d];
                for r in 0..n {
                    let row = &xv[r * d..(r + 1) * d];
                    let ur = &up.data()[r * d..(r + 1) * d];
                    let mut mean = T::zero();
                    for &v in row {
                        mean += v;
                    }
                    mean *= inv_d;
                    let mut var = T::zero();
                    for &v in row {
                        var += (v - mean) * (v - mean);
                    }
                    var *= inv_d;
                    let rstd = T::one() / (var + *eps).sqrt();
                    // xhat, dxhat, and the two row means the dx formula needs.
                    let mut mean_dxhat = T::zero();
                    let mut mean_dxhat_xhat = T::zero();
                    let mut xhat = vec![T::zero(); d];
                    let mut dxhat = vec![T::zero(); d];
                    for c in 0..d {
                        xhat[c] = (row[c] - mean) * rstd;
                        dxhat[c] = ur[c] * gv[c];
                        mean_dxhat += dxhat[c];
                        mean_dxhat_xhat += dxhat[c] * xhat[c];
                        gg[c] += ur[c] * xhat[c];
                        gb[c] += ur[c];
                    }
                    mean_dxhat *= inv_d;
                    mean_dxhat_xhat *= inv_d;
                    for c in 0..d {
                        gx[r * d + c] = rstd * (dxhat[c] - mean_dxhat - xhat[c] * mean_dxhat_xhat);
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(&[n, d], gx)?)?;
                self.accumulate(grads, *gamma, Tensor::from_vec(&[d], gg)?)?;
                self.accumulate(grads, *beta, Tensor::from_vec(&[d], gb)?)?;
            }
            Op::Conv2d { x, w, stride, pad } => {
                let (xs, ws) = (self.shape(*x).to_vec(), self.shape(*w).to_vec());
                let (cin, h, wd) = (xs[0], xs[1], xs[2]);
                let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
                let (oh, ow) = kernels::conv2d_shape(h, wd, kh, kw, *stride, *pad);
                if self.nodes[w.0].requires_grad {
                    let cols =
                        kernels::im2col(self.nodes[x.0].value.data(), cin, h, wd, kh, kw, *stride, *pad);
                    let gw = kernels::matmul_nt(up.data(), &cols, cout, oh * ow, cin * kh * kw);
                    self.accumulate(grads, *w, Tensor::from_vec(&ws, gw)?)?;
                }
                if self.nodes[x.0].requires_grad {
                    let wt = kernels::transpose(self.nodes[w.0].value.data(), cout, cin * kh * kw);
                    let gcols = kernels::matmul(&wt, up.data(), cin * kh * kw, cout, oh * ow);
                    let gx = kernels::col2im(&gcols, cin, h, wd, kh, kw, *stride, *pad);
                    self.accumulate(grads, *x, Tensor::from_vec(&xs, gx)?)?;
                }
            }
            Op::ConvT2d { x, w, stride, pad } => {
                let (xs, ws) = (self.shape(*x).to_vec(), self.shape(*w).to_vec());
                let (cin, h, wd) = (xs[0], xs[1], xs[2]);
                let (cout, kh, kw) = (ws[1], ws[2], ws[3]);
                let (oh, ow) = kernels::convt2d_shape(h, wd, kh, kw, *stride, *pad);
                // dX is the forward convolution of the upstream with the same
                // weights; dW pairs input pixels with upstream patches.
                let up_cols = kernels::im2col(up.data(), cout, oh, ow, kh, kw, *stride, *pad);
                if self.nodes[x.0].requires_grad {
                    let gx = kernels::matmul(
                        self.nodes[w.0].value.data(),
                        &up_cols,
                        cin,
                        cout * kh * kw,
                        h * wd,
                    );
                    self.accumulate(grads, *x, Tensor::from_vec(&xs, gx)?)?;
                }
                if self.nodes[w.0].requires_grad {
                    let gw = kernels::matmul_nt(
                        self.nodes[x.0].value.data(),
                        &up_cols,
                        cin,
                        h * wd,
                        cout * kh * kw,
                    );
                    self.accumulate(grads, *w, Tensor::from_vec(&ws, gw)?)?;
                }
            }
            Op::Concat { a, b, axis } => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let outer: usize = sa[..*axis].iter().product();
                let inner: usize = sa[*axis + 1..].iter().product();
                let (ca, cb) = (sa[*axis], sb[*axis]);
                let mut ga = vec![T::zero(); outer * ca * inner];
                let mut gb = vec![T::zero(); outer * cb * inner];
                let u = up.data();
                let block = (ca + cb) * inner;
                for o in 0..outer {
                    ga[o * ca * inner..(o + 1) * ca * inner]
                        .copy_from_slice(&u[o * block..o * block + ca * inner]);
                    gb[o * cb * inner..(o + 1) * cb * inner]
                        .copy_from_slice(&u[o * block + ca * inner..(o + 1) * block]);
                }
                self.accumulate(grads, *a, Tensor::from_vec(&sa, ga)?)?;
                self.accumulate(grads, *b, Tensor::from_vec(&sb, gb)?)?;
            }
            Op::Reshape(a) => {
                let g = Tensor::from_vec(self.shape(*a), up.data().to_vec())?;
                self.accumulate(grads, *a, g)?;
            }
            Op::SliceCols { x, start, len } => {
                let s = self.shape(*x).to_vec();
                let (n, d) = (s[0], s[1]);
                let mut g = vec![T::zero(); n * d];
                for r in 0..n {
                    g[r * d + start..r * d + start + len]
                        .copy_from_slice(&up.data()[r * len..(r + 1) * len]);
                }
                self.accumulate(grads, *x, Tensor::from_vec(&s, g)?)?;
            }
            Op::Sum(a) => {
                let u = up.item()?;
                let g = Tensor::full(self.shape(*a), u);
                self.accumulate(grads, *a, g)?;
            }
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.len();
                let u = up.item()? / T::of(n as f64);
                let g = Tensor::full(self.shape(*a), u);
                self.accumulate(grads, *a, g)?;
            }
            Op::GlobalAvgPool(a) => {
                let s = self.shape(*a).to_vec();
                let plane = s[1] * s[2];
                let inv = T::one() / T::of(plane as f64);
                let mut g = vec![T::zero(); s[0] * plane];
                for c in 0..s[0] {
                    let v = up.data()[c] * inv;
                    for gv in &mut g[c * plane..(c + 1) * plane] {
                        *gv = v;
                    }
                }
                self.accumulate(grads, *a, Tensor::from_vec(&s, g)?)?;
            }
            Op::BceWithLogits { logits, targets } => {
                let z = self.nodes[logits.0].value.data();
                let t = self.nodes[targets.0].value.data();
                let u = up.item()? / T::of(z.len() as f64);
                if self.nodes[logits.0].requires_grad {
                    let g: Vec<T> = z
                        .iter()
                        .zip(t)
                        .map(|(&zi, &ti)| u * (sigmoid_scalar(zi) - ti))
                        .collect();
                    self.accumulate(
                        grads,
                        *logits,
                        Tensor::from_vec(self.shape(*logits), g)?,
                    )?;
                }
            }
            Op::Custom { inputs, op } => {
                let in_tensors: Vec<&Tensor<T>> =
                    inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                let gs = op.backward(up, &in_tensors, &node.value)?;
                if gs.len() != inputs.len() {
                    return Err(Error::Shape(format!(
                        "custom op {} returned {} gradients for {} inputs",
                        op.name(),
                        gs.len(),
                        inputs.len()
                    )));
                }
                for (v, g) in inputs.iter().zip(gs) {
                    if let Some(g) = g {
                        if g.shape() != self.shape(*v) {
                            return Err(Error::Shape(format!(
                                "custom op {} gradient shape {:?} vs input {:?}",
                                op.name(),
                                g.shape(),
                                self.shape(*v)
                            )));
                        }
                        g.ensure_finite(op.name())?;
                        self.accumulate(grads, *v, g)?;
                    }
                }
            }
        }
        Ok(())
    }
}

#[inline]
fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn elementwise_prod<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    Tensor::from_vec(a.shape(), data).expect("same shapes")
}

fn binary_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::from_vec(a.shape(), data).expect("same shapes")
}

/// Public scalar sigmoid shared with non-tape code (opacity activation).
pub fn sigmoid<T: Scalar>(x: T) -> T {
    sigmoid_scalar(x)
}
