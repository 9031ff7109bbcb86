//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive in execution order. Node ids are
//! monotonically increasing and an op's inputs always precede it, so a single
//! reverse sweep over the node list visits each op exactly once after all of
//! its consumers. Gradients accumulate additively across fan-out.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::kernels::{self, Window};
use super::real::{gemm, MatView, Real};
use super::tensor::{numel, Tensor};
use crate::error::{dim_err, Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
    Swish,
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            "swish" => Ok(Activation::Swish),
            other => Err(Error::Config(format!("unknown activation kind '{other}'"))),
        }
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

impl Activation {
    /// tanh-approximated gelu; swish is `x * sigmoid(x)`.
    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Gelu => {
                let u = T::of(GELU_K) * (x + T::of(GELU_C) * x * x * x);
                T::of(0.5) * x * (T::one() + u.tanh())
            }
            Activation::Swish => x * sigmoid(x),
        }
    }

    pub fn derivative<T: Real>(self, x: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Gelu => {
                let k = T::of(GELU_K);
                let c = T::of(GELU_C);
                let t = (k * (x + c * x * x * x)).tanh();
                let half = T::of(0.5);
                half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + T::of(3.0) * c * x * x)
            }
            Activation::Swish => {
                let s = sigmoid(x);
                s + x * s * (T::one() - s)
            }
        }
    }
}

impl Activation {
    /// `(apply(x), derivative(x))` sharing one transcendental evaluation.
    fn with_derivative<T: Real>(self, x: T) -> (T, T) {
        match self {
            Activation::Relu => (self.apply(x), self.derivative(x)),
            Activation::Gelu => {
                let k = T::of(GELU_K);
                let c = T::of(GELU_C);
                let t = (k * (x + c * x * x * x)).tanh();
                let half = T::of(0.5);
                let y = half * x * (T::one() + t);
                (y, half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + T::of(3.0) * c * x * x))
            }
            Activation::Swish => {
                let s = sigmoid(x);
                (x * s, s + x * s * (T::one() - s))
            }
        }
    }
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Whether batch normalization uses batch statistics or running estimates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Infer,
}

/// Per-channel statistics of one training batch (biased variance).
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    /// Number of values each channel statistic was computed from.
    pub count: usize,
}

/// Running mean/variance estimates consumed by inference-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats { mean: vec![T::zero(); channels], var: vec![T::one(); channels] }
    }

    /// Exponential moving average; the batch variance enters unbiased.
    pub fn update(&mut self, batch: &BatchStats<T>, momentum: f64) {
        let m = T::of(momentum);
        let keep = T::one() - m;
        let n = batch.count as f64;
        let correction = if n > 1.0 { T::of(n / (n - 1.0)) } else { T::one() };
        for c in 0..self.mean.len() {
            self.mean[c] = keep * self.mean[c] + m * batch.mean[c];
            self.var[c] = keep * self.var[c] + m * batch.var[c] * correction;
        }
    }
}

pub const BATCH_NORM_EPS: f64 = 1e-5;
pub const LAYER_NORM_EPS: f64 = 1e-6;
pub const BATCH_NORM_MOMENTUM: f64 = 0.1;
pub const BCE_EPS: f64 = 1e-7;

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    /// `b` broadcast over the leading axes of `x`.
    AddBroadcast(Var, Var),
    Scale(Var, T),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        win: Window,
        batch: usize,
    },
    Depthwise {
        x: Var,
        w: Var,
        win: Window,
        batch: usize,
    },
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        layout: NormLayout,
    },
    /// Smooth kinds cache the pointwise derivative when gradients flow.
    Act(Var, Activation, Option<Vec<T>>),
    Sigmoid(Var),
    Softmax(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    SpatialMean(Var),
    ScaleChannels(Var, Var),
    Sum(Var),
    Mean(Var),
    Bce {
        p: Var,
        targets: Vec<T>,
    },
}

/// How a normalization op indexes its statistics.
#[derive(Clone, Copy)]
enum NormLayout {
    /// Batch norm over `[n, c, h*w]`; `batch_stats` selects the backward form.
    Channels { n: usize, c: usize, hw: usize, batch_stats: bool },
    /// Layer norm over the last axis of `rows x d`.
    Rows { rows: usize, d: usize },
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// The computation record: an append-only list of executed ops.
///
/// A graph is confined to one thread while it is being built and swept.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value: Arc::new(value), op, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    /// Adds a leaf; gradients are populated for it after [`Graph::backward`]
    /// when `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.leaf_shared(Arc::new(value), requires_grad)
    }

    pub fn leaf_shared(&mut self, value: Arc<Tensor<T>>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward root with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.take()
    }

    /// Clears every populated gradient.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ----- elementwise -------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err!("add: {:?} vs {:?}", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err!("mul: {:?} vs {:?}", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// `x + b` where `b`'s shape equals the trailing axes of `x`.
    pub fn add_broadcast(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let (xs, bs) = (tx.shape(), tb.shape());
        if bs.len() > xs.len() || xs[xs.len() - bs.len()..] != *bs {
            return Err(dim_err!("add_broadcast: {:?} is not a suffix of {:?}", bs, xs));
        }
        let nb = tb.numel().max(1);
        let bd = tb.data();
        let data = tx.data().iter().enumerate().map(|(i, &v)| v + bd[i % nb]).collect();
        let out = Tensor::new(xs.to_vec(), data)?;
        Ok(self.push(out, Op::AddBroadcast(x, b), &[x, b]))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale(x, c), &[x])
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let vx = self.value(x);
        if kind == Activation::Relu || !self.nodes[x.0].requires_grad {
            let out = vx.map(|v| kind.apply(v));
            return self.push(out, Op::Act(x, kind, None), &[x]);
        }
        let (y, d): (Vec<T>, Vec<T>) = vx.data().iter().map(|&v| kind.with_derivative(v)).unzip();
        let out = Tensor::new(vx.shape().to_vec(), y).expect("same shape");
        self.push(out, Op::Act(x, kind, Some(d)), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x), &[x])
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let n = *tx.shape().last().ok_or_else(|| dim_err!("softmax of a scalar"))?;
        let mut data = tx.data().to_vec();
        if n > 0 {
            for row in data.chunks_exact_mut(n) {
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                for v in row.iter_mut() {
                    *v /= sum;
                }
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Softmax(x), &[x]))
    }

    // ----- shape -------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = (*self.nodes[x.0].value).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let rank = tx.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(dim_err!("permute: {:?} is not a permutation of {} axes", perm, rank));
        }
        let shape: Vec<usize> = perm.iter().map(|&p| tx.shape()[p]).collect();
        let mut data = vec![T::zero(); tx.numel()];
        kernels::permute_into(tx.data(), tx.shape(), perm, &mut data);
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Permute(x, perm.to_vec()), &[x]))
    }

    /// Slice `start..start+len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let shape = tx.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(dim_err!("narrow: axis {axis} range {start}..{} of {:?}", start + len, shape));
        }
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis + 1..]);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&tx.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let out = Tensor::new(out_shape, data)?;
        Ok(self.push(out, Op::Narrow { x, axis, start }, &[x]))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| dim_err!("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(dim_err!("concat: axis {axis} out of range for {:?}", base));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != base.len() || s.iter().enumerate().any(|(i, &e)| i != axis && e != base[i]) {
                return Err(dim_err!("concat: {:?} incompatible with {:?} on axis {axis}", s, base));
            }
            total += s[axis];
        }
        let outer = numel(&base[..axis]);
        let inner = numel(&base[axis + 1..]);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let t = self.value(*p);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Concat { parts: parts.to_vec(), axis }, parts))
    }

    // ----- linear algebra ----------------------------------------------

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err!("matmul: {:?} x {:?}", sa, sb));
        }
        self.matmul_impl(a, b, false, false, 1, sa[0], sa[1], sb[1], vec![sa[0], sb[1]])
    }

    /// Batched product of `[B,m,k]` (or `[B,k,m]` if `ta`) with `[B,k,n]`
    /// (or `[B,n,k]` if `tb`).
    pub fn batch_matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(dim_err!("batch_matmul: {:?} x {:?}", sa, sb));
        }
        let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (k2, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != k2 {
            return Err(dim_err!("batch_matmul inner dims: {:?} x {:?} (ta={ta}, tb={tb})", sa, sb));
        }
        self.matmul_impl(a, b, ta, tb, sa[0], m, k, n, vec![sa[0], m, n])
    }

    #[allow(clippy::too_many_arguments)]
    fn matmul_impl(
        &mut self,
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shape: Vec<usize>,
    ) -> Result<Var> {
        let mut data = vec![T::zero(); batch * m * n];
        {
            let (da, db) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                let av = mat(&da[i * m * k..(i + 1) * m * k], m, k, ta);
                let bv = mat(&db[i * k * n..(i + 1) * k * n], k, n, tb);
                gemm(av, bv, T::zero(), &mut data[i * m * n..(i + 1) * m * n], false);
            }
        }
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::MatMul { a, b, ta, tb, batch, m, k, n }, &[a, b]))
    }

    // ----- convolution -------------------------------------------------

    /// Cross-correlation of `[C_in,H,W]` or `[N,C_in,H,W]` with
    /// `[C_out,C_in,kh,kw]`, zero padding on every side.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let (batch, ci, h, wd) = split_image_shape(&xs, "conv2d")?;
        if ws.len() != 4 || ws[1] != ci {
            return Err(dim_err!("conv2d: kernel {:?} for input {:?}", ws, xs));
        }
        let (co, kh, kw) = (ws[0], ws[2], ws[3]);
        let win = Window::new(h, wd, kh, kw, stride, pad)
            .ok_or_else(|| dim_err!("conv2d: {kh}x{kw} kernel, stride {stride}, pad {pad} on {h}x{wd}"))?;
        let (kdim, p) = (ci * kh * kw, win.out_h * win.out_w);
        let mut out = vec![T::zero(); batch * co * p];
        {
            let (dx, dw) = (self.value(x).data(), self.value(w).data());
            let wv = MatView::row_major(dw, co, kdim);
            let mut cols = if win.is_pointwise() { Vec::new() } else { vec![T::zero(); kdim * p] };
            for i in 0..batch {
                let xi = &dx[i * ci * h * wd..(i + 1) * ci * h * wd];
                let colv = if win.is_pointwise() {
                    MatView::row_major(xi, kdim, p)
                } else {
                    kernels::im2col(xi, ci, &win, &mut cols);
                    MatView::row_major(&cols, kdim, p)
                };
                gemm(wv, colv, T::zero(), &mut out[i * co * p..(i + 1) * co * p], false);
            }
        }
        let shape = if xs.len() == 4 { vec![batch, co, win.out_h, win.out_w] } else { vec![co, win.out_h, win.out_w] };
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::Conv2d { x, w, win, batch }, &[x, w]))
    }

    /// Per-channel convolution of `[C,H,W]` or `[N,C,H,W]` with `[C,kh,kw]`.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let (batch, c, h, wd) = split_image_shape(&xs, "depthwise_conv2d")?;
        if ws.len() != 3 || ws[0] != c {
            return Err(dim_err!("depthwise_conv2d: kernel {:?} for input {:?}", ws, xs));
        }
        let win = Window::new(h, wd, ws[1], ws[2], stride, pad).ok_or_else(|| {
            dim_err!("depthwise_conv2d: {}x{} kernel, stride {stride}, pad {pad} on {h}x{wd}", ws[1], ws[2])
        })?;
        let p = win.out_h * win.out_w;
        let mut out = vec![T::zero(); batch * c * p];
        {
            let (dx, dw) = (self.value(x).data(), self.value(w).data());
            for i in 0..batch {
                kernels::depthwise_forward(
                    &dx[i * c * h * wd..(i + 1) * c * h * wd],
                    dw,
                    c,
                    &win,
                    &mut out[i * c * p..(i + 1) * c * p],
                );
            }
        }
        let shape = if xs.len() == 4 { vec![batch, c, win.out_h, win.out_w] } else { vec![c, win.out_h, win.out_w] };
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::Depthwise { x, w, win, batch }, &[x, w]))
    }

    // ----- normalization -----------------------------------------------

    /// Batch norm of `[N,C,H,W]`.
    ///
    /// `running` is read in [`NormMode::Infer`]; in [`NormMode::Train`] the
    /// batch statistics are used and returned so the caller can fold them
    /// into its running estimates.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: &RunningStats<T>,
        mode: NormMode,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        if eps <= 0.0 {
            return Err(Error::Config(format!("batch_norm eps must be positive, got {eps}")));
        }
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(dim_err!("batch_norm expects [N,C,H,W], got {:?}", xs));
        }
        let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [c] {
                return Err(dim_err!("batch_norm {name} {:?} for {c} channels", self.shape(v)));
            }
        }
        if running.mean.len() != c || running.var.len() != c {
            return Err(dim_err!("batch_norm running stats hold {} channels, input has {c}", running.mean.len()));
        }
        let count = n * hw;
        let xd = self.value(x).data();
        let (mean, var) = match mode {
            NormMode::Train => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                let inv_count = T::one() / T::of(count as f64);
                for ch in 0..c {
                    let mut s = T::zero();
                    for b in 0..n {
                        s += xd[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().copied().sum::<T>();
                    }
                    mean[ch] = s * inv_count;
                    let mut sq = T::zero();
                    for b in 0..n {
                        for &v in &xd[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                            let d = v - mean[ch];
                            sq += d * d;
                        }
                    }
                    var[ch] = sq * inv_count;
                }
                (mean, var)
            }
            NormMode::Infer => (running.mean.clone(), running.var.clone()),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + T::of(eps)).sqrt()).collect();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * hw;
                for i in off..off + hw {
                    let h = (xd[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = g[ch] * h + bt[ch];
                }
            }
        }
        let stats = (mode == NormMode::Train).then(|| BatchStats { mean, var, count });
        let out = Tensor::new(xs, out)?;
        let layout = NormLayout::Channels { n, c, hw, batch_stats: mode == NormMode::Train };
        let v = self.push(out, Op::Norm { x, gamma, beta, xhat, inv_std, layout }, &[x, gamma, beta]);
        Ok((v, stats))
    }

    /// Layer norm over the last axis followed by a per-feature affine map.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Config(format!("layer_norm eps must be positive, got {eps}")));
        }
        let xs = self.shape(x).to_vec();
        let d = *xs.last().ok_or_else(|| dim_err!("layer_norm of a scalar"))?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [d] {
                return Err(dim_err!("layer_norm {name} {:?} for width {d}", self.shape(v)));
            }
        }
        let xd = self.value(x).data();
        let rows = if d == 0 { 0 } else { xd.len() / d };
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        let mut inv_std = vec![T::zero(); rows];
        let inv_d = T::one() / T::of(d as f64);
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let inv = T::one() / (var + T::of(eps)).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + bt[j];
            }
        }
        let out = Tensor::new(xs, out)?;
        let layout = NormLayout::Rows { rows, d };
        Ok(self.push(out, Op::Norm { x, gamma, beta, xhat, inv_std, layout }, &[x, gamma, beta]))
    }

    // ----- pooling / channel gating -----------------------------------

    /// Mean over the spatial axes of `[N,C,H,W]`, giving `[N,C]`.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(dim_err!("spatial_mean expects [N,C,H,W], got {:?}", xs));
        }
        let hw = xs[2] * xs[3];
        let inv = T::one() / T::of(hw as f64);
        let data = self.value(x).data().chunks_exact(hw).map(|p| p.iter().copied().sum::<T>() * inv).collect();
        let out = Tensor::new(vec![xs[0], xs[1]], data)?;
        Ok(self.push(out, Op::SpatialMean(x), &[x]))
    }

    /// Multiplies each `[H,W]` plane of `x: [N,C,H,W]` by `s: [N,C]`.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xs, ss) = (self.shape(x).to_vec(), self.shape(s).to_vec());
        if xs.len() != 4 || ss != xs[..2] {
            return Err(dim_err!("scale_channels: {:?} by {:?}", xs, ss));
        }
        let hw = xs[2] * xs[3];
        let sd = self.value(s).data();
        let data = self.value(x).data().iter().enumerate().map(|(i, &v)| v * sd[i / hw]).collect();
        let out = Tensor::new(xs, data)?;
        Ok(self.push(out, Op::ScaleChannels(x, s), &[x, s]))
    }

    // ----- reductions / loss ------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().copied().sum::<T>() / T::of(t.numel().max(1) as f64);
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Mean binary cross-entropy of probabilities `p` against 0/1 targets.
    ///
    /// Probabilities are clamped to `[BCE_EPS, 1 - BCE_EPS]`; the gradient is
    /// evaluated at the clamped point so saturated outputs still receive one.
    pub fn bce(&mut self, p: Var, targets: &[T]) -> Result<Var> {
        let tp = self.value(p);
        if tp.numel() != targets.len() || targets.is_empty() {
            return Err(dim_err!("bce: {} probabilities for {} targets", tp.numel(), targets.len()));
        }
        let loss =
            tp.data().iter().zip(targets).map(|(&pi, &yi)| bce_term(pi, yi)).sum::<T>() / T::of(targets.len() as f64);
        Ok(self.push(Tensor::scalar(loss), Op::Bce { p, targets: targets.to_vec() }, &[p]))
    }

    // ----- reverse sweep ----------------------------------------------

    /// Populates `grad` of every gradient-requiring leaf with
    /// `d root / d leaf`. Leaves the root does not depend on get zeros.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::Usage(format!("backward requires a scalar root, got shape {:?}", self.shape(root))));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.shape(root), T::one()));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.backprop(i, &g, &mut grads)?;
        }
        for (i, node) in self.nodes.iter_mut().enumerate().take(root.0 + 1) {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                node.grad = Some(grads[i].take().unwrap_or_else(|| Tensor::zeros(node.value.shape())));
            }
        }
        Ok(())
    }

    fn backprop(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let gd = g.data();
        let acc = Accumulator { nodes: &self.nodes };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc.add(grads, *a, |d| add_into(d, gd));
                acc.add(grads, *b, |d| add_into(d, gd));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc.add(grads, *a, |d| {
                    for ((o, &gi), &bi) in d.iter_mut().zip(gd).zip(vb) {
                        *o += gi * bi;
                    }
                });
                acc.add(grads, *b, |d| {
                    for ((o, &gi), &ai) in d.iter_mut().zip(gd).zip(va) {
                        *o += gi * ai;
                    }
                });
            }
            Op::AddBroadcast(x, b) => {
                acc.add(grads, *x, |d| add_into(d, gd));
                acc.add(grads, *b, |d| {
                    let nb = d.len().max(1);
                    for chunk in gd.chunks(nb) {
                        add_into(d, chunk);
                    }
                });
            }
            Op::Scale(x, c) => acc.add(grads, *x, |d| {
                for (o, &gi) in d.iter_mut().zip(gd) {
                    *o += gi * *c;
                }
            }),
            Op::MatMul { a, b, ta, tb, batch, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc.add(grads, *a, |d| {
                    for bi in 0..*batch {
                        // d op(A) = dC op(B)^T, stored transposed when `ta`
                        let gv = MatView::row_major(&gd[bi * m * n..(bi + 1) * m * n], m, n);
                        let bv = mat(&vb[bi * k * n..(bi + 1) * k * n], k, n, *tb).t();
                        gemm(gv, bv, T::one(), &mut d[bi * m * k..(bi + 1) * m * k], *ta);
                    }
                });
                acc.add(grads, *b, |d| {
                    for bi in 0..*batch {
                        let av = mat(&va[bi * m * k..(bi + 1) * m * k], m, k, *ta).t();
                        let gv = MatView::row_major(&gd[bi * m * n..(bi + 1) * m * n], m, n);
                        gemm(av, gv, T::one(), &mut d[bi * k * n..(bi + 1) * k * n], *tb);
                    }
                });
            }
            Op::Conv2d { x, w, win, batch } => {
                let (vx, vw) = (self.value(*x).data(), self.value(*w).data());
                let ws = self.shape(*w);
                let (co, ci) = (ws[0], ws[1]);
                let (kdim, p, hw) = (ci * win.kh * win.kw, win.out_h * win.out_w, win.h * win.w);
                let pointwise = win.is_pointwise();
                let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); kdim * p] };
                acc.add(grads, *w, |dw| {
                    for bi in 0..*batch {
                        let xi = &vx[bi * ci * hw..(bi + 1) * ci * hw];
                        let colv = if pointwise {
                            MatView::row_major(xi, kdim, p)
                        } else {
                            kernels::im2col(xi, ci, win, &mut cols);
                            MatView::row_major(&cols, kdim, p)
                        };
                        let gv = MatView::row_major(&gd[bi * co * p..(bi + 1) * co * p], co, p);
                        gemm(gv, colv.t(), T::one(), dw, false);
                    }
                });
                acc.add(grads, *x, |dx| {
                    let wv = MatView::row_major(vw, co, kdim).t();
                    let mut dcols = vec![T::zero(); kdim * p];
                    for bi in 0..*batch {
                        let gv = MatView::row_major(&gd[bi * co * p..(bi + 1) * co * p], co, p);
                        let dxi = &mut dx[bi * ci * hw..(bi + 1) * ci * hw];
                        if pointwise {
                            gemm(wv, gv, T::one(), dxi, false);
                        } else {
                            gemm(wv, gv, T::zero(), &mut dcols, false);
                            kernels::col2im(&dcols, ci, win, dxi);
                        }
                    }
                });
            }
            Op::Depthwise { x, w, win, batch } => {
                let (vx, vw) = (self.value(*x).data(), self.value(*w).data());
                let c = self.shape(*w)[0];
                let (chw, cp) = (c * win.h * win.w, c * win.out_h * win.out_w);
                let (need_x, need_w) = (self.requires_grad(*x), self.requires_grad(*w));
                let mut dx = need_x.then(|| vec![T::zero(); vx.len()]);
                let mut dw = need_w.then(|| vec![T::zero(); vw.len()]);
                for bi in 0..*batch {
                    kernels::depthwise_backward(
                        &vx[bi * chw..(bi + 1) * chw],
                        vw,
                        &gd[bi * cp..(bi + 1) * cp],
                        c,
                        win,
                        dx.as_mut().map(|d| &mut d[bi * chw..(bi + 1) * chw]),
                        dw.as_deref_mut(),
                    );
                }
                if let Some(dx) = dx {
                    acc.add(grads, *x, |d| add_into(d, &dx));
                }
                if let Some(dw) = dw {
                    acc.add(grads, *w, |d| add_into(d, &dw));
                }
            }
            Op::Norm { x, gamma, beta, xhat, inv_std, layout } => {
                let gm = self.value(*gamma).data();
                match *layout {
                    NormLayout::Channels { n, c, hw, batch_stats } => {
                        let mut dgamma = vec![T::zero(); c];
                        let mut dbeta = vec![T::zero(); c];
                        for b in 0..n {
                            for ch in 0..c {
                                let off = (b * c + ch) * hw;
                                for i in off..off + hw {
                                    dgamma[ch] += gd[i] * xhat[i];
                                    dbeta[ch] += gd[i];
                                }
                            }
                        }
                        acc.add(grads, *x, |dx| {
                            let m = T::of((n * hw) as f64);
                            for b in 0..n {
                                for ch in 0..c {
                                    let off = (b * c + ch) * hw;
                                    let k = gm[ch] * inv_std[ch];
                                    for i in off..off + hw {
                                        dx[i] += if batch_stats {
                                            // dxhat sums are gamma * dbeta and gamma * dgamma
                                            k * (gd[i] - dbeta[ch] / m - xhat[i] * dgamma[ch] / m)
                                        } else {
                                            k * gd[i]
                                        };
                                    }
                                }
                            }
                        });
                        acc.add(grads, *gamma, |d| add_into(d, &dgamma));
                        acc.add(grads, *beta, |d| add_into(d, &dbeta));
                    }
                    NormLayout::Rows { rows, d } => {
                        let mut dgamma = vec![T::zero(); d];
                        let mut dbeta = vec![T::zero(); d];
                        for r in 0..rows {
                            for j in 0..d {
                                dgamma[j] += gd[r * d + j] * xhat[r * d + j];
                                dbeta[j] += gd[r * d + j];
                            }
                        }
                        acc.add(grads, *x, |dx| {
                            let df = T::of(d as f64);
                            for r in 0..rows {
                                let (mut s1, mut s2) = (T::zero(), T::zero());
                                for j in 0..d {
                                    let dh = gd[r * d + j] * gm[j];
                                    s1 += dh;
                                    s2 += dh * xhat[r * d + j];
                                }
                                for j in 0..d {
                                    let dh = gd[r * d + j] * gm[j];
                                    dx[r * d + j] += inv_std[r] * (dh - s1 / df - xhat[r * d + j] * s2 / df);
                                }
                            }
                        });
                        acc.add(grads, *gamma, |g| add_into(g, &dgamma));
                        acc.add(grads, *beta, |g| add_into(g, &dbeta));
                    }
                }
            }
            Op::Act(x, kind, cached) => {
                let vx = self.value(*x).data();
                acc.add(grads, *x, |d| match cached {
                    Some(dv) => {
                        for ((o, &gi), &di) in d.iter_mut().zip(gd).zip(dv) {
                            *o += gi * di;
                        }
                    }
                    None => {
                        for ((o, &gi), &xi) in d.iter_mut().zip(gd).zip(vx) {
                            *o += gi * kind.derivative(xi);
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                acc.add(grads, *x, |d| {
                    for ((o, &gi), &yi) in d.iter_mut().zip(gd).zip(y) {
                        *o += gi * yi * (T::one() - yi);
                    }
                });
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let n = *node.value.shape().last().unwrap_or(&1);
                acc.add(grads, *x, |d| {
                    if n == 0 {
                        return;
                    }
                    for ((drow, grow), yrow) in d.chunks_exact_mut(n).zip(gd.chunks_exact(n)).zip(y.chunks_exact(n)) {
                        let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        for ((o, &gi), &yi) in drow.iter_mut().zip(grow).zip(yrow) {
                            *o += yi * (gi - dot);
                        }
                    }
                });
            }
            Op::Reshape(x) => acc.add(grads, *x, |d| add_into(d, gd)),
            Op::Permute(x, perm) => {
                let inv = kernels::inverse_permutation(perm);
                let mut tmp = vec![T::zero(); gd.len()];
                kernels::permute_into(gd, g.shape(), &inv, &mut tmp);
                acc.add(grads, *x, |d| add_into(d, &tmp));
            }
            Op::Narrow { x, axis, start } => {
                let xs = self.shape(*x);
                let outer = numel(&xs[..*axis]);
                let inner = numel(&xs[axis + 1..]);
                let len = g.shape()[*axis];
                acc.add(grads, *x, |d| {
                    for o in 0..outer {
                        let base = (o * xs[*axis] + start) * inner;
                        add_into(&mut d[base..base + len * inner], &gd[o * len * inner..(o + 1) * len * inner]);
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let shape = g.shape();
                let outer = numel(&shape[..*axis]);
                let inner = numel(&shape[axis + 1..]);
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for p in parts {
                    let chunk = self.shape(*p)[*axis] * inner;
                    acc.add(grads, *p, |d| {
                        for o in 0..outer {
                            add_into(
                                &mut d[o * chunk..(o + 1) * chunk],
                                &gd[o * total + offset..o * total + offset + chunk],
                            );
                        }
                    });
                    offset += chunk;
                }
            }
            Op::SpatialMean(x) => {
                let xs = self.shape(*x);
                let hw = xs[2] * xs[3];
                let inv = T::one() / T::of(hw as f64);
                acc.add(grads, *x, |d| {
                    for (plane, &gi) in d.chunks_exact_mut(hw).zip(gd) {
                        for o in plane {
                            *o += gi * inv;
                        }
                    }
                });
            }
            Op::ScaleChannels(x, s) => {
                let xs = self.shape(*x);
                let hw = xs[2] * xs[3];
                let (vx, vs) = (self.value(*x).data(), self.value(*s).data());
                acc.add(grads, *x, |d| {
                    for (i, (o, &gi)) in d.iter_mut().zip(gd).enumerate() {
                        *o += gi * vs[i / hw];
                    }
                });
                acc.add(grads, *s, |d| {
                    for (j, o) in d.iter_mut().enumerate() {
                        *o += gd[j * hw..(j + 1) * hw]
                            .iter()
                            .zip(&vx[j * hw..(j + 1) * hw])
                            .map(|(&a, &b)| a * b)
                            .sum::<T>();
                    }
                });
            }
            Op::Sum(x) => acc.add(grads, *x, |d| {
                for o in d {
                    *o += gd[0];
                }
            }),
            Op::Mean(x) => {
                let n = T::of(self.value(*x).numel().max(1) as f64);
                acc.add(grads, *x, |d| {
                    for o in d {
                        *o += gd[0] / n;
                    }
                })
            }
            Op::Bce { p, targets } => {
                let vp = self.value(*p).data();
                let n = T::of(targets.len() as f64);
                acc.add(grads, *p, |d| {
                    for ((o, &pi), &yi) in d.iter_mut().zip(vp).zip(targets) {
                        *o += gd[0] * bce_grad(pi, yi) / n;
                    }
                });
            }
        }
        Ok(())
    }
}

/// Routes gradient contributions into lazily zero-initialized buffers,
/// skipping inputs that do not require gradients.
struct Accumulator<'a, T> {
    nodes: &'a [Node<T>],
}

impl<T: Real> Accumulator<'_, T> {
    fn add(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(node.value.shape()));
        f(slot.data_mut());
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn mat<T: Real>(data: &[T], rows: usize, cols: usize, transposed: bool) -> MatView<'_, T> {
    // `rows x cols` is the logical (post-transpose) shape
    if transposed {
        MatView::row_major(data, cols, rows).t()
    } else {
        MatView::row_major(data, rows, cols)
    }
}

fn split_image_shape(shape: &[usize], op: &str) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((1, c, h, w)),
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(dim_err!("{op} expects [C,H,W] or [N,C,H,W], got {:?}", shape)),
    }
}

pub(crate) fn clamp_prob<T: Real>(p: T) -> T {
    let eps = T::of(BCE_EPS);
    p.max(eps).min(T::one() - eps)
}

pub fn bce_term<T: Real>(p: T, y: T) -> T {
    let p = clamp_prob(p);
    -(y * p.ln() + (T::one() - y) * (T::one() - p).ln())
}

/// `d bce_term / d p` at the clamped probability.
pub fn bce_grad<T: Real>(p: T, y: T) -> T {
    let p = clamp_prob(p);
    -y / p + (T::one() - y) / (T::one() - p)
}
