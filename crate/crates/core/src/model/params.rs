use std::sync::Arc;

use indexmap::IndexMap;
use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{
    Activation, BatchStats, Graph, NormMode, Real, RunningStats, Tensor, Var, BATCH_NORM_EPS, LAYER_NORM_EPS,
};

/// Named learnable tensors plus batch-norm running statistics, in
/// registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Real> {
    params: IndexMap<String, Arc<Tensor<T>>>,
    running: IndexMap<String, RunningStats<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: IndexMap::new(), running: IndexMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.params.insert(name.into(), Arc::new(value));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name).map(|t| &**t)
    }

    pub fn shared(&self, name: &str) -> Result<Arc<Tensor<T>>> {
        self.params.get(name).cloned().ok_or_else(|| Error::Config(format!("missing parameter '{name}'")))
    }

    /// Mutable access; clones the tensor only if a graph still shares it.
    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name).map(Arc::make_mut)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), &**v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    /// Registers `{name}.gamma` (ones), `{name}.beta` (zeros) and running stats.
    pub fn insert_batch_norm(&mut self, name: &str, channels: usize) {
        self.insert(format!("{name}.gamma"), Tensor::ones(&[channels]));
        self.insert(format!("{name}.beta"), Tensor::zeros(&[channels]));
        self.running.insert(name.to_string(), RunningStats::new(channels));
    }

    /// Registers `{name}.gamma` (ones) and `{name}.beta` (zeros).
    pub fn insert_layer_norm(&mut self, name: &str, width: usize) {
        self.insert(format!("{name}.gamma"), Tensor::ones(&[width]));
        self.insert(format!("{name}.beta"), Tensor::zeros(&[width]));
    }

    /// Convolution kernel with He-normal (fan-in) initialization.
    pub fn insert_conv(&mut self, name: &str, shape: &[usize], rng: &mut impl Rng) {
        let fan_in: usize = shape[1..].iter().product();
        self.insert(name, Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng));
    }

    /// Depthwise kernel `[C, k, k]` with He-normal (fan-in `k*k`) initialization.
    pub fn insert_depthwise(&mut self, name: &str, channels: usize, k: usize, rng: &mut impl Rng) {
        self.insert(name, Tensor::randn(&[channels, k, k], (2.0 / (k * k) as f64).sqrt(), rng));
    }

    /// `{name}.weight: [in, out]` and `{name}.bias: [out]` (zeros).
    pub fn insert_linear(&mut self, name: &str, fan_in: usize, fan_out: usize, weight: Tensor<T>) {
        debug_assert_eq!(weight.shape(), &[fan_in, fan_out]);
        self.insert(format!("{name}.weight"), weight);
        self.insert(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
    }

    pub fn running(&self, name: &str) -> Option<&RunningStats<T>> {
        self.running.get(name)
    }

    pub fn running_mut(&mut self, name: &str) -> Option<&mut RunningStats<T>> {
        self.running.get_mut(name)
    }

    pub fn running_iter(&self) -> impl Iterator<Item = (&str, &RunningStats<T>)> {
        self.running.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn insert_running(&mut self, name: impl Into<String>, stats: RunningStats<T>) {
        self.running.insert(name.into(), stats);
    }

    /// Folds training-batch statistics into the running estimates.
    pub fn update_running(&mut self, stats: &[(String, BatchStats<T>)], momentum: f64) -> Result<()> {
        for (name, s) in stats {
            let r = self
                .running
                .get_mut(name)
                .ok_or_else(|| Error::Config(format!("missing running statistics '{name}'")))?;
            r.update(s, momentum);
        }
        Ok(())
    }

    /// Same names, shapes and values.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        let same_params = self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|((ka, a), (kb, b))| {
                ka == kb
                    && a.shape() == b.shape()
                    && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits_u64() == y.to_bits_u64())
            });
        let bits = |v: &[T]| v.iter().map(|x| x.to_bits_u64()).collect::<Vec<_>>();
        let same_running =
            self.running.len() == other.running.len()
                && self.running.iter().zip(&other.running).all(|((ka, a), (kb, b))| {
                    ka == kb && bits(&a.mean) == bits(&b.mean) && bits(&a.var) == bits(&b.var)
                });
        same_params && same_running
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), Arc::new(v.cast()))).collect(),
            running: self
                .running
                .iter()
                .map(|(k, r)| {
                    let c = |v: &[T]| v.iter().map(|x| U::of(x.as_f64())).collect();
                    (k.clone(), RunningStats { mean: c(&r.mean), var: c(&r.var) })
                })
                .collect(),
        }
    }
}

/// One forward pass: a fresh graph with parameters bound lazily as shared
/// leaves, plus the side outputs a caller may want afterwards.
pub struct Forward<'s, T: Real> {
    pub graph: Graph<T>,
    store: &'s ParamStore<T>,
    bound: IndexMap<String, Var>,
    mode: NormMode,
    params_require_grad: bool,
    batch_stats: Vec<(String, BatchStats<T>)>,
    trace: Vec<(String, Vec<usize>)>,
    capture_attention: bool,
    attention: Vec<Var>,
}

impl<'s, T: Real> Forward<'s, T> {
    /// `mode` selects batch-norm statistics; `grads` makes parameters differentiable.
    pub fn new(store: &'s ParamStore<T>, mode: NormMode, grads: bool) -> Self {
        Forward {
            graph: Graph::new(),
            store,
            bound: IndexMap::new(),
            mode,
            params_require_grad: grads,
            batch_stats: Vec::new(),
            trace: Vec::new(),
            capture_attention: false,
            attention: Vec::new(),
        }
    }

    pub fn capture_attention(mut self, on: bool) -> Self {
        self.capture_attention = on;
        self
    }

    pub fn mode(&self) -> NormMode {
        self.mode
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let v = self.graph.leaf_shared(self.store.shared(name)?, self.params_require_grad);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn input(&mut self, x: Tensor<T>) -> Var {
        self.graph.constant(x)
    }

    pub fn conv(&mut self, x: Var, name: &str, stride: usize, pad: usize) -> Result<Var> {
        let w = self.param(name)?;
        self.graph.conv2d(x, w, stride, pad)
    }

    pub fn depthwise(&mut self, x: Var, name: &str, stride: usize, pad: usize) -> Result<Var> {
        let w = self.param(name)?;
        self.graph.depthwise_conv2d(x, w, stride, pad)
    }

    pub fn batch_norm(&mut self, x: Var, name: &str) -> Result<Var> {
        let gamma = self.param(&format!("{name}.gamma"))?;
        let beta = self.param(&format!("{name}.beta"))?;
        let running =
            self.store.running(name).ok_or_else(|| Error::Config(format!("missing running statistics '{name}'")))?;
        let (y, stats) = self.graph.batch_norm(x, gamma, beta, running, self.mode, BATCH_NORM_EPS)?;
        if let Some(s) = stats {
            self.batch_stats.push((name.to_string(), s));
        }
        Ok(y)
    }

    pub fn layer_norm(&mut self, x: Var, name: &str) -> Result<Var> {
        let gamma = self.param(&format!("{name}.gamma"))?;
        let beta = self.param(&format!("{name}.beta"))?;
        self.graph.layer_norm(x, gamma, beta, LAYER_NORM_EPS)
    }

    /// `x @ weight + bias` on a rank-2 `x`.
    pub fn linear(&mut self, x: Var, name: &str) -> Result<Var> {
        let w = self.param(&format!("{name}.weight"))?;
        let b = self.param(&format!("{name}.bias"))?;
        let y = self.graph.matmul(x, w)?;
        self.graph.add_broadcast(y, b)
    }

    pub fn act(&mut self, x: Var, kind: Activation) -> Var {
        self.graph.activation(x, kind)
    }

    pub fn record(&mut self, stage: &str, v: Var) {
        let shape = self.graph.shape(v).to_vec();
        self.trace.push((stage.to_string(), shape));
    }

    /// `(stage, shape)` pairs recorded along the forward pass.
    pub fn trace(&self) -> &[(String, Vec<usize>)] {
        &self.trace
    }

    pub(crate) fn push_attention(&mut self, v: Var) {
        if self.capture_attention {
            self.attention.push(v);
        }
    }

    /// Attention probability tensors `[N*heads, L, L]`, one per block, when captured.
    pub fn attention(&self) -> &[Var] {
        &self.attention
    }

    pub fn take_batch_stats(&mut self) -> Vec<(String, BatchStats<T>)> {
        std::mem::take(&mut self.batch_stats)
    }

    pub fn bound(&self, name: &str) -> Option<Var> {
        self.bound.get(name).copied()
    }

    /// Gradients for every stored parameter after `backward`, in store
    /// order; parameters the pass never touched get zeros.
    pub fn gradients(&mut self) -> Vec<Tensor<T>> {
        let store = self.store;
        store
            .iter()
            .map(|(name, t)| {
                self.bound.get(name).and_then(|&v| self.graph.take_grad(v)).unwrap_or_else(|| Tensor::zeros(t.shape()))
            })
            .collect()
    }
}
