//! Early fusion of two token sequences and the transformer encoder that
//! classifies them.
//!
//! Sequences are batched as `[N, L, D]`. Parameters live under `fusion.*`
//! and `head.*`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbones::Preset;
use crate::error::{dim_err, Error, Result};
use crate::model::{Forward, ParamStore};
use crate::numerics::{Activation, Real, Tensor, Var};

/// Standard deviation of the truncated-normal initializer.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    pub embed_dim: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    /// Rows of the positional embedding, the longest sequence accepted
    /// including the class token.
    pub max_len: usize,
}

impl FusionConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Toy => FusionConfig { embed_dim: 32, n_blocks: 2, n_heads: 2, mlp_ratio: 4, max_len: 393 },
            Preset::Small => FusionConfig { embed_dim: 128, n_blocks: 4, n_heads: 4, mlp_ratio: 4, max_len: 393 },
            Preset::Paper => FusionConfig { embed_dim: 768, n_blocks: 12, n_heads: 12, mlp_ratio: 4, max_len: 325 },
        }
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.n_heads == 0 || self.mlp_ratio == 0 || self.max_len == 0 {
            return Err(Error::Config("fusion embed_dim, n_heads, mlp_ratio and max_len must be positive".into()));
        }
        if self.embed_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "fusion embed_dim {} is not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        Ok(())
    }
}

fn tn<T: Real>(shape: &[usize], rng: &mut impl Rng) -> Tensor<T> {
    Tensor::trunc_normal(shape, INIT_STD, rng)
}

/// Creates the class token, positional embedding, encoder blocks and head.
pub fn register<T: Real>(store: &mut ParamStore<T>, cfg: &FusionConfig, rng: &mut impl Rng) -> Result<()> {
    cfg.validate()?;
    let d = cfg.embed_dim;
    let hidden = d * cfg.mlp_ratio;
    store.insert("fusion.class_token", tn(&[1, d], rng));
    store.insert("fusion.pos_embed", tn(&[cfg.max_len, d], rng));
    for i in 0..cfg.n_blocks {
        let p = format!("fusion.blocks.{i}");
        store.insert_layer_norm(&format!("{p}.ln1"), d);
        store.insert_linear(&format!("{p}.attn.qkv"), d, 3 * d, tn(&[d, 3 * d], rng));
        store.insert_linear(&format!("{p}.attn.out"), d, d, tn(&[d, d], rng));
        store.insert_layer_norm(&format!("{p}.ln2"), d);
        store.insert_linear(&format!("{p}.mlp.fc1"), d, hidden, tn(&[d, hidden], rng));
        store.insert_linear(&format!("{p}.mlp.fc2"), hidden, d, tn(&[hidden, d], rng));
    }
    store.insert_layer_norm("fusion.norm", d);
    store.insert_linear("head", d, 1, tn(&[d, 1], rng));
    Ok(())
}

fn seq_shape<T: Real>(fw: &Forward<'_, T>, x: Var, what: &str) -> Result<[usize; 3]> {
    match *fw.graph.shape(x) {
        [n, l, d] => Ok([n, l, d]),
        ref s => Err(dim_err!("{what} expects [N,L,D], got {s:?}")),
    }
}

/// Concatenates `a: [N,L1,D]` and `b: [N,L2,D]` along the token axis, `a` first.
pub fn fuse_tokens<T: Real>(fw: &mut Forward<'_, T>, a: Var, b: Var) -> Result<Var> {
    let [na, _, da] = seq_shape(fw, a, "fuse_tokens")?;
    let [nb, _, db] = seq_shape(fw, b, "fuse_tokens")?;
    if da != db || na != nb {
        return Err(dim_err!("fuse_tokens: [{na},_,{da}] and [{nb},_,{db}] differ in batch or width"));
    }
    fw.graph.concat(&[a, b], 1)
}

/// Prepends the class token and adds positional embeddings:
/// row 0 is `class_token + pos[0]`, row `i` is `x[i-1] + pos[i]`.
pub fn prepend_class_and_pos<T: Real>(fw: &mut Forward<'_, T>, x: Var) -> Result<Var> {
    let [n, l, d] = seq_shape(fw, x, "prepend_class_and_pos")?;
    let pos = fw.param("fusion.pos_embed")?;
    let &[cap, pd] = fw.graph.shape(pos) else {
        return Err(dim_err!("pos_embed must be rank 2"));
    };
    if pd != d {
        return Err(dim_err!("pos_embed width {pd} does not match token width {d}"));
    }
    if l + 1 > cap {
        return Err(dim_err!("sequence of {} tokens (with class token) exceeds capacity {cap}", l + 1));
    }
    let cls = fw.param("fusion.class_token")?;
    let zeros = fw.graph.constant(Tensor::zeros(&[n, 1, d]));
    let cls = fw.graph.add_broadcast(zeros, cls)?;
    let seq = fw.graph.concat(&[cls, x], 1)?;
    let pos = fw.graph.narrow(pos, 0, 0, l + 1)?;
    fw.graph.add_broadcast(seq, pos)
}

/// Pre-norm multi-head self-attention with residual.
fn attention<T: Real>(fw: &mut Forward<'_, T>, x: Var, p: &str, cfg: &FusionConfig) -> Result<Var> {
    let [n, l, d] = seq_shape(fw, x, "attention")?;
    let (h, dh) = (cfg.n_heads, cfg.head_dim());
    let y = fw.layer_norm(x, &format!("{p}.ln1"))?;
    let y = fw.graph.reshape(y, &[n * l, d])?;
    let qkv = fw.linear(y, &format!("{p}.attn.qkv"))?;
    let qkv = fw.graph.reshape(qkv, &[n, l, 3, h, dh])?;
    let qkv = fw.graph.permute(qkv, &[2, 0, 3, 1, 4])?;
    let mut parts = [x; 3];
    for (i, part) in parts.iter_mut().enumerate() {
        let t = fw.graph.narrow(qkv, 0, i, 1)?;
        *part = fw.graph.reshape(t, &[n * h, l, dh])?;
    }
    let [q, k, v] = parts;
    let scores = fw.graph.batch_matmul(q, k, false, true)?;
    let scores = fw.graph.scale(scores, T::of(1.0 / (dh as f64).sqrt()));
    let probs = fw.graph.softmax(scores)?;
    fw.push_attention(probs);
    let ctx = fw.graph.batch_matmul(probs, v, false, false)?;
    let ctx = fw.graph.reshape(ctx, &[n, h, l, dh])?;
    let ctx = fw.graph.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = fw.graph.reshape(ctx, &[n * l, d])?;
    let out = fw.linear(ctx, &format!("{p}.attn.out"))?;
    let out = fw.graph.reshape(out, &[n, l, d])?;
    fw.graph.add(x, out)
}

/// Pre-norm gelu MLP with residual.
fn mlp<T: Real>(fw: &mut Forward<'_, T>, x: Var, p: &str) -> Result<Var> {
    let [n, l, d] = seq_shape(fw, x, "mlp")?;
    let y = fw.layer_norm(x, &format!("{p}.ln2"))?;
    let y = fw.graph.reshape(y, &[n * l, d])?;
    let y = fw.linear(y, &format!("{p}.mlp.fc1"))?;
    let y = fw.act(y, Activation::Gelu);
    let y = fw.linear(y, &format!("{p}.mlp.fc2"))?;
    let y = fw.graph.reshape(y, &[n, l, d])?;
    fw.graph.add(x, y)
}

/// `n_blocks` pre-norm transformer blocks followed by a final layer norm.
pub fn encoder_forward<T: Real>(fw: &mut Forward<'_, T>, x: Var, cfg: &FusionConfig) -> Result<Var> {
    cfg.validate()?;
    let [_, _, d] = seq_shape(fw, x, "encoder_forward")?;
    if d != cfg.embed_dim {
        return Err(dim_err!("encoder expects width {}, got {d}", cfg.embed_dim));
    }
    let mut y = x;
    for i in 0..cfg.n_blocks {
        let p = format!("fusion.blocks.{i}");
        y = attention(fw, y, &p, cfg)?;
        y = mlp(fw, y, &p)?;
    }
    fw.layer_norm(y, "fusion.norm")
}

/// `sigmoid(head . encoded[:, 0] + bias)`, one probability per sequence: `[N]`.
pub fn classify<T: Real>(fw: &mut Forward<'_, T>, encoded: Var) -> Result<Var> {
    let [n, l, d] = seq_shape(fw, encoded, "classify")?;
    if l == 0 {
        return Err(dim_err!("classify needs at least one token"));
    }
    let cls = fw.graph.narrow(encoded, 1, 0, 1)?;
    let cls = fw.graph.reshape(cls, &[n, d])?;
    let logit = fw.linear(cls, "head")?;
    let logit = fw.graph.reshape(logit, &[n])?;
    Ok(fw.graph.sigmoid(logit))
}

/// Fusion head on two token sequences, recording each stage's shape.
pub fn fusion_forward<T: Real>(fw: &mut Forward<'_, T>, a: Var, b: Var, cfg: &FusionConfig) -> Result<Var> {
    fw.record("tokens_a", a);
    fw.record("tokens_b", b);
    let fused = fuse_tokens(fw, a, b)?;
    fw.record("fused", fused);
    let seq = prepend_class_and_pos(fw, fused)?;
    fw.record("with_class", seq);
    let enc = encoder_forward(fw, seq, cfg)?;
    fw.record("encoded", enc);
    let p = classify(fw, enc)?;
    fw.record("probability", p);
    Ok(p)
}
