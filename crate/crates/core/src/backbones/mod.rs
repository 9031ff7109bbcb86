//! Convolutional feature extractors that turn a face crop into tokens.
//!
//! Parameter names are rooted at a caller-chosen prefix:
//! `{p}.stem.conv`, `{p}.stem.bn`, `{p}.s{i}.b{j}.*` for blocks and
//! `{p}.proj` for the token projection.

mod config;

pub use config::{BackboneConfig, Family, Preset, StageConfig};

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{Forward, ParamStore};
use crate::numerics::{Activation, Real, Tensor, Var};

/// One block's channel plan, derived from the stage list.
struct BlockPlan {
    name: String,
    c_in: usize,
    c_out: usize,
    stride: usize,
    kernel: usize,
    expand: usize,
}

fn blocks(cfg: &BackboneConfig, prefix: &str) -> Vec<BlockPlan> {
    let mut out = Vec::new();
    let mut c = cfg.stem_width;
    for (i, s) in cfg.stages.iter().enumerate() {
        for j in 0..s.blocks {
            out.push(BlockPlan {
                name: format!("{prefix}.s{i}.b{j}"),
                c_in: c,
                c_out: s.width,
                stride: if j == 0 { s.stride } else { 1 },
                kernel: s.kernel,
                expand: s.expand,
            });
            c = s.width;
        }
    }
    out
}

fn se_width(cfg: &BackboneConfig, c_in: usize) -> usize {
    ((c_in as f64 * cfg.se_ratio).round() as usize).max(1)
}

/// Creates every parameter of a backbone, including the token projection.
pub fn register<T: Real>(
    store: &mut ParamStore<T>,
    cfg: &BackboneConfig,
    prefix: &str,
    rng: &mut impl Rng,
) -> Result<()> {
    cfg.validate()?;
    store.insert_conv(&format!("{prefix}.stem.conv"), &[cfg.stem_width, 3, 3, 3], rng);
    store.insert_batch_norm(&format!("{prefix}.stem.bn"), cfg.stem_width);
    for b in blocks(cfg, prefix) {
        let n = &b.name;
        match cfg.family {
            Family::XceptionStyle => {
                store.insert_depthwise(&format!("{n}.dw"), b.c_in, b.kernel, rng);
                store.insert_conv(&format!("{n}.pw"), &[b.c_out, b.c_in, 1, 1], rng);
                store.insert_batch_norm(&format!("{n}.bn"), b.c_out);
                if b.stride != 1 || b.c_in != b.c_out {
                    store.insert_conv(&format!("{n}.short.conv"), &[b.c_out, b.c_in, 1, 1], rng);
                    store.insert_batch_norm(&format!("{n}.short.bn"), b.c_out);
                }
            }
            Family::EfficientnetStyle => {
                let mid = b.c_in * b.expand;
                if b.expand != 1 {
                    store.insert_conv(&format!("{n}.expand"), &[mid, b.c_in, 1, 1], rng);
                    store.insert_batch_norm(&format!("{n}.expand_bn"), mid);
                }
                store.insert_depthwise(&format!("{n}.dw"), mid, b.kernel, rng);
                store.insert_batch_norm(&format!("{n}.dw_bn"), mid);
                if cfg.se_ratio > 0.0 {
                    let s = se_width(cfg, b.c_in);
                    let reduce = Tensor::randn(&[mid, s], (2.0 / mid as f64).sqrt(), rng);
                    let expand = Tensor::randn(&[s, mid], (2.0 / s as f64).sqrt(), rng);
                    store.insert_linear(&format!("{n}.se.reduce"), mid, s, reduce);
                    store.insert_linear(&format!("{n}.se.expand"), s, mid, expand);
                }
                store.insert_conv(&format!("{n}.project"), &[b.c_out, mid, 1, 1], rng);
                store.insert_batch_norm(&format!("{n}.project_bn"), b.c_out);
            }
        }
    }
    store.insert_conv(&format!("{prefix}.proj"), &[cfg.embed_dim, cfg.out_channels(), 1, 1], rng);
    Ok(())
}

fn stem<T: Real>(fw: &mut Forward<'_, T>, x: Var, cfg: &BackboneConfig, prefix: &str) -> Result<Var> {
    let y = fw.conv(x, &format!("{prefix}.stem.conv"), cfg.stem_stride, 1)?;
    let y = fw.batch_norm(y, &format!("{prefix}.stem.bn"))?;
    Ok(fw.act(y, cfg.activation))
}

fn check_input<T: Real>(fw: &Forward<'_, T>, x: Var) -> Result<()> {
    match fw.graph.shape(x) {
        [_, 3, _, _] => Ok(()),
        s => Err(crate::error::dim_err!("backbone input must be [N,3,H,W], got {s:?}")),
    }
}

/// Depthwise-separable block: `act(bn(pw(dw(x)))) + shortcut(x)`, where the
/// shortcut is the identity at stride 1 and equal width, and a strided 1x1
/// convolution with batch norm otherwise.
pub fn separable_block<T: Real>(
    fw: &mut Forward<'_, T>,
    x: Var,
    name: &str,
    stride: usize,
    kernel: usize,
    activation: Activation,
) -> Result<Var> {
    let c_in = fw.graph.shape(x)[1];
    let y = fw.depthwise(x, &format!("{name}.dw"), stride, kernel / 2)?;
    let y = fw.conv(y, &format!("{name}.pw"), 1, 0)?;
    let c_out = fw.graph.shape(y)[1];
    let y = fw.batch_norm(y, &format!("{name}.bn"))?;
    let y = fw.act(y, activation);
    let shortcut = if stride != 1 || c_in != c_out {
        let s = fw.conv(x, &format!("{name}.short.conv"), stride, 0)?;
        fw.batch_norm(s, &format!("{name}.short.bn"))?
    } else {
        x
    };
    fw.graph.add(y, shortcut)
}

/// Xception-style feature map `[N, C, H', W']` of an `[N, 3, H, W]` batch.
pub fn xception_forward<T: Real>(fw: &mut Forward<'_, T>, x: Var, cfg: &BackboneConfig, prefix: &str) -> Result<Var> {
    if cfg.family != Family::XceptionStyle {
        return Err(Error::Config(format!("xception_forward called with a {} config", cfg.family)));
    }
    check_input(fw, x)?;
    let mut y = stem(fw, x, cfg, prefix)?;
    for b in blocks(cfg, prefix) {
        y = separable_block(fw, y, &b.name, b.stride, b.kernel, cfg.activation)?;
    }
    Ok(y)
}

/// MBConv: expand 1x1 -> bn -> act, depthwise -> bn -> act, squeeze-excite,
/// project 1x1 -> bn, identity residual at stride 1 and equal width.
fn mbconv<T: Real>(fw: &mut Forward<'_, T>, x: Var, b: &BlockPlan, cfg: &BackboneConfig) -> Result<Var> {
    let n = &b.name;
    let act = cfg.activation;
    let mut y = x;
    if b.expand != 1 {
        y = fw.conv(y, &format!("{n}.expand"), 1, 0)?;
        y = fw.batch_norm(y, &format!("{n}.expand_bn"))?;
        y = fw.act(y, act);
    }
    y = fw.depthwise(y, &format!("{n}.dw"), b.stride, b.kernel / 2)?;
    y = fw.batch_norm(y, &format!("{n}.dw_bn"))?;
    y = fw.act(y, act);
    if cfg.se_ratio > 0.0 {
        let s = fw.graph.spatial_mean(y)?;
        let s = fw.linear(s, &format!("{n}.se.reduce"))?;
        let s = fw.act(s, act);
        let s = fw.linear(s, &format!("{n}.se.expand"))?;
        let s = fw.graph.sigmoid(s);
        y = fw.graph.scale_channels(y, s)?;
    }
    y = fw.conv(y, &format!("{n}.project"), 1, 0)?;
    y = fw.batch_norm(y, &format!("{n}.project_bn"))?;
    if b.stride == 1 && b.c_in == b.c_out {
        y = fw.graph.add(y, x)?;
    }
    Ok(y)
}

/// EfficientNet-style feature map `[N, C, H', W']` of an `[N, 3, H, W]` batch.
pub fn efficientnet_forward<T: Real>(
    fw: &mut Forward<'_, T>,
    x: Var,
    cfg: &BackboneConfig,
    prefix: &str,
) -> Result<Var> {
    if cfg.family != Family::EfficientnetStyle {
        return Err(Error::Config(format!("efficientnet_forward called with a {} config", cfg.family)));
    }
    check_input(fw, x)?;
    let mut y = stem(fw, x, cfg, prefix)?;
    for b in blocks(cfg, prefix) {
        y = mbconv(fw, y, &b, cfg)?;
    }
    Ok(y)
}

pub fn backbone_forward<T: Real>(fw: &mut Forward<'_, T>, x: Var, cfg: &BackboneConfig, prefix: &str) -> Result<Var> {
    match cfg.family {
        Family::XceptionStyle => xception_forward(fw, x, cfg, prefix),
        Family::EfficientnetStyle => efficientnet_forward(fw, x, cfg, prefix),
    }
}

/// 1x1 projection `C -> D` of a feature map `[N, C, H, W]`, flattened
/// row-major over the grid into tokens `[N, H*W, D]`.
pub fn project_to_tokens<T: Real>(fw: &mut Forward<'_, T>, fm: Var, proj: &str) -> Result<Var> {
    let y = fw.conv(fm, proj, 1, 0)?;
    let &[n, d, h, w] = fw.graph.shape(y) else {
        return Err(crate::error::dim_err!("project_to_tokens expects [N,C,H,W], got {:?}", fw.graph.shape(y)));
    };
    let y = fw.graph.reshape(y, &[n, d, h * w])?;
    fw.graph.permute(y, &[0, 2, 1])
}

/// Backbone followed by its token projection.
pub fn backbone_tokens<T: Real>(fw: &mut Forward<'_, T>, x: Var, cfg: &BackboneConfig, prefix: &str) -> Result<Var> {
    let fm = backbone_forward(fw, x, cfg, prefix)?;
    project_to_tokens(fw, fm, &format!("{prefix}.proj"))
}
