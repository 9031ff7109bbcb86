//! Randomized gradient-check cases, one per differentiable primitive.

use deepfuse::numerics::{Activation, Graph, NormMode, RunningStats, Tensor, Var, BATCH_NORM_EPS};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::rng;

fn rand_t(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, r)
}

/// Random extents in 1..=5.
fn ext(r: &mut ChaCha8Rng) -> usize {
    r.random_range(1..=5)
}

pub type Builder = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> deepfuse::Result<Var>>;

/// Weighted sum so that every output coordinate carries a distinct weight.
fn weigh(g: &mut Graph<f64>, y: Var, seed: u64) -> deepfuse::Result<Var> {
    let shape = g.shape(y).to_vec();
    let mut r = rng(seed ^ 0xabcdef);
    let w = g.constant(Tensor::uniform(&shape, -1.0, 1.0, &mut r));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

pub fn primitive_case(name: &str, seed: u64) -> (Vec<Tensor<f64>>, Builder) {
    let mut r = rng(seed);
    let s = seed;
    match name {
        "matmul" => {
            let (m, k, n) = (ext(&mut r), ext(&mut r), ext(&mut r));
            (
                vec![rand_t(&[m, k], &mut r), rand_t(&[k, n], &mut r)],
                Box::new(move |g, v| {
                    let y = g.matmul(v[0], v[1])?;
                    weigh(g, y, s)
                }),
            )
        }
        "batch_matmul" => {
            let (b, m, k, n) = (ext(&mut r), ext(&mut r), ext(&mut r), ext(&mut r));
            let (ta, tb) = (r.random_bool(0.5), r.random_bool(0.5));
            let sa = if ta { [b, k, m] } else { [b, m, k] };
            let sb = if tb { [b, n, k] } else { [b, k, n] };
            (
                vec![rand_t(&sa, &mut r), rand_t(&sb, &mut r)],
                Box::new(move |g, v| {
                    let y = g.batch_matmul(v[0], v[1], ta, tb)?;
                    weigh(g, y, s)
                }),
            )
        }
        "conv2d" => {
            let (n, ci, co) = (ext(&mut r).min(2), ext(&mut r).min(3), ext(&mut r).min(3));
            let (h, w) = (ext(&mut r) + 1, ext(&mut r) + 1);
            let (kh, kw) = (r.random_range(1..=h.min(3)), r.random_range(1..=w.min(3)));
            let stride = r.random_range(1..=2);
            let pad = r.random_range(0..=1);
            (
                vec![rand_t(&[n, ci, h, w], &mut r), rand_t(&[co, ci, kh, kw], &mut r)],
                Box::new(move |g, v| {
                    let y = g.conv2d(v[0], v[1], stride, pad)?;
                    weigh(g, y, s)
                }),
            )
        }
        "depthwise_conv2d" => {
            let (n, c) = (ext(&mut r).min(2), ext(&mut r).min(3));
            let (h, w) = (ext(&mut r) + 1, ext(&mut r) + 1);
            let (kh, kw) = (r.random_range(1..=h.min(3)), r.random_range(1..=w.min(3)));
            let stride = r.random_range(1..=2);
            let pad = r.random_range(0..=1);
            (
                vec![rand_t(&[n, c, h, w], &mut r), rand_t(&[c, kh, kw], &mut r)],
                Box::new(move |g, v| {
                    let y = g.depthwise_conv2d(v[0], v[1], stride, pad)?;
                    weigh(g, y, s)
                }),
            )
        }
        "batch_norm_train" | "batch_norm_infer" => {
            let train = name == "batch_norm_train";
            let (n, c, h, w) = (ext(&mut r), ext(&mut r), ext(&mut r), ext(&mut r));
            let n = if train && n * h * w == 1 { 2 } else { n };
            let stats = RunningStats { mean: rand_t(&[c], &mut r).into_data(), var: vec![0.7; c] };
            let mode = if train { NormMode::Train } else { NormMode::Infer };
            let gm = Tensor::uniform(&[c], 0.5, 1.5, &mut r);
            (
                vec![rand_t(&[n, c, h, w], &mut r), gm, rand_t(&[c], &mut r)],
                Box::new(move |g, v| {
                    let (y, _) = g.batch_norm(v[0], v[1], v[2], &stats, mode, BATCH_NORM_EPS)?;
                    weigh(g, y, s)
                }),
            )
        }
        "layer_norm" => {
            let (rows, d) = (ext(&mut r), ext(&mut r) + 1);
            let gm = Tensor::uniform(&[d], 0.5, 1.5, &mut r);
            (
                vec![rand_t(&[rows, d], &mut r), gm, rand_t(&[d], &mut r)],
                Box::new(move |g, v| {
                    let y = g.layer_norm(v[0], v[1], v[2], 1e-6)?;
                    weigh(g, y, s)
                }),
            )
        }
        "relu" | "gelu" | "swish" | "sigmoid" => {
            let shape = [ext(&mut r), ext(&mut r)];
            // keep relu inputs away from the kink
            let x = rand_t(&shape, &mut r).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
            let kind = name.to_string();
            (
                vec![x],
                Box::new(move |g, v| {
                    let y = match kind.as_str() {
                        "relu" => g.activation(v[0], Activation::Relu),
                        "gelu" => g.activation(v[0], Activation::Gelu),
                        "swish" => g.activation(v[0], Activation::Swish),
                        _ => g.sigmoid(v[0]),
                    };
                    weigh(g, y, s)
                }),
            )
        }
        "softmax" => {
            let shape = [ext(&mut r), ext(&mut r), ext(&mut r)];
            (
                vec![rand_t(&shape, &mut r)],
                Box::new(move |g, v| {
                    let y = g.softmax(v[0])?;
                    weigh(g, y, s)
                }),
            )
        }
        "add_mul_broadcast" => {
            let (a, b) = (ext(&mut r), ext(&mut r));
            (
                vec![rand_t(&[a, b], &mut r), rand_t(&[a, b], &mut r), rand_t(&[b], &mut r)],
                Box::new(move |g, v| {
                    let y = g.mul(v[0], v[1])?;
                    let y = g.add(y, v[0])?;
                    let y = g.add_broadcast(y, v[2])?;
                    let y = g.scale(y, 0.7);
                    weigh(g, y, s)
                }),
            )
        }
        "shape_ops" => {
            let (a, b, c) = (ext(&mut r), ext(&mut r), ext(&mut r));
            (
                vec![rand_t(&[a, b, c], &mut r), rand_t(&[a, 2, c], &mut r)],
                Box::new(move |g, v| {
                    let y = g.permute(v[0], &[2, 0, 1])?;
                    let y = g.permute(y, &[1, 2, 0])?;
                    let y = g.concat(&[y, v[1]], 1)?;
                    let y = g.narrow(y, 1, 1, b + 1)?;
                    let y = g.reshape(y, &[a * (b + 1) * c])?;
                    weigh(g, y, s)
                }),
            )
        }
        "channel_gate" => {
            let (n, c, h, w) = (ext(&mut r), ext(&mut r), ext(&mut r), ext(&mut r));
            (
                vec![rand_t(&[n, c, h, w], &mut r)],
                Box::new(move |g, v| {
                    let m = g.spatial_mean(v[0])?;
                    let sgate = g.sigmoid(m);
                    let y = g.scale_channels(v[0], sgate)?;
                    weigh(g, y, s)
                }),
            )
        }
        "bce_mean" => {
            let n = ext(&mut r);
            let targets: Vec<f64> = (0..n).map(|_| if r.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
            (
                vec![Tensor::uniform(&[n], 0.05, 0.95, &mut r)],
                Box::new(move |g, v| {
                    let l = g.bce(v[0], &targets)?;
                    let m = g.mean(v[0]);
                    let y = g.add(l, m)?;
                    Ok(y)
                }),
            )
        }
        other => panic!("unknown primitive {other}"),
    }
}

pub const PRIMITIVES: &[&str] = &[
    "matmul",
    "batch_matmul",
    "conv2d",
    "depthwise_conv2d",
    "batch_norm_train",
    "batch_norm_infer",
    "layer_norm",
    "relu",
    "gelu",
    "swish",
    "sigmoid",
    "softmax",
    "add_mul_broadcast",
    "shape_ops",
    "channel_gate",
    "bce_mean",
];
