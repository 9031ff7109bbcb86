//! Primitive ops against independent brute-force oracles, plus gradient
//! checks of every differentiable primitive.

mod common;

use common::primitives;

use deepfuse::numerics::{
    grad_check, grad_check_inputs, Activation, Graph, NormMode, RunningStats, Tensor, BATCH_NORM_EPS,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_t(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, r)
}

// ---------- oracles (independent of the graph implementation) ----------

fn matmul_oracle(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.at(&[i, p]) * b.at(&[p, j]);
            }
        }
    }
    out
}

fn pixel(x: &Tensor<f64>, c: usize, y: isize, xx: isize) -> f64 {
    let (h, w) = (x.shape()[1] as isize, x.shape()[2] as isize);
    if y < 0 || xx < 0 || y >= h || xx >= w {
        0.0
    } else {
        x.at(&[c, y as usize, xx as usize])
    }
}

fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let (ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(&[co, oh, ow]);
    for o in 0..co {
        for y in 0..oh {
            for xx in 0..ow {
                let mut s = 0.0;
                for c in 0..ci {
                    for i in 0..kh {
                        for j in 0..kw {
                            let sy = (y * stride + i) as isize - pad as isize;
                            let sx = (xx * stride + j) as isize - pad as isize;
                            s += pixel(x, c, sy, sx) * w.at(&[o, c, i, j]);
                        }
                    }
                }
                out.set(&[o, y, xx], s);
            }
        }
    }
    out
}

fn depthwise_oracle(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let c = x.shape()[0];
    let mut out: Option<Tensor<f64>> = None;
    for ch in 0..c {
        let xc = Tensor::from_fn(&[1, x.shape()[1], x.shape()[2]], |i| x.data()[ch * x.shape()[1] * x.shape()[2] + i]);
        let wc =
            Tensor::from_fn(&[1, 1, w.shape()[1], w.shape()[2]], |i| w.data()[ch * w.shape()[1] * w.shape()[2] + i]);
        let oc = conv_oracle(&xc, &wc, stride, pad);
        let o = out.get_or_insert_with(|| Tensor::zeros(&[c, oc.shape()[1], oc.shape()[2]]));
        let plane = oc.numel();
        o.data_mut()[ch * plane..(ch + 1) * plane].copy_from_slice(oc.data());
    }
    out.unwrap()
}

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn swish_scalar(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

// ---------- matmul ----------

#[test]
fn matmul_identity_and_zero() {
    let mut r = rng(1);
    let b = rand_t(&[3, 4], &mut r);
    let mut g = Graph::new();
    let eye = g.constant(Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
    let bv = g.constant(b.clone());
    let out = g.matmul(eye, bv).unwrap();
    assert_eq!(g.value(out), &b);

    let z = g.constant(Tensor::zeros(&[2, 3]));
    let out = g.matmul(z, bv).unwrap();
    assert_eq!(g.value(out), &Tensor::zeros(&[2, 4]));
}

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng(2);
    for _ in 0..10 {
        let a = rand_t(&[2, 3], &mut r);
        let b = rand_t(&[3, 2], &mut r);
        let mut g = Graph::new();
        let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
        let out = g.matmul(av, bv).unwrap();
        for (x, y) in g.value(out).data().iter().zip(matmul_oracle(&a, &b)) {
            assert!((x - y).abs() <= 1e-12);
        }
    }
}

#[test]
fn matmul_shape_mismatch() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    assert!(g.matmul(a, b).is_err());
}

#[test]
fn batch_matmul_transposes_match_oracle() {
    let mut r = rng(3);
    let a = rand_t(&[2, 4, 3], &mut r); // stored [B,k,m], used transposed
    let b = rand_t(&[2, 5, 4], &mut r); // stored [B,n,k], used transposed
    let mut g = Graph::new();
    let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
    let out = g.batch_matmul(av, bv, true, true).unwrap();
    assert_eq!(g.shape(out), &[2, 3, 5]);
    for bi in 0..2 {
        for i in 0..3 {
            for j in 0..5 {
                let expect: f64 = (0..4).map(|p| a.at(&[bi, p, i]) * b.at(&[bi, j, p])).sum();
                assert!((g.value(out).at(&[bi, i, j]) - expect).abs() < 1e-12);
            }
        }
    }
}

// ---------- convolutions ----------

#[test]
fn conv_pointwise_identity() {
    let mut r = rng(4);
    let x = rand_t(&[3, 4, 5], &mut r);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let w = g.constant(Tensor::from_fn(&[3, 3, 1, 1], |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
    let y = g.conv2d(xv, w, 1, 0).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn conv_zero_input() {
    let mut r = rng(5);
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[2, 6, 6]));
    let w = g.constant(rand_t(&[4, 2, 3, 3], &mut r));
    let y = g.conv2d(x, w, 2, 1).unwrap();
    assert_eq!(g.value(y), &Tensor::zeros(&[4, 3, 3]));
}

#[test]
fn conv_small_case_frozen() {
    // oracle: sliding 2x2 window over 1..9 with kernel [1,2;3,4]
    let x = Tensor::new(vec![1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
    let w = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(conv_oracle(&x, &w, 1, 0).data(), &[37.0, 47.0, 67.0, 77.0]);
    let mut g = Graph::new();
    let (xv, wv) = (g.constant(x), g.constant(w));
    let y = g.conv2d(xv, wv, 1, 0).unwrap();
    assert_eq!(g.shape(y), &[1, 2, 2]);
    assert_eq!(g.value(y).data(), &[37.0, 47.0, 67.0, 77.0]);
}

#[test]
fn conv_random_matches_oracle_with_stride_and_padding() {
    let mut r = rng(6);
    for (stride, pad) in [(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)] {
        let x = rand_t(&[3, 7, 6], &mut r);
        let w = rand_t(&[4, 3, 3, 2], &mut r);
        let mut g = Graph::new();
        let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
        let y = g.conv2d(xv, wv, stride, pad).unwrap();
        let expect = conv_oracle(&x, &w, stride, pad);
        assert_eq!(g.shape(y), expect.shape());
        assert!(g.value(y).max_abs_diff(&expect) < 1e-12);
    }
}

#[test]
fn conv_rejects_oversized_kernel() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[1, 2, 2]));
    let w = g.constant(Tensor::zeros(&[1, 1, 5, 5]));
    assert!(g.conv2d(x, w, 1, 0).is_err());
    assert!(g.conv2d(x, w, 0, 2).is_err());
}

#[test]
fn depthwise_single_channel_equals_conv() {
    let mut r = rng(7);
    let x = rand_t(&[1, 5, 5], &mut r);
    let k = rand_t(&[1, 3, 3], &mut r);
    let mut g = Graph::new();
    let xv = g.constant(x);
    let kd = g.constant(k.clone());
    let kc = g.constant(k.reshape(&[1, 1, 3, 3]).unwrap());
    let a = g.depthwise_conv2d(xv, kd, 2, 1).unwrap();
    let b = g.conv2d(xv, kc, 2, 1).unwrap();
    // gemm and the direct window loop sum in different orders
    assert!(g.value(a).max_abs_diff(g.value(b)) < 1e-14);
}

#[test]
fn depthwise_scaling_kernel() {
    let mut r = rng(8);
    let x = rand_t(&[3, 4, 4], &mut r);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let k = g.constant(Tensor::full(&[3, 1, 1], 2.0));
    let y = g.depthwise_conv2d(xv, k, 1, 0).unwrap();
    assert_eq!(g.value(y), &x.map(|v| 2.0 * v));
}

#[test]
fn depthwise_matches_per_channel_oracle() {
    let mut r = rng(9);
    let x = rand_t(&[2, 3, 3], &mut r);
    let w = rand_t(&[2, 2, 2], &mut r);
    let mut g = Graph::new();
    let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
    let y = g.depthwise_conv2d(xv, wv, 1, 0).unwrap();
    assert!(g.value(y).max_abs_diff(&depthwise_oracle(&x, &w, 1, 0)) < 1e-12);
}

// ---------- normalization ----------

#[test]
fn batch_norm_constant_channel_gives_beta() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_fn(&[2, 2, 2, 2], |i| if (i / 4) % 2 == 0 { 3.0 } else { -1.5 }));
    let gamma = g.constant(Tensor::new(vec![2], vec![1.7, 0.3]).unwrap());
    let beta = g.constant(Tensor::new(vec![2], vec![0.25, -2.0]).unwrap());
    let (y, _) = g.batch_norm(x, gamma, beta, &RunningStats::new(2), NormMode::Train, BATCH_NORM_EPS).unwrap();
    for (i, &v) in g.value(y).data().iter().enumerate() {
        let expect = if (i / 4) % 2 == 0 { 0.25 } else { -2.0 };
        assert!((v - expect).abs() < 1e-12);
    }
}

#[test]
fn batch_norm_infer_identity_stats() {
    let mut r = rng(10);
    let x = rand_t(&[2, 3, 2, 2], &mut r);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let gamma = g.constant(Tensor::ones(&[3]));
    let beta = g.constant(Tensor::zeros(&[3]));
    let (y, stats) = g.batch_norm(xv, gamma, beta, &RunningStats::new(3), NormMode::Infer, BATCH_NORM_EPS).unwrap();
    assert!(stats.is_none());
    assert!(g.value(y).max_abs_diff(&x) < 1e-5);
}

#[test]
fn batch_norm_matches_formula() {
    let mut r = rng(11);
    let x = rand_t(&[2, 3, 2, 2], &mut r);
    let gm = rand_t(&[3], &mut r);
    let bt = rand_t(&[3], &mut r);
    let mut g = Graph::new();
    let (xv, gv, bv) = (g.constant(x.clone()), g.constant(gm.clone()), g.constant(bt.clone()));
    let (y, stats) = g.batch_norm(xv, gv, bv, &RunningStats::new(3), NormMode::Train, 1e-5).unwrap();
    let stats = stats.unwrap();
    assert_eq!(stats.count, 8);
    for c in 0..3 {
        let vals: Vec<f64> =
            (0..2).flat_map(|n| (0..4).map(move |i| (n, i))).map(|(n, i)| x.at(&[n, c, i / 2, i % 2])).collect();
        let mean = vals.iter().sum::<f64>() / 8.0;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        assert!((stats.mean[c] - mean).abs() < 1e-12);
        for n in 0..2 {
            for i in 0..4 {
                let xi = x.at(&[n, c, i / 2, i % 2]);
                let expect = gm.data()[c] * (xi - mean) / (var + 1e-5).sqrt() + bt.data()[c];
                assert!((g.value(y).at(&[n, c, i / 2, i % 2]) - expect).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn layer_norm_constant_row_gives_beta() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::full(&[2, 4], 5.0));
    let gamma = g.constant(Tensor::full(&[4], 3.0));
    let beta = g.constant(Tensor::new(vec![4], vec![0.1, 0.2, 0.3, 0.4]).unwrap());
    let y = g.layer_norm(x, gamma, beta, 1e-6).unwrap();
    assert_eq!(g.value(y).data(), &[0.1, 0.2, 0.3, 0.4, 0.1, 0.2, 0.3, 0.4]);
}

#[test]
fn layer_norm_standardizes_and_matches_formula() {
    let mut r = rng(12);
    let x = rand_t(&[3, 8], &mut r);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let gamma = g.constant(Tensor::ones(&[8]));
    let beta = g.constant(Tensor::zeros(&[8]));
    let y = g.layer_norm(xv, gamma, beta, 1e-6).unwrap();
    for row in 0..3 {
        let src: Vec<f64> = (0..8).map(|j| x.at(&[row, j])).collect();
        let mean = src.iter().sum::<f64>() / 8.0;
        let var = src.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        let out: Vec<f64> = (0..8).map(|j| g.value(y).at(&[row, j])).collect();
        let om = out.iter().sum::<f64>() / 8.0;
        let ov = out.iter().map(|v| (v - om).powi(2)).sum::<f64>() / 8.0;
        assert!(om.abs() < 1e-12);
        assert!((ov - 1.0).abs() < 1e-4);
        for j in 0..8 {
            assert!((out[j] - (src[j] - mean) / (var + 1e-6).sqrt()).abs() < 1e-10);
        }
    }
}

// ---------- activations / softmax ----------

#[test]
fn activations_match_scalar_formulas() {
    let grid: Vec<f64> = (-40..=40).map(|i| i as f64 * 0.15).collect();
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![grid.len()], grid.clone()).unwrap());
    let ge = g.activation(x, Activation::Gelu);
    let sw = g.activation(x, Activation::Swish);
    for (i, &v) in grid.iter().enumerate() {
        assert!((g.value(ge).data()[i] - gelu_scalar(v)).abs() < 1e-10);
        assert!((g.value(sw).data()[i] - swish_scalar(v)).abs() < 1e-10);
    }
}

#[test]
fn softmax_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[2]));
    let y = g.softmax(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);

    let x = g.constant(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
    let y = g.softmax(x).unwrap();
    let z: f64 = (1..=3).map(|i| (i as f64).exp()).sum();
    for i in 0..3 {
        assert!((g.value(y).data()[i] - ((i + 1) as f64).exp() / z).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant(
        row in proptest::collection::vec(-30.0f64..30.0, 1..12),
        shift in -100.0f64..100.0,
    ) {
        let n = row.len();
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, n], row.clone()).unwrap());
        let xs = g.constant(Tensor::new(vec![1, n], row.iter().map(|v| v + shift).collect()).unwrap());
        let y = g.softmax(x).unwrap();
        let ys = g.softmax(xs).unwrap();
        let s: f64 = g.value(y).data().iter().sum();
        prop_assert!((s - 1.0).abs() <= 1e-12);
        prop_assert!(g.value(y).data().iter().all(|&v| v > 0.0));
        prop_assert!(g.value(y).max_abs_diff(g.value(ys)) <= 1e-12);
    }
}

// ---------- backward examples ----------

#[test]
fn composed_chain_matches_finite_differences() {
    let mut r = rng(13);
    let x = rand_t(&[2, 2, 4, 4], &mut r);
    let w = rand_t(&[3, 2, 3, 3], &mut r);
    let gm = Tensor::uniform(&[3], 0.5, 1.5, &mut r);
    let bt = rand_t(&[3], &mut r);
    let report = grad_check_inputs(
        |g, v| {
            let y = g.conv2d(v[0], v[1], 1, 1)?;
            let (y, _) = g.batch_norm(y, v[2], v[3], &RunningStats::new(3), NormMode::Train, BATCH_NORM_EPS)?;
            let y = g.activation(y, Activation::Gelu);
            let y2 = g.mul(y, y)?;
            Ok(g.sum(y2))
        },
        &[x, w, gm, bt],
        1e-5,
        None,
    )
    .unwrap();
    assert!(report.max_rel_error <= 1e-4, "{report:?}");
}

#[test]
fn deterministic_forward() {
    let run = || {
        let mut r = rng(14);
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::uniform(&[2, 3, 9, 9], -1.0, 1.0, &mut r));
        let w = g.constant(Tensor::uniform(&[5, 3, 3, 3], -1.0, 1.0, &mut r));
        let y = g.conv2d(x, w, 2, 1).unwrap();
        let y = g.softmax(y).unwrap();
        g.value(y).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

// ---------- per-primitive gradient checks across seeds ----------

#[test]
fn every_primitive_passes_grad_check_over_twenty_seeds() {
    for name in primitives::PRIMITIVES {
        for seed in 0..20u64 {
            let (inputs, f) = primitives::primitive_case(name, seed);
            let report = grad_check_inputs(|g, v| f(g, v), &inputs, 1e-5, None).unwrap();
            assert!(report.max_rel_error <= 1e-4, "{name} seed {seed}: {report:?}");
        }
    }
}

#[test]
fn single_input_grad_check_wrapper() {
    let x = Tensor::new(vec![4], vec![0.2, -0.4, 1.1, 0.9]).unwrap();
    let err = grad_check(
        |g, x| {
            let y = g.activation(x, Activation::Gelu);
            let y = g.mul(y, x)?;
            Ok(g.sum(y))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-6, "{err}");
}
