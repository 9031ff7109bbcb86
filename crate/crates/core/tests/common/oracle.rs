//! Loop-level reference implementations used as test oracles.

use deepfuse::model::ParamStore;
use deepfuse::numerics::Tensor;

pub fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v * v * v)).tanh())
}

/// Row-major `[rows, cols]` matrix.
#[derive(Clone, Debug)]
pub struct Mat {
    pub r: usize,
    pub c: usize,
    pub d: Vec<f64>,
}

impl Mat {
    pub fn of(t: &Tensor<f64>) -> Mat {
        let s = t.shape();
        Mat { r: s[0], c: s[1], d: t.data().to_vec() }
    }
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.c + j]
    }
    pub fn row(&self, i: usize) -> &[f64] {
        &self.d[i * self.c..(i + 1) * self.c]
    }
    pub fn mul(&self, o: &Mat) -> Mat {
        assert_eq!(self.c, o.r);
        let mut d = vec![0.0; self.r * o.c];
        for i in 0..self.r {
            for j in 0..o.c {
                d[i * o.c + j] = (0..self.c).map(|k| self.at(i, k) * o.at(k, j)).sum();
            }
        }
        Mat { r: self.r, c: o.c, d }
    }
}

pub fn linear(x: &Mat, store: &ParamStore<f64>, name: &str) -> Mat {
    let w = Mat::of(store.get(&format!("{name}.weight")).unwrap());
    let b = store.get(&format!("{name}.bias")).unwrap().data();
    let mut y = x.mul(&w);
    for i in 0..y.r {
        for j in 0..y.c {
            y.d[i * y.c + j] += b[j];
        }
    }
    y
}

pub fn layer_norm(x: &Mat, store: &ParamStore<f64>, name: &str) -> Mat {
    let g = store.get(&format!("{name}.gamma")).unwrap().data();
    let b = store.get(&format!("{name}.beta")).unwrap().data();
    let mut d = Vec::new();
    for i in 0..x.r {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / x.c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / x.c as f64;
        d.extend(row.iter().enumerate().map(|(j, v)| g[j] * (v - mean) / (var + 1e-6).sqrt() + b[j]));
    }
    Mat { d, ..*x }
}

/// One pre-norm transformer block on a single `[L, D]` sequence.
pub fn block_oracle(x: &Mat, store: &ParamStore<f64>, p: &str, heads: usize) -> Mat {
    let (l, d) = (x.r, x.c);
    let dh = d / heads;
    let y = layer_norm(x, store, &format!("{p}.ln1"));
    let qkv = linear(&y, store, &format!("{p}.attn.qkv"));
    let mut ctx = Mat { r: l, c: d, d: vec![0.0; l * d] };
    for h in 0..heads {
        let q = |i: usize, e: usize| qkv.at(i, h * dh + e);
        let k = |i: usize, e: usize| qkv.at(i, d + h * dh + e);
        let v = |i: usize, e: usize| qkv.at(i, 2 * d + h * dh + e);
        for i in 0..l {
            let scores: Vec<f64> =
                (0..l).map(|j| (0..dh).map(|e| q(i, e) * k(j, e)).sum::<f64>() / (dh as f64).sqrt()).collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
            for e in 0..dh {
                ctx.d[i * d + h * dh + e] = (0..l).map(|j| (scores[j] - m).exp() / z * v(j, e)).sum();
            }
        }
    }
    let attn = linear(&ctx, store, &format!("{p}.attn.out"));
    let x1 = Mat { d: x.d.iter().zip(&attn.d).map(|(a, b)| a + b).collect(), ..*x };
    let y = layer_norm(&x1, store, &format!("{p}.ln2"));
    let mut hdn = linear(&y, store, &format!("{p}.mlp.fc1"));
    hdn.d.iter_mut().for_each(|v| *v = gelu(*v));
    let mlp = linear(&hdn, store, &format!("{p}.mlp.fc2"));
    Mat { d: x1.d.iter().zip(&mlp.d).map(|(a, b)| a + b).collect(), ..x1 }
}

// Crossing-number test plus an explicit on-edge check, independent of the
// hull-based containment used by the library.
pub fn pip_oracle(poly: &[[f64; 2]], x: f64, y: f64) -> bool {
    let n = poly.len();
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        let cross = (b[0] - a[0]) * (y - a[1]) - (b[1] - a[1]) * (x - a[0]);
        let within = x >= a[0].min(b[0]) - 1e-9
            && x <= a[0].max(b[0]) + 1e-9
            && y >= a[1].min(b[1]) - 1e-9
            && y <= a[1].max(b[1]) + 1e-9;
        if cross.abs() < 1e-9 && within {
            return true;
        }
    }
    let mut inside = false;
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        if (a[1] > y) != (b[1] > y) {
            let xc = a[0] + (y - a[1]) * (b[0] - a[0]) / (b[1] - a[1]);
            if x < xc {
                inside = !inside;
            }
        }
    }
    inside
}
