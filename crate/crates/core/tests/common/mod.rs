//! Plain-loop reference implementations used as oracles.
#![allow(dead_code)]

use mttrack_core::nn::{Linear, Norm};
use mttrack_core::{ParamStore, RngSeed, Tensor};

pub type Mat = Vec<Vec<f64>>;

pub fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, &mut RngSeed(seed).rng())
}

/// Overwrites every parameter with fresh N(0, 0.3^2) values so that zero
/// biases and unit norms do not hide indexing mistakes.
pub fn randomize(store: &mut ParamStore, seed: u64) {
    let ids: Vec<_> = store.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let t = store.tensor_mut(id);
        let r = randn(t.shape(), seed.wrapping_mul(1000).wrapping_add(i as u64));
        t.data_mut().iter_mut().zip(r.data()).for_each(|(d, v)| *d = 0.3 * v);
    }
}

pub fn to_mat(t: &Tensor) -> Mat {
    let cols = *t.shape().last().unwrap();
    t.data().chunks(cols).map(|r| r.to_vec()).collect()
}

pub fn from_mat(m: &Mat) -> Tensor {
    let data: Vec<f64> = m.iter().flatten().copied().collect();
    Tensor::new(&[m.len(), m[0].len()], data).unwrap()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i][p] * b[p][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn transpose(a: &Mat) -> Mat {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

pub fn softmax_rows(a: &Mat) -> Mat {
    a.iter()
        .map(|r| {
            let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = r.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|v| v / s).collect()
        })
        .collect()
}

pub fn layer_norm_rows(a: &Mat, gamma: &[f64], beta: &[f64]) -> Mat {
    a.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + 1e-5).sqrt();
            r.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) * inv * gamma[j] + beta[j])
                .collect()
        })
        .collect()
}

pub fn linear(store: &ParamStore, l: &Linear, x: &Mat) -> Mat {
    let w = to_mat(store.tensor(l.weight));
    let b = store.tensor(l.bias).data();
    matmul(x, &w)
        .into_iter()
        .map(|r| r.iter().zip(b).map(|(v, bb)| v + bb).collect())
        .collect()
}

pub fn norm(store: &ParamStore, n: &Norm, x: &Mat) -> Mat {
    layer_norm_rows(x, store.tensor(n.gamma).data(), store.tensor(n.beta).data())
}

pub fn cols(a: &Mat, start: usize, len: usize) -> Mat {
    a.iter().map(|r| r[start..start + len].to_vec()).collect()
}

pub fn max_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len());
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

/// Per-head scaled dot-product attention: `softmax(q_i k_i^T / sqrt(d)) v_i`
/// for every head, concatenated. Also returns the per-head weights.
pub fn attention(q: &Mat, k: &Mat, v: &Mat, heads: usize) -> (Mat, Vec<Mat>) {
    let c = q[0].len();
    let d = c / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![Vec::with_capacity(c); q.len()];
    let mut weights = Vec::new();
    for h in 0..heads {
        let (qh, kh, vh) = (cols(q, h * d, d), cols(k, h * d, d), cols(v, h * d, d));
        let logits: Mat = matmul(&qh, &transpose(&kh))
            .into_iter()
            .map(|r| r.into_iter().map(|x| x * scale).collect())
            .collect();
        let w = softmax_rows(&logits);
        let o = matmul(&w, &vh);
        for (row, part) in out.iter_mut().zip(o) {
            row.extend(part);
        }
        weights.push(w);
    }
    (out, weights)
}
