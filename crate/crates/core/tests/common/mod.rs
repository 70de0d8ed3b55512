//! Independent reference implementations shared by the integration tests.
//! Nothing here calls into the library's numerics.
#![allow(dead_code)]

use fsd::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

pub fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha20Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

pub fn from_mat(m: &Mat) -> Tensor {
    Tensor::from_rows(m).unwrap()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for l in 0..k {
                s += a[i][l] * b[l][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn gram(e: &Mat) -> Mat {
    e.iter()
        .map(|a| e.iter().map(|b| a.iter().zip(b).map(|(x, y)| x * y).sum()).collect())
        .collect()
}

/// `K̃_ij = K_ij − rowmean_i − colmean_j + mean`, written out element by element.
fn centered(k: &Mat) -> Mat {
    let n = k.len();
    let nf = n as f64;
    let row: Vec<f64> = (0..n).map(|i| k[i].iter().sum::<f64>() / nf).collect();
    let col: Vec<f64> = (0..n).map(|j| (0..n).map(|i| k[i][j]).sum::<f64>() / nf).collect();
    let all: f64 = row.iter().sum::<f64>() / nf;
    (0..n)
        .map(|i| (0..n).map(|j| k[i][j] - row[i] - col[j] + all).collect())
        .collect()
}

/// `Σ_ij K̃_ij L̃_ij / (N−1)²`.
pub fn hsic(k: &Mat, l: &Mat) -> f64 {
    let (kc, lc) = (centered(k), centered(l));
    let n = k.len();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            s += kc[i][j] * lc[i][j];
        }
    }
    s / ((n - 1) * (n - 1)) as f64
}

pub fn cka(e1: &Mat, e2: &Mat) -> f64 {
    let (k, l) = (gram(e1), gram(e2));
    hsic(&k, &l) / (hsic(&k, &k) * hsic(&l, &l)).sqrt()
}

/// Random orthogonal matrix by Gram-Schmidt on a random square matrix.
pub fn orthogonal(rng: &mut ChaCha20Rng, n: usize) -> Mat {
    let mut q: Mat = Vec::new();
    while q.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for u in &q {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            for (x, y) in v.iter_mut().zip(u) {
                *x -= d * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            q.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    q
}

pub fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    dot / (na * nb)
}

/// Rows of a `[B, W, D]` tensor flattened per sample.
pub fn samples(t: &Tensor) -> Mat {
    let b = t.shape()[0];
    let w = t.len() / b;
    (0..b).map(|i| t.data()[i * w..(i + 1) * w].to_vec()).collect()
}

/// Token matrix `W×D` of sample `i`.
pub fn tokens(t: &Tensor, i: usize) -> Mat {
    let (w, d) = (t.shape()[1], t.shape()[2]);
    (0..w)
        .map(|j| t.data()[(i * w + j) * d..(i * w + j + 1) * d].to_vec())
        .collect()
}

/// `max |a − b| / max(max|a|, max|b|, floor)`, written independently of the library.
pub fn rel_err(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    let scale = a.data().iter().chain(b.data()).fold(floor, |m, v| m.max(v.abs()));
    let diff = a.data().iter().zip(b.data()).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    diff / scale
}
