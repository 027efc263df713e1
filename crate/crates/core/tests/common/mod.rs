//! Independent reference implementations used as test oracles.
//!
//! Nothing here calls into the library's numerical code; shared with the CLI
//! acceptance suite through a `#[path]` include.
#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

pub type Mat = DMatrix<f64>;

pub fn random_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Mat {
    Mat::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Full SVD by one-sided Jacobi rotations. Returns `(u, s, v)` with
/// `x = u * diag(s) * v^T`, `s` sorted descending, `u` of size `m x k`,
/// `v` of size `n x k`, `k = min(m, n)`.
pub fn jacobi_svd(x: &Mat) -> (Mat, Vec<f64>, Mat) {
    if x.nrows() < x.ncols() {
        let (u, s, v) = jacobi_svd(&x.transpose());
        return (v, s, u);
    }
    let (m, n) = x.shape();
    let mut a: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| x[(i, j)]).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..n).map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    let dot = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(a, b)| a * b).sum::<f64>();
    for _sweep in 0..100 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&a[p], &a[p]);
                let beta = dot(&a[q], &a[q]);
                let gamma = dot(&a[p], &a[q]);
                if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for cols in [&mut a, &mut v] {
                    let (lo, hi) = cols.split_at_mut(q);
                    for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
                        let (xp, xq) = (*x, *y);
                        *x = c * xp - s * xq;
                        *y = s * xp + c * xq;
                    }
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut order: Vec<(f64, usize)> = a.iter().enumerate().map(|(j, col)| (dot(col, col).sqrt(), j)).collect();
    order.sort_by(|x, y| y.0.total_cmp(&x.0));
    let s: Vec<f64> = order.iter().map(|o| o.0).collect();
    let u = Mat::from_fn(m, n, |i, k| {
        let (sv, j) = order[k];
        if sv > 0.0 {
            a[j][i] / sv
        } else {
            0.0
        }
    });
    let vm = Mat::from_fn(n, n, |i, k| v[order[k].1][i]);
    (u, s, vm)
}

/// Linear CKA from Gram matrices, computed with explicit loops.
pub fn naive_cka(x1: &Mat, x2: &Mat) -> f64 {
    let n = x1.nrows();
    let gram = |x: &Mat| {
        let mut g = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                g[i][j] = (0..x.ncols()).map(|c| x[(i, c)] * x[(j, c)]).sum();
            }
        }
        // Double centering.
        let row: Vec<f64> = g.iter().map(|r| r.iter().sum::<f64>() / n as f64).collect();
        let all = row.iter().sum::<f64>() / n as f64;
        for i in 0..n {
            for j in 0..n {
                g[i][j] += all - row[i] - row[j];
            }
        }
        g
    };
    let (k, l) = (gram(x1), gram(x2));
    let inner = |a: &Vec<Vec<f64>>, b: &Vec<Vec<f64>>| -> f64 {
        a.iter().zip(b).map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| x * y).sum::<f64>()).sum()
    };
    inner(&k, &l) / (inner(&k, &k) * inner(&l, &l)).sqrt()
}

/// Mean over tokens of row cosine similarity; zero rows count as 0.
pub fn naive_token_cosine(a: &Mat, b: &Mat) -> f64 {
    let mut total = 0.0;
    for i in 0..a.nrows() {
        let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
        for j in 0..a.ncols() {
            ab += a[(i, j)] * b[(i, j)];
            aa += a[(i, j)] * a[(i, j)];
            bb += b[(i, j)] * b[(i, j)];
        }
        if aa > 0.0 && bb > 0.0 {
            total += ab / (aa.sqrt() * bb.sqrt());
        }
    }
    total / a.nrows() as f64
}

/// Grouped-query attention with explicit loops. Causal when `q.nrows()`
/// equals `k.nrows()`.
pub fn naive_attention(q: &Mat, k: &Mat, v: &Mat, kv_heads: usize, head_dim: usize) -> Mat {
    let q_heads = q.ncols() / head_dim;
    let group = q_heads / kv_heads;
    let (lq, lk) = (q.nrows(), k.nrows());
    let causal = lq == lk;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut out = Mat::zeros(lq, q.ncols());
    for h in 0..q_heads {
        let kh = h / group;
        for i in 0..lq {
            let visible = if causal { i + 1 } else { lk };
            let scores: Vec<f64> = (0..visible)
                .map(|j| {
                    (0..head_dim).map(|c| q[(i, h * head_dim + c)] * k[(j, kh * head_dim + c)]).sum::<f64>() * scale
                })
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = w.iter().sum();
            for c in 0..head_dim {
                out[(i, h * head_dim + c)] = (0..visible).map(|j| w[j] * v[(j, kh * head_dim + c)]).sum::<f64>() / z;
            }
        }
    }
    out
}

/// Matrix with prescribed singular values and random orthonormal factors.
pub fn with_spectrum(rows: usize, cols: usize, s: &[f64], rng: &mut impl Rng) -> Mat {
    let k = s.len();
    let u = random_matrix(rows, k, rng).qr().q();
    let v = random_matrix(cols, k, rng).qr().q();
    let mut us = u;
    for (j, sv) in s.iter().enumerate() {
        us.column_mut(j).scale_mut(*sv);
    }
    us * v.transpose()
}

pub fn orthonormality_error(m: &Mat) -> f64 {
    (m.transpose() * m - Mat::identity(m.ncols(), m.ncols())).amax()
}
