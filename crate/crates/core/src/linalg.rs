//! Dense linear-algebra kernels: truncated and randomized SVD, centering,
//! and spectral energy ranks. Everything runs in f64.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, XkvError};
use crate::kvdump::check_finite;

pub type Matrix = DMatrix<f64>;

/// Default size (in elements) above which [`svd_auto`] switches to the
/// randomized path.
pub const DEFAULT_EXACT_THRESHOLD: usize = 1 << 24;

/// Rank-`r` factors `u * diag(s) * vt`.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedSvd {
    pub u: Matrix,
    pub s: Vec<f64>,
    pub vt: Matrix,
}

impl TruncatedSvd {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    /// `U * diag(S)`.
    pub fn scaled_u(&self) -> Matrix {
        let mut a = self.u.clone();
        for (j, s) in self.s.iter().enumerate() {
            a.column_mut(j).scale_mut(*s);
        }
        a
    }

    pub fn reconstruct(&self) -> Matrix {
        self.scaled_u() * &self.vt
    }
}

/// Fills a matrix with standard normal draws, column by column.
pub fn gaussian_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    Matrix::from_iterator(rows, cols, (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

/// Thin Q factor of `m` (requires `ncols <= nrows`).
pub fn orthonormal_columns(m: &Matrix) -> Matrix {
    debug_assert!(m.ncols() <= m.nrows());
    m.clone().qr().q()
}

/// Horizontal concatenation `[m_0, m_1, ...]`.
pub fn hcat(blocks: &[&Matrix]) -> Matrix {
    let rows = blocks.first().map_or(0, |b| b.nrows());
    let cols = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = Matrix::zeros(rows, cols);
    let mut offset = 0;
    for b in blocks {
        assert_eq!(b.nrows(), rows, "hcat row mismatch");
        out.columns_mut(offset, b.ncols()).copy_from(*b);
        offset += b.ncols();
    }
    out
}

fn to_faer(x: &Matrix) -> faer::Mat<f64> {
    faer::Mat::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)])
}

/// Thin SVD `(u, s, vt)` with `s` non-increasing.
fn thin_svd(x: &Matrix) -> Result<(Matrix, Vec<f64>, Matrix)> {
    check_finite(x, "SVD input")?;
    let svd = to_faer(x).thin_svd().map_err(|_| XkvError::NoConvergence)?;
    let (u, s, v) = (svd.U(), svd.S(), svd.V());
    let k = x.nrows().min(x.ncols());
    let um = Matrix::from_fn(x.nrows(), k, |i, j| u[(i, j)]);
    let vt = Matrix::from_fn(k, x.ncols(), |i, j| v[(j, i)]);
    Ok((um, (0..k).map(|i| s[i]).collect(), vt))
}

fn singular_values_exact(x: &Matrix) -> Result<Vec<f64>> {
    check_finite(x, "SVD input")?;
    to_faer(x).singular_values().map_err(|_| XkvError::NoConvergence)
}

/// Flips signs so each column of `u` has its largest-magnitude entry positive.
fn canonicalize_signs(u: &mut Matrix, vt: &mut Matrix) {
    for j in 0..u.ncols() {
        let mut best = 0.0f64;
        let mut sign = 1.0;
        for &x in u.column(j).iter() {
            if x.abs() > best {
                best = x.abs();
                sign = x.signum();
            }
        }
        if sign < 0.0 {
            u.column_mut(j).neg_mut();
            vt.row_mut(j).neg_mut();
        }
    }
}

fn check_rank(r: usize, limit: usize) -> Result<()> {
    if r == 0 || r > limit {
        return Err(XkvError::RankTooLarge { rank: r, limit });
    }
    Ok(())
}

fn truncate(u: Matrix, s: Vec<f64>, vt: Matrix, r: usize) -> TruncatedSvd {
    let mut u = u.columns(0, r).into_owned();
    let mut vt = vt.rows(0, r).into_owned();
    canonicalize_signs(&mut u, &mut vt);
    TruncatedSvd { u, s: s[..r].to_vec(), vt }
}

/// Best rank-`r` approximation of `x` (exact SVD).
pub fn svd_truncated(x: &Matrix, r: usize) -> Result<TruncatedSvd> {
    check_rank(r, x.nrows().min(x.ncols()))?;
    let (u, s, vt) = thin_svd(x)?;
    Ok(truncate(u, s, vt, r))
}

/// Randomized SVD with a block Krylov range finder.
///
/// Draws `r + oversample` Gaussian probes, runs `power_iters` re-orthonormalized
/// power iterations, and keeps every iterate so the search space is
/// `[Q_0, Q_1, ..., Q_q]`. Falls back to the exact SVD when that space would
/// reach the full rank of `x`. Deterministic in `seed`.
pub fn svd_randomized(x: &Matrix, r: usize, oversample: usize, power_iters: usize, seed: u64) -> Result<TruncatedSvd> {
    let limit = x.nrows().min(x.ncols());
    check_rank(r, limit)?;
    if r + oversample > limit {
        return Err(XkvError::RankTooLarge { rank: r + oversample, limit });
    }
    check_finite(x, "SVD input")?;
    let k = r + oversample;
    if k * (power_iters + 1) >= limit {
        return svd_truncated(x, r);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let omega = gaussian_matrix(x.ncols(), k, &mut rng);
    let mut block = orthonormal_columns(&(x * omega));
    let mut blocks = vec![block.clone()];
    for _ in 0..power_iters {
        let z = orthonormal_columns(&(x.tr_mul(&block)));
        block = orthonormal_columns(&(x * z));
        blocks.push(block.clone());
    }
    let refs: Vec<&Matrix> = blocks.iter().collect();
    let q = orthonormal_columns(&hcat(&refs));
    let b = q.tr_mul(x);
    let (ub, s, vt) = thin_svd(&b)?;
    Ok(truncate(q * ub, s, vt, r))
}

/// Chooses between the exact and randomized SVD by problem size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvdPolicy {
    pub exact_threshold: usize,
    pub oversample: usize,
    pub power_iters: usize,
}

impl Default for SvdPolicy {
    fn default() -> Self {
        Self { exact_threshold: DEFAULT_EXACT_THRESHOLD, oversample: 8, power_iters: 2 }
    }
}

impl SvdPolicy {
    pub fn uses_randomized(&self, rows: usize, cols: usize) -> bool {
        rows * cols > self.exact_threshold
    }
}

/// Exact SVD for matrices up to `policy.exact_threshold` elements,
/// randomized above. Oversampling is clipped when `r` is close to full rank.
pub fn svd_auto(x: &Matrix, r: usize, policy: &SvdPolicy, seed: u64) -> Result<TruncatedSvd> {
    let limit = x.nrows().min(x.ncols());
    if policy.uses_randomized(x.nrows(), x.ncols()) {
        check_rank(r, limit)?;
        let p = policy.oversample.min(limit - r);
        svd_randomized(x, r, p, policy.power_iters, seed)
    } else {
        svd_truncated(x, r)
    }
}

/// Full singular spectrum, non-increasing.
///
/// Small inputs use the exact SVD; larger ones take the eigenvalues of the
/// smaller Gram matrix.
pub fn singular_values(x: &Matrix, exact_threshold: usize) -> Result<Vec<f64>> {
    let mut s: Vec<f64> = if x.nrows() * x.ncols() <= exact_threshold {
        singular_values_exact(x)?
    } else {
        check_finite(x, "spectrum input")?;
        let gram = if x.ncols() <= x.nrows() { x.tr_mul(x) } else { x * x.transpose() };
        SymmetricEigen::new(gram).eigenvalues.iter().map(|l| l.max(0.0).sqrt()).collect()
    };
    s.sort_by(|a, b| b.total_cmp(a));
    Ok(s)
}

/// Subtracts each column's mean (left-multiplication by the centering matrix).
pub fn center_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    let n = x.nrows() as f64;
    for mut col in out.column_iter_mut() {
        let mean = col.sum() / n;
        col.add_scalar_mut(-mean);
    }
    out
}

/// Smallest `k` whose leading squared singular values reach `fraction` of
/// the total energy.
pub fn energy_rank(s: &[f64], fraction: f64) -> Result<usize> {
    if s.is_empty() {
        return Err(XkvError::EmptySpectrum);
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(XkvError::InvalidConfig(format!("energy fraction {fraction} outside (0, 1]")));
    }
    let total: f64 = s.iter().map(|v| v * v).sum();
    let target = fraction * total;
    let mut acc = 0.0;
    for (i, v) in s.iter().enumerate() {
        acc += v * v;
        if acc >= target {
            return Ok(i + 1);
        }
    }
    Ok(s.len())
}
