//! Per-token spherical interpolation merge of adjacent layers.

use serde::{Deserialize, Serialize};

use crate::kvdump::Side;
use crate::linalg::Matrix;

/// Angles below this fall back to normalized linear interpolation.
pub const MIN_ANGLE: f64 = 1e-6;
/// Angles are capped at `PI - MAX_ANGLE_GAP` so `sin(theta)` stays nonzero.
pub const MAX_ANGLE_GAP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlerpMerged {
    pub side: Side,
    pub pair: (usize, usize),
    /// Unit-norm rows, except rows listed in `degenerate_rows` which are zero.
    #[serde(skip)]
    pub merged_dir: Matrix,
    #[serde(skip)]
    pub mag_a: Vec<f64>,
    #[serde(skip)]
    pub mag_b: Vec<f64>,
    pub t: f64,
    /// Tokens where a direction could not be formed (a zero-norm input, or
    /// antipodal inputs interpolated to the zero vector).
    pub degenerate_rows: Vec<usize>,
}

impl SlerpMerged {
    pub fn reconstruct_a(&self) -> Matrix {
        scale_rows(&self.merged_dir, &self.mag_a)
    }

    pub fn reconstruct_b(&self) -> Matrix {
        scale_rows(&self.merged_dir, &self.mag_b)
    }
}

fn scale_rows(dir: &Matrix, mags: &[f64]) -> Matrix {
    let mut out = dir.clone();
    for (mut row, m) in out.row_iter_mut().zip(mags) {
        row *= *m;
    }
    out
}

/// Interpolates between unit vectors `ua` and `ub` at fraction `t`.
/// Returns `None` when the result has no usable direction.
pub fn slerp_unit(ua: &[f64], ub: &[f64], t: f64) -> Option<Vec<f64>> {
    let cos = ua.iter().zip(ub).map(|(a, b)| a * b).sum::<f64>().clamp(-1.0, 1.0);
    let theta = cos.acos();
    let mixed: Vec<f64> = if theta < MIN_ANGLE {
        ua.iter().zip(ub).map(|(a, b)| (1.0 - t) * a + t * b).collect()
    } else {
        let theta = theta.min(std::f64::consts::PI - MAX_ANGLE_GAP);
        let sin = theta.sin();
        let wa = ((1.0 - t) * theta).sin() / sin;
        let wb = (t * theta).sin() / sin;
        ua.iter().zip(ub).map(|(a, b)| wa * a + wb * b).collect()
    };
    let norm = mixed.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-12 || !norm.is_finite() {
        return None;
    }
    Some(mixed.into_iter().map(|x| x / norm).collect())
}

/// Merges layers `a` and `b` token by token, keeping per-token magnitudes.
pub fn merge_pair(side: Side, pair: (usize, usize), xa: &Matrix, xb: &Matrix, t: f64) -> SlerpMerged {
    let (rows, cols) = xa.shape();
    let mut merged_dir = Matrix::zeros(rows, cols);
    let mut mag_a = Vec::with_capacity(rows);
    let mut mag_b = Vec::with_capacity(rows);
    let mut degenerate_rows = Vec::new();
    for r in 0..rows {
        let ra: Vec<f64> = xa.row(r).iter().copied().collect();
        let rb: Vec<f64> = xb.row(r).iter().copied().collect();
        let na = ra.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = rb.iter().map(|x| x * x).sum::<f64>().sqrt();
        mag_a.push(na);
        mag_b.push(nb);
        if na == 0.0 || nb == 0.0 {
            degenerate_rows.push(r);
            continue;
        }
        let ua: Vec<f64> = ra.iter().map(|x| x / na).collect();
        let ub: Vec<f64> = rb.iter().map(|x| x / nb).collect();
        match slerp_unit(&ua, &ub, t) {
            Some(dir) => {
                for (c, v) in dir.into_iter().enumerate() {
                    merged_dir[(r, c)] = v;
                }
            }
            None => degenerate_rows.push(r),
        }
    }
    SlerpMerged { side, pair, merged_dir, mag_a, mag_b, t, degenerate_rows }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_directions_are_fixed_points() {
        let u = [0.6, 0.8, 0.0];
        let out = slerp_unit(&u, &u, 0.3).unwrap();
        for (a, b) in out.iter().zip(&u) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn endpoints() {
        let a = [1.0, 0.0];
        let b = [0.0, 1.0];
        let at0 = slerp_unit(&a, &b, 0.0).unwrap();
        let at1 = slerp_unit(&a, &b, 1.0).unwrap();
        assert!((at0[0] - 1.0).abs() < 1e-12 && at0[1].abs() < 1e-12);
        assert!((at1[1] - 1.0).abs() < 1e-12 && at1[0].abs() < 1e-12);
        let mid = slerp_unit(&a, &b, 0.5).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((mid[0] - h).abs() < 1e-12 && (mid[1] - h).abs() < 1e-12);
    }

    #[test]
    fn near_antipodal_matches_formula() {
        let theta = std::f64::consts::PI - 1e-3;
        let a = [1.0, 0.0];
        let b = [theta.cos(), theta.sin()];
        let t = 0.5;
        let out = slerp_unit(&a, &b, t).unwrap();
        // Direct evaluation of the great-circle formula.
        let wa = ((1.0 - t) * theta).sin() / theta.sin();
        let wb = (t * theta).sin() / theta.sin();
        let direct = [wa * a[0] + wb * b[0], wa * a[1] + wb * b[1]];
        let norm = (direct[0] * direct[0] + direct[1] * direct[1]).sqrt();
        assert!((out[0] - direct[0] / norm).abs() < 1e-9);
        assert!((out[1] - direct[1] / norm).abs() < 1e-9);
        // Exactly antipodal midpoint has no direction; it is flagged, not NaN.
        assert!(slerp_unit(&a, &[-1.0, 0.0], 0.5).is_none());
        let skewed = slerp_unit(&a, &[-1.0, 0.0], 0.25).unwrap();
        assert!(skewed.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn zero_rows_are_flagged() {
        let xa = Matrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let xb = Matrix::from_row_slice(2, 2, &[0.0, 2.0, 1.0, 1.0]);
        let m = merge_pair(Side::Key, (0, 1), &xa, &xb, 0.5);
        assert_eq!(m.degenerate_rows, vec![1]);
        assert_eq!(m.merged_dir.row(1).norm(), 0.0);
        assert!((m.merged_dir.row(0).norm() - 1.0).abs() < 1e-12);
    }
}
