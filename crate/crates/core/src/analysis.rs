//! Cross-layer similarity diagnostics: token-wise cosine similarity, linear
//! CKA (three algebraically equivalent evaluations), and the energy rank of
//! horizontally concatenated layer groups.

use serde::{Deserialize, Serialize};

use crate::compress::stride_groups;
use crate::error::{Result, XkvError};
use crate::kvdump::{check_finite, CacheDump, Side};
use crate::linalg::{center_rows, energy_rank, hcat, singular_values, svd_truncated, Matrix, DEFAULT_EXACT_THRESHOLD};

/// Row cap for [`cka_gram`], which materializes `n x n` Gram matrices.
pub const DEFAULT_GRAM_CAP: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityKind {
    Cosine,
    Cka,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub kind: SimilarityKind,
    pub cache_side: Side,
    /// Row-major `N x N`.
    pub values: Vec<Vec<f64>>,
}

impl SimilarityMatrix {
    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.values[a][b]
    }

    /// CSV with layer indices as row and column headers.
    pub fn to_csv(&self) -> String {
        let n = self.values.len();
        let mut out = String::from("layer");
        for j in 0..n {
            out.push_str(&format!(",{j}"));
        }
        out.push('\n');
        for (i, row) in self.values.iter().enumerate() {
            out.push_str(&i.to_string());
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

fn check_pair(x1: &Matrix, x2: &Matrix) -> Result<()> {
    if x1.nrows() != x2.nrows() {
        return Err(XkvError::ShapeMismatch(format!("row counts differ: {} vs {}", x1.nrows(), x2.nrows())));
    }
    check_finite(x1, "CKA input")?;
    check_finite(x2, "CKA input")
}

fn normalized(num: f64, a: f64, b: f64) -> Result<f64> {
    let den = (a * b).sqrt();
    if den == 0.0 {
        return Err(XkvError::ZeroVariance);
    }
    Ok(num / den)
}

/// CKA evaluated literally from centered `n x n` Gram matrices.
pub fn cka_gram(x1: &Matrix, x2: &Matrix) -> Result<f64> {
    cka_gram_capped(x1, x2, DEFAULT_GRAM_CAP)
}

pub fn cka_gram_capped(x1: &Matrix, x2: &Matrix, cap: usize) -> Result<f64> {
    check_pair(x1, x2)?;
    let n = x1.nrows();
    if n > cap {
        return Err(XkvError::GramTooLarge { rows: n, cap });
    }
    let h = Matrix::identity(n, n) - Matrix::from_element(n, n, 1.0 / n as f64);
    let g1 = &h * (x1 * x1.transpose()) * &h;
    let g2 = &h * (x2 * x2.transpose()) * &h;
    // trace(AB) for symmetric A, B is the elementwise dot product.
    normalized(g1.dot(&g2), g1.dot(&g1), g2.dot(&g2))
}

/// CKA through feature-space cross-covariances: `trace(G1 G2) = ||X1c^T X2c||_F^2`.
/// Works at any sequence length.
pub fn cka_feature(x1: &Matrix, x2: &Matrix) -> Result<f64> {
    check_pair(x1, x2)?;
    let c1 = center_rows(x1);
    let c2 = center_rows(x2);
    let cross = c1.tr_mul(&c2).norm_squared();
    let self1 = c1.tr_mul(&c1).norm_squared();
    let self2 = c2.tr_mul(&c2).norm_squared();
    normalized(cross, self1, self2)
}

/// CKA as a spectrum-weighted overlap of left singular vectors:
/// `sum_ij s1_i^2 s2_j^2 (u1_i . u2_j)^2 / sqrt(sum s1^4 * sum s2^4)`.
pub fn cka_svd_overlap(x1: &Matrix, x2: &Matrix) -> Result<f64> {
    check_pair(x1, x2)?;
    let thin = |x: &Matrix| -> Result<(Matrix, Vec<f64>)> {
        let c = center_rows(x);
        let r = c.nrows().min(c.ncols());
        let svd = svd_truncated(&c, r)?;
        let w = svd.s.iter().map(|s| s * s).collect();
        Ok((svd.u, w))
    };
    let (u1, w1) = thin(x1)?;
    let (u2, w2) = thin(x2)?;
    let overlap = u1.tr_mul(&u2);
    let mut num = 0.0;
    for (i, a) in w1.iter().enumerate() {
        for (j, b) in w2.iter().enumerate() {
            let o = overlap[(i, j)];
            num += a * b * o * o;
        }
    }
    let sq = |w: &[f64]| w.iter().map(|v| v * v).sum::<f64>();
    normalized(num, sq(&w1), sq(&w2))
}

fn check_uniform(dump: &CacheDump) -> Result<()> {
    let shape = dump.layers.first().map(|l| l.k.shape());
    if dump.layers.iter().any(|l| Some(l.k.shape()) != shape || Some(l.v.shape()) != shape) {
        return Err(XkvError::ShapeMismatch("layers differ in shape".into()));
    }
    Ok(())
}

/// Mean over tokens of the per-token cosine similarity. Zero-norm rows
/// contribute 0.
pub fn mean_token_cosine(a: &Matrix, b: &Matrix) -> f64 {
    let n = a.nrows();
    let mut total = 0.0;
    for t in 0..n {
        let ra = a.row(t);
        let rb = b.row(t);
        let (na, nb) = (ra.norm(), rb.norm());
        if na > 0.0 && nb > 0.0 {
            total += ra.dot(&rb) / (na * nb);
        }
    }
    total / n as f64
}

fn pairwise(
    dump: &CacheDump,
    side: Side,
    kind: SimilarityKind,
    f: impl Fn(&Matrix, &Matrix) -> Result<f64> + Sync,
) -> Result<SimilarityMatrix> {
    check_uniform(dump)?;
    let mats = dump.side_matrices(side);
    let n = mats.len();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).collect();
    let eval = |&(i, j): &(usize, usize)| -> Result<f64> { f(mats[i], mats[j]) };
    #[cfg(feature = "parallel")]
    let computed: Vec<Result<f64>> = {
        use rayon::prelude::*;
        pairs.par_iter().map(eval).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let computed: Vec<Result<f64>> = pairs.iter().map(eval).collect();
    let mut values = vec![vec![0.0; n]; n];
    for (&(i, j), v) in pairs.iter().zip(computed) {
        let v = v?;
        values[i][j] = v;
        values[j][i] = v;
    }
    Ok(SimilarityMatrix { kind, cache_side: side, values })
}

pub fn cosine_similarity_matrix(dump: &CacheDump, side: Side) -> Result<SimilarityMatrix> {
    pairwise(dump, side, SimilarityKind::Cosine, |a, b| Ok(mean_token_cosine(a, b)))
}

pub fn cka_matrix(dump: &CacheDump, side: Side) -> Result<SimilarityMatrix> {
    pairwise(dump, side, SimilarityKind::Cka, cka_feature)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankCurve {
    pub group_sizes: Vec<usize>,
    pub key_ratio: Vec<f64>,
    pub value_ratio: Vec<f64>,
    pub energy_fraction: f64,
    /// Trailing layers left out per group size when it does not divide N.
    pub dropped_layers: Vec<usize>,
}

impl RankCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("group_size,key_ratio,value_ratio,dropped_layers\n");
        for i in 0..self.group_sizes.len() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                self.group_sizes[i], self.key_ratio[i], self.value_ratio[i], self.dropped_layers[i]
            ));
        }
        out
    }
}

/// Energy rank of one concatenated group, as a fraction of its total width.
pub fn group_rank_ratio(mats: &[&Matrix], energy_fraction: f64) -> Result<f64> {
    let concat = hcat(mats);
    let s = singular_values(&concat, DEFAULT_EXACT_THRESHOLD)?;
    let k = energy_rank(&s, energy_fraction)?;
    Ok(k as f64 / concat.ncols() as f64)
}

/// Mean energy-rank ratio over stride groups, for each group size and side.
pub fn rank_curve(dump: &CacheDump, group_sizes: &[usize], energy_fraction: f64) -> Result<RankCurve> {
    check_uniform(dump)?;
    let n = dump.layers.len();
    let mut curve = RankCurve {
        group_sizes: group_sizes.to_vec(),
        key_ratio: Vec::with_capacity(group_sizes.len()),
        value_ratio: Vec::with_capacity(group_sizes.len()),
        energy_fraction,
        dropped_layers: Vec::with_capacity(group_sizes.len()),
    };
    for &g in group_sizes {
        if g == 0 || g > n {
            return Err(XkvError::InvalidConfig(format!("group size {g} invalid for {n} layers")));
        }
        let covered = n - n % g;
        let groups = stride_groups(covered, g)?;
        for side in Side::BOTH {
            let mats = dump.side_matrices(side);
            let mut sum = 0.0;
            for group in &groups {
                let members: Vec<&Matrix> = group.indices.iter().map(|&i| mats[i]).collect();
                sum += group_rank_ratio(&members, energy_fraction)?;
            }
            let mean = sum / groups.len() as f64;
            match side {
                Side::Key => curve.key_ratio.push(mean),
                Side::Value => curve.value_ratio.push(mean),
            }
        }
        curve.dropped_layers.push(n % g);
    }
    Ok(curve)
}
