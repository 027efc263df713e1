//! Exact storage accounting and rank selection for a target compression rate.

use serde::{Deserialize, Serialize};

use super::{CompressionPlan, Method};
use crate::error::{Result, XkvError};
use crate::kvdump::CacheMeta;

/// Stored element counts for both sides of the prompt cache.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StorageCount {
    pub original: u64,
    pub compressed: u64,
}

impl StorageCount {
    pub fn rate(&self) -> f64 {
        self.original as f64 / self.compressed as f64
    }
}

/// Element count of one SVD-compressed group: `L*r` for the shared basis
/// plus `r*G*d` for the per-layer reconstruction matrices.
pub fn svd_group_elements(seq_len: u64, group_size: u64, width: u64, rank: u64) -> u64 {
    seq_len * rank + rank * group_size * width
}

/// Element count of one SLERP-merged pair: a shared direction tensor plus
/// two per-token magnitude vectors.
pub fn slerp_pair_elements(seq_len: u64, width: u64) -> u64 {
    seq_len * width + 2 * seq_len
}

/// Closed-form storage for `plan` applied to a cache described by `meta`.
pub fn storage_elements(plan: &CompressionPlan, meta: &CacheMeta) -> Result<StorageCount> {
    let n = meta.num_layers as u64;
    let l = meta.seq_len as u64;
    let d = meta.width() as u64;
    let original = 2 * n * l * d;
    let compressed = match plan.method {
        Method::None => original,
        Method::Xkv | Method::SingleSvd => {
            let g = plan.effective_group_size() as u64;
            if g == 0 || !n.is_multiple_of(g) {
                return Err(XkvError::IndivisibleGrouping { num_layers: meta.num_layers, group_size: g as usize });
            }
            let groups = n / g;
            groups
                * (svd_group_elements(l, g, d, plan.key_rank as u64)
                    + svd_group_elements(l, g, d, plan.value_rank as u64))
        }
        Method::Slerp => {
            let start = plan.resolved_slerp_start(meta.num_layers)? as u64;
            let pairs = (n - start) / 2;
            2 * (start * l * d + pairs * slerp_pair_elements(l, d))
        }
    };
    Ok(StorageCount { original, compressed })
}

/// Ratio of original to compressed stored elements, using `meta.seq_len` as
/// the context length.
pub fn compression_rate(plan: &CompressionPlan, meta: &CacheMeta) -> Result<f64> {
    Ok(storage_elements(plan, meta)?.rate())
}

fn rate_at(meta: &CacheMeta, group_size: usize, key_rank: usize, kv_rank_ratio: f64) -> f64 {
    let n = meta.num_layers as u64;
    let (l, d, g) = (meta.seq_len as u64, meta.width() as u64, group_size as u64);
    let value_rank = value_rank_for(key_rank, kv_rank_ratio) as u64;
    let original = 2 * n * l * d;
    let compressed = (n / g) * (svd_group_elements(l, g, d, key_rank as u64) + svd_group_elements(l, g, d, value_rank));
    original as f64 / compressed as f64
}

/// Value rank paired with a key rank under the fixed key:value ratio (at least 1).
pub fn value_rank_for(key_rank: usize, kv_rank_ratio: f64) -> usize {
    ((kv_rank_ratio * key_rank as f64).round() as usize).max(1)
}

/// Largest uniform `(key_rank, value_rank)` whose compression rate still
/// reaches `target_rate`, with `value_rank = round(kv_rank_ratio * key_rank)`.
/// Both ranks are capped at `min(L, G * d)`.
pub fn rank_for_rate(
    target_rate: f64,
    meta: &CacheMeta,
    group_size: usize,
    kv_rank_ratio: f64,
) -> Result<(usize, usize)> {
    if group_size == 0 || !meta.num_layers.is_multiple_of(group_size) {
        return Err(XkvError::IndivisibleGrouping { num_layers: meta.num_layers, group_size });
    }
    if !(kv_rank_ratio.is_finite() && kv_rank_ratio > 0.0) {
        return Err(XkvError::InvalidConfig(format!("kv_rank_ratio {kv_rank_ratio} must be positive")));
    }
    let max_rate = rate_at(meta, group_size, 1, kv_rank_ratio);
    if !target_rate.is_finite() || target_rate < 1.0 || target_rate > max_rate {
        return Err(XkvError::Unachievable { target: target_rate, max_rate });
    }
    let limit = meta.seq_len.min(group_size * meta.width());
    let feasible = |rk: usize| rk <= limit && value_rank_for(rk, kv_rank_ratio) <= limit;
    if !feasible(1) {
        return Err(XkvError::Unachievable { target: target_rate, max_rate });
    }
    // Rate is non-increasing in the key rank, so binary search the boundary.
    let (mut lo, mut hi) = (1usize, limit);
    while !feasible(hi) {
        hi -= 1;
    }
    while lo < hi {
        let mid = lo + (hi - lo).div_ceil(2);
        if rate_at(meta, group_size, mid, kv_rank_ratio) >= target_rate {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    Ok((lo, value_rank_for(lo, kv_rank_ratio)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kvdump::{Dtype, LAYOUT_TAG};

    fn meta(n: usize, heads: usize, l: usize) -> CacheMeta {
        CacheMeta {
            model_id: "m".into(),
            num_layers: n,
            num_kv_heads: heads,
            head_dim: 128,
            seq_len: l,
            dtype: Dtype::F16,
            keys_pre_rope: true,
            rope_base: 10000.0,
            layout: LAYOUT_TAG.into(),
        }
    }

    #[test]
    fn none_is_unity() {
        assert_eq!(compression_rate(&CompressionPlan::none(), &meta(32, 8, 65536)).unwrap(), 1.0);
    }

    #[test]
    fn xkv_rate_by_element_counting() {
        let m = meta(32, 8, 65536);
        let plan = CompressionPlan::xkv(4, 256, 256);
        // Literal shapes: per group and side, A is 65536x256 and four B's are 256x1024.
        let per_side_group = 65536u64 * 256 + 4 * 256 * 1024;
        let expected = (2 * 32 * 65536 * 1024u64) as f64 / (2 * 8 * per_side_group) as f64;
        assert_eq!(compression_rate(&plan, &m).unwrap(), expected);
    }

    #[test]
    fn half_depth_slerp_rate() {
        let m = meta(32, 8, 65536);
        let rate = compression_rate(&CompressionPlan::slerp(None, 0.5), &m).unwrap();
        let (l, d) = (65536u64, 1024u64);
        let expected = (32 * l * d) as f64 / (16 * l * d + 8 * (l * d + 2 * l)) as f64;
        assert_eq!(rate, expected);
        assert!((rate - 32.0 / 24.0).abs() < 1e-3);
    }

    #[test]
    fn rank_for_rate_matches_scan() {
        let m = meta(32, 8, 65536);
        let (rk, rv) = rank_for_rate(8.0, &m, 4, 1.5).unwrap();
        let scan = (1..=1024usize).filter(|&r| rate_at(&m, 4, r, 1.5) >= 8.0).max().unwrap();
        assert_eq!(rk, scan);
        assert_eq!(rv, value_rank_for(rk, 1.5));
        assert!(rate_at(&m, 4, rk + 1, 1.5) < 8.0);
    }

    #[test]
    fn rank_for_rate_boundaries() {
        let m = meta(32, 8, 65536);
        let max = rate_at(&m, 4, 1, 1.5);
        assert!(matches!(rank_for_rate(max * 1.01, &m, 4, 1.5), Err(XkvError::Unachievable { .. })));
        assert!(matches!(rank_for_rate(0.5, &m, 4, 1.5), Err(XkvError::Unachievable { .. })));
        let (rk, _) = rank_for_rate(1.0 + 1e-9, &m, 4, 1.5).unwrap();
        // Near-maximal: rank is within a few percent of where storage breaks even.
        assert!(rk > 1000, "{rk}");
        assert!(matches!(rank_for_rate(2.0, &m, 3, 1.5), Err(XkvError::IndivisibleGrouping { .. })));
    }
}
