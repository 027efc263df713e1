//! Compression engines: stride grouping, cross-layer SVD, the single-layer
//! SVD baseline, SLERP layer merging, and reconstruction.
//!
//! For a group of `G` adjacent layers the cross-layer SVD factorizes the
//! horizontal concatenation `[X_1, ..., X_G]` (`L x G*d`) at rank `r` and
//! stores `A = U_r S_r` (`L x r`) once, plus one `B_i` (`r x d`) per layer
//! taken as column blocks of `V_r^T`. Layer `i` is reconstructed as `A B_i`.

pub mod codec;
pub mod rate;
pub mod slerp;

use serde::{Deserialize, Serialize};

use crate::error::{Result, XkvError};
use crate::kvdump::{CacheDump, CacheMeta, LayerCache, Side};
use crate::linalg::{hcat, svd_auto, Matrix, SvdPolicy};

pub use rate::{compression_rate, rank_for_rate, storage_elements, value_rank_for, StorageCount};
pub use slerp::SlerpMerged;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Xkv,
    SingleSvd,
    Slerp,
    None,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Xkv => "xkv",
            Method::SingleSvd => "single_svd",
            Method::Slerp => "slerp",
            Method::None => "none",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = XkvError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "xkv" => Ok(Method::Xkv),
            "single_svd" | "single-svd" => Ok(Method::SingleSvd),
            "slerp" => Ok(Method::Slerp),
            "none" => Ok(Method::None),
            other => Err(XkvError::InvalidPlan(format!("unknown method {other:?}"))),
        }
    }
}

pub const DEFAULT_KV_RANK_RATIO: f64 = 1.5;

fn default_kv_rank_ratio() -> f64 {
    DEFAULT_KV_RANK_RATIO
}

fn default_slerp_t() -> f64 {
    0.5
}

/// Everything that determines a compression run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionPlan {
    pub method: Method,
    pub group_size: usize,
    pub key_rank: usize,
    pub value_rank: usize,
    #[serde(default = "default_kv_rank_ratio")]
    pub kv_rank_ratio: f64,
    #[serde(default = "default_slerp_t")]
    pub slerp_t: f64,
    /// First merged layer; `None` means the middle layer (adjusted so the
    /// merged region has even size).
    #[serde(default)]
    pub slerp_start_layer: Option<usize>,
    #[serde(default)]
    pub svd: SvdPolicy,
    #[serde(default)]
    pub seed: u64,
}

impl CompressionPlan {
    fn base(method: Method) -> Self {
        Self {
            method,
            group_size: 1,
            key_rank: 0,
            value_rank: 0,
            kv_rank_ratio: DEFAULT_KV_RANK_RATIO,
            slerp_t: 0.5,
            slerp_start_layer: None,
            svd: SvdPolicy::default(),
            seed: 0,
        }
    }

    pub fn none() -> Self {
        Self::base(Method::None)
    }

    pub fn xkv(group_size: usize, key_rank: usize, value_rank: usize) -> Self {
        Self { group_size, key_rank, value_rank, ..Self::base(Method::Xkv) }
    }

    pub fn single_svd(key_rank: usize, value_rank: usize) -> Self {
        Self { key_rank, value_rank, ..Self::base(Method::SingleSvd) }
    }

    pub fn slerp(start_layer: Option<usize>, t: f64) -> Self {
        Self { slerp_start_layer: start_layer, slerp_t: t, ..Self::base(Method::Slerp) }
    }

    /// SVD plan whose uniform ranks are the largest meeting `target_rate`.
    pub fn for_target_rate(
        method: Method,
        group_size: usize,
        target_rate: f64,
        meta: &CacheMeta,
        kv_rank_ratio: f64,
    ) -> Result<Self> {
        let g = match method {
            Method::Xkv => group_size,
            Method::SingleSvd => 1,
            _ => return Err(XkvError::InvalidPlan(format!("{} has no ranks to derive", method.name()))),
        };
        let (key_rank, value_rank) = rank_for_rate(target_rate, meta, g, kv_rank_ratio)?;
        Ok(Self { group_size: g, key_rank, value_rank, kv_rank_ratio, ..Self::base(method) })
    }

    pub fn effective_group_size(&self) -> usize {
        match self.method {
            Method::SingleSvd => 1,
            _ => self.group_size,
        }
    }

    pub fn rank(&self, side: Side) -> usize {
        match side {
            Side::Key => self.key_rank,
            Side::Value => self.value_rank,
        }
    }

    /// Start of the merged region for `num_layers` layers.
    pub fn resolved_slerp_start(&self, num_layers: usize) -> Result<usize> {
        let start = match self.slerp_start_layer {
            Some(s) => s,
            None => num_layers - 2 * ((num_layers - num_layers / 2) / 2),
        };
        if start > num_layers || !(num_layers - start).is_multiple_of(2) {
            return Err(XkvError::InvalidPlan(format!(
                "merged region from layer {start} of {num_layers} must have even size"
            )));
        }
        Ok(start)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerGroup {
    pub indices: Vec<usize>,
}

/// Partitions `0..num_layers` into contiguous runs of `group_size`.
pub fn stride_groups(num_layers: usize, group_size: usize) -> Result<Vec<LayerGroup>> {
    if group_size == 0 || !num_layers.is_multiple_of(group_size) {
        return Err(XkvError::IndivisibleGrouping { num_layers, group_size });
    }
    Ok((0..num_layers / group_size)
        .map(|k| LayerGroup { indices: (k * group_size..(k + 1) * group_size).collect() })
        .collect())
}

/// Shared basis plus per-layer reconstruction matrices for one group.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedGroup {
    pub side: Side,
    pub group: LayerGroup,
    /// `L x r`, the left singular vectors scaled by their singular values.
    pub a: Matrix,
    /// One `r x d` block per layer in the group.
    pub b: Vec<Matrix>,
    pub rank: usize,
}

impl CompressedGroup {
    pub fn reconstruct_layer(&self, position: usize) -> Matrix {
        &self.a * &self.b[position]
    }
}

/// One stored unit of a compressed side.
#[derive(Debug, Clone, PartialEq)]
pub enum Segment {
    Svd(CompressedGroup),
    Slerp(SlerpMerged),
    Raw { side: Side, layer: usize, data: Matrix },
}

impl Segment {
    pub fn layers(&self) -> Vec<usize> {
        match self {
            Segment::Svd(g) => g.group.indices.clone(),
            Segment::Slerp(m) => vec![m.pair.0, m.pair.1],
            Segment::Raw { layer, .. } => vec![*layer],
        }
    }

    pub fn stored_elements(&self) -> u64 {
        match self {
            Segment::Svd(g) => (g.a.len() + g.b.iter().map(|b| b.len()).sum::<usize>()) as u64,
            Segment::Slerp(m) => (m.merged_dir.len() + m.mag_a.len() + m.mag_b.len()) as u64,
            Segment::Raw { data, .. } => data.len() as u64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedDump {
    pub meta: CacheMeta,
    pub plan: CompressionPlan,
    pub key_groups: Vec<Segment>,
    pub value_groups: Vec<Segment>,
    /// Decode-phase tokens, never compressed.
    pub tail: Vec<LayerCache>,
}

impl CompressedDump {
    pub fn segments(&self, side: Side) -> &[Segment] {
        match side {
            Side::Key => &self.key_groups,
            Side::Value => &self.value_groups,
        }
    }

    /// Elements held by the compressed prompt region (tail excluded).
    pub fn stored_elements(&self) -> u64 {
        self.key_groups.iter().chain(&self.value_groups).map(Segment::stored_elements).sum()
    }
}

fn group_seed(seed: u64, group: usize, side: Side) -> u64 {
    let side_bit = matches!(side, Side::Value) as u64;
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(2 * group as u64 + side_bit)
}

/// Cross-layer SVD of one group of layer matrices.
pub fn compress_group(
    side: Side,
    group: &LayerGroup,
    mats: &[&Matrix],
    rank: usize,
    policy: &SvdPolicy,
    seed: u64,
) -> Result<CompressedGroup> {
    let d = mats[0].ncols();
    let concat = hcat(mats);
    let svd = svd_auto(&concat, rank, policy, seed)?;
    let a = svd.scaled_u();
    let b = (0..mats.len()).map(|i| svd.vt.columns(i * d, d).into_owned()).collect();
    Ok(CompressedGroup { side, group: group.clone(), a, b, rank: svd.rank() })
}

fn check_svd_plan(dump: &CacheDump, plan: &CompressionPlan) -> Result<usize> {
    if !matches!(plan.method, Method::Xkv | Method::SingleSvd) {
        return Err(XkvError::InvalidPlan(format!("{} is not an SVD method", plan.method.name())));
    }
    if !dump.meta.keys_pre_rope {
        return Err(XkvError::KeysNotPreRope);
    }
    let g = plan.effective_group_size();
    if g == 0 || !dump.meta.num_layers.is_multiple_of(g) {
        return Err(XkvError::IndivisibleGrouping { num_layers: dump.meta.num_layers, group_size: g });
    }
    let limit = dump.meta.seq_len.min(g * dump.meta.width());
    if plan.key_rank == 0 || plan.value_rank == 0 || plan.key_rank > limit || plan.value_rank > limit {
        return Err(XkvError::RanksExceedDims { key_rank: plan.key_rank, value_rank: plan.value_rank, limit });
    }
    Ok(g)
}

fn svd_compress(dump: &CacheDump, plan: &CompressionPlan) -> Result<CompressedDump> {
    let g = check_svd_plan(dump, plan)?;
    let groups = stride_groups(dump.meta.num_layers, g)?;
    let mut sides = Vec::with_capacity(2);
    for side in Side::BOTH {
        let mats = dump.side_matrices(side);
        let rank = plan.rank(side);
        let run = |(gi, group): (usize, &LayerGroup)| -> Result<Segment> {
            let members: Vec<&Matrix> = group.indices.iter().map(|&i| mats[i]).collect();
            compress_group(side, group, &members, rank, &plan.svd, group_seed(plan.seed, gi, side)).map(Segment::Svd)
        };
        #[cfg(feature = "parallel")]
        let segments: Result<Vec<Segment>> = {
            use rayon::prelude::*;
            groups.par_iter().enumerate().map(run).collect()
        };
        #[cfg(not(feature = "parallel"))]
        let segments: Result<Vec<Segment>> = groups.iter().enumerate().map(run).collect();
        sides.push(segments?);
    }
    let value_groups = sides.pop().unwrap_or_default();
    let key_groups = sides.pop().unwrap_or_default();
    Ok(CompressedDump {
        meta: dump.meta.clone(),
        plan: plan.clone(),
        key_groups,
        value_groups,
        tail: dump.tail.clone(),
    })
}

/// Cross-layer SVD over stride groups of `plan.group_size` layers, keys and
/// values independently. Keys must be pre-RoPE.
pub fn xkv_compress(dump: &CacheDump, plan: &CompressionPlan) -> Result<CompressedDump> {
    if plan.method != Method::Xkv {
        return Err(XkvError::InvalidPlan(format!("expected xkv, got {}", plan.method.name())));
    }
    svd_compress(dump, plan)
}

/// Per-layer truncated SVD: the group-size-one case of [`xkv_compress`].
pub fn single_svd_compress(dump: &CacheDump, plan: &CompressionPlan) -> Result<CompressedDump> {
    let plan = CompressionPlan { method: Method::SingleSvd, group_size: 1, ..plan.clone() };
    svd_compress(dump, &plan)
}

/// Merges consecutive layer pairs from the start layer to the end; earlier
/// layers are stored verbatim.
pub fn slerp_merge(dump: &CacheDump, plan: &CompressionPlan) -> Result<CompressedDump> {
    if !(0.0..=1.0).contains(&plan.slerp_t) {
        return Err(XkvError::InvalidPlan(format!("slerp_t {} outside [0, 1]", plan.slerp_t)));
    }
    let n = dump.meta.num_layers;
    let start = plan.resolved_slerp_start(n)?;
    let plan = CompressionPlan { method: Method::Slerp, slerp_start_layer: Some(start), ..plan.clone() };
    let mut per_side = Vec::with_capacity(2);
    for side in Side::BOTH {
        let mats = dump.side_matrices(side);
        let mut segments: Vec<Segment> =
            (0..start).map(|i| Segment::Raw { side, layer: i, data: mats[i].clone() }).collect();
        for a in (start..n).step_by(2) {
            let merged = slerp::merge_pair(side, (a, a + 1), mats[a], mats[a + 1], plan.slerp_t);
            segments.push(Segment::Slerp(merged));
        }
        per_side.push(segments);
    }
    let value_groups = per_side.pop().unwrap_or_default();
    let key_groups = per_side.pop().unwrap_or_default();
    Ok(CompressedDump { meta: dump.meta.clone(), plan, key_groups, value_groups, tail: dump.tail.clone() })
}

fn passthrough(dump: &CacheDump, plan: &CompressionPlan) -> CompressedDump {
    let raw = |side: Side| -> Vec<Segment> {
        dump.layers.iter().map(|l| Segment::Raw { side, layer: l.layer_index, data: l.side(side).clone() }).collect()
    };
    CompressedDump {
        meta: dump.meta.clone(),
        plan: plan.clone(),
        key_groups: raw(Side::Key),
        value_groups: raw(Side::Value),
        tail: dump.tail.clone(),
    }
}

/// Dispatches on `plan.method`.
pub fn compress(dump: &CacheDump, plan: &CompressionPlan) -> Result<CompressedDump> {
    dump.validate()?;
    match plan.method {
        Method::Xkv => xkv_compress(dump, plan),
        Method::SingleSvd => single_svd_compress(dump, plan),
        Method::Slerp => slerp_merge(dump, plan),
        Method::None => Ok(passthrough(dump, plan)),
    }
}

/// Rebuilds a full cache from its compressed form. The tail passes through.
pub fn reconstruct(cd: &CompressedDump) -> CacheDump {
    let (l, d) = (cd.meta.seq_len, cd.meta.width());
    let mut layers: Vec<LayerCache> = (0..cd.meta.num_layers)
        .map(|i| LayerCache { layer_index: i, k: Matrix::zeros(l, d), v: Matrix::zeros(l, d) })
        .collect();
    for side in Side::BOTH {
        for segment in cd.segments(side) {
            match segment {
                Segment::Svd(g) => {
                    for (pos, &layer) in g.group.indices.iter().enumerate() {
                        *layers[layer].side_mut(side) = g.reconstruct_layer(pos);
                    }
                }
                Segment::Slerp(m) => {
                    *layers[m.pair.0].side_mut(side) = m.reconstruct_a();
                    *layers[m.pair.1].side_mut(side) = m.reconstruct_b();
                }
                Segment::Raw { layer, data, .. } => *layers[*layer].side_mut(side) = data.clone(),
            }
        }
    }
    CacheDump { meta: cd.meta.clone(), layers, tail: cd.tail.clone(), queries: None }
}

/// Relative Frobenius error `||x - y|| / ||x||` (0 when both are zero).
pub fn relative_error(original: &Matrix, approx: &Matrix) -> f64 {
    let denom = original.norm();
    let diff = (original - approx).norm();
    if denom == 0.0 {
        if diff == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        diff / denom
    }
}

/// Per-layer relative reconstruction errors for one side.
pub fn layer_errors(original: &CacheDump, rebuilt: &CacheDump, side: Side) -> Vec<f64> {
    original.layers.iter().zip(&rebuilt.layers).map(|(a, b)| relative_error(a.side(side), b.side(side))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kvdump::{synth_dump, SynthConfig};

    fn dump(alignment: f64, noise: f64) -> CacheDump {
        synth_dump(&SynthConfig {
            num_layers: 8,
            seq_len: 96,
            num_kv_heads: 2,
            head_dim: 8,
            shared_rank: 6,
            private_rank: 3,
            noise,
            alignment,
            seed: 3,
            tail_len: 4,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn stride_grouping() {
        let groups = stride_groups(8, 4).unwrap();
        assert_eq!(groups[0].indices, vec![0, 1, 2, 3]);
        assert_eq!(groups[1].indices, vec![4, 5, 6, 7]);
        assert_eq!(stride_groups(4, 1).unwrap().len(), 4);
        assert!(matches!(stride_groups(6, 4), Err(XkvError::IndivisibleGrouping { .. })));
    }

    #[test]
    fn none_round_trips() {
        let d = dump(0.8, 0.05);
        let cd = compress(&d, &CompressionPlan::none()).unwrap();
        let mut rebuilt = reconstruct(&cd);
        rebuilt.queries = d.queries.clone();
        assert_eq!(rebuilt, d);
    }

    #[test]
    fn full_rank_is_lossless() {
        let d = dump(0.7, 0.1);
        let limit = d.meta.seq_len.min(4 * d.meta.width());
        let cd = compress(&d, &CompressionPlan::xkv(4, limit, limit)).unwrap();
        let rebuilt = reconstruct(&cd);
        for side in Side::BOTH {
            for e in layer_errors(&d, &rebuilt, side) {
                assert!(e <= 1e-8, "{e}");
            }
        }
        assert_eq!(rebuilt.tail, d.tail);
    }

    #[test]
    fn b_rows_are_orthonormal() {
        let d = dump(0.8, 0.05);
        let cd = compress(&d, &CompressionPlan::xkv(4, 10, 15)).unwrap();
        for seg in cd.key_groups.iter().chain(&cd.value_groups) {
            let Segment::Svd(g) = seg else { panic!("expected svd segment") };
            let refs: Vec<&Matrix> = g.b.iter().collect();
            let b = hcat(&refs);
            let gram = &b * b.transpose();
            assert!((gram - Matrix::identity(g.rank, g.rank)).amax() < 1e-8);
        }
    }

    #[test]
    fn group_size_one_matches_single_svd() {
        let d = dump(0.8, 0.05);
        let a = compress(&d, &CompressionPlan::xkv(1, 5, 8)).unwrap();
        let b = compress(&d, &CompressionPlan::single_svd(5, 8)).unwrap();
        assert_eq!(a.key_groups, b.key_groups);
        assert_eq!(a.value_groups, b.value_groups);
    }

    #[test]
    fn plan_errors() {
        let mut d = dump(0.8, 0.05);
        assert!(matches!(compress(&d, &CompressionPlan::xkv(3, 4, 4)), Err(XkvError::IndivisibleGrouping { .. })));
        assert!(matches!(compress(&d, &CompressionPlan::xkv(4, 97, 4)), Err(XkvError::RanksExceedDims { .. })));
        d.meta.keys_pre_rope = false;
        assert!(matches!(compress(&d, &CompressionPlan::xkv(4, 4, 4)), Err(XkvError::KeysNotPreRope)));
        assert!(compress(&d, &CompressionPlan::slerp(None, 0.5)).is_ok());
        assert!(matches!(compress(&d, &CompressionPlan::slerp(Some(3), 0.5)), Err(XkvError::InvalidPlan(_))));
    }

    #[test]
    fn slerp_identical_layers_exact() {
        let mut d = dump(0.8, 0.05);
        d.layers[5] = LayerCache { layer_index: 5, ..d.layers[4].clone() };
        let cd = compress(&d, &CompressionPlan::slerp(Some(4), 0.5)).unwrap();
        let rebuilt = reconstruct(&cd);
        for side in Side::BOTH {
            let errs = layer_errors(&d, &rebuilt, side);
            assert!(errs[4] < 1e-9 && errs[5] < 1e-9);
            assert_eq!(&errs[..4], &[0.0; 4]);
        }
    }

    #[test]
    fn slerp_endpoint_keeps_first_layer() {
        let d = dump(0.5, 0.1);
        let cd = compress(&d, &CompressionPlan::slerp(Some(6), 0.0)).unwrap();
        let rebuilt = reconstruct(&cd);
        assert!(layer_errors(&d, &rebuilt, Side::Key)[6] < 1e-9);
        // Layer 7 keeps its magnitudes but takes layer 6's directions.
        for t in 0..d.meta.seq_len {
            let got = rebuilt.layers[7].k.row(t);
            let a = d.layers[6].k.row(t);
            let expected = a * (d.layers[7].k.row(t).norm() / a.norm());
            assert!((got - expected).norm() < 1e-9);
        }
    }

    #[test]
    fn stored_elements_match_closed_form() {
        let d = dump(0.8, 0.05);
        for plan in [
            CompressionPlan::xkv(4, 7, 11),
            CompressionPlan::xkv(2, 3, 5),
            CompressionPlan::single_svd(4, 6),
            CompressionPlan::slerp(None, 0.5),
            CompressionPlan::none(),
        ] {
            let cd = compress(&d, &plan).unwrap();
            assert_eq!(cd.stored_elements(), storage_elements(&plan, &d.meta).unwrap().compressed, "{plan:?}");
        }
    }
}
