//! Attention-level fidelity of compressed caches.
//!
//! Keys are compressed before rotary embedding; evaluation reconstructs them,
//! applies RoPE, and compares grouped-query attention outputs against the
//! uncompressed cache.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::compress::{compress, compression_rate, reconstruct, relative_error, CompressedDump, CompressionPlan};
use crate::error::{Result, XkvError};
use crate::kvdump::{CacheDump, Side};
use crate::linalg::{gaussian_matrix, Matrix};

/// Default number of trailing query positions.
pub const DEFAULT_QUERY_WINDOW: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RopeConfig {
    pub head_dim: usize,
    pub base: f64,
}

/// Rotates each `(x[2i], x[2i+1])` pair of every head by `pos * base^(-2i/head_dim)`,
/// with token `t` at position `first_position + t`.
pub fn apply_rope_from(x: &Matrix, cfg: &RopeConfig, first_position: usize) -> Result<Matrix> {
    let dh = cfg.head_dim;
    if !dh.is_multiple_of(2) {
        return Err(XkvError::OddHeadDim(dh));
    }
    if dh == 0 || !x.ncols().is_multiple_of(dh) {
        return Err(XkvError::ShapeMismatch(format!("width {} is not a multiple of head_dim {dh}", x.ncols())));
    }
    let freqs: Vec<f64> = (0..dh / 2).map(|i| cfg.base.powf(-2.0 * i as f64 / dh as f64)).collect();
    let mut out = x.clone();
    for t in 0..x.nrows() {
        let pos = (first_position + t) as f64;
        for (i, f) in freqs.iter().enumerate() {
            let (sin, cos) = (pos * f).sin_cos();
            for h in 0..x.ncols() / dh {
                let c = h * dh + 2 * i;
                let (a, b) = (x[(t, c)], x[(t, c + 1)]);
                out[(t, c)] = a * cos - b * sin;
                out[(t, c + 1)] = a * sin + b * cos;
            }
        }
    }
    Ok(out)
}

/// RoPE over positions `0..L`.
pub fn apply_rope(x: &Matrix, cfg: &RopeConfig) -> Result<Matrix> {
    apply_rope_from(x, cfg, 0)
}

/// Scaled dot-product attention with grouped KV heads, in f64.
///
/// `q` is `L_q x (h_q * head_dim)`; `k` and `v` are `L x (num_kv_heads * head_dim)`.
/// Query head `h` reads KV head `h / (h_q / num_kv_heads)`. A causal mask is
/// applied when `L_q == L`.
pub fn attention_forward(q: &Matrix, k: &Matrix, v: &Matrix, num_kv_heads: usize, head_dim: usize) -> Result<Matrix> {
    if k.shape() != v.shape() || k.ncols() != num_kv_heads * head_dim {
        return Err(XkvError::HeadMismatch(format!(
            "K {:?} / V {:?} do not match {num_kv_heads} heads of dim {head_dim}",
            k.shape(),
            v.shape()
        )));
    }
    if !q.ncols().is_multiple_of(head_dim) {
        return Err(XkvError::HeadMismatch(format!("query width {} not a multiple of {head_dim}", q.ncols())));
    }
    let hq = q.ncols() / head_dim;
    if hq == 0 || !hq.is_multiple_of(num_kv_heads) {
        return Err(XkvError::HeadMismatch(format!("{hq} query heads cannot share {num_kv_heads} KV heads")));
    }
    let per_kv = hq / num_kv_heads;
    let (lq, lk) = (q.nrows(), k.nrows());
    let causal = lq == lk;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut out = Matrix::zeros(lq, q.ncols());
    let mut weights = vec![0.0; lk];
    for h in 0..hq {
        let kv = h / per_kv;
        let qh = q.columns(h * head_dim, head_dim);
        let kh = k.columns(kv * head_dim, head_dim);
        let vh = v.columns(kv * head_dim, head_dim);
        let logits = qh * kh.transpose() * scale;
        for i in 0..lq {
            let visible = if causal { i + 1 } else { lk };
            let max = (0..visible).map(|j| logits[(i, j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..visible {
                weights[j] = (logits[(i, j)] - max).exp();
                sum += weights[j];
            }
            for w in weights.iter_mut().take(visible) {
                *w /= sum;
            }
            debug_assert!((weights[..visible].iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            for c in 0..head_dim {
                let mut acc = 0.0;
                for j in 0..visible {
                    acc += weights[j] * vh[(j, c)];
                }
                out[(i, h * head_dim + c)] = acc;
            }
        }
    }
    Ok(out)
}

/// Where query states come from.
#[derive(Debug, Clone, PartialEq)]
pub enum QuerySource {
    /// Standard normal queries, `len` trailing positions, `heads_per_kv`
    /// query heads per KV head.
    Synthetic { seed: u64, heads_per_kv: usize, len: usize },
    /// Pre-RoPE queries per layer, aligned to the last positions of the cache.
    Provided(Vec<Matrix>),
}

impl QuerySource {
    pub fn synthetic(seed: u64) -> Self {
        QuerySource::Synthetic { seed, heads_per_kv: 2, len: DEFAULT_QUERY_WINDOW }
    }

    /// Uses the dump's query section when present, synthetic queries otherwise.
    pub fn for_dump(dump: &CacheDump, seed: u64) -> Self {
        match &dump.queries {
            Some(qs) => QuerySource::Provided(qs.clone()),
            None => Self::synthetic(seed),
        }
    }

    fn materialize(&self, dump: &CacheDump, total_len: usize) -> Result<Vec<Matrix>> {
        let meta = &dump.meta;
        let qs = match self {
            QuerySource::Synthetic { seed, heads_per_kv, len } => {
                let rows = (*len).min(total_len).max(1);
                let cols = heads_per_kv * meta.num_kv_heads * meta.head_dim;
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                (0..meta.num_layers).map(|_| gaussian_matrix(rows, cols, &mut rng)).collect()
            }
            QuerySource::Provided(qs) => qs.clone(),
        };
        if qs.len() != meta.num_layers {
            return Err(XkvError::HeadMismatch(format!("{} query tensors for {} layers", qs.len(), meta.num_layers)));
        }
        if qs.iter().any(|q| q.nrows() > total_len) {
            return Err(XkvError::ShapeMismatch("more query positions than cached tokens".into()));
        }
        Ok(qs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerFidelity {
    pub layer: usize,
    pub key_rel_err: f64,
    pub value_rel_err: f64,
    pub attn_out_rel_err: f64,
    pub attn_out_cos: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub plan: CompressionPlan,
    pub compression_rate: f64,
    pub layers: Vec<LayerFidelity>,
    pub mean_key_rel_err: f64,
    pub mean_value_rel_err: f64,
    pub mean_attn_out_rel_err: f64,
    pub mean_attn_out_cos: f64,
}

pub const CSV_HEADER: &str =
    "method,group_size,key_rank,value_rank,compression_rate,layer,key_rel_err,value_rel_err,attn_out_rel_err,attn_out_cos";

impl FidelityReport {
    /// One CSV row per layer, without header.
    pub fn csv_rows(&self) -> String {
        let p = &self.plan;
        self.layers
            .iter()
            .map(|l| {
                format!(
                    "{},{},{},{},{},{},{},{},{},{}\n",
                    p.method.name(),
                    p.effective_group_size(),
                    p.key_rank,
                    p.value_rank,
                    self.compression_rate,
                    l.layer,
                    l.key_rel_err,
                    l.value_rel_err,
                    l.attn_out_rel_err,
                    l.attn_out_cos
                )
            })
            .collect()
    }
}

fn vstack(top: &Matrix, bottom: Option<&Matrix>) -> Matrix {
    match bottom {
        None => top.clone(),
        Some(b) => {
            let mut out = Matrix::zeros(top.nrows() + b.nrows(), top.ncols());
            out.rows_mut(0, top.nrows()).copy_from(top);
            out.rows_mut(top.nrows(), b.nrows()).copy_from(b);
            out
        }
    }
}

fn mean_head_cosine(a: &Matrix, b: &Matrix, head_dim: usize) -> f64 {
    let heads = a.ncols() / head_dim;
    let mut total = 0.0;
    for t in 0..a.nrows() {
        for h in 0..heads {
            let x = a.view((t, h * head_dim), (1, head_dim));
            let y = b.view((t, h * head_dim), (1, head_dim));
            let (nx, ny) = (x.norm(), y.norm());
            total += if nx == 0.0 && ny == 0.0 {
                1.0
            } else if nx == 0.0 || ny == 0.0 {
                0.0
            } else {
                (x.dot(&y) / (nx * ny)).clamp(-1.0, 1.0)
            };
        }
    }
    total / (a.nrows() * heads) as f64
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Uncompressed attention outputs, computed once per dump and reused for
/// every plan.
pub struct Reference<'a> {
    dump: &'a CacheDump,
    queries: Vec<Matrix>,
    outputs: Vec<Matrix>,
    rope: RopeConfig,
    total_len: usize,
}

impl<'a> Reference<'a> {
    pub fn new(dump: &'a CacheDump, queries: &QuerySource) -> Result<Self> {
        dump.validate()?;
        let meta = &dump.meta;
        let rope = RopeConfig { head_dim: meta.head_dim, base: meta.rope_base };
        let total_len = meta.seq_len + dump.tail_len();
        let raw = queries.materialize(dump, total_len)?;
        let mut queries = Vec::with_capacity(raw.len());
        for q in raw {
            queries.push(if meta.keys_pre_rope { apply_rope_from(&q, &rope, total_len - q.nrows())? } else { q });
        }
        let mut reference = Self { dump, queries, outputs: Vec::new(), rope, total_len };
        reference.outputs = (0..meta.num_layers).map(|i| reference.attend(dump, i)).collect::<Result<_>>()?;
        Ok(reference)
    }

    fn attend(&self, cache: &CacheDump, layer: usize) -> Result<Matrix> {
        let meta = &self.dump.meta;
        let tail = self.dump.tail.get(layer);
        let k = vstack(&cache.layers[layer].k, tail.map(|t| &t.k));
        let v = vstack(&cache.layers[layer].v, tail.map(|t| &t.v));
        debug_assert_eq!(k.nrows(), self.total_len);
        let k = if meta.keys_pre_rope { apply_rope(&k, &self.rope)? } else { k };
        attention_forward(&self.queries[layer], &k, &v, meta.num_kv_heads, meta.head_dim)
    }

    /// Compares a reconstructed cache against the reference.
    pub fn compare(&self, plan: &CompressionPlan, rebuilt: &CacheDump) -> Result<FidelityReport> {
        let original = self.dump;
        let mut layers = Vec::with_capacity(original.layers.len());
        for (i, reference_out) in self.outputs.iter().enumerate() {
            let out = self.attend(rebuilt, i)?;
            layers.push(LayerFidelity {
                layer: i,
                key_rel_err: relative_error(original.layers[i].side(Side::Key), rebuilt.layers[i].side(Side::Key)),
                value_rel_err: relative_error(
                    original.layers[i].side(Side::Value),
                    rebuilt.layers[i].side(Side::Value),
                ),
                attn_out_rel_err: relative_error(reference_out, &out),
                attn_out_cos: mean_head_cosine(reference_out, &out, original.meta.head_dim),
            });
        }
        Ok(FidelityReport {
            plan: plan.clone(),
            compression_rate: compression_rate(plan, &original.meta)?,
            mean_key_rel_err: mean(layers.iter().map(|l| l.key_rel_err)),
            mean_value_rel_err: mean(layers.iter().map(|l| l.value_rel_err)),
            mean_attn_out_rel_err: mean(layers.iter().map(|l| l.attn_out_rel_err)),
            mean_attn_out_cos: mean(layers.iter().map(|l| l.attn_out_cos)),
            layers,
        })
    }

    pub fn compare_compressed(&self, cd: &CompressedDump) -> Result<FidelityReport> {
        self.compare(&cd.plan, &reconstruct(cd))
    }
}

/// Compresses, reconstructs, and scores each plan against the uncompressed cache.
pub fn evaluate(dump: &CacheDump, plans: &[CompressionPlan], queries: &QuerySource) -> Result<Vec<FidelityReport>> {
    let reference = Reference::new(dump, queries)?;
    plans
        .iter()
        .map(|plan| {
            let cd = compress(dump, plan)?;
            reference.compare(plan, &reconstruct(&cd))
        })
        .collect()
}
