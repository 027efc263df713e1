//! KV-cache data model and the `KVD1` interchange format.
//!
//! Layout (little-endian):
//! - magic `KVD1`
//! - u32 header length `H`
//! - `H` bytes of UTF-8 JSON carrying [`CacheMeta`] plus `tail_len`
//! - payload: for each layer, K then V as `seq_len x d` row-major tensors in the
//!   declared dtype; then the tail tensors (`tail_len x d`, same ordering); then
//!   an optional query section (`q_len x num_q_heads*head_dim` per layer) when
//!   the header carries `num_q_heads` and `q_len`.
//!
//! There is no padding. The payload length must match the header exactly.

use std::fs;
use std::path::Path;

use half::{bf16, f16};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, XkvError};
use crate::linalg::{gaussian_matrix, orthonormal_columns, Matrix};

pub const KVD_MAGIC: [u8; 4] = *b"KVD1";
pub const LAYOUT_TAG: &str = "layer-major/K-then-V/row-major";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F16,
    Bf16,
}

impl Dtype {
    pub fn size_bytes(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F16 | Dtype::Bf16 => 2,
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Dtype::F32),
            "f16" => Ok(Dtype::F16),
            "bf16" => Ok(Dtype::Bf16),
            other => Err(XkvError::UnsupportedDtype(other.to_string())),
        }
    }

    fn encode(self, x: f64, out: &mut Vec<u8>) {
        match self {
            Dtype::F32 => out.extend_from_slice(&(x as f32).to_le_bytes()),
            Dtype::F16 => out.extend_from_slice(&f16::from_f64(x).to_le_bytes()),
            Dtype::Bf16 => out.extend_from_slice(&bf16::from_f64(x).to_le_bytes()),
        }
    }

    fn decode(self, bytes: &[u8]) -> f64 {
        match self {
            Dtype::F32 => f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as f64,
            Dtype::F16 => f16::from_le_bytes([bytes[0], bytes[1]]).to_f64(),
            Dtype::Bf16 => bf16::from_le_bytes([bytes[0], bytes[1]]).to_f64(),
        }
    }

    /// Rounds `x` to the nearest value representable in this dtype.
    pub fn quantize(self, x: f64) -> f64 {
        match self {
            Dtype::F32 => x as f32 as f64,
            Dtype::F16 => f16::from_f64(x).to_f64(),
            Dtype::Bf16 => bf16::from_f64(x).to_f64(),
        }
    }
}

/// Which half of the cache an operation applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Key,
    Value,
}

impl Side {
    pub const BOTH: [Side; 2] = [Side::Key, Side::Value];

    pub fn name(self) -> &'static str {
        match self {
            Side::Key => "key",
            Side::Value => "value",
        }
    }
}

fn default_rope_base() -> f64 {
    10000.0
}

fn default_layout() -> String {
    LAYOUT_TAG.to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheMeta {
    pub model_id: String,
    pub num_layers: usize,
    pub num_kv_heads: usize,
    pub head_dim: usize,
    pub seq_len: usize,
    pub dtype: Dtype,
    pub keys_pre_rope: bool,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    #[serde(default = "default_layout")]
    pub layout: String,
}

impl CacheMeta {
    /// Flattened per-layer width `num_kv_heads * head_dim`.
    pub fn width(&self) -> usize {
        self.num_kv_heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.num_kv_heads == 0 || self.head_dim == 0 || self.seq_len == 0 {
            return Err(XkvError::HeaderMismatch(
                "num_layers, num_kv_heads, head_dim and seq_len must all be >= 1".into(),
            ));
        }
        if !(self.rope_base.is_finite() && self.rope_base > 0.0) {
            return Err(XkvError::HeaderMismatch(format!("rope_base {} must be positive", self.rope_base)));
        }
        if self.layout != LAYOUT_TAG {
            return Err(XkvError::HeaderMismatch(format!("unknown layout {:?}", self.layout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerCache {
    pub layer_index: usize,
    pub k: Matrix,
    pub v: Matrix,
}

impl LayerCache {
    pub fn side(&self, side: Side) -> &Matrix {
        match side {
            Side::Key => &self.k,
            Side::Value => &self.v,
        }
    }

    pub fn side_mut(&mut self, side: Side) -> &mut Matrix {
        match side {
            Side::Key => &mut self.k,
            Side::Value => &mut self.v,
        }
    }
}

/// All layers' prompt caches, an optional uncompressed decode tail, and
/// optional per-layer query states.
///
/// Tensors are held as f64 in memory. Values read from a file are exactly
/// representable in `meta.dtype`; generated values are not rounded until
/// written.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheDump {
    pub meta: CacheMeta,
    pub layers: Vec<LayerCache>,
    /// Generated-token caches, one entry per layer, or empty.
    pub tail: Vec<LayerCache>,
    /// Query states per layer (`q_len x num_q_heads*head_dim`).
    pub queries: Option<Vec<Matrix>>,
}

impl CacheDump {
    pub fn tail_len(&self) -> usize {
        self.tail.first().map_or(0, |t| t.k.nrows())
    }

    pub fn side_matrices(&self, side: Side) -> Vec<&Matrix> {
        self.layers.iter().map(|l| l.side(side)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.meta.validate()?;
        let meta = &self.meta;
        let (l, d) = (meta.seq_len, meta.width());
        if self.layers.len() != meta.num_layers {
            return Err(XkvError::HeaderMismatch(format!(
                "{} layers present, header declares {}",
                self.layers.len(),
                meta.num_layers
            )));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.layer_index != i {
                return Err(XkvError::HeaderMismatch(format!("layer at position {i} has index {}", layer.layer_index)));
            }
            check_shape(&layer.k, l, d, "K", i)?;
            check_shape(&layer.v, l, d, "V", i)?;
            check_finite(&layer.k, &format!("layer {i} K"))?;
            check_finite(&layer.v, &format!("layer {i} V"))?;
        }
        if !self.tail.is_empty() {
            if self.tail.len() != meta.num_layers {
                return Err(XkvError::HeaderMismatch("tail must cover every layer".into()));
            }
            let t = self.tail_len();
            for (i, layer) in self.tail.iter().enumerate() {
                if layer.layer_index != i {
                    return Err(XkvError::HeaderMismatch(format!("tail entry {i} has index {}", layer.layer_index)));
                }
                check_shape(&layer.k, t, d, "tail K", i)?;
                check_shape(&layer.v, t, d, "tail V", i)?;
                check_finite(&layer.k, &format!("tail {i} K"))?;
                check_finite(&layer.v, &format!("tail {i} V"))?;
            }
        }
        if let Some(qs) = &self.queries {
            if qs.len() != meta.num_layers {
                return Err(XkvError::HeaderMismatch("queries must cover every layer".into()));
            }
            let (rows, cols) = qs[0].shape();
            if rows == 0 || cols == 0 || cols % meta.head_dim != 0 {
                return Err(XkvError::HeaderMismatch(format!("query shape {rows}x{cols} invalid")));
            }
            for (i, q) in qs.iter().enumerate() {
                check_shape(q, rows, cols, "Q", i)?;
                check_finite(q, &format!("layer {i} Q"))?;
            }
        }
        Ok(())
    }
}

fn check_shape(m: &Matrix, rows: usize, cols: usize, what: &str, layer: usize) -> Result<()> {
    if m.shape() != (rows, cols) {
        return Err(XkvError::HeaderMismatch(format!(
            "layer {layer} {what} is {}x{}, expected {rows}x{cols}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

pub(crate) fn check_finite(m: &Matrix, what: &str) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(XkvError::NonFinite(what.to_string()))
    }
}

#[derive(Serialize, Deserialize)]
struct KvdHeader {
    #[serde(flatten)]
    meta: CacheMeta,
    tail_len: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    num_q_heads: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    q_len: Option<usize>,
}

/// Total file size implied by a header: magic, length word, JSON, payload.
pub fn expected_file_len(
    meta: &CacheMeta,
    header_len: usize,
    tail_len: usize,
    q_shape: Option<(usize, usize)>,
) -> usize {
    8 + header_len + payload_elements(meta, tail_len, q_shape) * meta.dtype.size_bytes()
}

fn payload_elements(meta: &CacheMeta, tail_len: usize, q_shape: Option<(usize, usize)>) -> usize {
    let d = meta.width();
    let q = q_shape.map_or(0, |(rows, cols)| rows * cols);
    meta.num_layers * (2 * (meta.seq_len + tail_len) * d + q)
}

fn push_row_major(m: &Matrix, dtype: Dtype, out: &mut Vec<u8>) {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            dtype.encode(m[(i, j)], out);
        }
    }
}

pub(crate) fn header_json<T: Serialize>(header: &T) -> Result<Vec<u8>> {
    Ok(serde_json::to_vec(header)?)
}

/// Serializes a dump into `KVD1` bytes, rounding each value to
/// `meta.dtype`. Decoding inverts this exactly for dumps whose values are
/// already representable, which includes every dump read from a file.
pub fn encode_dump(dump: &CacheDump) -> Result<Vec<u8>> {
    dump.validate()?;
    let q_shape = dump.queries.as_ref().map(|qs| qs[0].shape());
    let header = KvdHeader {
        meta: dump.meta.clone(),
        tail_len: dump.tail_len(),
        num_q_heads: q_shape.map(|(_, cols)| cols / dump.meta.head_dim),
        q_len: q_shape.map(|(rows, _)| rows),
    };
    let json = header_json(&header)?;
    let mut out = Vec::with_capacity(expected_file_len(&dump.meta, json.len(), header.tail_len, q_shape));
    out.extend_from_slice(&KVD_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    let dtype = dump.meta.dtype;
    for layer in dump.layers.iter().chain(dump.tail.iter()) {
        push_row_major(&layer.k, dtype, &mut out);
        push_row_major(&layer.v, dtype, &mut out);
    }
    if let Some(qs) = &dump.queries {
        for q in qs {
            push_row_major(q, dtype, &mut out);
        }
    }
    Ok(out)
}

/// Splits `magic | u32 len | json` off the front of `bytes`.
pub(crate) fn split_header(bytes: &[u8], magic: [u8; 4]) -> Result<(&[u8], &[u8])> {
    if bytes.len() < 4 || bytes[..4] != magic {
        return Err(XkvError::BadMagic { expected: magic, found: bytes[..bytes.len().min(4)].to_vec() });
    }
    if bytes.len() < 8 {
        return Err(XkvError::HeaderMismatch("file too short for header length".into()));
    }
    let h = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]) as usize;
    if bytes.len() < 8 + h {
        return Err(XkvError::HeaderMismatch(format!("header declares {h} bytes, only {} available", bytes.len() - 8)));
    }
    Ok((&bytes[8..8 + h], &bytes[8 + h..]))
}

pub(crate) struct PayloadReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    dtype: Dtype,
}

impl<'a> PayloadReader<'a> {
    pub(crate) fn new(bytes: &'a [u8], dtype: Dtype) -> Self {
        Self { bytes, pos: 0, dtype }
    }

    pub(crate) fn matrix(&mut self, rows: usize, cols: usize) -> Matrix {
        let size = self.dtype.size_bytes();
        let start = self.pos;
        self.pos += rows * cols * size;
        let bytes = &self.bytes[start..self.pos];
        DMatrix::from_row_iterator(rows, cols, bytes.chunks_exact(size).map(|c| self.dtype.decode(c)))
    }

    pub(crate) fn vector(&mut self, len: usize) -> Vec<f64> {
        self.matrix(1, len).iter().copied().collect()
    }
}

/// Parses `KVD1` bytes.
pub fn decode_dump(bytes: &[u8]) -> Result<CacheDump> {
    let (json, payload) = split_header(bytes, KVD_MAGIC)?;
    let value: serde_json::Value = serde_json::from_slice(json).map_err(|e| XkvError::BadHeader(e.to_string()))?;
    match value.get("dtype").and_then(|d| d.as_str()) {
        Some(s) => {
            Dtype::parse(s)?;
        }
        None => return Err(XkvError::BadHeader("missing dtype".into())),
    }
    let header: KvdHeader = serde_json::from_value(value).map_err(|e| XkvError::BadHeader(e.to_string()))?;
    let meta = header.meta;
    meta.validate()?;
    let q_shape = match (header.num_q_heads, header.q_len) {
        (Some(h), Some(n)) => Some((n, h * meta.head_dim)),
        (None, None) => None,
        _ => return Err(XkvError::BadHeader("num_q_heads and q_len must appear together".into())),
    };
    let expected = payload_elements(&meta, header.tail_len, q_shape) * meta.dtype.size_bytes();
    if payload.len() != expected {
        return Err(XkvError::HeaderMismatch(format!("payload is {} bytes, header implies {expected}", payload.len())));
    }
    let d = meta.width();
    let mut reader = PayloadReader::new(payload, meta.dtype);
    let mut read_layers = |rows: usize| -> Vec<LayerCache> {
        (0..meta.num_layers)
            .map(|i| {
                let k = reader.matrix(rows, d);
                let v = reader.matrix(rows, d);
                LayerCache { layer_index: i, k, v }
            })
            .collect()
    };
    let layers = read_layers(meta.seq_len);
    let tail = if header.tail_len > 0 { read_layers(header.tail_len) } else { Vec::new() };
    let queries = q_shape.map(|(rows, cols)| (0..meta.num_layers).map(|_| reader.matrix(rows, cols)).collect());
    let dump = CacheDump { meta, layers, tail, queries };
    dump.validate()?;
    Ok(dump)
}

pub fn read_dump(path: impl AsRef<Path>) -> Result<CacheDump> {
    decode_dump(&fs::read(path)?)
}

pub fn write_dump(dump: &CacheDump, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_dump(dump)?;
    fs::write(path, bytes)?;
    Ok(())
}

/// Parameters of the synthetic generator.
///
/// Each layer's K (and, independently, V) is
/// `s * (alpha * C * W_l + (1 - alpha) * C_l * P_l) + noise * E_l`
/// where `C` is shared by all layers, `C_l` is private to layer `l` and
/// orthogonal to `C`, the rows of `[W_l; P_l]` are orthonormal, and `s`
/// normalizes entries to roughly unit variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_layers: usize,
    pub seq_len: usize,
    pub num_kv_heads: usize,
    pub head_dim: usize,
    pub shared_rank: usize,
    pub private_rank: usize,
    pub noise: f64,
    pub alignment: f64,
    pub seed: u64,
    #[serde(default)]
    pub tail_len: usize,
    #[serde(default = "default_dtype")]
    pub dtype: Dtype,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
}

fn default_dtype() -> Dtype {
    Dtype::F32
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_layers: 8,
            seq_len: 512,
            num_kv_heads: 2,
            head_dim: 32,
            shared_rank: 16,
            private_rank: 8,
            noise: 0.01,
            alignment: 0.8,
            seed: 0,
            tail_len: 0,
            dtype: Dtype::F32,
            rope_base: 10000.0,
        }
    }
}

impl SynthConfig {
    pub fn width(&self) -> usize {
        self.num_kv_heads * self.head_dim
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(XkvError::InvalidConfig(msg));
        if self.num_layers == 0 || self.seq_len == 0 || self.num_kv_heads == 0 || self.head_dim == 0 {
            return bad("num_layers, seq_len, num_kv_heads and head_dim must be >= 1".into());
        }
        let limit = self.seq_len.min(self.width());
        if self.shared_rank + self.private_rank > limit {
            return bad(format!(
                "shared_rank + private_rank = {} exceeds min(L, d) = {limit}",
                self.shared_rank + self.private_rank
            ));
        }
        if !(0.0..=1.0).contains(&self.alignment) {
            return bad(format!("alignment {} outside [0, 1]", self.alignment));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return bad(format!("noise {} must be finite and >= 0", self.noise));
        }
        Ok(())
    }
}

struct SideGenerator<'a> {
    cfg: &'a SynthConfig,
    shared: Matrix,
}

impl SideGenerator<'_> {
    fn layer(&self, rows: usize, rng: &mut ChaCha8Rng) -> Matrix {
        let cfg = self.cfg;
        let (rs, rp, d) = (cfg.shared_rank, cfg.private_rank, cfg.width());
        let r = rs + rp;
        let mut x = Matrix::zeros(rows, d);
        if r > 0 {
            // Private directions are drawn orthogonal to the shared basis.
            let private = if rp > 0 {
                let mut joint = Matrix::zeros(rows, r);
                joint.columns_mut(0, rs).copy_from(&self.shared.rows(0, rows));
                joint.columns_mut(rs, rp).copy_from(&gaussian_matrix(rows, rp, rng));
                orthonormal_columns(&joint).columns(rs, rp).into_owned()
            } else {
                Matrix::zeros(rows, 0)
            };
            let mixing = orthonormal_columns(&gaussian_matrix(d, r, rng)).transpose();
            let scale = ((cfg.seq_len * d) as f64 / r as f64).sqrt();
            if rs > 0 {
                x += (self.shared.rows(0, rows) * mixing.rows(0, rs)) * (scale * cfg.alignment);
            }
            if rp > 0 {
                x += (private * mixing.rows(rs, rp)) * (scale * (1.0 - cfg.alignment));
            }
        }
        if cfg.noise > 0.0 {
            x += gaussian_matrix(rows, d, rng) * cfg.noise;
        }
        x
    }
}

/// Generates a dump with a tunable degree of cross-layer basis alignment.
///
/// Deterministic in `cfg`. Tail tokens, when requested, extend each layer's
/// shared and private bases with fresh rows so they follow the same structure.
/// Values are full f64; `cfg.dtype` is recorded in the header and applied
/// when the dump is written.
pub fn synth_dump(cfg: &SynthConfig) -> Result<CacheDump> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let total = cfg.seq_len + cfg.tail_len;
    let mut sides = Vec::with_capacity(2);
    for _ in Side::BOTH {
        let shared = if cfg.shared_rank > 0 {
            orthonormal_columns(&gaussian_matrix(total, cfg.shared_rank, &mut rng))
        } else {
            Matrix::zeros(total, 0)
        };
        let generator = SideGenerator { cfg, shared };
        let mats: Vec<Matrix> = (0..cfg.num_layers).map(|_| generator.layer(total, &mut rng)).collect();
        sides.push(mats);
    }
    let values = sides.pop().unwrap_or_default();
    let keys = sides.pop().unwrap_or_default();
    let mut layers = Vec::with_capacity(cfg.num_layers);
    let mut tail = Vec::new();
    for (i, (k, v)) in keys.into_iter().zip(values).enumerate() {
        if cfg.tail_len > 0 {
            tail.push(LayerCache {
                layer_index: i,
                k: k.rows(cfg.seq_len, cfg.tail_len).into_owned(),
                v: v.rows(cfg.seq_len, cfg.tail_len).into_owned(),
            });
        }
        layers.push(LayerCache {
            layer_index: i,
            k: k.rows(0, cfg.seq_len).into_owned(),
            v: v.rows(0, cfg.seq_len).into_owned(),
        });
    }
    let meta = CacheMeta {
        model_id: format!("synthetic-a{}-s{}-seed{}", cfg.alignment, cfg.noise, cfg.seed),
        num_layers: cfg.num_layers,
        num_kv_heads: cfg.num_kv_heads,
        head_dim: cfg.head_dim,
        seq_len: cfg.seq_len,
        dtype: cfg.dtype,
        keys_pre_rope: true,
        rope_base: cfg.rope_base,
        layout: LAYOUT_TAG.to_string(),
    };
    Ok(CacheDump { meta, layers, tail, queries: None })
}
