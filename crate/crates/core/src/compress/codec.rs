//! `XKV1` container for compressed caches.
//!
//! Layout (little-endian): magic `XKV1`, u32 header length, JSON header
//! (plan, meta, tail length, one descriptor per stored segment), then f32
//! row-major tensors: key segments in order, value segments in order, then
//! the tail (per layer, K then V).
//!
//! Segment payloads:
//! - `svd`: `A` (`L x r`) followed by `B_i` (`r x d`) for each layer in the group
//! - `slerp`: merged directions (`L x d`), magnitudes of the first layer (`L`),
//!   magnitudes of the second layer (`L`)
//! - `raw`: the layer matrix (`L x d`)

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CompressedDump, CompressedGroup, CompressionPlan, LayerGroup, Segment, SlerpMerged};
use crate::error::{Result, XkvError};
use crate::kvdump::{header_json, split_header, CacheMeta, Dtype, LayerCache, PayloadReader, Side};
use crate::linalg::Matrix;

pub const XKV_MAGIC: [u8; 4] = *b"XKV1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum SegmentHeader {
    Svd { layers: Vec<usize>, rank: usize },
    Slerp { layers: [usize; 2], t: f64, degenerate_rows: Vec<usize> },
    Raw { layer: usize },
}

#[derive(Debug, Serialize, Deserialize)]
struct XkvHeader {
    plan: CompressionPlan,
    meta: CacheMeta,
    tail_len: usize,
    key_groups: Vec<SegmentHeader>,
    value_groups: Vec<SegmentHeader>,
}

fn describe(seg: &Segment) -> SegmentHeader {
    match seg {
        Segment::Svd(g) => SegmentHeader::Svd { layers: g.group.indices.clone(), rank: g.rank },
        Segment::Slerp(m) => {
            SegmentHeader::Slerp { layers: [m.pair.0, m.pair.1], t: m.t, degenerate_rows: m.degenerate_rows.clone() }
        }
        Segment::Raw { layer, .. } => SegmentHeader::Raw { layer: *layer },
    }
}

fn segment_elements(h: &SegmentHeader, l: usize, d: usize) -> usize {
    match h {
        SegmentHeader::Svd { layers, rank } => l * rank + layers.len() * rank * d,
        SegmentHeader::Slerp { .. } => l * d + 2 * l,
        SegmentHeader::Raw { .. } => l * d,
    }
}

fn push(m: &Matrix, out: &mut Vec<u8>) {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.extend_from_slice(&(m[(i, j)] as f32).to_le_bytes());
        }
    }
}

fn push_vec(v: &[f64], out: &mut Vec<u8>) {
    for x in v {
        out.extend_from_slice(&(*x as f32).to_le_bytes());
    }
}

pub fn encode_compressed(cd: &CompressedDump) -> Result<Vec<u8>> {
    let header = XkvHeader {
        plan: cd.plan.clone(),
        meta: cd.meta.clone(),
        tail_len: cd.tail.first().map_or(0, |t| t.k.nrows()),
        key_groups: cd.key_groups.iter().map(describe).collect(),
        value_groups: cd.value_groups.iter().map(describe).collect(),
    };
    let json = header_json(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(&XKV_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for seg in cd.key_groups.iter().chain(&cd.value_groups) {
        match seg {
            Segment::Svd(g) => {
                push(&g.a, &mut out);
                for b in &g.b {
                    push(b, &mut out);
                }
            }
            Segment::Slerp(m) => {
                push(&m.merged_dir, &mut out);
                push_vec(&m.mag_a, &mut out);
                push_vec(&m.mag_b, &mut out);
            }
            Segment::Raw { data, .. } => push(data, &mut out),
        }
    }
    for layer in &cd.tail {
        push(&layer.k, &mut out);
        push(&layer.v, &mut out);
    }
    Ok(out)
}

/// Number of f32 elements stored for the compressed prompt region of an
/// encoded file (tail excluded), derived from the header and checked against
/// the payload length.
pub fn payload_prompt_elements(bytes: &[u8]) -> Result<u64> {
    let (json, payload) = split_header(bytes, XKV_MAGIC)?;
    let header: XkvHeader = serde_json::from_slice(json).map_err(|e| XkvError::BadHeader(e.to_string()))?;
    let d = header.meta.width();
    let tail = 2 * header.meta.num_layers * header.tail_len * d;
    let total = payload.len() / 4;
    if payload.len() % 4 != 0 || total < tail {
        return Err(XkvError::HeaderMismatch("payload length inconsistent with tail".into()));
    }
    Ok((total - tail) as u64)
}

pub fn decode_compressed(bytes: &[u8]) -> Result<CompressedDump> {
    let (json, payload) = split_header(bytes, XKV_MAGIC)?;
    let header: XkvHeader = serde_json::from_slice(json).map_err(|e| XkvError::BadHeader(e.to_string()))?;
    let meta = header.meta;
    meta.validate()?;
    let (l, d, n) = (meta.seq_len, meta.width(), meta.num_layers);
    let expected: usize =
        header.key_groups.iter().chain(&header.value_groups).map(|h| segment_elements(h, l, d)).sum::<usize>()
            + 2 * n * header.tail_len * d;
    if payload.len() != 4 * expected {
        return Err(XkvError::HeaderMismatch(format!(
            "payload is {} bytes, header implies {}",
            payload.len(),
            4 * expected
        )));
    }
    let mut reader = PayloadReader::new(payload, Dtype::F32);
    let mut read_side = |side: Side, headers: &[SegmentHeader]| -> Result<Vec<Segment>> {
        let mut covered = vec![false; n];
        let mut out = Vec::with_capacity(headers.len());
        for h in headers {
            let seg = match h {
                SegmentHeader::Svd { layers, rank } => {
                    let a = reader.matrix(l, *rank);
                    let b = layers.iter().map(|_| reader.matrix(*rank, d)).collect();
                    Segment::Svd(CompressedGroup {
                        side,
                        group: LayerGroup { indices: layers.clone() },
                        a,
                        b,
                        rank: *rank,
                    })
                }
                SegmentHeader::Slerp { layers, t, degenerate_rows } => {
                    let merged_dir = reader.matrix(l, d);
                    let mag_a = reader.vector(l);
                    let mag_b = reader.vector(l);
                    Segment::Slerp(SlerpMerged {
                        side,
                        pair: (layers[0], layers[1]),
                        merged_dir,
                        mag_a,
                        mag_b,
                        t: *t,
                        degenerate_rows: degenerate_rows.clone(),
                    })
                }
                SegmentHeader::Raw { layer } => Segment::Raw { side, layer: *layer, data: reader.matrix(l, d) },
            };
            for layer in seg.layers() {
                if layer >= n || covered[layer] {
                    return Err(XkvError::HeaderMismatch(format!("layer {layer} out of range or stored twice")));
                }
                covered[layer] = true;
            }
            out.push(seg);
        }
        if covered.iter().any(|c| !c) {
            return Err(XkvError::HeaderMismatch(format!("{} segments do not cover every layer", side.name())));
        }
        Ok(out)
    };
    let key_groups = read_side(Side::Key, &header.key_groups)?;
    let value_groups = read_side(Side::Value, &header.value_groups)?;
    let tail = if header.tail_len > 0 {
        (0..n)
            .map(|i| {
                let k = reader.matrix(header.tail_len, d);
                let v = reader.matrix(header.tail_len, d);
                LayerCache { layer_index: i, k, v }
            })
            .collect()
    } else {
        Vec::new()
    };
    Ok(CompressedDump { meta, plan: header.plan, key_groups, value_groups, tail })
}

pub fn write_compressed(cd: &CompressedDump, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_compressed(cd)?)?;
    Ok(())
}

pub fn read_compressed(path: impl AsRef<Path>) -> Result<CompressedDump> {
    decode_compressed(&fs::read(path)?)
}
