//! Browser bindings over a small synthetic cache. Each exported function
//! returns a JSON string; the `*_json` functions hold the logic so they can be
//! tested natively.

use serde::Serialize;
use wasm_bindgen::prelude::*;
use xkv_core::analysis::{cka_matrix, cosine_similarity_matrix, rank_curve};
use xkv_core::atteval::{QuerySource, Reference};
use xkv_core::compress::{compress, CompressionPlan, Method};
use xkv_core::error::Result;
use xkv_core::kvdump::{synth_dump, CacheDump, Side, SynthConfig};

pub const NUM_LAYERS: usize = 8;

fn demo_dump(alignment: f64, noise: f64, seed: u64) -> Result<CacheDump> {
    synth_dump(&SynthConfig {
        num_layers: NUM_LAYERS,
        seq_len: 128,
        num_kv_heads: 2,
        head_dim: 16,
        shared_rank: 6,
        private_rank: 4,
        noise,
        alignment,
        seed,
        ..Default::default()
    })
}

#[derive(Serialize)]
struct Heatmaps {
    cka: Vec<Vec<f64>>,
    cosine: Vec<Vec<f64>>,
}

pub fn heatmaps_json(alignment: f64, noise: f64, seed: u64, side: &str) -> Result<String> {
    let dump = demo_dump(alignment, noise, seed)?;
    let side = if side == "key" { Side::Key } else { Side::Value };
    let out = Heatmaps { cka: cka_matrix(&dump, side)?.values, cosine: cosine_similarity_matrix(&dump, side)?.values };
    Ok(serde_json::to_string(&out)?)
}

pub fn rank_curve_json(alignment: f64, noise: f64, seed: u64, energy: f64) -> Result<String> {
    let dump = demo_dump(alignment, noise, seed)?;
    Ok(serde_json::to_string(&rank_curve(&dump, &[1, 2, 4, 8], energy)?)?)
}

#[derive(Serialize)]
struct TradeoffPoint {
    method: &'static str,
    group_size: usize,
    target: f64,
    rate: f64,
    key_rank: usize,
    value_rank: usize,
    key_err: f64,
    value_err: f64,
    attn_err: f64,
}

pub const TRADEOFF_TARGETS: [f64; 6] = [2.0, 3.0, 4.0, 6.0, 8.0, 12.0];

/// Error against achieved rate for single-layer SVD and cross-layer groups of 2 and 4.
pub fn tradeoff_json(alignment: f64, noise: f64, seed: u64) -> Result<String> {
    let dump = demo_dump(alignment, noise, seed)?;
    let reference = Reference::new(&dump, &QuerySource::synthetic(seed))?;
    let mut points = Vec::new();
    for (method, g) in [(Method::SingleSvd, 1), (Method::Xkv, 2), (Method::Xkv, 4)] {
        for target in TRADEOFF_TARGETS {
            let Ok(plan) = CompressionPlan::for_target_rate(method, g, target, &dump.meta, 1.5) else {
                continue;
            };
            let r = reference.compare_compressed(&compress(&dump, &plan)?)?;
            points.push(TradeoffPoint {
                method: if method == Method::Xkv { "xkv" } else { "single_svd" },
                group_size: g,
                target,
                rate: r.compression_rate,
                key_rank: plan.key_rank,
                value_rank: plan.value_rank,
                key_err: r.mean_key_rel_err,
                value_err: r.mean_value_rel_err,
                attn_err: r.mean_attn_out_rel_err,
            });
        }
    }
    Ok(serde_json::to_string(&points)?)
}

fn js(r: Result<String>) -> std::result::Result<String, JsError> {
    r.map_err(|e| JsError::new(&format!("{}: {e}", e.code())))
}

#[wasm_bindgen]
pub fn heatmaps(alignment: f64, noise: f64, seed: u32, side: &str) -> std::result::Result<String, JsError> {
    js(heatmaps_json(alignment, noise, seed.into(), side))
}

#[wasm_bindgen(js_name = rankCurve)]
pub fn rank_curve_js(alignment: f64, noise: f64, seed: u32, energy: f64) -> std::result::Result<String, JsError> {
    js(rank_curve_json(alignment, noise, seed.into(), energy))
}

#[wasm_bindgen]
pub fn tradeoff(alignment: f64, noise: f64, seed: u32) -> std::result::Result<String, JsError> {
    js(tradeoff_json(alignment, noise, seed.into()))
}
