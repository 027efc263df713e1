mod common;

use common::{jacobi_svd, orthonormality_error};
use proptest::prelude::*;
use xkv_core::compress::codec::{decode_compressed, encode_compressed, payload_prompt_elements};
use xkv_core::compress::*;
use xkv_core::error::XkvError;
use xkv_core::kvdump::{synth_dump, CacheDump, CacheMeta, Dtype, Side, SynthConfig, LAYOUT_TAG};
use xkv_core::linalg::{hcat, Matrix};

fn synth(cfg: SynthConfig) -> CacheDump {
    synth_dump(&cfg).unwrap()
}

fn base_cfg() -> SynthConfig {
    SynthConfig {
        num_layers: 8,
        seq_len: 128,
        num_kv_heads: 2,
        head_dim: 8,
        shared_rank: 6,
        private_rank: 3,
        noise: 0.01,
        alignment: 0.8,
        seed: 1,
        ..Default::default()
    }
}

fn meta(n: usize, heads: usize, head_dim: usize, l: usize) -> CacheMeta {
    CacheMeta {
        model_id: "m".into(),
        num_layers: n,
        num_kv_heads: heads,
        head_dim,
        seq_len: l,
        dtype: Dtype::F16,
        keys_pre_rope: true,
        rope_base: 10000.0,
        layout: LAYOUT_TAG.into(),
    }
}

/// Element count from first principles: every stored tensor's shape.
fn literal_elements(plan: &CompressionPlan, m: &CacheMeta) -> (u64, u64) {
    let (n, l, d) = (m.num_layers as u64, m.seq_len as u64, m.width() as u64);
    let original = 2 * n * l * d;
    let compressed = match plan.method {
        Method::None => original,
        Method::Xkv | Method::SingleSvd => {
            let g = if plan.method == Method::SingleSvd { 1 } else { plan.group_size as u64 };
            let mut total = 0;
            for r in [plan.key_rank as u64, plan.value_rank as u64] {
                for _group in 0..n / g {
                    let a = l * r;
                    let bs = g * (r * d);
                    total += a + bs;
                }
            }
            total
        }
        Method::Slerp => {
            let start = plan.slerp_start_layer.unwrap() as u64;
            let pairs = (n - start) / 2;
            2 * (start * l * d + pairs * (l * d + l + l))
        }
    };
    (original, compressed)
}

#[test]
fn stride_examples() {
    let g = stride_groups(8, 4).unwrap();
    assert_eq!(g[0].indices, vec![0, 1, 2, 3]);
    assert_eq!(g[1].indices, vec![4, 5, 6, 7]);
    assert_eq!(stride_groups(4, 1).unwrap().len(), 4);
    assert!(matches!(stride_groups(6, 4), Err(XkvError::IndivisibleGrouping { num_layers: 6, group_size: 4 })));
    assert!(matches!(stride_groups(6, 0), Err(XkvError::IndivisibleGrouping { .. })));
}

#[test]
fn identical_exact_rank_group_is_lossless() {
    let mut d = synth(SynthConfig { noise: 0.0, private_rank: 0, shared_rank: 5, ..base_cfg() });
    for i in 1..4 {
        d.layers[i].k = d.layers[0].k.clone();
        d.layers[i].v = d.layers[0].v.clone();
    }
    let cd = compress(&d, &CompressionPlan::xkv(4, 5, 5)).unwrap();
    let rebuilt = reconstruct(&cd);
    for side in Side::BOTH {
        for e in &layer_errors(&d, &rebuilt, side)[..4] {
            assert!(*e <= 1e-9);
        }
        if let Segment::Svd(g) = &cd.segments(side)[0] {
            // One A, and the per-layer B blocks coincide.
            for b in &g.b[1..] {
                assert!((b - &g.b[0]).amax() <= 1e-9);
            }
        }
    }
}

#[test]
fn fully_shared_synth_rank_eight_is_exact() {
    let d = synth(SynthConfig {
        alignment: 1.0,
        noise: 0.0,
        shared_rank: 8,
        private_rank: 0,
        dtype: Dtype::F32,
        ..base_cfg()
    });
    let rebuilt = reconstruct(&compress(&d, &CompressionPlan::xkv(4, 8, 8)).unwrap());
    for side in Side::BOTH {
        assert!(layer_errors(&d, &rebuilt, side).iter().all(|e| *e <= 1e-8));
    }
}

#[test]
fn factor_invariants() {
    let d = synth(base_cfg());
    let cd = compress(&d, &CompressionPlan::xkv(4, 10, 15)).unwrap();
    for side in Side::BOTH {
        let r = if side == Side::Key { 10 } else { 15 };
        let segs = cd.segments(side);
        assert_eq!(segs.len(), 2);
        let mut covered = vec![];
        for s in segs {
            let Segment::Svd(g) = s else { panic!("expected svd segment") };
            assert_eq!(g.a.shape(), (128, r));
            assert_eq!(g.b.len(), 4);
            assert!(g.b.iter().all(|b| b.shape() == (r, 16)));
            let refs: Vec<&Matrix> = g.b.iter().collect();
            let concat = hcat(&refs);
            assert!(orthonormality_error(&concat.transpose()) <= 1e-8);
            covered.extend(g.group.indices.iter().copied());
        }
        assert_eq!(covered, (0..8).collect::<Vec<_>>());
    }
}

#[test]
fn group_size_one_matches_single_svd() {
    let d = synth(base_cfg());
    let a = compress(&d, &CompressionPlan::xkv(1, 4, 6)).unwrap();
    let b = compress(&d, &CompressionPlan::single_svd(4, 6)).unwrap();
    assert_eq!(a.key_groups, b.key_groups);
    assert_eq!(a.value_groups, b.value_groups);
}

#[test]
fn single_svd_residual_equals_spectrum_tail() {
    let d = synth(SynthConfig { num_layers: 2, ..base_cfg() });
    let r = 5;
    let rebuilt = reconstruct(&compress(&d, &CompressionPlan::single_svd(r, r)).unwrap());
    for (orig, approx) in d.layers.iter().zip(&rebuilt.layers) {
        for side in Side::BOTH {
            let x = orig.side(side);
            let (_, s, _) = jacobi_svd(x);
            let tail: f64 = s[r..].iter().map(|v| v * v).sum();
            let residual = (x - approx.side(side)).norm_squared();
            assert!((residual - tail).abs() <= 1e-8 * tail.max(1e-300), "{residual} vs {tail}");
        }
    }
}

#[test]
fn rate_derived_ranks_match_concatenation_residual() {
    let d = synth(base_cfg());
    let plan = CompressionPlan::for_target_rate(Method::Xkv, 4, 2.5, &d.meta, 1.5).unwrap();
    let rebuilt = reconstruct(&compress(&d, &plan).unwrap());
    for side in Side::BOTH {
        let r = plan.rank(side);
        let errs = layer_errors(&d, &rebuilt, side);
        let mats = d.side_matrices(side);
        for group in stride_groups(8, 4).unwrap() {
            let members: Vec<&Matrix> = group.indices.iter().map(|&i| mats[i]).collect();
            let concat = hcat(&members);
            // Oracle: best rank-r approximation from the reference SVD.
            let (u, s, v) = jacobi_svd(&concat);
            let mut approx = Matrix::zeros(concat.nrows(), concat.ncols());
            for (k, sk) in s.iter().enumerate().take(r) {
                approx += (u.column(k) * v.column(k).transpose()) * *sk;
            }
            for (pos, &layer) in group.indices.iter().enumerate() {
                let block = concat.columns(pos * 16, 16);
                let residual = (block - approx.columns(pos * 16, 16)).norm() / block.norm();
                assert!((residual - errs[layer]).abs() <= 1e-9, "layer {layer}");
            }
        }
    }
}

#[test]
fn larger_groups_never_worse_on_shared_data() {
    let d = synth(SynthConfig {
        alignment: 1.0,
        noise: 0.0,
        shared_rank: 12,
        private_rank: 0,
        num_layers: 4,
        ..base_cfg()
    });
    let mut prev = f64::INFINITY;
    let mut first = None;
    for g in [1, 2, 4] {
        let plan = CompressionPlan::for_target_rate(Method::Xkv, g, 6.0, &d.meta, 1.5).unwrap();
        let rebuilt = reconstruct(&compress(&d, &plan).unwrap());
        let err: f64 = Side::BOTH.iter().flat_map(|s| layer_errors(&d, &rebuilt, *s)).sum::<f64>() / 8.0;
        assert!(err <= prev + 1e-12, "G={g}: {err} > {prev}");
        prev = err;
        first.get_or_insert(err);
    }
    assert!(first.unwrap() > 1e-3 && prev < first.unwrap());
}

#[test]
fn reconstruction_is_linear_in_a() {
    let d = synth(base_cfg());
    let cd = compress(&d, &CompressionPlan::xkv(2, 5, 7)).unwrap();
    let base = reconstruct(&cd);
    let c = -2.5;
    let mut scaled = cd.clone();
    for seg in scaled.key_groups.iter_mut().chain(scaled.value_groups.iter_mut()) {
        if let Segment::Svd(g) = seg {
            g.a *= c;
        }
    }
    let out = reconstruct(&scaled);
    for (a, b) in base.layers.iter().zip(&out.layers) {
        assert!((&a.k * c - &b.k).amax() <= 1e-12);
        assert!((&a.v * c - &b.v).amax() <= 1e-12);
    }
}

#[test]
fn plan_errors() {
    let d = synth(base_cfg());
    assert!(matches!(compress(&d, &CompressionPlan::xkv(3, 4, 4)), Err(XkvError::IndivisibleGrouping { .. })));
    assert!(matches!(compress(&d, &CompressionPlan::xkv(4, 65, 4)), Err(XkvError::RanksExceedDims { limit: 64, .. })));
    assert!(matches!(compress(&d, &CompressionPlan::xkv(2, 4, 0)), Err(XkvError::RanksExceedDims { .. })));
    let mut post = d.clone();
    post.meta.keys_pre_rope = false;
    assert!(matches!(compress(&post, &CompressionPlan::single_svd(2, 3)), Err(XkvError::KeysNotPreRope)));
    assert!(compress(&post, &CompressionPlan::slerp(None, 0.5)).is_ok());
    assert!(matches!(compress(&d, &CompressionPlan::slerp(Some(3), 0.5)), Err(XkvError::InvalidPlan(_))));
    assert!(matches!(compress(&d, &CompressionPlan::slerp(None, 1.5)), Err(XkvError::InvalidPlan(_))));
    assert!(matches!(
        CompressionPlan::for_target_rate(Method::Slerp, 1, 2.0, &d.meta, 1.5),
        Err(XkvError::InvalidPlan(_))
    ));
}

#[test]
fn none_round_trip_and_tail_passthrough() {
    let d = synth(SynthConfig { tail_len: 5, ..base_cfg() });
    let cd = compress(&d, &CompressionPlan::none()).unwrap();
    let rebuilt = reconstruct(&cd);
    assert_eq!(rebuilt.layers, d.layers);
    assert_eq!(rebuilt.tail, d.tail);
    let lossy = reconstruct(&compress(&d, &CompressionPlan::xkv(4, 3, 4)).unwrap());
    assert_eq!(lossy.tail, d.tail);
    assert_eq!(lossy.meta, d.meta);
}

#[test]
fn full_rank_is_lossless() {
    let d = synth(base_cfg());
    for (g, r) in [(1, 16), (2, 32), (4, 64)] {
        let rebuilt = reconstruct(&compress(&d, &CompressionPlan::xkv(g, r, r)).unwrap());
        for side in Side::BOTH {
            assert!(layer_errors(&d, &rebuilt, side).iter().all(|e| *e <= 1e-8));
        }
    }
}

#[test]
fn compression_is_deterministic_on_both_svd_paths() {
    let d = synth(base_cfg());
    let mut plan = CompressionPlan::xkv(4, 6, 9);
    assert_eq!(compress(&d, &plan).unwrap(), compress(&d, &plan).unwrap());
    plan.svd.exact_threshold = 0;
    plan.seed = 17;
    let a = compress(&d, &plan).unwrap();
    assert_eq!(encode_compressed(&a).unwrap(), encode_compressed(&compress(&d, &plan).unwrap()).unwrap());
}

#[test]
fn slerp_structure_and_endpoints() {
    let mut d = synth(base_cfg());
    // Unit-norm tokens so directions and values coincide.
    for layer in d.layers.iter_mut() {
        for m in [&mut layer.k, &mut layer.v] {
            for mut row in m.row_iter_mut() {
                let n = row.norm();
                row /= n;
            }
        }
    }
    for (t, keep) in [(0.0, 0usize), (1.0, 1usize)] {
        let cd = compress(&d, &CompressionPlan::slerp(None, t)).unwrap();
        assert_eq!(cd.plan.slerp_start_layer, Some(4));
        let rebuilt = reconstruct(&cd);
        for side in Side::BOTH {
            let segs = cd.segments(side);
            assert_eq!(segs.len(), 4 + 2);
            for s in segs {
                if let Segment::Slerp(m) = s {
                    assert!(m.degenerate_rows.is_empty());
                    for row in m.merged_dir.row_iter() {
                        assert!((row.norm() - 1.0).abs() <= 1e-9);
                    }
                    let kept = if keep == 0 { m.pair.0 } else { m.pair.1 };
                    assert!((rebuilt.layers[kept].side(side) - d.layers[kept].side(side)).amax() <= 1e-12);
                }
            }
            for i in 0..4 {
                assert_eq!(rebuilt.layers[i].side(side), d.layers[i].side(side));
            }
        }
    }
}

#[test]
fn slerp_second_layer_gets_first_direction_at_zero() {
    let d = synth(base_cfg());
    let rebuilt = reconstruct(&compress(&d, &CompressionPlan::slerp(Some(6), 0.0)).unwrap());
    for side in Side::BOTH {
        let (a, b) = (d.layers[6].side(side), d.layers[7].side(side));
        let out = rebuilt.layers[7].side(side);
        for i in 0..a.nrows() {
            let expected = a.row(i) / a.row(i).norm() * b.row(i).norm();
            assert!((out.row(i) - expected).amax() <= 1e-12);
        }
    }
}

#[test]
fn rate_examples() {
    let m = meta(32, 8, 128, 65536);
    assert_eq!(compression_rate(&CompressionPlan::none(), &m).unwrap(), 1.0);
    let plan = CompressionPlan::xkv(4, 200, 200);
    let (orig, comp) = literal_elements(&plan, &m);
    assert_eq!(compression_rate(&plan, &m).unwrap(), orig as f64 / comp as f64);
    let s = storage_elements(&plan, &m).unwrap();
    assert_eq!((s.original, s.compressed), (orig, comp));
    let slerp = CompressionPlan { slerp_start_layer: Some(16), ..CompressionPlan::slerp(None, 0.5) };
    let rate = compression_rate(&CompressionPlan::slerp(None, 0.5), &m).unwrap();
    let (o, c) = literal_elements(&slerp, &m);
    assert_eq!(rate, o as f64 / c as f64);
    assert!((rate - 32.0 / 24.0).abs() < 1e-3);
}

#[test]
fn rank_for_rate_scan_oracle() {
    let m = meta(32, 8, 128, 65536);
    let (rk, rv) = rank_for_rate(8.0, &m, 4, 1.5).unwrap();
    // Exhaustive scan with literal counting.
    let mut best = None;
    for k in 1..=4096usize {
        let plan = CompressionPlan::xkv(4, k, ((1.5 * k as f64).round() as usize).max(1));
        let (o, c) = literal_elements(&plan, &m);
        if o as f64 / c as f64 >= 8.0 {
            best = Some(k);
        }
    }
    assert_eq!(Some(rk), best);
    assert_eq!(rv, (1.5 * rk as f64).round() as usize);
    assert!(matches!(rank_for_rate(1e6, &m, 4, 1.5), Err(XkvError::Unachievable { .. })));
    assert!(matches!(rank_for_rate(0.5, &m, 4, 1.5), Err(XkvError::Unachievable { .. })));
    let (near, _) = rank_for_rate(1.0 + 1e-9, &m, 4, 1.5).unwrap();
    assert!(near > 1000);
}

fn rate_of(m: &CacheMeta, g: usize, rk: usize, ratio: f64) -> f64 {
    let plan = CompressionPlan::xkv(g, rk, value_rank_for(rk, ratio));
    let (o, c) = literal_elements(&plan, m);
    o as f64 / c as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn rank_for_rate_round_trip(
        n_groups in 1usize..9,
        g in 1usize..5,
        heads in 1usize..9,
        head_dim in prop_oneof![Just(64usize), Just(128)],
        l in prop_oneof![Just(4096usize), Just(65536)],
        target in 1.05f64..20.0,
        ratio in prop_oneof![Just(1.0f64), Just(1.5), Just(2.0)],
    ) {
        let m = meta(n_groups * g, heads, head_dim, l);
        match rank_for_rate(target, &m, g, ratio) {
            Ok((rk, rv)) => {
                prop_assert_eq!(rv, value_rank_for(rk, ratio));
                prop_assert!(rate_of(&m, g, rk, ratio) >= target);
                let limit = l.min(g * m.width());
                let feasible = |k: usize| k <= limit && value_rank_for(k, ratio) <= limit;
                prop_assert!(feasible(rk));
                if feasible(rk + 1) {
                    prop_assert!(rate_of(&m, g, rk + 1, ratio) < target);
                }
            }
            Err(XkvError::Unachievable { .. }) => prop_assert!(rate_of(&m, g, 1, ratio) < target),
            Err(e) => prop_assert!(false, "unexpected {e}"),
        }
    }

    #[test]
    fn serialized_counts_match_closed_form(seed in 0u64..1000, g_pow in 0u32..3, rk in 1usize..12, t in 0.0f64..1.0) {
        let d = synth(SynthConfig { seed, seq_len: 48, num_layers: 4, ..base_cfg() });
        let g = 1usize << g_pow;
        let rk = rk.min(16);
        let rv = value_rank_for(rk, 1.5).min(16);
        for plan in [CompressionPlan::xkv(g, rk, rv), CompressionPlan::single_svd(rk, rv), CompressionPlan::slerp(None, t), CompressionPlan::none()] {
            let cd = compress(&d, &plan).unwrap();
            let bytes = encode_compressed(&cd).unwrap();
            let (_, closed) = literal_elements(&cd.plan, &d.meta);
            prop_assert_eq!(payload_prompt_elements(&bytes).unwrap(), closed);
            prop_assert_eq!(cd.stored_elements(), closed);
            prop_assert_eq!(storage_elements(&cd.plan, &d.meta).unwrap().compressed, closed);
            let back = decode_compressed(&bytes).unwrap();
            prop_assert_eq!(encode_compressed(&back).unwrap(), bytes);
        }
    }
}
