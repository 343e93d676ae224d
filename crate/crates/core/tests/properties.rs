use grcvit::complexity::{
    assign_granularity, fuse_score, shannon_entropy, thresholds_from_raw, ComplexityFeatures, EstimatorParams,
    Granularity,
};
use grcvit::estimator::quantile_labels;
use grcvit::image::{resize_bilinear, GrayImage};
use grcvit::model::window::{cyclic_shift, shift_mask, window_partition, window_reverse};
use grcvit::model::{block_forward, window_mhsa, BlockContext, InitOptions, ModelParams};
use grcvit::tensor::{Graph, ParamStore, Tensor};
use grcvit::ModelConfig;
use proptest::prelude::*;

fn grid(side: usize, dim: usize, seed: u64) -> Tensor {
    Tensor::from_fn(&[side, side, dim], |i| ((i as u64).wrapping_mul(2654435761).wrapping_add(seed) % 1000) as f64 / 997.0)
}

fn window_case() -> impl Strategy<Value = (usize, usize)> {
    (1usize..=8, 1usize..=6).prop_map(|(m, k)| (m * k, m))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn thresholds_are_ordered(a in -30.0f64..30.0, b in -30.0f64..30.0) {
        let th = thresholds_from_raw(&EstimatorParams { w: [0.0; 3], a, b });
        prop_assert!(0.0 < th.alpha && th.alpha <= th.beta && th.beta <= 1.0);
        if a.abs() < 10.0 && b.abs() < 10.0 {
            prop_assert!(th.alpha < th.beta && th.beta < 1.0);
        }
    }

    #[test]
    fn fused_score_in_open_unit_interval(
        f in prop::array::uniform3(0.0f64..=1.0),
        w in prop::array::uniform3(-5.0f64..5.0),
    ) {
        let s = fuse_score(&ComplexityFeatures::new(f[0], f[1], f[2]), &EstimatorParams { w, a: 0.0, b: 0.0 });
        prop_assert!(s > 0.0 && s < 1.0);
        prop_assert!((0.5..=1.0 / (1.0 + (-1.0f64).exp())).contains(&s));
    }

    #[test]
    fn granularity_is_monotone_in_score(s1 in 0.0f64..1.0, s2 in 0.0f64..1.0, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let th = thresholds_from_raw(&EstimatorParams { w: [0.0; 3], a, b });
        let (lo, hi) = if s1 <= s2 { (s1, s2) } else { (s2, s1) };
        prop_assert!(assign_granularity(lo, &th).level() <= assign_granularity(hi, &th).level());
    }

    #[test]
    fn quantile_buckets_balanced(mut scores in prop::collection::vec(0.0f64..1.0, 3..300)) {
        scores.sort_by(f64::total_cmp);
        scores.dedup();
        prop_assume!(scores.len() >= 3);
        let n = scores.len() as f64;
        let (_, _, labels) = quantile_labels(&scores);
        let mut sizes = [0usize; 3];
        labels.iter().for_each(|l| sizes[l.index()] += 1);
        for s in sizes {
            prop_assert!((s as f64 - n / 3.0).abs() <= 1.0, "{sizes:?}");
        }
    }

    #[test]
    fn entropy_bounded(values in prop::collection::vec(0.0f64..=1.0, 64)) {
        let img = GrayImage::new(8, 8, values).unwrap();
        let h = shannon_entropy(&img);
        prop_assert!((0.0..=1.0).contains(&h));
    }

    #[test]
    fn resize_stays_in_range(values in prop::collection::vec(0.0f64..=1.0, 30), w in 1usize..20, h in 1usize..20) {
        let img = GrayImage::new(6, 5, values).unwrap();
        let out = resize_bilinear(&img, w, h).unwrap();
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn partition_roundtrip_is_bit_exact((side, m) in window_case(), dim in 1usize..4, seed in any::<u64>()) {
        let g = grid(side, dim, seed);
        prop_assert_eq!(window_reverse(&window_partition(&g, m).unwrap(), side).unwrap(), g);
    }

    #[test]
    fn shift_unshift_is_bit_exact((side, _m) in window_case(), k in 0usize..48, seed in any::<u64>()) {
        let g = grid(side, 2, seed);
        let k = (k % side) as isize;
        prop_assert_eq!(cyclic_shift(&cyclic_shift(&g, k).unwrap(), -k).unwrap(), g.clone());
        prop_assert_eq!(cyclic_shift(&cyclic_shift(&g, -k).unwrap(), k).unwrap(), g);
    }

    #[test]
    fn attention_rows_are_distributions_and_mask_holds(
        per in 2usize..4,
        m in 2usize..4,
        heads in 1usize..3,
        seed in any::<u64>(),
    ) {
        let side = per * m;
        let d = 2 * heads;
        let shift = m / 2;
        let mut store = ParamStore::new();
        let mut k = seed;
        let mut next = |shape: &[usize]| {
            Tensor::from_fn(shape, |_| {
                k = k.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((k >> 33) as f64 / (1u64 << 31) as f64) * 2.0 - 1.0
            })
        };
        store.insert("blocks.0.attn.qkv.weight", next(&[d, 3 * d])).unwrap();
        store.insert("blocks.0.attn.qkv.bias", next(&[3 * d])).unwrap();
        store.insert("blocks.0.attn.proj.weight", next(&[d, d])).unwrap();
        store.insert("blocks.0.attn.proj.bias", next(&[d])).unwrap();
        store.insert(&format!("blocks.0.attn.rel_bias.w{m}"), next(&[(2 * m - 1).pow(2), heads])).unwrap();
        let x = next(&[side * side, d]);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let mut probs = Tensor::zeros(&[0]);
        let ctx = BlockContext { side, window: m, shift, batch: 1, heads };
        window_mhsa(&mut g, &store, xv, 0, ctx, Some(&mut probs)).unwrap();
        let mask = shift_mask(side, m, shift).unwrap();
        let mm = m * m;
        for (r, row) in probs.data().chunks(mm).enumerate() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            let mrow = &mask.data()[(r % (per * per * mm)) * mm..][..mm];
            let masked: f64 = row.iter().zip(mrow).filter(|(_, &mv)| mv != 0.0).map(|(p, _)| p).sum();
            prop_assert!(masked < 1e-4);
        }
    }

    #[test]
    fn zero_residual_block_is_identity(seed in 0u64..1000, g in 0usize..3) {
        let cfg = ModelConfig::tiny();
        let p = ModelParams::init_with(cfg.clone(), InitOptions { seed, zero_residual: true, ..Default::default() }).unwrap();
        let gran = Granularity::ALL[g];
        let side = cfg.grid_side(gran);
        let x = Tensor::from_fn(&[side * side, cfg.unified_dim], |i| ((i as u64 * 31 + seed) % 17) as f64 / 8.0 - 1.0);
        let mut graph = Graph::new();
        let xv = graph.constant(x.clone());
        let y = block_forward(&mut graph, &p.store, xv, 0, BlockContext::for_block(&cfg, gran, 0, 1), None).unwrap();
        prop_assert_eq!(graph.value(y), &x);
    }

    #[test]
    fn param_store_roundtrip_is_bit_exact(values in prop::collection::vec(-1e3f64..1e3, 1..40)) {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::new(&[values.len()], values.clone()).unwrap()).unwrap();
        store.insert("b.bias", Tensor::full(&[2, 3], 0.25)).unwrap();
        store.round_to_f32();
        let (manifest, blob) = store.to_manifest_and_blob();
        let back = ParamStore::from_manifest_and_blob(&manifest, &blob).unwrap();
        prop_assert_eq!(back, store);
    }
}
