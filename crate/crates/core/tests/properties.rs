use gqa_core::grouping::{score_grouping, search_grouping, validate_partition, SearchConfig};
use gqa_core::linalg::{
    orthogonal_procrustes, rotation_procrustes_2d_blocks, svd, wrap_angle, BlockRotation, Matrix,
    Pairing,
};
use gqa_core::model::{forward, KVCacheSet, LayerCache, ModelConfig, ModelWeights};
use gqa_core::pruning::{l0_loss, HardConcrete};
use gqa_core::similarity::{aligned_similarity, original_similarity, Criterion, Target};
use gqa_core::grouping::{GroupingPlan, GroupingMode, LayerGrouping};
use gqa_core::transform::regroup_heads;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-3.0f64..3.0, rows * cols)
        .prop_map(move |d| Matrix::new(rows, cols, d).unwrap())
}

fn sized_matrix() -> impl Strategy<Value = Matrix> {
    (1usize..7, 1usize..7).prop_flat_map(|(r, c)| matrix(r, c))
}

fn det2(m: &Matrix, a: usize, b: usize) -> f64 {
    m[(a, a)] * m[(b, b)] - m[(a, b)] * m[(b, a)]
}

fn cache(seed: u64, h: usize, d: usize, n: usize) -> KVCacheSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let heads = |rng: &mut ChaCha8Rng| (0..h).map(|_| Matrix::random_normal(d, n, 1.0, rng)).collect();
    KVCacheSet {
        n_tokens: n,
        head_dim: d,
        layers: vec![LayerCache {
            keys: heads(&mut rng),
            values: heads(&mut rng),
        }],
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn svd_reconstructs(a in sized_matrix()) {
        let r = svd(&a).unwrap();
        let k = a.rows().min(a.cols());
        prop_assert_eq!(r.s.len(), k);
        prop_assert!(r.s.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(r.s.iter().all(|&s| s >= 0.0));
        let err = r.reconstruct().sub(&a).frobenius_norm();
        prop_assert!(err <= 1e-10 * a.frobenius_norm().max(1e-300), "{err}");
        let utu = r.u.t_matmul(&r.u);
        let vvt = r.vt.matmul_t(&r.vt);
        // rank-deficient inputs may leave zero columns only where s = 0
        for i in 0..k {
            if r.s[i] > 1e-12 * r.s[0] {
                prop_assert!((utu[(i, i)] - 1.0).abs() < 1e-10);
                prop_assert!((vvt[(i, i)] - 1.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn procrustes_is_orthogonal((x, y) in (1usize..6, 1usize..12).prop_flat_map(|(d, n)| (matrix(d, n), matrix(d, n)))) {
        let q = orthogonal_procrustes(&x, &y).unwrap();
        prop_assert!(q.q.orthogonality_error() < 1e-10);
    }

    #[test]
    fn block_rotation_blocks_are_proper(
        angles in prop::collection::vec(-10.0f64..10.0, 1..5),
        interleaved in any::<bool>(),
    ) {
        let pairing = if interleaved { Pairing::Interleaved } else { Pairing::HalfSplit };
        let r = BlockRotation { angles: angles.clone(), pairing };
        let m = r.to_matrix();
        prop_assert!(m.orthogonality_error() < 1e-12);
        for (a, b) in pairing.pairs(r.dim()) {
            prop_assert!((det2(&m, a, b) - 1.0).abs() < 1e-12);
        }
        let x = Matrix::from_fn(r.dim(), 3, |i, j| (i * 3 + j) as f64 - 2.0);
        prop_assert!(r.apply(&x).max_abs_diff(&m.matmul(&x)) < 1e-12);
        prop_assert!(r.compose(&r.inverse()).to_matrix().max_abs_diff(&Matrix::identity(r.dim())) < 1e-12);
    }

    #[test]
    fn fitted_block_rotation_recovers_angles(
        angles in prop::collection::vec(-3.0f64..3.0, 1..4),
        seed in any::<u64>(),
    ) {
        let r = BlockRotation { angles: angles.clone(), pairing: Pairing::HalfSplit };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Matrix::random_normal(r.dim(), 10, 1.0, &mut rng);
        let fit = rotation_procrustes_2d_blocks(&x, &r.apply(&x), Pairing::HalfSplit).unwrap();
        for (a, b) in fit.angles.iter().zip(&angles) {
            prop_assert!(wrap_angle(a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn wrapped_angles_are_in_range(t in -100.0f64..100.0) {
        let w = wrap_angle(t);
        prop_assert!(w > -std::f64::consts::PI && w <= std::f64::consts::PI);
        prop_assert!((w.sin() - t.sin()).abs() < 1e-9 && (w.cos() - t.cos()).abs() < 1e-9);
    }

    #[test]
    fn similarity_matrices_are_symmetric_and_bounded(seed in any::<u64>(), h in 2usize..5) {
        let c = cache(seed, h, 4, 12);
        for target in [Target::Key, Target::Value] {
            for criterion in [Criterion::Cos, Criterion::Dist] {
                let orig = original_similarity(&c, 0, target, criterion).unwrap();
                let (after, _) = aligned_similarity(&c, 0, target, criterion, Pairing::HalfSplit).unwrap();
                for i in 0..h {
                    for j in 0..h {
                        prop_assert_eq!(after.score(i, j), after.score(j, i));
                        let s = after.score(i, j);
                        match criterion {
                            Criterion::Cos => prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&s)),
                            Criterion::Dist => prop_assert!(s <= 0.0),
                        }
                        if i != j {
                            prop_assert!(s >= orig.score(i, j) - 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn search_returns_a_scored_partition(seed in any::<u64>(), (h, g) in prop::sample::select(vec![(4, 2), (6, 3), (6, 2), (8, 4), (8, 2)])) {
        let c = cache(seed, h, 4, 8);
        let (sim, _) = aligned_similarity(&c, 0, Target::Value, Criterion::Cos, Pairing::HalfSplit).unwrap();
        let cfg = SearchConfig { epochs: 3, max_iter: 50, rng_seed: seed, temperature: None };
        let found = search_grouping(&sim, g, &cfg).unwrap();
        validate_partition(&found.groups, h).unwrap();
        prop_assert!(found.groups.iter().all(|grp| grp.len() == h / g));
        prop_assert_eq!(found.score, score_grouping(&found.groups, &sim).unwrap());
    }

    #[test]
    fn gates_stay_in_unit_interval(la in -50.0f64..50.0, u in 1e-9f64..1.0 - 1e-9) {
        let hc = HardConcrete::default();
        let (z, dz) = hc.deterministic(la);
        prop_assert!((0.0..=1.0).contains(&z) && dz >= 0.0);
        let (s, ds) = hc.sample_with(la, u);
        prop_assert!((0.0..=1.0).contains(&s) && ds >= 0.0);
        let (e, de) = hc.expected(la);
        prop_assert!((0.0..=1.0).contains(&e) && de >= 0.0);
        prop_assert!(hc.expected(la + 0.5).0 >= e);
    }

    #[test]
    fn target_loss_matches_scalar_form(m in 0.0f64..1.0, t in 0.0f64..1.0) {
        let (loss, grad) = l0_loss(m, t);
        let want = (m - t).abs() + (m - t) * (m - t);
        prop_assert!((loss - want).abs() <= 1e-15);
        prop_assert!(loss >= 0.0);
        prop_assert_eq!(l0_loss(t, t).0, 0.0);
        if m != t {
            let h = 1e-7;
            let fd = (l0_loss(m + h, t).0 - l0_loss(m - h, t).0) / (2.0 * h);
            if (m - t).abs() > 2.0 * h {
                prop_assert!((fd - grad).abs() < 1e-6);
            }
        }
    }
}

fn small_model(seed: u64) -> (ModelWeights, ModelConfig) {
    let cfg = ModelConfig {
        d_model: 16,
        n_heads: 4,
        head_dim: 4,
        n_layers: 2,
        d_ff: 24,
        vocab_size: 32,
        n_kv_heads: 4,
        ..ModelConfig::toy()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (ModelWeights::random(&cfg, &mut rng).unwrap(), cfg)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn any_head_permutation_preserves_logits(seed in any::<u64>(), tokens in prop::collection::vec(0u32..32, 1..10)) {
        let (w, cfg) = small_model(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let layers = (0..cfg.n_layers)
            .map(|_| {
                let mut p: Vec<usize> = (0..cfg.n_heads).collect();
                p.shuffle(&mut rng);
                LayerGrouping { groups: p.chunks(2).map(<[usize]>::to_vec).collect(), score: 0.0 }
            })
            .collect();
        let plan = GroupingPlan {
            mode: GroupingMode::Value,
            criterion: Criterion::Cos,
            n_heads: cfg.n_heads,
            n_groups: 2,
            layers,
        };
        let moved = regroup_heads(&w, &cfg, &plan).unwrap();
        let a = forward(&w, &cfg, &tokens).unwrap();
        let b = forward(&moved, &cfg, &tokens).unwrap();
        prop_assert!(a.max_abs_diff(&b) <= 1e-12);
    }
}
