use hierasparse::attention::{
    dense_attention_oracle, prefill_attention, sparse_gemm_emulated, AttentionWorkload, Phase, TileConfig,
};
use hierasparse::compressor::{compress, decompress, measure_size};
use hierasparse::container::{parse, serialize};
use hierasparse::cost::{compression_ratio, decode_speedup, prefill_speedup, CostParams};
use hierasparse::nm::{expand_sparse, pack_metadata, unpack_metadata, GroupingAxis, NmPattern};
use hierasparse::pruner::{prune_single, select_blocks, SparsityConfig};
use hierasparse::Tensor2D;
use proptest::prelude::*;

fn pair() -> impl Strategy<Value = [u8; 2]> {
    (0u8..4, 0u8..4)
        .prop_filter("distinct", |(a, b)| a != b)
        .prop_map(|(a, b)| [a.min(b), a.max(b)])
}

fn tensor(rows: usize, cols: usize) -> impl Strategy<Value = Tensor2D> {
    prop::collection::vec(-8.0f32..8.0, rows * cols).prop_map(move |d| Tensor2D::new(rows, cols, d).unwrap())
}

/// `(rows, d, cache)` with `d` a multiple of 4.
fn cache() -> impl Strategy<Value = Tensor2D> {
    (0usize..48, 1usize..5).prop_flat_map(|(l, g)| tensor(l, 4 * g))
}

fn axis() -> impl Strategy<Value = GroupingAxis> {
    prop_oneof![Just(GroupingAxis::HeadDim), Just(GroupingAxis::Sequence)]
}

proptest! {
    #[test]
    fn metadata_round_trip(groups in prop::collection::vec(pair(), 0..40)) {
        let meta = pack_metadata(&groups, NmPattern::TWO_FOUR).unwrap();
        prop_assert_eq!(meta.words().len(), groups.len().div_ceil(4));
        let back = unpack_metadata(&meta, groups.len()).unwrap();
        let want: Vec<Vec<u8>> = groups.iter().map(|g| g.to_vec()).collect();
        prop_assert_eq!(back, want);
    }

    #[test]
    fn sparse_gemm_equals_expand_then_matmul(
        (rows, groups, cols) in (1usize..6, 1usize..5, 1usize..6),
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let nnz = Tensor2D::gaussian(rows, 2 * groups, 1.0, &mut rng);
        let codes: Vec<[u8; 2]> = (0..rows * groups)
            .map(|_| {
                let a = rng.random_range(0u8..3);
                [a, rng.random_range(a + 1..4)]
            })
            .collect();
        let meta = pack_metadata(&codes, NmPattern::TWO_FOUR).unwrap();
        let b = Tensor2D::gaussian(4 * groups, cols, 1.0, &mut rng);
        let direct = sparse_gemm_emulated(&nnz, &meta, NmPattern::TWO_FOUR, &b).unwrap();
        let expanded = expand_sparse(&nnz, &meta, NmPattern::TWO_FOUR, 4 * groups).unwrap();
        prop_assert_eq!(direct, expanded.matmul(&b).unwrap());
    }

    #[test]
    fn sparse_groups_keep_exactly_two(x in cache(), axis in axis(), s in 0.0f64..=1.0) {
        let cfg = SparsityConfig::unprotected(s, s, 4);
        let m = prune_single(&x, axis, &cfg).unwrap();
        for b in m.block.sparse_blocks() {
            prop_assert!(m.element.check_cardinality(4 * b, 4 * b + 4, axis, cfg.pattern).is_ok());
        }
        for b in 0..m.block.len() {
            if m.block.is_dense(b) {
                let kept = (4 * b..(4 * b + 4).min(x.rows()))
                    .all(|r| (0..x.cols()).all(|c| m.element.get(r, c)));
                prop_assert!(kept);
            }
        }
    }

    #[test]
    fn selection_is_monotone_in_target(
        losses in prop::collection::vec(0.0f64..10.0, 0..30),
        a in 0.0f64..=1.0,
        b in 0.0f64..=1.0,
        prefix in 0usize..4,
        suffix in 0usize..4,
    ) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let small = select_blocks(&losses, lo, prefix, suffix);
        let large = select_blocks(&losses, hi, prefix, suffix);
        for i in small.sparse_blocks() {
            prop_assert!(!large.is_dense(i));
        }
        let worst_sparse = large.sparse_blocks().iter().map(|&i| losses[i]).fold(f64::MIN, f64::max);
        let end = losses.len().saturating_sub(suffix);
        for (i, &loss) in losses.iter().enumerate().take(end).skip(prefix.min(end)) {
            if large.is_dense(i) {
                prop_assert!(loss >= worst_sparse);
            }
        }
    }

    #[test]
    fn protected_blocks_stay_dense(
        x in (1usize..60).prop_flat_map(|l| tensor(l, 8)),
        sink in 0usize..20,
        window in 0usize..20,
    ) {
        let cfg = SparsityConfig { sink_tokens: sink, local_window: window, ..SparsityConfig::unprotected(1.0, 1.0, 4) };
        let m = prune_single(&x, GroupingAxis::HeadDim, &cfg).unwrap();
        let l = x.rows();
        for b in m.block.sparse_blocks() {
            prop_assert!(4 * b >= sink);
            prop_assert!(4 * b + 4 <= l.saturating_sub(window));
        }
    }

    #[test]
    fn masks_invariant_under_power_of_two_scaling(x in cache(), axis in axis(), e in -6i32..6) {
        let cfg = SparsityConfig::unprotected(0.5, 0.5, 4);
        let a = prune_single(&x, axis, &cfg).unwrap();
        let b = prune_single(&x.scaled(2f32.powi(e)), axis, &cfg).unwrap();
        prop_assert_eq!(a.element, b.element);
        prop_assert_eq!(a.block.flags, b.block.flags);
    }

    #[test]
    fn compress_round_trip(x in cache(), axis in axis(), s in 0.0f64..=1.0) {
        let cfg = SparsityConfig::unprotected(s, s, 4);
        let m = prune_single(&x, axis, &cfg).unwrap();
        let c = compress(&x, &m, &cfg).unwrap();
        prop_assert_eq!(decompress(&c).unwrap(), m.element.apply(&x).unwrap());
        let bytes = serialize(&c).unwrap();
        prop_assert_eq!(serialize(&parse(&bytes).unwrap()).unwrap(), bytes);
        let size = measure_size(&c);
        prop_assert_eq!(size.index_bytes, 2 * c.block_count() as u64);
    }

    #[test]
    fn container_never_panics_on_noise(bytes in prop::collection::vec(any::<u8>(), 0..128)) {
        let _ = parse(&bytes);
    }

    #[test]
    fn speedups_monotone_and_bounded(a in 0.0f64..=1.0, b in 0.0f64..=1.0, step in 0.0f64..0.5) {
        let p = CostParams::with_sparsity(a, b);
        let q = CostParams::with_sparsity((a + step).min(1.0), b);
        prop_assert!(prefill_speedup(&q) >= prefill_speedup(&p));
        prop_assert!(decode_speedup(&q) >= decode_speedup(&p));
        prop_assert!(compression_ratio(&q, true) >= compression_ratio(&p, true));
        prop_assert!((1.0..=2.0).contains(&prefill_speedup(&p)));
        prop_assert!(decode_speedup(&p) >= 1.0 && decode_speedup(&p) <= 1.0 / (1.0 - 0.4375) + 1e-12);
        prop_assert!(compression_ratio(&p, true) < compression_ratio(&p, false));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn prefill_matches_oracle(
        l in 1usize..80,
        s in (0.0f64..=1.0, 0.0f64..=1.0),
        b_r in 1usize..20,
        causal in any::<bool>(),
        seed in any::<u64>(),
    ) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let d = 8;
        let k = Tensor2D::gaussian(l, d, 1.0, &mut rng);
        let v = Tensor2D::gaussian(l, d, 1.0, &mut rng);
        let q = Tensor2D::gaussian(l, d, 1.0, &mut rng);
        let cfg = SparsityConfig::unprotected(s.0, s.1, 8);
        let ck = compress(&k, &prune_single(&k, GroupingAxis::HeadDim, &cfg).unwrap(), &cfg).unwrap();
        let cv = compress(&v, &prune_single(&v, GroupingAxis::Sequence, &cfg).unwrap(), &cfg).unwrap();
        let w = AttentionWorkload::new(vec![q], ck.into(), cv.into(), causal, Phase::Prefill).unwrap();
        let got = prefill_attention(&w, TileConfig::new(b_r, 8)).unwrap();
        let want = dense_attention_oracle(&w).unwrap();
        prop_assert!(got[0].max_abs_diff(&want[0]) < 1e-5);
    }
}
