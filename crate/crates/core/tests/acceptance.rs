//! Acceptance gate. Runs without the libtest harness so every criterion
//! prints one PASS/FAIL line; the process exits nonzero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use hierasparse::attention::{
    decode_attention, decode_attention_unsplit, dense_attention_oracle, flop_and_byte_count, prefill_attention,
    AttentionWorkload, KvSource, Phase, SoftmaxState, TileConfig,
};
use hierasparse::compressor::{compress, decompress, fused_magnitude_compress, measure_size};
use hierasparse::container::{parse, round_to_storage, serialize};
use hierasparse::cost::{compression_ratio, decode_speedup, design_space_table, prefill_speedup, CostParams};
use hierasparse::nm::{ElementMask, GroupingAxis, NmPattern};
use hierasparse::pipeline::{run_pipeline, PhaseSparsity, RunConfig};
use hierasparse::pruner::{mask_from_blocks, prune_cache, prune_single, BlockMask, HierarchicalMask, SparsityConfig};
use hierasparse::Tensor2D;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome, Duration);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    };
}

const GRID: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

fn c1_cost_model() -> Outcome {
    let r = |sk, sv| compression_ratio(&CostParams::with_sparsity(sk, sv), false);
    ensure!(
        (r(0.5, 1.0) - 1.49).abs() <= 0.005,
        "r_comp(0.5, 1.0) = {}",
        r(0.5, 1.0)
    );
    ensure!((r(1.0, 1.0) - 1.78).abs() <= 0.005, "r_comp(1, 1) = {}", r(1.0, 1.0));
    let p = |sk, sv| prefill_speedup(&CostParams::with_sparsity(sk, sv));
    ensure!(p(0.5, 1.0) == 1.6, "prefill(0.5, 1.0) = {}", p(0.5, 1.0));
    ensure!(p(1.0, 1.0) == 2.0, "prefill(1, 1) = {}", p(1.0, 1.0));
    let dec = decode_speedup(&CostParams::with_sparsity(0.0, 1.0));
    ensure!((dec - 1.28).abs() <= 0.005, "decode(0, 1) = {dec}");
    let rows: Vec<_> = design_space_table()
        .iter()
        .map(|r| (r.config, r.sparse_operands, r.prefill, r.decode))
        .collect();
    let want = vec![
        ("Naive", ["Q", "P"], "2x", "1.0x"),
        ("Trans-K", ["K", "P"], "2x", "1.5x"),
        ("Trans-V", ["Q", "V"], "2x", "1.5x"),
        ("Trans-Both", ["K", "V"], "2x", "2x"),
    ];
    ensure!(rows == want, "design rows {rows:?}");
    Ok(format!(
        "r_comp {:.4}/{:.4}, decode(0,1) {dec:.4}, 4 design rows",
        r(0.5, 1.0),
        r(1.0, 1.0)
    ))
}

fn c2_measured_sizes() -> Outcome {
    let (l, d, b) = (4096, 128, 64);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let k = Tensor2D::gaussian(l, d, 1.0, &mut rng);
    let v = Tensor2D::gaussian(l, d, 1.0, &mut rng);
    let mut worst = 0.0f64;
    for sk in GRID {
        for sv in GRID {
            let cfg = SparsityConfig::unprotected(sk, sv, b);
            let (mk, mv) = prune_cache(&k, &v, &cfg).map_err(|e| e.to_string())?;
            let ck = compress(&k, &mk, &cfg).map_err(|e| e.to_string())?;
            let cv = compress(&v, &mv, &cfg).map_err(|e| e.to_string())?;
            let total = measure_size(&ck).total() + measure_size(&cv).total();
            let measured = (2 * 2 * l * d) as f64 / total as f64;
            let p = CostParams {
                seq_len: l,
                head_dim: d,
                block_size: b,
                s_key: sk,
                s_value: sv,
                dense_throughput: 1.0,
            };
            let model = compression_ratio(&p, true);
            let rel = ((measured - model) / model).abs();
            worst = worst.max(rel);
            ensure!(rel < 1e-12, "({sk}, {sv}): measured {measured} vs model {model}");
        }
    }
    Ok(format!("25 grid points, worst relative error {worst:.2e}"))
}

/// Random compressed KV pair with mixed sparsity and protection.
fn random_caches(rng: &mut ChaCha8Rng, l: usize, d: usize, b: usize) -> (KvSource, KvSource, Tensor2D, Tensor2D) {
    let k = Tensor2D::gaussian(l, d, 1.0, rng);
    let v = Tensor2D::gaussian(l, d, 1.0, rng);
    let cfg = SparsityConfig {
        s_key: rng.random_range(0.0..=1.0),
        s_value: rng.random_range(0.0..=1.0),
        block_size: b,
        pattern: NmPattern::TWO_FOUR,
        sink_tokens: if rng.random_bool(0.5) {
            rng.random_range(0..2 * b)
        } else {
            0
        },
        local_window: if rng.random_bool(0.5) {
            rng.random_range(0..2 * b)
        } else {
            0
        },
    };
    let (mk, mv) = prune_cache(&k, &v, &cfg).unwrap();
    let ck = compress(&k, &mk, &cfg).unwrap();
    let cv = compress(&v, &mv, &cfg).unwrap();
    (ck.into(), cv.into(), k, v)
}

fn c3_oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f32;
    let mut mixed = 0;
    let n = 240;
    for i in 0..n {
        let d = [32, 64][i % 2];
        let b_r = [16, 64][(i / 2) % 2];
        let gqa = [1, 4][(i / 4) % 2];
        let causal = (i / 8) % 2 == 1;
        let decode = (i / 16) % 2 == 1;
        let splits = [1, 2, 5][i % 3];
        let b = [16, 32, 64][rng.random_range(0..3)];
        let l = rng.random_range(1..=512);
        let (mut key, mut value, _, _) = random_caches(&mut rng, l, d, b);
        if let (KvSource::Compressed { cache: ck, .. }, KvSource::Compressed { cache: cv, .. }) = (&key, &value) {
            if ck.sparse_count() > 0 && ck.dense_count() > 0 || cv.sparse_count() > 0 && cv.dense_count() > 0 {
                mixed += 1;
            }
        }
        let out = if decode {
            let tail = rng.random_range(0..4);
            if tail > 0 {
                for (src, seed) in [(&mut key, 0u64), (&mut value, 1)] {
                    if let KvSource::Compressed { tail: t, .. } = src {
                        let mut r = ChaCha8Rng::seed_from_u64(i as u64 * 2 + seed);
                        *t = Some(Tensor2D::gaussian(tail, d, 1.0, &mut r));
                    }
                }
            }
            let qs = (0..gqa).map(|_| Tensor2D::gaussian(1, d, 1.0, &mut rng)).collect();
            let w = AttentionWorkload::new(qs, key, value, causal, Phase::Decode).map_err(|e| e.to_string())?;
            (decode_attention(&w, splits), dense_attention_oracle(&w))
        } else {
            let n_q = if causal {
                rng.random_range(1..=l)
            } else {
                rng.random_range(1..=512)
            };
            let qs = (0..gqa).map(|_| Tensor2D::gaussian(n_q, d, 1.0, &mut rng)).collect();
            let w = AttentionWorkload::new(qs, key, value, causal, Phase::Prefill).map_err(|e| e.to_string())?;
            (
                prefill_attention(&w, TileConfig::new(b_r, b)),
                dense_attention_oracle(&w),
            )
        };
        let (got, want) = (out.0.map_err(|e| e.to_string())?, out.1.map_err(|e| e.to_string())?);
        for (a, o) in got.iter().zip(&want) {
            let err = a.max_abs_diff(o);
            worst = worst.max(err);
            ensure!(
                err < 1e-5,
                "workload {i} (d={d}, L={l}, B={b}, decode={decode}): error {err:e}"
            );
        }
    }
    Ok(format!(
        "{n} workloads ({mixed} with mixed blocks), worst max-abs error {worst:.2e}"
    ))
}

fn c4_tile_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let tiles = 1200;
    let mut worst_t = 0.0f32;
    let mut worst_s = 0.0f64;
    let mut worst_a = 0.0f64;
    for t in 0..tiles {
        let (br, bc, d) = (
            rng.random_range(1..=32),
            rng.random_range(1..=32),
            rng.random_range(1..=64),
        );
        let q = Tensor2D::gaussian(br, d, 1.0, &mut rng);
        let k = Tensor2D::gaussian(bc, d, 1.0, &mut rng);
        let v = Tensor2D::gaussian(bc, d, 1.0, &mut rng);
        let p = Tensor2D::gaussian(br, bc, 1.0, &mut rng);
        let s_t = k.matmul(&q.transpose()).unwrap();
        let s = q.matmul(&k.transpose()).unwrap();
        let o_t = v.transpose().matmul(&p.transpose()).unwrap();
        let o = p.matmul(&v).unwrap();
        let e = s_t.transpose().max_abs_diff(&s).max(o_t.transpose().max_abs_diff(&o));
        worst_t = worst_t.max(e);
        ensure!(e <= 1e-6, "tile {t}: transpose identity off by {e:e}");

        // online-softmax prefix invariants over a stream of score tiles
        let rows = rng.random_range(1..=8);
        let dv = rng.random_range(1..=8);
        let mut state = SoftmaxState::new(dv, rows);
        let mut seen: Vec<Vec<f32>> = vec![Vec::new(); rows];
        let mut values: Vec<Vec<f32>> = Vec::new();
        for _ in 0..rng.random_range(1..=4) {
            let keys = rng.random_range(1..=8);
            let scale = rng.random_range(0.5..4.0);
            let mut tile = Tensor2D::gaussian(keys, rows, scale, &mut rng);
            let vt = Tensor2D::gaussian(keys, dv, 1.0, &mut rng);
            for j in 0..keys {
                for (r, col) in seen.iter_mut().enumerate() {
                    col.push(tile.get(j, r));
                }
                values.push((0..dv).map(|c| vt.get(j, c)).collect());
            }
            state.absorb_scores(&mut tile);
            state.accumulate(&vt.transpose().matmul(&tile).unwrap());
            for (r, col) in seen.iter().enumerate() {
                let m = col.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                ensure!(
                    state.running_max()[r] == m,
                    "tile {t}: running max {} vs {m}",
                    state.running_max()[r]
                );
                let sum: f64 = col.iter().map(|&s| (f64::from(s) - f64::from(m)).exp()).sum();
                let rel = (f64::from(state.running_sum()[r]) - sum).abs() / sum;
                worst_s = worst_s.max(rel);
                ensure!(rel <= 1e-6, "tile {t}: running sum relative error {rel:e}");
                for c in 0..dv {
                    let (mut acc, mut mag) = (0.0f64, 0.0f64);
                    for (s, v) in col.iter().zip(&values) {
                        let w = (f64::from(*s) - f64::from(m)).exp();
                        acc += w * f64::from(v[c]);
                        mag += w * f64::from(v[c]).abs();
                    }
                    let err = (f64::from(state.accumulator().get(c, r)) - acc).abs() / mag.max(1.0);
                    worst_a = worst_a.max(err);
                    ensure!(err <= 1e-6, "tile {t}: accumulator error {err:e}");
                }
            }
        }
    }
    Ok(format!(
        "{tiles} tiles, transpose error {worst_t:.2e}, prefix-sum relative error {worst_s:.2e}, accumulator error {worst_a:.2e}"
    ))
}

/// Arbitrary hierarchical mask: random block flags (trailing partial block
/// dense) and a random 2-of-4 choice in every sparse group.
fn random_mask(rng: &mut ChaCha8Rng, l: usize, d: usize, b: usize, axis: GroupingAxis) -> HierarchicalMask {
    let nb = l.div_ceil(b);
    let flags: Vec<bool> = (0..nb).map(|i| (i + 1) * b > l || rng.random_bool(0.5)).collect();
    let mut bits = vec![true; l * d];
    for (i, &dense) in flags.iter().enumerate() {
        if dense {
            continue;
        }
        let groups: Vec<[usize; 4]> = match axis {
            GroupingAxis::HeadDim => (i * b..(i + 1) * b)
                .flat_map(|r| (0..d).step_by(4).map(move |c| [0, 1, 2, 3].map(|p| r * d + c + p)))
                .collect(),
            GroupingAxis::Sequence => (0..d)
                .flat_map(|c| {
                    (i * b..(i + 1) * b)
                        .step_by(4)
                        .map(move |r| [0, 1, 2, 3].map(|p| (r + p) * d + c))
                })
                .collect(),
        };
        for g in groups {
            let mut idx = [0, 1, 2, 3];
            idx.shuffle(rng);
            bits[g[idx[0]]] = false;
            bits[g[idx[1]]] = false;
        }
    }
    HierarchicalMask {
        element: ElementMask::new(l, d, bits).unwrap(),
        block: BlockMask {
            losses: vec![0.0; nb],
            flags,
        },
        axis,
        protected_prefix_blocks: 0,
        protected_suffix_blocks: 0,
    }
}

fn c5_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 520;
    for i in 0..n {
        let b = [4, 8, 16][rng.random_range(0..3)];
        let d = 4 * rng.random_range(1..=16);
        let l = rng.random_range(0..=96);
        let axis = if i % 2 == 0 {
            GroupingAxis::HeadDim
        } else {
            GroupingAxis::Sequence
        };
        let x = Tensor2D::gaussian(l, d, 1.0, &mut rng);
        let m = random_mask(&mut rng, l, d, b, axis);
        let cfg = SparsityConfig::unprotected(0.0, 0.0, b);
        let c = compress(&x, &m, &cfg).map_err(|e| format!("case {i}: {e}"))?;
        let back = decompress(&c).map_err(|e| e.to_string())?;
        ensure!(
            back == m.element.apply(&x).unwrap(),
            "case {i}: decompress(compress(x, m)) != x * m"
        );

        let bytes = serialize(&c).map_err(|e| e.to_string())?;
        let loaded = parse(&bytes).map_err(|e| format!("case {i}: {e}"))?;
        ensure!(
            serialize(&loaded).unwrap() == bytes,
            "case {i}: container bytes not stable"
        );
        ensure!(
            decompress(&loaded).unwrap() == back.map(round_to_storage),
            "case {i}: loaded cache differs at storage precision"
        );
        ensure!(
            loaded.index_map() == c.index_map() && loaded.meta_pool() == c.meta_pool(),
            "case {i}: layout differs"
        );
    }
    let fused_cases = 220;
    for i in 0..fused_cases {
        let b = [4, 8, 16, 32][rng.random_range(0..4)];
        let d = 4 * rng.random_range(1..=16);
        let l = rng.random_range(0..=128);
        let axis = if i % 2 == 0 {
            GroupingAxis::HeadDim
        } else {
            GroupingAxis::Sequence
        };
        let x = Tensor2D::gaussian(l, d, 1.0, &mut rng);
        let cfg = SparsityConfig::unprotected(0.0, 0.0, b);
        let nb = l.div_ceil(b);
        let block = BlockMask {
            flags: (0..nb).map(|j| (j + 1) * b > l || rng.random_bool(0.5)).collect(),
            losses: vec![0.0; nb],
        };
        let fused = fused_magnitude_compress(&x, &block, axis, &cfg).map_err(|e| e.to_string())?;
        let mask = mask_from_blocks(&x, block, axis, &cfg).map_err(|e| e.to_string())?;
        let two_phase = compress(&x, &mask, &cfg).map_err(|e| e.to_string())?;
        ensure!(fused == two_phase, "case {i}: fused path differs from two-phase path");
    }
    Ok(format!(
        "{n} compress/container round trips, {fused_cases} fused comparisons"
    ))
}

/// Independent top-2 magnitude mask and dropped-L1 loss for one full block.
fn reference_loss(x: &Tensor2D, start: usize, b: usize, axis: GroupingAxis) -> f64 {
    let d = x.cols();
    let mut dropped = vec![false; b * d];
    let mut mark = |cells: [(usize, usize); 4]| {
        let mut idx = [0usize, 1, 2, 3];
        // stable sort: equal magnitudes keep the lower position first
        idx.sort_by(|&a, &c| {
            let (ra, ca) = cells[a];
            let (rc, cc) = cells[c];
            x.get(ra, ca).abs().total_cmp(&x.get(rc, cc).abs()).reverse()
        });
        for &p in &idx[2..] {
            let (r, c) = cells[p];
            dropped[(r - start) * d + c] = true;
        }
    };
    match axis {
        GroupingAxis::HeadDim => {
            for r in start..start + b {
                for c in (0..d).step_by(4) {
                    mark([0, 1, 2, 3].map(|p| (r, c + p)));
                }
            }
        }
        GroupingAxis::Sequence => {
            for c in 0..d {
                for r in (start..start + b).step_by(4) {
                    mark([0, 1, 2, 3].map(|p| (r + p, c)));
                }
            }
        }
    }
    let mut loss = 0.0;
    for r in 0..b {
        for c in 0..d {
            if dropped[r * d + c] {
                loss += f64::from(x.get(start + r, c).abs());
            }
        }
    }
    loss
}

fn c6_pruner() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let n = 220;
    for i in 0..n {
        let b = [4, 8, 16][rng.random_range(0..3)];
        let d = 4 * rng.random_range(1..=8);
        let l = rng.random_range(1..=160);
        let axis = if i % 2 == 0 {
            GroupingAxis::HeadDim
        } else {
            GroupingAxis::Sequence
        };
        let s = rng.random_range(0.0..=1.0);
        let cfg = SparsityConfig {
            s_key: s,
            s_value: s,
            block_size: b,
            pattern: NmPattern::TWO_FOUR,
            sink_tokens: rng.random_range(0..=2 * b),
            local_window: rng.random_range(0..=3 * b),
        };
        let x = Tensor2D::gaussian(l, d, 1.0, &mut rng);
        let m = prune_single(&x, axis, &cfg).map_err(|e| e.to_string())?;
        let nb = l.div_ceil(b);

        // protection from first principles
        let prefix = cfg.sink_tokens.div_ceil(b).min(nb);
        let window_start = l.saturating_sub(cfg.local_window);
        let protected =
            |j: usize| j < prefix || (cfg.local_window > 0 && (j + 1) * b > window_start) || (j + 1) * b > l;
        for j in 0..nb {
            if protected(j) {
                ensure!(m.block.is_dense(j), "case {i}: protected block {j} is sparse");
            }
        }

        // selection against a sort of independently computed losses
        let mut prunable: Vec<(f64, usize)> = (0..nb)
            .filter(|&j| !protected(j))
            .map(|j| (reference_loss(&x, j * b, b, axis), j))
            .collect();
        prunable.sort_by(|a, c| a.0.total_cmp(&c.0).then(a.1.cmp(&c.1)));
        let quota = (s * prunable.len() as f64 + 1e-9).floor() as usize;
        let mut want: Vec<usize> = prunable[..quota].iter().map(|p| p.1).collect();
        want.sort_unstable();
        ensure!(
            m.block.sparse_blocks() == want,
            "case {i}: sparse blocks {:?} vs {want:?}",
            m.block.sparse_blocks()
        );

        for &j in &want {
            m.element
                .check_cardinality(j * b, (j + 1) * b, axis, cfg.pattern)
                .map_err(|g| format!("case {i}: block {j} group {g} not 2:4"))?;
        }

        let factor = [0.125f32, 0.5, 2.0, 16.0][i % 4];
        let scaled = prune_single(&x.scaled(factor), axis, &cfg).map_err(|e| e.to_string())?;
        ensure!(
            scaled.element == m.element && scaled.block.flags == m.block.flags,
            "case {i}: mask changed under scaling by {factor}"
        );
    }
    Ok(format!("{n} random caches"))
}

fn c7_flop_ratio() -> Outcome {
    let (l, d, b) = (256, 32, 64);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let k = Tensor2D::gaussian(l, d, 1.0, &mut rng);
    let v = Tensor2D::gaussian(l, d, 1.0, &mut rng);
    let q = Tensor2D::gaussian(l, d, 1.0, &mut rng);
    let dense = AttentionWorkload::new(
        vec![q.clone()],
        k.clone().into(),
        v.clone().into(),
        false,
        Phase::Prefill,
    )
    .map_err(|e| e.to_string())?;
    let dense_flops = flop_and_byte_count(&dense).flops;
    for sk in GRID {
        for sv in GRID {
            let cfg = SparsityConfig::unprotected(sk, sv, b);
            let (mk, mv) = prune_cache(&k, &v, &cfg).unwrap();
            let w = AttentionWorkload::new(
                vec![q.clone()],
                compress(&k, &mk, &cfg).unwrap().into(),
                compress(&v, &mv, &cfg).unwrap().into(),
                false,
                Phase::Prefill,
            )
            .map_err(|e| e.to_string())?;
            let ratio = dense_flops as f64 / flop_and_byte_count(&w).flops as f64;
            let model = prefill_speedup(&CostParams::with_sparsity(sk, sv));
            ensure!(ratio == model, "({sk}, {sv}): flop ratio {ratio} vs model {model}");
        }
    }
    Ok("25 grid points, exact".into())
}

fn c8_determinism() -> Outcome {
    let cfg = RunConfig {
        seq_len: 256,
        head_dim: 32,
        heads: 4,
        gqa_group: 2,
        block_size: 32,
        sink_tokens: 32,
        local_window: 64,
        b_r: 32,
        splits: 3,
        seed: 8,
        prefill: PhaseSparsity {
            s_key: 0.5,
            s_value: 0.5,
        },
        decode: PhaseSparsity {
            s_key: 0.75,
            s_value: 1.0,
        },
        ..RunConfig::default()
    };
    let json = |r: &hierasparse::RunReport| serde_json::to_string(&r.without_timings()).unwrap();
    let first = json(&run_pipeline(&cfg).map_err(|e| e.to_string())?);
    for run in 1..3 {
        let again = json(&run_pipeline(&cfg).map_err(|e| e.to_string())?);
        ensure!(again == first, "run {run} differs from run 0");
    }
    let single = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| e.to_string())?
        .install(|| run_pipeline(&cfg))
        .map_err(|e| e.to_string())?;
    ensure!(json(&single) == first, "single-threaded run differs");

    // the unsplit decode agrees bit-for-bit with one split
    let mut rng = ChaCha8Rng::seed_from_u64(80);
    let (key, value, _, _) = random_caches(&mut rng, 200, 32, 32);
    let qs = (0..4).map(|_| Tensor2D::gaussian(1, 32, 1.0, &mut rng)).collect();
    let w = AttentionWorkload::new(qs, key, value, true, Phase::Decode).unwrap();
    ensure!(
        decode_attention(&w, 1).unwrap() == decode_attention_unsplit(&w).unwrap(),
        "splits=1 differs from unsplit decode"
    );
    Ok("3 identical runs, identical on 1 thread".into())
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("1 cost-model reproduction", c1_cost_model, Duration::from_secs(1)),
        (
            "2 measured vs closed-form size",
            c2_measured_sizes,
            Duration::from_secs(5),
        ),
        ("3 oracle equivalence", c3_oracle_equivalence, Duration::from_secs(120)),
        (
            "4 transpose and online-softmax invariants",
            c4_tile_invariants,
            Duration::from_secs(60),
        ),
        ("5 compression round trip", c5_round_trip, Duration::from_secs(60)),
        ("6 pruner correctness", c6_pruner, Duration::from_secs(60)),
        ("7 flop-count consistency", c7_flop_ratio, Duration::from_secs(60)),
        ("8 determinism", c8_determinism, Duration::from_secs(60)),
    ];
    let mut failed = 0;
    for (name, check, budget) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(_) if elapsed > budget => Err(format!("took {elapsed:.2?}, budget {budget:?}")),
            o => o,
        };
        match outcome {
            Ok(detail) => println!("PASS criterion {name}: {detail} [{elapsed:.2?}]"),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {name}: {why} [{elapsed:.2?}]");
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
