//! End-to-end run on synthetic data: prune and compress, prefill, raise the
//! sparsity, then a single decode step, each checked against the oracles.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    decode_attention, dense_attention, dense_attention_oracle, flop_and_byte_count, prefill_attention,
    AttentionWorkload, KvSource, Phase, TileConfig,
};
use crate::compressor::{compress, measure_size, CompressedCache, SizeBreakdown};
use crate::cost::{compression_ratio, decode_speedup, prefill_speedup, CostParams};
use crate::error::{Error, Result};
use crate::nm::NmPattern;
use crate::pruner::{further_prune, prune_cache, HierarchicalMask, SparsityConfig};
use crate::tensor::Tensor2D;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseSparsity {
    pub s_key: f64,
    pub s_value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseSelection {
    Prefill,
    Decode,
    Both,
}

impl PhaseSelection {
    fn decode(self) -> bool {
        self != PhaseSelection::Prefill
    }

    fn prefill(self) -> bool {
        self != PhaseSelection::Decode
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seq_len: usize,
    pub head_dim: usize,
    /// Query heads.
    pub heads: usize,
    /// Query heads per KV head.
    pub gqa_group: usize,
    pub block_size: usize,
    pub phase: PhaseSelection,
    pub prefill: PhaseSparsity,
    /// Sparsity after the post-prefill re-prune; never lower than `prefill`.
    pub decode: PhaseSparsity,
    pub sink_tokens: usize,
    pub local_window: usize,
    pub causal: bool,
    /// Query rows per prefill tile.
    pub b_r: usize,
    pub splits: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seq_len: 512,
            head_dim: 64,
            heads: 4,
            gqa_group: 2,
            block_size: 64,
            phase: PhaseSelection::Both,
            prefill: PhaseSparsity {
                s_key: 0.5,
                s_value: 0.5,
            },
            decode: PhaseSparsity {
                s_key: 0.5,
                s_value: 1.0,
            },
            sink_tokens: 64,
            local_window: 128,
            causal: true,
            b_r: 64,
            splits: 4,
            seed: 0,
            output: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("seq_len", self.seq_len),
            ("head_dim", self.head_dim),
            ("heads", self.heads),
            ("gqa_group", self.gqa_group),
            ("block_size", self.block_size),
            ("b_r", self.b_r),
            ("splits", self.splits),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.heads.is_multiple_of(self.gqa_group) {
            return Err(Error::Config(format!(
                "heads = {} is not a multiple of gqa_group = {}",
                self.heads, self.gqa_group
            )));
        }
        if !self.head_dim.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "head_dim = {} must be a multiple of 4",
                self.head_dim
            )));
        }
        if !self.block_size.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "block_size = {} must be a multiple of 4",
                self.block_size
            )));
        }
        for (phase, s) in [("prefill", self.prefill), ("decode", self.decode)] {
            for (name, v) in [("s_key", s.s_key), ("s_value", s.s_value)] {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Config(format!("{phase}.{name} = {v} outside [0, 1]")));
                }
            }
        }
        if self.phase == PhaseSelection::Both
            && (self.decode.s_key < self.prefill.s_key || self.decode.s_value < self.prefill.s_value)
        {
            return Err(Error::Config(
                "decode sparsity must be at least the prefill sparsity; re-pruning never densifies blocks".into(),
            ));
        }
        Ok(())
    }

    pub fn kv_heads(&self) -> usize {
        self.heads / self.gqa_group
    }

    fn sparsity(&self, s: PhaseSparsity) -> SparsityConfig {
        SparsityConfig {
            s_key: s.s_key,
            s_value: s.s_value,
            block_size: self.block_size,
            pattern: NmPattern::TWO_FOUR,
            sink_tokens: self.sink_tokens,
            local_window: self.local_window,
        }
    }

    fn cost_params(&self, s: PhaseSparsity) -> CostParams {
        CostParams {
            seq_len: self.seq_len,
            head_dim: self.head_dim,
            block_size: self.block_size,
            s_key: s.s_key,
            s_value: s.s_value,
            dense_throughput: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub key: SizeBreakdown,
    pub value: SizeBreakdown,
    pub baseline_bytes: u64,
    pub compressed_bytes: u64,
    pub r_comp_measured: f64,
    pub r_comp_model_exact: f64,
    pub r_comp_model_approx: f64,
    pub blocks_per_head: usize,
    pub sparse_key_blocks: usize,
    pub sparse_value_blocks: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub max_abs: f64,
    pub mean_abs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    /// Engine against the oracle on the decompressed (pruned) caches.
    pub vs_decompressed: ErrorStats,
    /// Engine against the oracle on the raw caches; a pruning quality proxy.
    pub vs_raw: ErrorStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountReport {
    pub flops: u64,
    pub dense_flops: u64,
    pub bytes_moved: u64,
    pub dense_bytes: u64,
    pub model_speedup_prefill: f64,
    pub model_speedup_decode: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseReport {
    pub sparsity: PhaseSparsity,
    pub compression: CompressionReport,
    pub accuracy: AccuracyReport,
    pub counts: CountReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub config: RunConfig,
    pub prefill: Option<PhaseReport>,
    pub decode: Option<PhaseReport>,
    /// Wall-clock milliseconds per stage. Informational; varies run to run.
    pub timings_ms: BTreeMap<String, f64>,
}

impl RunReport {
    /// The report with timing fields cleared, for reproducibility checks.
    pub fn without_timings(&self) -> RunReport {
        RunReport {
            timings_ms: BTreeMap::new(),
            ..self.clone()
        }
    }
}

struct HeadData {
    key: Tensor2D,
    value: Tensor2D,
    queries: Vec<Tensor2D>,
    new_key: Tensor2D,
    new_value: Tensor2D,
    new_queries: Vec<Tensor2D>,
}

/// Seeded `rows × cols` Gaussian tensor with standard deviation `1/√cols`.
pub fn synthetic_tensor(rows: usize, cols: usize, seed: u64) -> Tensor2D {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor2D::gaussian(rows, cols, 1.0 / (cols.max(1) as f32).sqrt(), &mut rng)
}

fn generate(cfg: &RunConfig) -> Vec<HeadData> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (l, d) = (cfg.seq_len, cfg.head_dim);
    let std = 1.0 / (d as f32).sqrt();
    (0..cfg.kv_heads())
        .map(|_| HeadData {
            key: Tensor2D::gaussian(l, d, std, &mut rng),
            value: Tensor2D::gaussian(l, d, std, &mut rng),
            queries: (0..cfg.gqa_group)
                .map(|_| Tensor2D::gaussian(l, d, std, &mut rng))
                .collect(),
            new_key: Tensor2D::gaussian(1, d, std, &mut rng),
            new_value: Tensor2D::gaussian(1, d, std, &mut rng),
            new_queries: (0..cfg.gqa_group)
                .map(|_| Tensor2D::gaussian(1, d, std, &mut rng))
                .collect(),
        })
        .collect()
}

#[derive(Default)]
struct ErrorAccum {
    max: f64,
    sum: f64,
    count: usize,
}

impl ErrorAccum {
    fn add(&mut self, got: &[Tensor2D], want: &[Tensor2D]) {
        for (a, b) in got.iter().zip(want) {
            for (&x, &y) in a.data().iter().zip(b.data()) {
                let e = f64::from((x - y).abs());
                self.max = self.max.max(e);
                self.sum += e;
            }
            self.count += a.data().len();
        }
    }

    fn stats(&self) -> ErrorStats {
        ErrorStats {
            max_abs: self.max,
            mean_abs: if self.count == 0 {
                0.0
            } else {
                self.sum / self.count as f64
            },
        }
    }
}

struct PhaseAccum {
    key: SizeBreakdown,
    value: SizeBreakdown,
    sparse_key: usize,
    sparse_value: usize,
    blocks: usize,
    vs_decompressed: ErrorAccum,
    vs_raw: ErrorAccum,
    flops: u64,
    dense_flops: u64,
    bytes: u64,
    dense_bytes: u64,
}

impl PhaseAccum {
    fn new() -> Self {
        Self {
            key: SizeBreakdown::default(),
            value: SizeBreakdown::default(),
            sparse_key: 0,
            sparse_value: 0,
            blocks: 0,
            vs_decompressed: ErrorAccum::default(),
            vs_raw: ErrorAccum::default(),
            flops: 0,
            dense_flops: 0,
            bytes: 0,
            dense_bytes: 0,
        }
    }

    fn add_caches(&mut self, ck: &CompressedCache, cv: &CompressedCache) {
        self.key = self.key + measure_size(ck);
        self.value = self.value + measure_size(cv);
        self.sparse_key += ck.sparse_count();
        self.sparse_value += cv.sparse_count();
        self.blocks = ck.block_count();
    }

    fn add_counts(&mut self, sparse: &AttentionWorkload, dense: &AttentionWorkload) {
        let s = flop_and_byte_count(sparse);
        let d = flop_and_byte_count(dense);
        self.flops += s.flops;
        self.bytes += s.bytes_moved;
        self.dense_flops += d.flops;
        self.dense_bytes += d.bytes_moved;
    }

    fn finish(self, cfg: &RunConfig, s: PhaseSparsity, baseline: u64) -> PhaseReport {
        let compressed = self.key.total() + self.value.total();
        let params = cfg.cost_params(s);
        PhaseReport {
            sparsity: s,
            compression: CompressionReport {
                key: self.key,
                value: self.value,
                baseline_bytes: baseline,
                compressed_bytes: compressed,
                r_comp_measured: baseline as f64 / compressed as f64,
                r_comp_model_exact: compression_ratio(&params, true),
                r_comp_model_approx: compression_ratio(&params, false),
                blocks_per_head: self.blocks,
                sparse_key_blocks: self.sparse_key,
                sparse_value_blocks: self.sparse_value,
            },
            accuracy: AccuracyReport {
                vs_decompressed: self.vs_decompressed.stats(),
                vs_raw: self.vs_raw.stats(),
            },
            counts: CountReport {
                flops: self.flops,
                dense_flops: self.dense_flops,
                bytes_moved: self.bytes,
                dense_bytes: self.dense_bytes,
                model_speedup_prefill: prefill_speedup(&params),
                model_speedup_decode: decode_speedup(&params),
            },
        }
    }
}

fn timed<T>(timings: &mut BTreeMap<String, f64>, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let start = Instant::now();
    let out = f()?;
    *timings.entry(stage.to_string()).or_default() += start.elapsed().as_secs_f64() * 1e3;
    Ok(out)
}

/// Runs the configured phases over every KV head and gathers the report.
pub fn run_pipeline(cfg: &RunConfig) -> Result<RunReport> {
    cfg.validate()?;
    let mut timings = BTreeMap::new();
    let heads = timed(&mut timings, "generate", || Ok(generate(cfg)))?;
    let prefill_cfg = cfg.sparsity(cfg.prefill);
    let decode_cfg = cfg.sparsity(cfg.decode);
    let baseline = 2 * 2 * (cfg.seq_len * cfg.head_dim * cfg.kv_heads()) as u64;

    let mut pre = PhaseAccum::new();
    let mut dec = PhaseAccum::new();
    for h in &heads {
        let (mk, mv) = timed(&mut timings, "prune", || prune_cache(&h.key, &h.value, &prefill_cfg))?;
        if cfg.phase.prefill() {
            let (ck, cv) = timed(&mut timings, "compress", || {
                Ok((
                    compress(&h.key, &mk, &prefill_cfg)?,
                    compress(&h.value, &mv, &prefill_cfg)?,
                ))
            })?;
            pre.add_caches(&ck, &cv);
            let w = AttentionWorkload::new(h.queries.clone(), ck.into(), cv.into(), cfg.causal, Phase::Prefill)?;
            let tiles = TileConfig::new(cfg.b_r, cfg.block_size);
            let out = timed(&mut timings, "prefill", || prefill_attention(&w, tiles))?;
            let oracle = timed(&mut timings, "oracle", || dense_attention_oracle(&w))?;
            let raw = timed(&mut timings, "oracle", || {
                h.queries
                    .iter()
                    .map(|q| dense_attention(q, &h.key, &h.value, cfg.causal, w.scale))
                    .collect::<Result<Vec<_>>>()
            })?;
            pre.vs_decompressed.add(&out, &oracle);
            pre.vs_raw.add(&out, &raw);
            let dense = AttentionWorkload::new(
                h.queries.clone(),
                h.key.clone().into(),
                h.value.clone().into(),
                cfg.causal,
                Phase::Prefill,
            )?;
            pre.add_counts(&w, &dense);
        }
        if cfg.phase.decode() {
            let (dk, dv) = timed(&mut timings, "prune", || repruned(h, &mk, &mv, &decode_cfg))?;
            let (ck, cv) = timed(&mut timings, "compress", || {
                Ok((
                    compress(&h.key, &dk, &decode_cfg)?,
                    compress(&h.value, &dv, &decode_cfg)?,
                ))
            })?;
            dec.add_caches(&ck, &cv);
            let key = KvSource::Compressed {
                cache: ck,
                tail: Some(h.new_key.clone()),
            };
            let value = KvSource::Compressed {
                cache: cv,
                tail: Some(h.new_value.clone()),
            };
            let w = AttentionWorkload::new(h.new_queries.clone(), key, value, cfg.causal, Phase::Decode)?;
            let out = timed(&mut timings, "decode", || decode_attention(&w, cfg.splits))?;
            let oracle = timed(&mut timings, "oracle", || dense_attention_oracle(&w))?;
            let raw_k = Tensor2D::vstack(&[&h.key, &h.new_key])?;
            let raw_v = Tensor2D::vstack(&[&h.value, &h.new_value])?;
            let raw = timed(&mut timings, "oracle", || {
                h.new_queries
                    .iter()
                    .map(|q| dense_attention(q, &raw_k, &raw_v, cfg.causal, w.scale))
                    .collect::<Result<Vec<_>>>()
            })?;
            dec.vs_decompressed.add(&out, &oracle);
            dec.vs_raw.add(&out, &raw);
            let dense = AttentionWorkload::new(
                h.new_queries.clone(),
                raw_k.into(),
                raw_v.into(),
                cfg.causal,
                Phase::Decode,
            )?;
            dec.add_counts(&w, &dense);
        }
    }

    Ok(RunReport {
        schema_version: REPORT_SCHEMA_VERSION,
        config: cfg.clone(),
        prefill: cfg.phase.prefill().then(|| pre.finish(cfg, cfg.prefill, baseline)),
        decode: cfg.phase.decode().then(|| dec.finish(cfg, cfg.decode, baseline)),
        timings_ms: timings,
    })
}

/// Decode-phase masks: the prefill masks raised to the decode sparsity.
fn repruned(
    h: &HeadData,
    mk: &HierarchicalMask,
    mv: &HierarchicalMask,
    cfg: &SparsityConfig,
) -> Result<(HierarchicalMask, HierarchicalMask)> {
    Ok((further_prune(&h.key, mk, cfg)?, further_prune(&h.value, mv, cfg)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RunConfig {
        RunConfig {
            seq_len: 128,
            head_dim: 16,
            heads: 2,
            gqa_group: 2,
            block_size: 16,
            sink_tokens: 16,
            local_window: 16,
            b_r: 32,
            splits: 3,
            ..RunConfig::default()
        }
    }

    #[test]
    fn dense_passthrough() {
        let cfg = RunConfig {
            prefill: PhaseSparsity {
                s_key: 0.0,
                s_value: 0.0,
            },
            decode: PhaseSparsity {
                s_key: 0.0,
                s_value: 0.0,
            },
            ..small()
        };
        let r = run_pipeline(&cfg).unwrap();
        for p in [r.prefill.unwrap(), r.decode.unwrap()] {
            assert!(p.accuracy.vs_raw.max_abs < 1e-5);
            assert!((p.compression.r_comp_measured - 1.0).abs() < 0.01);
            assert_eq!(p.counts.flops, p.counts.dense_flops);
        }
    }

    #[test]
    fn full_sparsity_model_speedups() {
        let cfg = RunConfig {
            prefill: PhaseSparsity {
                s_key: 1.0,
                s_value: 1.0,
            },
            decode: PhaseSparsity {
                s_key: 1.0,
                s_value: 1.0,
            },
            ..small()
        };
        let r = run_pipeline(&cfg).unwrap();
        let c = r.prefill.unwrap().counts;
        assert_eq!(c.model_speedup_prefill, 2.0);
        assert!((c.model_speedup_decode - 1.78).abs() < 0.005);
    }

    #[test]
    fn reproducible() {
        let a = run_pipeline(&small()).unwrap().without_timings();
        let b = run_pipeline(&small()).unwrap().without_timings();
        assert_eq!(a, b);
        let d = a.decode.as_ref().unwrap();
        assert!(d.accuracy.vs_decompressed.max_abs < 1e-5);
        assert!(d.compression.sparse_value_blocks >= a.prefill.as_ref().unwrap().compression.sparse_value_blocks);
    }

    #[test]
    fn rejects_bad_configs() {
        let bad = [
            RunConfig { heads: 3, ..small() },
            RunConfig {
                head_dim: 18,
                ..small()
            },
            RunConfig { splits: 0, ..small() },
            RunConfig {
                decode: PhaseSparsity {
                    s_key: 0.0,
                    s_value: 0.0,
                },
                ..small()
            },
        ];
        for cfg in bad {
            assert!(matches!(run_pipeline(&cfg), Err(Error::Config(_))), "{cfg:?}");
        }
    }
}
