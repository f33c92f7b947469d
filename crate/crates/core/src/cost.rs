//! Closed-form size and speedup model for the 16-bit 2:4 regime.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fraction of a sparse block's elements stored as values.
pub const NNZ_FRACTION: f64 = 0.5;
/// Metadata size relative to a sparse block's dense size.
pub const METADATA_FRACTION: f64 = 1.0 / 16.0;
/// Per-unit-sparsity size reduction: `(1 - 1/2 - 1/16) / 2`.
pub const SAVINGS_PER_SPARSITY: f64 = 0.21875;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostParams {
    pub seq_len: usize,
    pub head_dim: usize,
    pub block_size: usize,
    pub s_key: f64,
    pub s_value: f64,
    /// Dense GEMM throughput in arbitrary flop/s units. Only used by
    /// [`prefill_time`]; it cancels out of every ratio.
    pub dense_throughput: f64,
}

impl Default for CostParams {
    fn default() -> Self {
        Self {
            seq_len: 4096,
            head_dim: 128,
            block_size: 64,
            s_key: 0.0,
            s_value: 0.0,
            dense_throughput: 1.0,
        }
    }
}

impl CostParams {
    pub fn with_sparsity(s_key: f64, s_value: f64) -> Self {
        Self {
            s_key,
            s_value,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, s) in [("s_key", self.s_key), ("s_value", self.s_value)] {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::Config(format!("{name} = {s} outside [0, 1]")));
            }
        }
        if self.seq_len == 0 || self.head_dim == 0 || self.block_size == 0 {
            return Err(Error::Config(
                "seq_len, head_dim and block_size must be positive".into(),
            ));
        }
        if !(self.dense_throughput > 0.0 && self.dense_throughput.is_finite()) {
            return Err(Error::Config("dense_throughput must be positive".into()));
        }
        Ok(())
    }

    fn total_sparsity(&self) -> f64 {
        self.s_key + self.s_value
    }
}

/// Modelled byte sizes for the key and value caches together.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSizes {
    pub baseline: f64,
    pub index: f64,
    pub dense: f64,
    pub nnz: f64,
    pub metadata: f64,
}

impl ModelSizes {
    pub fn compressed_total(&self) -> f64 {
        self.index + self.dense + self.nnz + self.metadata
    }
}

/// Two bytes per element, index entry and metadata word.
pub fn model_sizes(p: &CostParams) -> ModelSizes {
    let ld = (p.seq_len * p.head_dim) as f64;
    let (sk, sv) = (p.s_key, p.s_value);
    ModelSizes {
        baseline: 2.0 * 2.0 * ld,
        index: 2.0 * 2.0 * p.seq_len as f64 / p.block_size as f64,
        dense: 2.0 * (ld * (1.0 - sk) + ld * (1.0 - sv)),
        nnz: 2.0 * NNZ_FRACTION * ld * (sk + sv),
        metadata: 2.0 * METADATA_FRACTION * ld * (sk + sv),
    }
}

/// `1 / (1 - 0.21875 (S_K + S_V) [+ 1/(B·D)])`.
pub fn compression_ratio(p: &CostParams, exact: bool) -> f64 {
    let mut denom = 1.0 - SAVINGS_PER_SPARSITY * p.total_sparsity();
    if exact {
        denom += 1.0 / (p.block_size * p.head_dim) as f64;
    }
    1.0 / denom
}

/// `4 / (4 - (S_K + S_V))`.
pub fn prefill_speedup(p: &CostParams) -> f64 {
    4.0 / (4.0 - p.total_sparsity())
}

/// Memory-bound decode: the approximate compression ratio.
pub fn decode_speedup(p: &CostParams) -> f64 {
    compression_ratio(p, false)
}

/// Prefill GEMM time split into dense and sparse parts, with sparse blocks
/// running at twice the dense throughput.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrefillTime {
    pub baseline: f64,
    pub dense: f64,
    pub sparse: f64,
}

impl PrefillTime {
    pub fn speedup(&self) -> f64 {
        self.baseline / (self.dense + self.sparse)
    }
}

pub fn prefill_time(p: &CostParams) -> PrefillTime {
    let gemm = 2.0 * (p.seq_len as f64).powi(2) * p.head_dim as f64;
    let c = p.dense_throughput;
    PrefillTime {
        baseline: 2.0 * gemm / c,
        dense: gemm * (1.0 - p.s_key) / c + gemm * (1.0 - p.s_value) / c,
        sparse: gemm * p.s_key / (2.0 * c) + gemm * p.s_value / (2.0 * c),
    }
}

/// One GEMM orientation from the design-space comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct DesignRow {
    pub config: &'static str,
    pub gemm1: &'static str,
    pub gemm2: &'static str,
    pub sparse_operands: [&'static str; 2],
    /// Ideal speedups at full sparsity, as display strings.
    pub prefill: &'static str,
    pub decode: &'static str,
}

/// Ideal speedups at `S_K = S_V = 1` for the four GEMM orientations. Prefill
/// is 2× whenever one operand of each GEMM is sparse; decode scales with how
/// much of the KV cache is stored compressed.
pub fn design_space_table() -> [DesignRow; 4] {
    [
        DesignRow {
            config: "Naive",
            gemm1: "S = Q x K^T",
            gemm2: "O = P x V",
            sparse_operands: ["Q", "P"],
            prefill: "2x",
            decode: "1.0x",
        },
        DesignRow {
            config: "Trans-K",
            gemm1: "S^T = K x Q^T",
            gemm2: "O = (P^T)^T x V",
            sparse_operands: ["K", "P"],
            prefill: "2x",
            decode: "1.5x",
        },
        DesignRow {
            config: "Trans-V",
            gemm1: "S = Q x K^T",
            gemm2: "O^T = V^T x P^T",
            sparse_operands: ["Q", "V"],
            prefill: "2x",
            decode: "1.5x",
        },
        DesignRow {
            config: "Trans-Both",
            gemm1: "S^T = K x Q^T",
            gemm2: "O^T = V^T x P^T",
            sparse_operands: ["K", "V"],
            prefill: "2x",
            decode: "2x",
        },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub params: CostParams,
    pub sizes: ModelSizes,
    pub r_comp_exact: f64,
    pub r_comp_approx: f64,
    pub speedup_prefill: f64,
    pub speedup_decode: f64,
    pub design_space: [DesignRow; 4],
}

pub fn cost_report(p: &CostParams) -> Result<CostReport> {
    p.validate()?;
    Ok(CostReport {
        params: *p,
        sizes: model_sizes(p),
        r_comp_exact: compression_ratio(p, true),
        r_comp_approx: compression_ratio(p, false),
        speedup_prefill: prefill_speedup(p),
        speedup_decode: decode_speedup(p),
        design_space: design_space_table(),
    })
}

/// One point of a sparsity sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub s_key: f64,
    pub s_value: f64,
    pub r_comp_exact: f64,
    pub r_comp_approx: f64,
    pub speedup_prefill: f64,
    pub speedup_decode: f64,
}

/// Grid over `[0, 1]²` with the given step, key sparsity outermost. The
/// grid points are `i * step` for `i = 0..=round(1/step)`, clamped to 1.
pub fn sweep(base: &CostParams, step: f64) -> Result<Vec<SweepRow>> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(Error::Config(format!("sweep step {step} must be in (0, 1]")));
    }
    let n = (1.0 / step).round() as usize;
    let points: Vec<f64> = (0..=n).map(|i| (i as f64 * step).min(1.0)).collect();
    let mut rows = Vec::with_capacity(points.len() * points.len());
    for &sk in &points {
        for &sv in &points {
            let p = CostParams {
                s_key: sk,
                s_value: sv,
                ..*base
            };
            p.validate()?;
            rows.push(SweepRow {
                s_key: sk,
                s_value: sv,
                r_comp_exact: compression_ratio(&p, true),
                r_comp_approx: compression_ratio(&p, false),
                speedup_prefill: prefill_speedup(&p),
                speedup_decode: decode_speedup(&p),
            });
        }
    }
    Ok(rows)
}
