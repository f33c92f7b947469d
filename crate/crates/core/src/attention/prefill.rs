use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::gemm::sparse_gemm_emulated;
use super::{AttentionWorkload, BlockOperand, KvBlock, SoftmaxState, TileConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor2D;

/// Inner-loop specialization. `Dense` and `Sparse` only accept caches whose
/// blocks are all of that kind and skip the per-block dispatch; `Mixed`
/// consults each block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelPath {
    Dense,
    Sparse,
    Mixed,
}

impl KernelPath {
    pub(crate) fn select(key: &[KvBlock<'_>], value: &[KvBlock<'_>]) -> Self {
        let all = key.iter().chain(value);
        if all.clone().all(|b| !b.operand.is_sparse()) {
            KernelPath::Dense
        } else if all.into_iter().all(|b| b.operand.is_sparse()) {
            KernelPath::Sparse
        } else {
            KernelPath::Mixed
        }
    }

    fn admits(self, key: &[KvBlock<'_>], value: &[KvBlock<'_>]) -> bool {
        match self {
            KernelPath::Mixed => true,
            p => KernelPath::select(key, value) == p || key.is_empty(),
        }
    }
}

trait BlockGemm {
    /// `Sᵀ = K_j × Qᵀ`: (rows × d) by (d × b_r).
    fn scores_t(key: &BlockOperand<'_>, q_t: &Tensor2D) -> Result<Tensor2D>;
    /// `Oᵀ = V_jᵀ × Pᵀ`: (d × rows) by (rows × b_r).
    fn output_t(value: &BlockOperand<'_>, p_t: &Tensor2D) -> Result<Tensor2D>;
}

struct DenseOnly;
struct SparseOnly;
struct MixedBlocks;

fn wrong_kind(path: &str) -> Error {
    Error::Config(format!("{path} kernel path received a block of the other kind"))
}

impl BlockGemm for DenseOnly {
    #[inline]
    fn scores_t(key: &BlockOperand<'_>, q_t: &Tensor2D) -> Result<Tensor2D> {
        match key {
            BlockOperand::Dense(k) => k.matmul(q_t),
            BlockOperand::Sparse { .. } => Err(wrong_kind("dense")),
        }
    }

    #[inline]
    fn output_t(value: &BlockOperand<'_>, p_t: &Tensor2D) -> Result<Tensor2D> {
        match value {
            BlockOperand::Dense(v) => v.transpose().matmul(p_t),
            BlockOperand::Sparse { .. } => Err(wrong_kind("dense")),
        }
    }
}

impl BlockGemm for SparseOnly {
    #[inline]
    fn scores_t(key: &BlockOperand<'_>, q_t: &Tensor2D) -> Result<Tensor2D> {
        match key {
            BlockOperand::Sparse { nnz, meta, pattern } => sparse_gemm_emulated(nnz, meta, *pattern, q_t),
            BlockOperand::Dense(_) => Err(wrong_kind("sparse")),
        }
    }

    #[inline]
    fn output_t(value: &BlockOperand<'_>, p_t: &Tensor2D) -> Result<Tensor2D> {
        match value {
            BlockOperand::Sparse { nnz, meta, pattern } => sparse_gemm_emulated(nnz, meta, *pattern, p_t),
            BlockOperand::Dense(_) => Err(wrong_kind("sparse")),
        }
    }
}

impl BlockGemm for MixedBlocks {
    #[inline]
    fn scores_t(key: &BlockOperand<'_>, q_t: &Tensor2D) -> Result<Tensor2D> {
        if key.is_sparse() {
            SparseOnly::scores_t(key, q_t)
        } else {
            DenseOnly::scores_t(key, q_t)
        }
    }

    #[inline]
    fn output_t(value: &BlockOperand<'_>, p_t: &Tensor2D) -> Result<Tensor2D> {
        if value.is_sparse() {
            SparseOnly::output_t(value, p_t)
        } else {
            DenseOnly::output_t(value, p_t)
        }
    }
}

/// Streams every key/value block past one query tile. `limit(r)` is the
/// exclusive key bound for tile row `r`; blocks starting at or beyond the
/// last row's bound are skipped entirely.
fn stream_blocks<G: BlockGemm>(
    q_t: &Tensor2D,
    keys: &[KvBlock<'_>],
    values: &[KvBlock<'_>],
    scale: f32,
    limit: &dyn Fn(usize) -> usize,
    state: &mut SoftmaxState,
) -> Result<()> {
    let rows = q_t.cols();
    if rows == 0 {
        return Ok(());
    }
    let (first_bound, last_bound) = (limit(0), limit(rows - 1));
    for (kb, vb) in keys.iter().zip(values) {
        if kb.start >= last_bound {
            break;
        }
        let mut s_t = G::scores_t(&kb.operand, q_t)?;
        let needs_mask = kb.start + kb.rows > first_bound;
        for (j, row) in s_t.data_mut().chunks_exact_mut(rows).enumerate() {
            let key = kb.start + j;
            for (r, s) in row.iter_mut().enumerate() {
                *s = if needs_mask && key >= limit(r) {
                    f32::NEG_INFINITY
                } else {
                    *s * scale
                };
            }
        }
        state.absorb_scores(&mut s_t);
        state.accumulate(&G::output_t(&vb.operand, &s_t)?);
    }
    Ok(())
}

pub(crate) fn stream_on_path(
    path: KernelPath,
    q_t: &Tensor2D,
    keys: &[KvBlock<'_>],
    values: &[KvBlock<'_>],
    scale: f32,
    limit: &dyn Fn(usize) -> usize,
    state: &mut SoftmaxState,
) -> Result<()> {
    match path {
        KernelPath::Dense => stream_blocks::<DenseOnly>(q_t, keys, values, scale, limit, state),
        KernelPath::Sparse => stream_blocks::<SparseOnly>(q_t, keys, values, scale, limit, state),
        KernelPath::Mixed => stream_blocks::<MixedBlocks>(q_t, keys, values, scale, limit, state),
    }
}

pub(crate) fn blocks_for<'a>(
    w: &'a AttentionWorkload,
    tiles: TileConfig,
) -> Result<(Vec<KvBlock<'a>>, Vec<KvBlock<'a>>)> {
    w.validate()?;
    tiles.validate(w)?;
    if w.kv_len() == 0 && w.queries[0].rows() > 0 {
        return Err(Error::Config("attention over an empty cache".into()));
    }
    Ok((w.key.blocks(tiles.b_c), w.value.blocks(tiles.b_c)))
}

/// Tiled attention for every query head, choosing the kernel path from the
/// caches' block composition.
pub fn prefill_attention(w: &AttentionWorkload, tiles: TileConfig) -> Result<Vec<Tensor2D>> {
    let (keys, values) = blocks_for(w, tiles)?;
    let path = KernelPath::select(&keys, &values);
    run_prefill(w, tiles, path, &keys, &values)
}

/// Like [`prefill_attention`] but on a caller-chosen kernel path. Fails if
/// the path cannot handle the caches' blocks.
pub fn prefill_attention_on_path(w: &AttentionWorkload, tiles: TileConfig, path: KernelPath) -> Result<Vec<Tensor2D>> {
    let (keys, values) = blocks_for(w, tiles)?;
    if !path.admits(&keys, &values) {
        return Err(Error::Config(format!("{path:?} kernel path cannot serve these caches")));
    }
    run_prefill(w, tiles, path, &keys, &values)
}

fn run_prefill(
    w: &AttentionWorkload,
    tiles: TileConfig,
    path: KernelPath,
    keys: &[KvBlock<'_>],
    values: &[KvBlock<'_>],
) -> Result<Vec<Tensor2D>> {
    let n_q = w.queries[0].rows();
    let d = w.head_dim();
    let n_tiles = n_q.div_ceil(tiles.b_r);
    let jobs: Vec<(usize, usize)> = (0..w.gqa_group())
        .flat_map(|h| (0..n_tiles).map(move |t| (h, t)))
        .collect();
    let outputs: Vec<Tensor2D> = jobs
        .par_iter()
        .map(|&(h, t)| {
            let r0 = t * tiles.b_r;
            let r1 = (r0 + tiles.b_r).min(n_q);
            let q_t = w.queries[h].slice_rows(r0, r1).transpose();
            let mut state = SoftmaxState::new(d, r1 - r0);
            let limit = |r: usize| w.causal_limit(r0 + r);
            stream_on_path(path, &q_t, keys, values, w.scale, &limit, &mut state)?;
            Ok(state.finish())
        })
        .collect::<Result<_>>()?;

    let mut per_head = Vec::with_capacity(w.gqa_group());
    for chunk in outputs.chunks(n_tiles.max(1)) {
        if n_tiles == 0 {
            break;
        }
        let parts: Vec<&Tensor2D> = chunk.iter().collect();
        per_head.push(Tensor2D::vstack(&parts)?);
    }
    while per_head.len() < w.gqa_group() {
        per_head.push(Tensor2D::zeros(0, d));
    }
    Ok(per_head)
}
