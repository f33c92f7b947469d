//! Hierarchical magnitude pruning.
//!
//! The cache is cut into blocks of `block_size` tokens. Inside every block
//! each N:M group keeps its `n_keep` largest-magnitude elements; the L1 norm
//! of what would be dropped is the block's loss. The lowest-loss fraction of
//! the unprotected blocks is then flagged sparse, everything else stays
//! dense. Sink tokens at the start, the local window at the end and a
//! trailing partial block are never pruned.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nm::{ElementMask, GroupingAxis, NmPattern};
use crate::tensor::Tensor2D;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparsityConfig {
    /// Fraction of prunable key blocks to make sparse.
    pub s_key: f64,
    /// Fraction of prunable value blocks to make sparse.
    pub s_value: f64,
    /// Tokens per block.
    pub block_size: usize,
    pub pattern: NmPattern,
    /// Tokens at the start of the sequence that stay dense.
    pub sink_tokens: usize,
    /// Tokens at the end of the sequence that stay dense.
    pub local_window: usize,
}

impl Default for SparsityConfig {
    fn default() -> Self {
        Self {
            s_key: 0.0,
            s_value: 0.0,
            block_size: 64,
            pattern: NmPattern::TWO_FOUR,
            sink_tokens: 64,
            local_window: 256,
        }
    }
}

impl SparsityConfig {
    /// Unprotected configuration with the given block sparsities.
    pub fn unprotected(s_key: f64, s_value: f64, block_size: usize) -> Self {
        Self {
            s_key,
            s_value,
            block_size,
            sink_tokens: 0,
            local_window: 0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, s) in [("s_key", self.s_key), ("s_value", self.s_value)] {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::Config(format!("{name} = {s} must lie in [0, 1]")));
            }
        }
        if self.block_size == 0 || !self.block_size.is_multiple_of(self.pattern.m_group()) {
            return Err(Error::Config(format!(
                "block_size {} must be a positive multiple of {}",
                self.block_size,
                self.pattern.m_group()
            )));
        }
        Ok(())
    }

    pub fn sparsity(&self, axis: GroupingAxis) -> f64 {
        match axis {
            GroupingAxis::HeadDim => self.s_key,
            GroupingAxis::Sequence => self.s_value,
        }
    }

    /// Protected block counts `(prefix, suffix)` for a sequence of
    /// `seq_len` tokens. Both regions round up to whole blocks, and a
    /// trailing partial block always belongs to the suffix.
    pub fn protected_blocks(&self, seq_len: usize) -> (usize, usize) {
        let b = self.block_size;
        let total = seq_len.div_ceil(b);
        let prefix = self.sink_tokens.div_ceil(b).min(total);
        let mut suffix = if self.local_window == 0 {
            0
        } else {
            total - seq_len.saturating_sub(self.local_window) / b
        };
        if !seq_len.is_multiple_of(b) {
            suffix = suffix.max(1);
        }
        (prefix, suffix.min(total))
    }
}

/// Grouping axes of the two caches: keys along the head dimension, values
/// along the sequence, matching the reduction dimensions of `K × Qᵀ` and
/// `Vᵀ × Pᵀ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PruneAxes {
    pub key_axis: GroupingAxis,
    pub value_axis: GroupingAxis,
}

impl Default for PruneAxes {
    fn default() -> Self {
        Self {
            key_axis: GroupingAxis::HeadDim,
            value_axis: GroupingAxis::Sequence,
        }
    }
}

/// Block-level dense/sparse selection. `true` flags a dense block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockMask {
    pub flags: Vec<bool>,
    pub losses: Vec<f64>,
}

impl BlockMask {
    pub fn all_dense(blocks: usize) -> Self {
        Self {
            flags: vec![true; blocks],
            losses: vec![0.0; blocks],
        }
    }

    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }

    pub fn is_dense(&self, block: usize) -> bool {
        self.flags[block]
    }

    pub fn dense_count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    pub fn sparse_count(&self) -> usize {
        self.len() - self.dense_count()
    }

    pub fn sparse_blocks(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.flags[i]).collect()
    }
}

/// Element and block masks for one cache.
#[derive(Debug, Clone, PartialEq)]
pub struct HierarchicalMask {
    pub element: ElementMask,
    pub block: BlockMask,
    pub axis: GroupingAxis,
    pub protected_prefix_blocks: usize,
    pub protected_suffix_blocks: usize,
}

impl HierarchicalMask {
    /// All-dense mask for a `seq_len × head_dim` cache.
    pub fn dense(seq_len: usize, head_dim: usize, axis: GroupingAxis, block_size: usize) -> Self {
        Self {
            element: ElementMask::all_kept(seq_len, head_dim),
            block: BlockMask::all_dense(seq_len.div_ceil(block_size)),
            axis,
            protected_prefix_blocks: 0,
            protected_suffix_blocks: 0,
        }
    }
}

/// Keeps the `n_keep` largest magnitudes of every group along `axis`;
/// magnitude ties keep the lower index.
pub fn element_mask(block: &Tensor2D, axis: GroupingAxis, pattern: NmPattern) -> Result<ElementMask> {
    let (rows, cols) = block.shape();
    let m = pattern.m_group();
    let axis_len = match axis {
        GroupingAxis::HeadDim => cols,
        GroupingAxis::Sequence => rows,
    };
    if axis_len % m != 0 {
        return Err(Error::Shape(format!(
            "grouping axis of length {axis_len} is not divisible by {m}"
        )));
    }
    let mut mask = ElementMask::new(rows, cols, vec![false; rows * cols])?;
    let mut group = vec![0.0f32; m];
    let mut order: Vec<usize> = Vec::with_capacity(m);
    let mut mark = |mask: &mut ElementMask, group: &[f32], place: &dyn Fn(usize) -> (usize, usize)| {
        if pattern.is_two_four() {
            let [lo, hi] = top2_of4([group[0], group[1], group[2], group[3]]);
            for p in [lo, hi] {
                let (r, c) = place(usize::from(p));
                mask.set(r, c, true);
            }
        } else {
            order.clear();
            order.extend(0..m);
            order.sort_by(|&a, &b| group[b].abs().total_cmp(&group[a].abs()).then(a.cmp(&b)));
            for &p in &order[..pattern.n_keep()] {
                let (r, c) = place(p);
                mask.set(r, c, true);
            }
        }
    };
    match axis {
        GroupingAxis::HeadDim => {
            for r in 0..rows {
                for g in (0..cols).step_by(m) {
                    group.copy_from_slice(&block.row(r)[g..g + m]);
                    mark(&mut mask, &group, &|p| (r, g + p));
                }
            }
        }
        GroupingAxis::Sequence => {
            for c in 0..cols {
                for g in (0..rows).step_by(m) {
                    for (p, slot) in group.iter_mut().enumerate() {
                        *slot = block.get(g + p, c);
                    }
                    mark(&mut mask, &group, &|p| (g + p, c));
                }
            }
        }
    }
    Ok(mask)
}

/// Positions of the two largest magnitudes in a group of four, ascending.
/// Ties resolve to the lower index.
#[inline]
pub(crate) fn top2_of4(g: [f32; 4]) -> [u8; 2] {
    let a = [g[0].abs(), g[1].abs(), g[2].abs(), g[3].abs()];
    let mut first = 0usize;
    for i in 1..4 {
        if a[i] > a[first] {
            first = i;
        }
    }
    let mut second = usize::from(first == 0);
    for i in 0..4 {
        if i != first && a[i] > a[second] {
            second = i;
        }
    }
    if first < second {
        [first as u8, second as u8]
    } else {
        [second as u8, first as u8]
    }
}

/// L1 norm of the elements `mask` drops.
pub fn block_loss(block: &Tensor2D, mask: &ElementMask) -> Result<f64> {
    if block.shape() != mask.shape() {
        return Err(Error::Shape(format!(
            "block {:?} vs mask {:?}",
            block.shape(),
            mask.shape()
        )));
    }
    Ok(block
        .data()
        .iter()
        .zip(mask.bits())
        .filter(|(_, &kept)| !kept)
        .map(|(v, _)| f64::from(v.abs()))
        .sum())
}

/// Flags `floor(target × prunable)` lowest-loss unprotected blocks sparse.
/// Loss ties prune the lower block index first.
pub fn select_blocks(losses: &[f64], target: f64, prefix: usize, suffix: usize) -> BlockMask {
    select_with_forced(losses, target, prefix, suffix, &[])
}

fn select_with_forced(losses: &[f64], target: f64, prefix: usize, suffix: usize, forced_sparse: &[usize]) -> BlockMask {
    let total = losses.len();
    let start = prefix.min(total);
    let end = total.saturating_sub(suffix).max(start);
    let prunable = end - start;
    // the epsilon absorbs representation error such as 0.29 * 100 = 28.999...
    let quota = ((target.clamp(0.0, 1.0) * prunable as f64) + 1e-9).floor() as usize;

    let mut flags = vec![true; total];
    let mut chosen = 0;
    for &b in forced_sparse {
        if (start..end).contains(&b) && flags[b] {
            flags[b] = false;
            chosen += 1;
        }
    }
    let mut order: Vec<usize> = (start..end).filter(|&b| flags[b]).collect();
    order.sort_by(|&a, &b| losses[a].total_cmp(&losses[b]).then(a.cmp(&b)));
    for b in order.into_iter().take(quota.saturating_sub(chosen)) {
        flags[b] = false;
    }
    BlockMask {
        flags,
        losses: losses.to_vec(),
    }
}

/// Per-block element masks and losses for every full block; a trailing
/// partial block gets an all-kept mask and zero loss.
fn block_masks_and_losses(
    cache: &Tensor2D,
    axis: GroupingAxis,
    cfg: &SparsityConfig,
) -> Result<Vec<(ElementMask, f64)>> {
    let (seq_len, d) = cache.shape();
    let b = cfg.block_size;
    if axis == GroupingAxis::HeadDim && d % cfg.pattern.m_group() != 0 {
        return Err(Error::Shape(format!(
            "head dimension {d} is not divisible by {}",
            cfg.pattern.m_group()
        )));
    }
    (0..seq_len.div_ceil(b))
        .into_par_iter()
        .map(|i| {
            let end = ((i + 1) * b).min(seq_len);
            let rows = end - i * b;
            if rows < b {
                return Ok((ElementMask::all_kept(rows, d), 0.0));
            }
            let block = cache.slice_rows(i * b, end);
            let mask = element_mask(&block, axis, cfg.pattern)?;
            let loss = block_loss(&block, &mask)?;
            Ok((mask, loss))
        })
        .collect()
}

fn assemble(
    cache: &Tensor2D,
    per_block: &[(ElementMask, f64)],
    block: BlockMask,
    axis: GroupingAxis,
    cfg: &SparsityConfig,
    previous: Option<&HierarchicalMask>,
) -> HierarchicalMask {
    let (seq_len, d) = cache.shape();
    let b = cfg.block_size;
    let mut element = ElementMask::all_kept(seq_len, d);
    for (i, (mask, _)) in per_block.iter().enumerate() {
        if block.is_dense(i) {
            continue;
        }
        let reuse = previous.filter(|p| i < p.block.len() && !p.block.is_dense(i));
        for r in 0..mask.shape().0 {
            for c in 0..d {
                let kept = match reuse {
                    Some(p) => p.element.get(i * b + r, c),
                    None => mask.get(r, c),
                };
                element.set(i * b + r, c, kept);
            }
        }
    }
    let (prefix, suffix) = cfg.protected_blocks(seq_len);
    HierarchicalMask {
        element,
        block,
        axis,
        protected_prefix_blocks: prefix,
        protected_suffix_blocks: suffix,
    }
}

/// Hierarchical mask of one cache at the sparsity `cfg` assigns to `axis`.
pub fn prune_single(cache: &Tensor2D, axis: GroupingAxis, cfg: &SparsityConfig) -> Result<HierarchicalMask> {
    cfg.validate()?;
    let per_block = block_masks_and_losses(cache, axis, cfg)?;
    let losses: Vec<f64> = per_block.iter().map(|(_, l)| *l).collect();
    let (prefix, suffix) = cfg.protected_blocks(cache.rows());
    let block = select_blocks(&losses, cfg.sparsity(axis), prefix, suffix);
    Ok(assemble(cache, &per_block, block, axis, cfg, None))
}

/// Prunes a key/value cache pair. `S_K` applies to the key blocks and
/// `S_V` to the value blocks.
pub fn prune_cache(
    key: &Tensor2D,
    value: &Tensor2D,
    cfg: &SparsityConfig,
) -> Result<(HierarchicalMask, HierarchicalMask)> {
    if key.shape() != value.shape() {
        return Err(Error::Shape(format!(
            "key cache {:?} vs value cache {:?}",
            key.shape(),
            value.shape()
        )));
    }
    let axes = PruneAxes::default();
    Ok((
        prune_single(key, axes.key_axis, cfg)?,
        prune_single(value, axes.value_axis, cfg)?,
    ))
}

/// Raises the sparsity of an already pruned cache. Blocks sparse in
/// `previous` stay sparse with their element masks unchanged; additional
/// lowest-loss dense blocks are pruned until the new quota is met.
pub fn further_prune(cache: &Tensor2D, previous: &HierarchicalMask, cfg: &SparsityConfig) -> Result<HierarchicalMask> {
    cfg.validate()?;
    let axis = previous.axis;
    if previous.element.shape() != cache.shape() {
        return Err(Error::Shape(format!(
            "previous mask {:?} vs cache {:?}",
            previous.element.shape(),
            cache.shape()
        )));
    }
    let per_block = block_masks_and_losses(cache, axis, cfg)?;
    let losses: Vec<f64> = per_block.iter().map(|(_, l)| *l).collect();
    let (prefix, suffix) = cfg.protected_blocks(cache.rows());
    let block = select_with_forced(
        &losses,
        cfg.sparsity(axis),
        prefix,
        suffix,
        &previous.block.sparse_blocks(),
    );
    Ok(assemble(cache, &per_block, block, axis, cfg, Some(previous)))
}

/// Completes an externally chosen block mask with magnitude element masks
/// (all-kept on dense blocks).
pub fn mask_from_blocks(
    cache: &Tensor2D,
    block: BlockMask,
    axis: GroupingAxis,
    cfg: &SparsityConfig,
) -> Result<HierarchicalMask> {
    cfg.validate()?;
    let per_block = block_masks_and_losses(cache, axis, cfg)?;
    if block.len() != per_block.len() {
        return Err(Error::Shape(format!(
            "block mask of {} entries for {} blocks",
            block.len(),
            per_block.len()
        )));
    }
    Ok(assemble(cache, &per_block, block, axis, cfg, None))
}
