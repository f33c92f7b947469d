//! Pooled compressed-cache storage.
//!
//! Dense blocks live verbatim in a dense pool. Sparse blocks are reduced to
//! their kept values (nnz pool) plus packed 2:4 metadata (meta pool). A
//! signed 16-bit index map, one entry per logical block, says where each
//! block lives: `e > 0` is dense pool slot `e - 1`, `e < 0` is sparse pool
//! slot `-e - 1`, and `0` never occurs.
//!
//! Sparse key blocks are stored `block_size × d/2` (groups along channels,
//! token-major). Sparse value blocks are stored transposed, `d × block_size/2`
//! (groups along tokens, channel-major), so both are directly the left
//! operand of their GEMM (`K × Qᵀ` and `Vᵀ × Pᵀ`).

use std::ops::{Add, Range};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nm::{expand_sparse, ElementMask, GroupMetadata, GroupingAxis, MetadataWriter, NmPattern};
use crate::pruner::{top2_of4, BlockMask, HierarchicalMask, SparsityConfig};
use crate::tensor::Tensor2D;

/// Largest pool slot count addressable by a positive `i16` entry.
pub const MAX_POOL_BLOCKS: usize = i16::MAX as usize;

/// Bytes per stored element and per index entry.
pub const ELEMENT_BYTES: u64 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedCache {
    axis: GroupingAxis,
    seq_len: usize,
    head_dim: usize,
    block_size: usize,
    pattern: NmPattern,
    dense_pool: Vec<Tensor2D>,
    nnz_pool: Vec<Tensor2D>,
    meta_pool: Vec<GroupMetadata>,
    index_map: Vec<i16>,
    dense_count: usize,
    sparse_count: usize,
}

/// Borrowed view of one logical block.
#[derive(Debug, Clone, Copy)]
pub enum BlockRef<'a> {
    /// `rows × d`, in sequence orientation.
    Dense(&'a Tensor2D),
    /// Compressed left GEMM operand and its metadata.
    Sparse { nnz: &'a Tensor2D, meta: &'a GroupMetadata },
}

/// Signed index-map entry for a pool slot.
fn encode_entry(dense: bool, slot: usize) -> Result<i16> {
    if slot >= MAX_POOL_BLOCKS {
        return Err(Error::Capacity {
            pool: if dense { "dense" } else { "sparse" },
            offset: slot,
        });
    }
    let e = (slot + 1) as i16;
    Ok(if dense { e } else { -e })
}

impl CompressedCache {
    /// Reassembles a cache from its parts, checking every structural
    /// invariant (used when loading containers).
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        axis: GroupingAxis,
        seq_len: usize,
        head_dim: usize,
        block_size: usize,
        pattern: NmPattern,
        dense_pool: Vec<Tensor2D>,
        nnz_pool: Vec<Tensor2D>,
        meta_pool: Vec<GroupMetadata>,
        index_map: Vec<i16>,
    ) -> Result<Self> {
        pattern.require_codec()?;
        if block_size == 0 || !block_size.is_multiple_of(pattern.m_group()) {
            return Err(Error::Config(format!("invalid block size {block_size}")));
        }
        let blocks = seq_len.div_ceil(block_size);
        if index_map.len() != blocks {
            return Err(Error::CorruptIndex {
                block: index_map.len().min(blocks),
                reason: format!("{} entries for {blocks} blocks", index_map.len()),
            });
        }
        if nnz_pool.len() != meta_pool.len() {
            return Err(Error::Shape(format!(
                "{} nnz blocks but {} metadata blocks",
                nnz_pool.len(),
                meta_pool.len()
            )));
        }
        let mut dense_seen = vec![false; dense_pool.len()];
        let mut sparse_seen = vec![false; nnz_pool.len()];
        let (mut dense_count, mut sparse_count) = (0, 0);
        for (i, &e) in index_map.iter().enumerate() {
            let rows = (seq_len - i * block_size).min(block_size);
            let corrupt = |reason: String| Error::CorruptIndex { block: i, reason };
            match e {
                0 => return Err(corrupt("zero entry".into())),
                e if e > 0 => {
                    let slot = e as usize - 1;
                    let t = dense_pool
                        .get(slot)
                        .ok_or_else(|| corrupt(format!("dangling dense offset {slot}")))?;
                    if std::mem::replace(&mut dense_seen[slot], true) {
                        return Err(corrupt(format!("dense slot {slot} referenced twice")));
                    }
                    if t.shape() != (rows, head_dim) {
                        return Err(corrupt(format!("dense block shape {:?}", t.shape())));
                    }
                    dense_count += 1;
                }
                e => {
                    let slot = (-(e as i32)) as usize - 1;
                    let nnz = nnz_pool
                        .get(slot)
                        .ok_or_else(|| corrupt(format!("dangling sparse offset {slot}")))?;
                    if std::mem::replace(&mut sparse_seen[slot], true) {
                        return Err(corrupt(format!("sparse slot {slot} referenced twice")));
                    }
                    if rows != block_size {
                        return Err(corrupt("partial block cannot be sparse".into()));
                    }
                    let expected = sparse_shape(axis, block_size, head_dim, pattern);
                    if nnz.shape() != expected {
                        return Err(corrupt(format!(
                            "nnz block shape {:?}, expected {expected:?}",
                            nnz.shape()
                        )));
                    }
                    let groups = block_size * head_dim / pattern.m_group();
                    if meta_pool[slot].group_count() != groups {
                        return Err(corrupt(format!(
                            "metadata holds {} groups, expected {groups}",
                            meta_pool[slot].group_count()
                        )));
                    }
                    sparse_count += 1;
                }
            }
        }
        if dense_count != dense_pool.len() || sparse_count != nnz_pool.len() {
            return Err(Error::CorruptIndex {
                block: blocks,
                reason: "unreferenced pool slots".into(),
            });
        }
        Ok(Self {
            axis,
            seq_len,
            head_dim,
            block_size,
            pattern,
            dense_pool,
            nnz_pool,
            meta_pool,
            index_map,
            dense_count,
            sparse_count,
        })
    }

    pub fn axis(&self) -> GroupingAxis {
        self.axis
    }
    pub fn seq_len(&self) -> usize {
        self.seq_len
    }
    pub fn head_dim(&self) -> usize {
        self.head_dim
    }
    pub fn block_size(&self) -> usize {
        self.block_size
    }
    pub fn pattern(&self) -> NmPattern {
        self.pattern
    }
    pub fn index_map(&self) -> &[i16] {
        &self.index_map
    }
    pub fn dense_pool(&self) -> &[Tensor2D] {
        &self.dense_pool
    }
    pub fn nnz_pool(&self) -> &[Tensor2D] {
        &self.nnz_pool
    }
    pub fn meta_pool(&self) -> &[GroupMetadata] {
        &self.meta_pool
    }
    pub fn dense_count(&self) -> usize {
        self.dense_count
    }
    pub fn sparse_count(&self) -> usize {
        self.sparse_count
    }
    pub fn block_count(&self) -> usize {
        self.index_map.len()
    }

    pub fn block_rows(&self, block: usize) -> Range<usize> {
        let start = block * self.block_size;
        start..(start + self.block_size).min(self.seq_len)
    }

    /// Resolves one index-map entry.
    pub fn block(&self, block: usize) -> BlockRef<'_> {
        let e = self.index_map[block];
        if e > 0 {
            BlockRef::Dense(&self.dense_pool[e as usize - 1])
        } else {
            let slot = (-(e as i32)) as usize - 1;
            BlockRef::Sparse {
                nnz: &self.nnz_pool[slot],
                meta: &self.meta_pool[slot],
            }
        }
    }

    pub fn is_all_dense(&self) -> bool {
        self.sparse_count == 0
    }

    pub fn is_all_sparse(&self) -> bool {
        self.dense_count == 0
    }
}

fn sparse_shape(axis: GroupingAxis, block_size: usize, d: usize, p: NmPattern) -> (usize, usize) {
    match axis {
        GroupingAxis::HeadDim => (block_size, d / p.m_group() * p.n_keep()),
        GroupingAxis::Sequence => (d, block_size / p.m_group() * p.n_keep()),
    }
}

/// Index map from a block mask: sequence-order counters, offset + 1 with
/// the sign selecting the pool.
fn build_index_map(block: &BlockMask) -> Result<Vec<i16>> {
    let (mut dense, mut sparse) = (0, 0);
    block
        .flags
        .iter()
        .map(|&is_dense| {
            let e = if is_dense {
                encode_entry(true, dense)?
            } else {
                encode_entry(false, sparse)?
            };
            if is_dense {
                dense += 1;
            } else {
                sparse += 1;
            }
            Ok(e)
        })
        .collect()
}

fn check_layout(seq_len: usize, d: usize, axis: GroupingAxis, block: &BlockMask, cfg: &SparsityConfig) -> Result<()> {
    cfg.validate()?;
    let b = cfg.block_size;
    let blocks = seq_len.div_ceil(b);
    if block.len() != blocks {
        return Err(Error::Shape(format!(
            "block mask has {} entries, cache has {blocks} blocks",
            block.len()
        )));
    }
    if block.sparse_count() > 0 {
        cfg.pattern.require_codec()?;
        if axis == GroupingAxis::HeadDim && !d.is_multiple_of(cfg.pattern.m_group()) {
            return Err(Error::Shape(format!(
                "head dimension {d} is not divisible by {}",
                cfg.pattern.m_group()
            )));
        }
        if !seq_len.is_multiple_of(b) && !block.is_dense(blocks - 1) {
            return Err(Error::Config("a trailing partial block must stay dense".into()));
        }
    }
    Ok(())
}

/// Kept values and metadata of one full block under an explicit element mask.
fn extract_sparse(
    cache: &Tensor2D,
    mask: &ElementMask,
    start: usize,
    axis: GroupingAxis,
    cfg: &SparsityConfig,
) -> (Tensor2D, GroupMetadata) {
    let b = cfg.block_size;
    let d = cache.cols();
    let (rows, cols) = sparse_shape(axis, b, d, cfg.pattern);
    let mut nnz = Vec::with_capacity(rows * cols);
    let mut meta = MetadataWriter::with_groups(b * d / 4);
    let mut emit = |vals: [f32; 4], kept: [bool; 4]| {
        let mut codes = [0u8; 2];
        let mut k = 0;
        for p in 0..4 {
            if kept[p] {
                codes[k] = p as u8;
                nnz.push(vals[p]);
                k += 1;
            }
        }
        meta.push(codes[0], codes[1]);
    };
    match axis {
        GroupingAxis::HeadDim => {
            for r in start..start + b {
                for g in (0..d).step_by(4) {
                    let vals = [0, 1, 2, 3].map(|p| cache.get(r, g + p));
                    let kept = [0, 1, 2, 3].map(|p| mask.get(r, g + p));
                    emit(vals, kept);
                }
            }
        }
        GroupingAxis::Sequence => {
            for c in 0..d {
                for g in (start..start + b).step_by(4) {
                    let vals = [0, 1, 2, 3].map(|p| cache.get(g + p, c));
                    let kept = [0, 1, 2, 3].map(|p| mask.get(g + p, c));
                    emit(vals, kept);
                }
            }
        }
    }
    (Tensor2D::from_parts(rows, cols, nnz), meta.finish())
}

/// Splits a masked cache into pools following `mask.block`; sparse blocks
/// keep exactly the elements `mask.element` marks.
pub fn compress(cache: &Tensor2D, mask: &HierarchicalMask, cfg: &SparsityConfig) -> Result<CompressedCache> {
    let (seq_len, d) = cache.shape();
    let axis = mask.axis;
    if mask.element.shape() != cache.shape() {
        return Err(Error::Shape(format!(
            "element mask {:?} vs cache {:?}",
            mask.element.shape(),
            cache.shape()
        )));
    }
    check_layout(seq_len, d, axis, &mask.block, cfg)?;
    let b = cfg.block_size;
    for i in mask.block.sparse_blocks() {
        if let Err(flat) = mask.element.check_cardinality(i * b, (i + 1) * b, axis, cfg.pattern) {
            return Err(Error::Metadata {
                group: flat,
                reason: format!(
                    "element mask of sparse block {i} does not keep exactly {} of {}",
                    cfg.pattern.n_keep(),
                    cfg.pattern.m_group()
                ),
            });
        }
    }
    let index_map = build_index_map(&mask.block)?;

    enum Payload {
        Dense(Tensor2D),
        Sparse(Tensor2D, GroupMetadata),
    }
    let payloads: Vec<Payload> = (0..index_map.len())
        .into_par_iter()
        .map(|i| {
            let end = ((i + 1) * b).min(seq_len);
            if mask.block.is_dense(i) {
                Payload::Dense(cache.slice_rows(i * b, end))
            } else {
                let (nnz, meta) = extract_sparse(cache, &mask.element, i * b, axis, cfg);
                Payload::Sparse(nnz, meta)
            }
        })
        .collect();

    let mut dense_pool = Vec::new();
    let mut nnz_pool = Vec::new();
    let mut meta_pool = Vec::new();
    for p in payloads {
        match p {
            Payload::Dense(t) => dense_pool.push(t),
            Payload::Sparse(n, m) => {
                nnz_pool.push(n);
                meta_pool.push(m);
            }
        }
    }
    Ok(CompressedCache {
        axis,
        seq_len,
        head_dim: d,
        block_size: b,
        pattern: cfg.pattern,
        dense_count: dense_pool.len(),
        sparse_count: nnz_pool.len(),
        dense_pool,
        nnz_pool,
        meta_pool,
        index_map,
    })
}

/// Single-pass magnitude compression: selects the top-2 magnitudes of every
/// 2:4 group while compressing, without materializing an element mask.
/// Produces the same cache as [`crate::pruner::mask_from_blocks`] followed
/// by [`compress`].
pub fn fused_magnitude_compress(
    cache: &Tensor2D,
    block: &BlockMask,
    axis: GroupingAxis,
    cfg: &SparsityConfig,
) -> Result<CompressedCache> {
    let data = cache.data();
    fused_impl(cache.rows(), cache.cols(), |i| data[i], block, axis, cfg)
}

/// `read(flat_index)` is called exactly once per cache element.
pub(crate) fn fused_impl<F: FnMut(usize) -> f32>(
    seq_len: usize,
    d: usize,
    mut read: F,
    block: &BlockMask,
    axis: GroupingAxis,
    cfg: &SparsityConfig,
) -> Result<CompressedCache> {
    check_layout(seq_len, d, axis, block, cfg)?;
    let index_map = build_index_map(block)?;
    let b = cfg.block_size;
    let mut dense_pool = Vec::new();
    let mut nnz_pool = Vec::new();
    let mut meta_pool = Vec::new();
    for i in 0..index_map.len() {
        let start = i * b;
        let end = (start + b).min(seq_len);
        if block.is_dense(i) {
            let vals = (start * d..end * d).map(&mut read).collect();
            dense_pool.push(Tensor2D::from_parts(end - start, d, vals));
            continue;
        }
        let (rows, cols) = sparse_shape(axis, b, d, cfg.pattern);
        let mut nnz = vec![0.0f32; rows * cols];
        let mut meta = MetadataWriter::with_groups(b * d / 4);
        match axis {
            GroupingAxis::HeadDim => {
                for r in start..end {
                    for g in (0..d).step_by(4) {
                        let vals = [0, 1, 2, 3].map(|p| read(r * d + g + p));
                        let [lo, hi] = top2_of4(vals);
                        let out = (r - start) * cols + g / 2;
                        nnz[out] = vals[usize::from(lo)];
                        nnz[out + 1] = vals[usize::from(hi)];
                        meta.push(lo, hi);
                    }
                }
            }
            GroupingAxis::Sequence => {
                // row-major traversal of the source; outputs land channel-major
                let groups_per_channel = b / 4;
                let mut codes = vec![[0u8; 2]; d * groups_per_channel];
                for g in 0..groups_per_channel {
                    let mut vals = vec![[0.0f32; 4]; d];
                    for p in 0..4 {
                        let r = start + 4 * g + p;
                        for (c, v) in vals.iter_mut().enumerate() {
                            v[p] = read(r * d + c);
                        }
                    }
                    for (c, v) in vals.iter().enumerate() {
                        let [lo, hi] = top2_of4(*v);
                        let out = c * cols + 2 * g;
                        nnz[out] = v[usize::from(lo)];
                        nnz[out + 1] = v[usize::from(hi)];
                        codes[c * groups_per_channel + g] = [lo, hi];
                    }
                }
                for [lo, hi] in codes {
                    meta.push(lo, hi);
                }
            }
        }
        nnz_pool.push(Tensor2D::from_parts(rows, cols, nnz));
        meta_pool.push(meta.finish());
    }
    Ok(CompressedCache {
        axis,
        seq_len,
        head_dim: d,
        block_size: b,
        pattern: cfg.pattern,
        dense_count: dense_pool.len(),
        sparse_count: nnz_pool.len(),
        dense_pool,
        nnz_pool,
        meta_pool,
        index_map,
    })
}

/// Dense-equivalent `rows × d` block for a sparse pool entry.
pub fn expand_block(c: &CompressedCache, nnz: &Tensor2D, meta: &GroupMetadata) -> Result<Tensor2D> {
    match c.axis {
        GroupingAxis::HeadDim => expand_sparse(nnz, meta, c.pattern, c.head_dim),
        GroupingAxis::Sequence => Ok(expand_sparse(nnz, meta, c.pattern, c.block_size)?.transpose()),
    }
}

/// Rebuilds the masked cache.
pub fn decompress(c: &CompressedCache) -> Result<Tensor2D> {
    let mut out = Vec::with_capacity(c.seq_len * c.head_dim);
    for i in 0..c.block_count() {
        let e = c.index_map[i];
        if e == 0 {
            return Err(Error::CorruptIndex {
                block: i,
                reason: "zero entry".into(),
            });
        }
        let slot = e.unsigned_abs() as usize - 1;
        let dangling = |pool: &str| Error::CorruptIndex {
            block: i,
            reason: format!("dangling {pool} offset {slot}"),
        };
        if e > 0 {
            let t = c.dense_pool.get(slot).ok_or_else(|| dangling("dense"))?;
            out.extend_from_slice(t.data());
        } else {
            let nnz = c.nnz_pool.get(slot).ok_or_else(|| dangling("sparse"))?;
            let meta = c.meta_pool.get(slot).ok_or_else(|| dangling("metadata"))?;
            out.extend_from_slice(expand_block(c, nnz, meta)?.data());
        }
    }
    Tensor2D::new(c.seq_len, c.head_dim, out)
}

/// Byte counts at 16-bit element accounting.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SizeBreakdown {
    pub index_bytes: u64,
    pub dense_bytes: u64,
    pub nnz_bytes: u64,
    pub metadata_bytes: u64,
}

impl SizeBreakdown {
    pub fn total(&self) -> u64 {
        self.index_bytes + self.dense_bytes + self.nnz_bytes + self.metadata_bytes
    }
}

impl Add for SizeBreakdown {
    type Output = SizeBreakdown;
    fn add(self, o: SizeBreakdown) -> SizeBreakdown {
        SizeBreakdown {
            index_bytes: self.index_bytes + o.index_bytes,
            dense_bytes: self.dense_bytes + o.dense_bytes,
            nnz_bytes: self.nnz_bytes + o.nnz_bytes,
            metadata_bytes: self.metadata_bytes + o.metadata_bytes,
        }
    }
}

/// Storage footprint of one cache: one 2-byte index entry per block and
/// 2 bytes per stored element or metadata word.
pub fn measure_size(c: &CompressedCache) -> SizeBreakdown {
    let elems = |pool: &[Tensor2D]| pool.iter().map(|t| t.data().len() as u64).sum::<u64>();
    SizeBreakdown {
        index_bytes: ELEMENT_BYTES * c.index_map.len() as u64,
        dense_bytes: ELEMENT_BYTES * elems(&c.dense_pool),
        nnz_bytes: ELEMENT_BYTES * elems(&c.nnz_pool),
        metadata_bytes: ELEMENT_BYTES * c.meta_pool.iter().map(|m| m.words().len() as u64).sum::<u64>(),
    }
}

/// Bytes of the uncompressed cache at 16-bit elements.
pub fn baseline_bytes(c: &CompressedCache) -> u64 {
    ELEMENT_BYTES * (c.seq_len * c.head_dim) as u64
}
