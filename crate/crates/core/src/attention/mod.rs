//! Tiled attention over mixed dense/sparse KV blocks.
//!
//! Both GEMMs run transposed so the caches are the left (compressible)
//! operand: `Sᵀ = K × Qᵀ` reduces over the head dimension, `Oᵀ = Vᵀ × Pᵀ`
//! reduces over the sequence. Each key/value block is looked up in the
//! index map and dispatched to a dense or sparse GEMM; an online softmax
//! carries the running max and sum between blocks.

mod decode;
mod gemm;
mod oracle;
mod prefill;
mod softmax;
mod work;

use std::borrow::Cow;

use serde::{Deserialize, Serialize};

use crate::compressor::{decompress, measure_size, BlockRef, CompressedCache, ELEMENT_BYTES};
use crate::error::{Error, Result};
use crate::nm::{GroupMetadata, GroupingAxis, NmPattern};
use crate::tensor::Tensor2D;

pub use decode::{combine_splits, decode_attention, decode_attention_unsplit, split_ranges};
pub use gemm::{dense_gemm, sparse_gemm_emulated};
pub use oracle::{dense_attention, dense_attention_oracle};
pub use prefill::{prefill_attention, prefill_attention_on_path, KernelPath};
pub use softmax::{SoftmaxState, SplitPartial};
pub use work::{flop_and_byte_count, WorkCount};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Prefill,
    Decode,
}

/// Key or value storage for one KV head.
#[derive(Debug, Clone, PartialEq)]
pub enum KvSource {
    /// Uncompressed `seq_len × d` cache.
    Dense(Tensor2D),
    /// Compressed prefix, optionally followed by uncompressed tokens
    /// appended since compression.
    Compressed {
        cache: CompressedCache,
        tail: Option<Tensor2D>,
    },
}

impl From<Tensor2D> for KvSource {
    fn from(t: Tensor2D) -> Self {
        KvSource::Dense(t)
    }
}

impl From<CompressedCache> for KvSource {
    fn from(cache: CompressedCache) -> Self {
        KvSource::Compressed { cache, tail: None }
    }
}

/// Operand of one block in GEMM-ready form.
#[derive(Debug, Clone)]
pub(crate) enum BlockOperand<'a> {
    /// `rows × d` block in sequence orientation.
    Dense(Cow<'a, Tensor2D>),
    /// Compressed left operand: `rows × d/2` for keys, `d × rows/2` for values.
    Sparse {
        nnz: &'a Tensor2D,
        meta: &'a GroupMetadata,
        pattern: NmPattern,
    },
}

impl BlockOperand<'_> {
    pub(crate) fn is_sparse(&self) -> bool {
        matches!(self, BlockOperand::Sparse { .. })
    }
}

/// One logical block: absolute start row, row count and operand.
#[derive(Debug, Clone)]
pub(crate) struct KvBlock<'a> {
    pub start: usize,
    pub rows: usize,
    pub operand: BlockOperand<'a>,
}

impl KvSource {
    pub fn seq_len(&self) -> usize {
        match self {
            KvSource::Dense(t) => t.rows(),
            KvSource::Compressed { cache, tail } => cache.seq_len() + tail.as_ref().map_or(0, Tensor2D::rows),
        }
    }

    pub fn head_dim(&self) -> usize {
        match self {
            KvSource::Dense(t) => t.cols(),
            KvSource::Compressed { cache, .. } => cache.head_dim(),
        }
    }

    /// Block size of the compressed prefix, if any.
    pub fn block_size(&self) -> Option<usize> {
        match self {
            KvSource::Dense(_) => None,
            KvSource::Compressed { cache, .. } => Some(cache.block_size()),
        }
    }

    /// Materializes the (masked) dense cache.
    pub fn to_dense(&self) -> Result<Tensor2D> {
        match self {
            KvSource::Dense(t) => Ok(t.clone()),
            KvSource::Compressed { cache, tail } => {
                let prefix = decompress(cache)?;
                match tail {
                    Some(t) => Tensor2D::vstack(&[&prefix, t]),
                    None => Ok(prefix),
                }
            }
        }
    }

    /// Bytes read to stream this cache once, at 16-bit accounting.
    pub fn storage_bytes(&self) -> u64 {
        let dense = |t: &Tensor2D| ELEMENT_BYTES * t.data().len() as u64;
        match self {
            KvSource::Dense(t) => dense(t),
            KvSource::Compressed { cache, tail } => measure_size(cache).total() + tail.as_ref().map_or(0, dense),
        }
    }

    /// Splits the source into blocks of `block_cols` rows (the compressed
    /// prefix keeps its own blocking, which must equal `block_cols`).
    pub(crate) fn blocks(&self, block_cols: usize) -> Vec<KvBlock<'_>> {
        let chunk = |t: &Tensor2D, base: usize, out: &mut Vec<KvBlock<'_>>| {
            let mut s = 0;
            while s < t.rows() {
                let e = (s + block_cols).min(t.rows());
                out.push(KvBlock {
                    start: base + s,
                    rows: e - s,
                    operand: BlockOperand::Dense(Cow::Owned(t.slice_rows(s, e))),
                });
                s = e;
            }
        };
        let mut out = Vec::new();
        match self {
            KvSource::Dense(t) => chunk(t, 0, &mut out),
            KvSource::Compressed { cache, tail } => {
                for i in 0..cache.block_count() {
                    let rows = cache.block_rows(i);
                    let operand = match cache.block(i) {
                        BlockRef::Dense(t) => BlockOperand::Dense(Cow::Borrowed(t)),
                        BlockRef::Sparse { nnz, meta } => BlockOperand::Sparse {
                            nnz,
                            meta,
                            pattern: cache.pattern(),
                        },
                    };
                    out.push(KvBlock {
                        start: rows.start,
                        rows: rows.len(),
                        operand,
                    });
                }
                if let Some(t) = tail {
                    chunk(t, cache.seq_len(), &mut out);
                }
            }
        }
        out
    }

    fn check_role(&self, expected: GroupingAxis, role: &str) -> Result<()> {
        match self {
            KvSource::Compressed { cache, tail } => {
                if cache.axis() != expected {
                    return Err(Error::Config(format!(
                        "{role} cache is compressed along {:?}, expected {expected:?}",
                        cache.axis()
                    )));
                }
                if let Some(t) = tail {
                    if t.cols() != cache.head_dim() {
                        return Err(Error::Shape(format!(
                            "{role} tail has {} columns, cache has {}",
                            t.cols(),
                            cache.head_dim()
                        )));
                    }
                }
                Ok(())
            }
            KvSource::Dense(_) => Ok(()),
        }
    }
}

/// Query heads sharing one KV head, plus that head's caches.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWorkload {
    /// One `n_q × d` query matrix per query head in the GQA group.
    pub queries: Vec<Tensor2D>,
    pub key: KvSource,
    pub value: KvSource,
    pub causal: bool,
    pub scale: f32,
    pub phase: Phase,
}

impl AttentionWorkload {
    /// Validates shapes and sets the score scale to `1/√d`.
    pub fn new(queries: Vec<Tensor2D>, key: KvSource, value: KvSource, causal: bool, phase: Phase) -> Result<Self> {
        let d = key.head_dim();
        let w = Self {
            queries,
            key,
            value,
            causal,
            scale: 1.0 / (d as f32).sqrt(),
            phase,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn gqa_group(&self) -> usize {
        self.queries.len()
    }

    pub fn head_dim(&self) -> usize {
        self.key.head_dim()
    }

    pub fn kv_len(&self) -> usize {
        self.key.seq_len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.key.head_dim();
        if self.queries.is_empty() {
            return Err(Error::Config("workload has no query heads".into()));
        }
        if self.value.head_dim() != d || self.value.seq_len() != self.key.seq_len() {
            return Err(Error::Shape(format!(
                "key cache {}x{d} vs value cache {}x{}",
                self.key.seq_len(),
                self.value.seq_len(),
                self.value.head_dim()
            )));
        }
        self.key.check_role(GroupingAxis::HeadDim, "key")?;
        self.value.check_role(GroupingAxis::Sequence, "value")?;
        let prefix = |s: &KvSource| match s {
            KvSource::Dense(_) => None,
            KvSource::Compressed { cache, .. } => Some((cache.block_size(), cache.seq_len())),
        };
        if prefix(&self.key) != prefix(&self.value) {
            return Err(Error::Config("key and value caches use different block layouts".into()));
        }
        let n_q = self.queries[0].rows();
        for q in &self.queries {
            if q.cols() != d {
                return Err(Error::Shape(format!("query has {} columns, cache has {d}", q.cols())));
            }
            if q.rows() != n_q {
                return Err(Error::Shape("query heads of one group differ in length".into()));
            }
        }
        match self.phase {
            Phase::Decode if n_q != 1 => Err(Error::Config(format!(
                "decode expects one query row per head, got {n_q}"
            ))),
            Phase::Prefill if self.causal && n_q > self.kv_len() => Err(Error::Config(format!(
                "causal prefill with {n_q} queries over {} cached tokens",
                self.kv_len()
            ))),
            _ => Ok(()),
        }
    }

    /// Keys visible to query row `q`: positions `< limit(q)`. Queries are
    /// aligned to the end of the cache.
    #[inline]
    pub(crate) fn causal_limit(&self, q: usize) -> usize {
        if self.causal {
            q + 1 + self.kv_len() - self.queries[0].rows()
        } else {
            usize::MAX
        }
    }
}

/// Query tile rows and key/value tile columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TileConfig {
    pub b_r: usize,
    pub b_c: usize,
}

impl TileConfig {
    pub fn new(b_r: usize, b_c: usize) -> Self {
        Self { b_r, b_c }
    }

    /// Tiles for `w`: `b_c` pinned to the cache block size when compressed.
    pub fn for_workload(b_r: usize, w: &AttentionWorkload) -> Self {
        Self {
            b_r,
            b_c: w.key.block_size().unwrap_or(64),
        }
    }

    pub(crate) fn validate(&self, w: &AttentionWorkload) -> Result<()> {
        if self.b_r == 0 || self.b_c == 0 {
            return Err(Error::Config("tile sizes must be positive".into()));
        }
        if let Some(b) = w.key.block_size() {
            if b != self.b_c {
                return Err(Error::Config(format!(
                    "b_c = {} must equal the cache block size {b}",
                    self.b_c
                )));
            }
        }
        Ok(())
    }
}
