//! Binary container for a [`CompressedCache`].
//!
//! All integers are little-endian. Scalars are stored as IEEE binary16,
//! rounded to nearest-even from `f32`.
//!
//! ```text
//! offset  size  field
//!      0     8  magic "HSPARSE\0"
//!      8     2  version (1)
//!     10     1  cache kind (0 = key / head-dim groups, 1 = value / sequence groups)
//!     11     1  element width in bits (16)
//!     12     1  n_keep
//!     13     1  m_group
//!     14     4  block_size
//!     18     4  head_dim
//!     22     8  seq_len
//!     30     4  logical blocks
//!     34     4  dense_count
//!     38     4  sparse_count
//!     42        index map : u64 entry count, then i16 entries
//!               dense pool: u64 element count, then f16 elements (blocks in slot order)
//!               nnz pool  : u64 element count, then f16 elements (blocks in slot order)
//!               meta pool : u64 word count, then u16 words (blocks in slot order)
//! ```

use half::f16;

use crate::compressor::CompressedCache;
use crate::error::{ContainerError, Error, Result};
use crate::nm::{GroupMetadata, GroupingAxis, NmPattern};
use crate::tensor::Tensor2D;

pub const MAGIC: [u8; 8] = *b"HSPARSE\0";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 42;
const ELEMENT_WIDTH_F16: u8 = 16;

fn kind_tag(axis: GroupingAxis) -> u8 {
    match axis {
        GroupingAxis::HeadDim => 0,
        GroupingAxis::Sequence => 1,
    }
}

/// Rounds to the nearest-even binary16 value, widened back to `f32`.
pub fn round_to_storage(v: f32) -> f32 {
    f16::from_f32(v).to_f32()
}

/// Serializes `c`. Fails if a value overflows the binary16 range.
pub fn serialize(c: &CompressedCache) -> Result<Vec<u8>> {
    let dense: usize = c.dense_pool().iter().map(|t| t.data().len()).sum();
    let nnz: usize = c.nnz_pool().iter().map(|t| t.data().len()).sum();
    let words: usize = c.meta_pool().iter().map(|m| m.words().len()).sum();
    let mut out = Vec::with_capacity(HEADER_LEN + 32 + 2 * (c.block_count() + dense + nnz + words));

    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(kind_tag(c.axis()));
    out.push(ELEMENT_WIDTH_F16);
    out.push(c.pattern().n_keep() as u8);
    out.push(c.pattern().m_group() as u8);
    let u32_field = |v: usize, name: &str| {
        u32::try_from(v).map_err(|_| Error::Config(format!("{name} {v} exceeds the u32 header field")))
    };
    out.extend_from_slice(&u32_field(c.block_size(), "block_size")?.to_le_bytes());
    out.extend_from_slice(&u32_field(c.head_dim(), "head_dim")?.to_le_bytes());
    out.extend_from_slice(&(c.seq_len() as u64).to_le_bytes());
    out.extend_from_slice(&u32_field(c.block_count(), "block count")?.to_le_bytes());
    out.extend_from_slice(&(c.dense_count() as u32).to_le_bytes());
    out.extend_from_slice(&(c.sparse_count() as u32).to_le_bytes());
    debug_assert_eq!(out.len(), HEADER_LEN);

    out.extend_from_slice(&(c.block_count() as u64).to_le_bytes());
    for e in c.index_map() {
        out.extend_from_slice(&e.to_le_bytes());
    }
    for (pool, count) in [(c.dense_pool(), dense), (c.nnz_pool(), nnz)] {
        out.extend_from_slice(&(count as u64).to_le_bytes());
        for &v in pool.iter().flat_map(|t| t.data()) {
            let h = f16::from_f32(v);
            if !h.is_finite() {
                return Err(Error::Config(format!("value {v} overflows 16-bit storage")));
            }
            out.extend_from_slice(&h.to_bits().to_le_bytes());
        }
    }
    out.extend_from_slice(&(words as u64).to_le_bytes());
    for &w in c.meta_pool().iter().flat_map(|m| m.words()) {
        out.extend_from_slice(&w.to_le_bytes());
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, section: &'static str) -> Result<&'a [u8], ContainerError> {
        let available = self.buf.len() - self.pos;
        if available < n {
            return Err(ContainerError::Truncated {
                section,
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, section: &'static str) -> Result<u8, ContainerError> {
        Ok(self.take(1, section)?[0])
    }

    fn u16(&mut self, section: &'static str) -> Result<u16, ContainerError> {
        Ok(u16::from_le_bytes(self.take(2, section)?.try_into().unwrap()))
    }

    fn u32(&mut self, section: &'static str) -> Result<u32, ContainerError> {
        Ok(u32::from_le_bytes(self.take(4, section)?.try_into().unwrap()))
    }

    fn u64(&mut self, section: &'static str) -> Result<u64, ContainerError> {
        Ok(u64::from_le_bytes(self.take(8, section)?.try_into().unwrap()))
    }

    /// Reads a u64 length prefix that must equal `expected`, then borrows
    /// `expected * 2` bytes. Nothing is allocated before both checks pass.
    fn section(&mut self, section: &'static str, expected: usize) -> Result<&'a [u8], ContainerError> {
        let offset = self.pos;
        let count = self.u64(section)?;
        if count != expected as u64 {
            return Err(ContainerError::Invalid {
                field: section,
                offset,
                reason: format!("length prefix {count}, header implies {expected}"),
            });
        }
        let bytes = expected
            .checked_mul(2)
            .ok_or_else(|| invalid(section, offset, "length overflows"))?;
        self.take(bytes, section)
    }
}

fn halves(bytes: &[u8]) -> impl Iterator<Item = u16> + '_ {
    bytes.chunks_exact(2).map(|b| u16::from_le_bytes([b[0], b[1]]))
}

fn invalid(field: &'static str, offset: usize, reason: impl Into<String>) -> ContainerError {
    ContainerError::Invalid {
        field,
        offset,
        reason: reason.into(),
    }
}

/// Parses and validates a container image.
pub fn parse(buf: &[u8]) -> Result<CompressedCache> {
    let mut r = Reader { buf, pos: 0 };
    let magic = r.take(8, "magic").map_err(|_| ContainerError::BadMagic {
        expected: MAGIC,
        found: buf[..buf.len().min(8)].to_vec(),
    })?;
    if magic != MAGIC {
        return Err(ContainerError::BadMagic {
            expected: MAGIC,
            found: magic.to_vec(),
        }
        .into());
    }
    let version = r.u16("header")?;
    if version != VERSION {
        return Err(ContainerError::Version {
            found: version,
            offset: 8,
        }
        .into());
    }
    let axis = match r.u8("header")? {
        0 => GroupingAxis::HeadDim,
        1 => GroupingAxis::Sequence,
        k => return Err(invalid("cache kind", 10, format!("unknown tag {k}")).into()),
    };
    let width = r.u8("header")?;
    if width != ELEMENT_WIDTH_F16 {
        return Err(invalid("element width", 11, format!("{width} bits, only 16 supported")).into());
    }
    let (n_keep, m_group) = (r.u8("header")?, r.u8("header")?);
    let pattern = NmPattern::new(n_keep.into(), m_group.into())
        .and_then(|p| p.require_codec().map(|_| p))
        .map_err(|e| invalid("pattern", 12, e.to_string()))?;
    let block_size = r.u32("header")? as usize;
    let head_dim = r.u32("header")? as usize;
    let seq_len = r.u64("header")?;
    let blocks = r.u32("header")? as usize;
    let dense_count = r.u32("header")? as usize;
    let sparse_count = r.u32("header")? as usize;

    if block_size == 0 || !block_size.is_multiple_of(pattern.m_group()) {
        return Err(invalid("block_size", 14, format!("{block_size}")).into());
    }
    let seq_len = usize::try_from(seq_len).map_err(|_| invalid("seq_len", 22, "too large"))?;
    if seq_len.div_ceil(block_size) != blocks {
        return Err(invalid(
            "logical blocks",
            30,
            format!("{blocks} blocks cannot hold {seq_len} tokens of block {block_size}"),
        )
        .into());
    }
    if dense_count + sparse_count != blocks {
        return Err(invalid(
            "block counters",
            34,
            format!("{dense_count} + {sparse_count} != {blocks}"),
        )
        .into());
    }
    if sparse_count > 0 && !head_dim.is_multiple_of(pattern.m_group()) {
        return Err(invalid(
            "head_dim",
            18,
            format!("{head_dim} not divisible by {}", pattern.m_group()),
        )
        .into());
    }

    let index_offset = r.pos;
    let index: Vec<i16> = halves(r.section("index map", blocks)?).map(|h| h as i16).collect();

    // block row counts come from the index map; validate before sizing pools
    let mut dense_rows = Vec::with_capacity(dense_count);
    let (mut seen_dense, mut seen_sparse) = (0, 0);
    for (i, &e) in index.iter().enumerate() {
        let at = index_offset + 8 + 2 * i;
        let rows = (seq_len - i * block_size).min(block_size);
        match e {
            0 => return Err(invalid("index map", at, format!("zero entry for block {i}")).into()),
            e if e > 0 => {
                if e as usize != seen_dense + 1 {
                    return Err(invalid("index map", at, format!("dense entry {e} out of sequence order")).into());
                }
                seen_dense += 1;
                dense_rows.push(rows);
            }
            e => {
                if (-(e as i32)) as usize != seen_sparse + 1 {
                    return Err(invalid("index map", at, format!("sparse entry {e} out of sequence order")).into());
                }
                if rows != block_size {
                    return Err(invalid("index map", at, "partial block marked sparse").into());
                }
                seen_sparse += 1;
            }
        }
    }
    if seen_dense != dense_count || seen_sparse != sparse_count {
        return Err(invalid("index map", index_offset, "entry signs disagree with header counters").into());
    }

    // sizes are bounded by the bytes actually present, but the products can
    // still overflow for absurd header values
    let overflow = || invalid("head_dim", 18, "pool size overflows");
    let block_elems = block_size.checked_mul(head_dim).ok_or_else(overflow)?;
    let dense_elems = dense_rows
        .iter()
        .try_fold(0usize, |acc, r| acc.checked_add(r.checked_mul(head_dim)?))
        .ok_or_else(overflow)?;
    let groups_per_block = block_elems / pattern.m_group();
    let nnz_per_block = groups_per_block * pattern.n_keep();
    let words_per_block = groups_per_block.div_ceil(GroupMetadata::GROUPS_PER_WORD);
    let nnz_total = nnz_per_block.checked_mul(sparse_count).ok_or_else(overflow)?;
    let words_total = words_per_block.checked_mul(sparse_count).ok_or_else(overflow)?;

    let to_f32 = |bytes: &[u8], field: &'static str, start: usize| -> Result<Vec<f32>, ContainerError> {
        halves(bytes)
            .enumerate()
            .map(|(i, h)| {
                let v = f16::from_bits(h);
                if v.is_finite() {
                    Ok(v.to_f32())
                } else {
                    Err(invalid(field, start + 2 * i, "non-finite element"))
                }
            })
            .collect()
    };

    let dense_at = r.pos + 8;
    let dense = to_f32(r.section("dense pool", dense_elems)?, "dense pool", dense_at)?;
    let nnz_at = r.pos + 8;
    let nnz = to_f32(r.section("nnz pool", nnz_total)?, "nnz pool", nnz_at)?;
    let words: Vec<u16> = halves(r.section("meta pool", words_total)?).collect();
    if r.pos != buf.len() {
        return Err(ContainerError::TrailingBytes {
            offset: r.pos,
            trailing: buf.len() - r.pos,
        }
        .into());
    }

    let mut dense_pool = Vec::with_capacity(dense_count);
    let mut cursor = 0;
    for rows in dense_rows {
        let n = rows * head_dim;
        dense_pool.push(Tensor2D::new(rows, head_dim, dense[cursor..cursor + n].to_vec())?);
        cursor += n;
    }
    let (nnz_rows, nnz_cols) = match axis {
        GroupingAxis::HeadDim => (block_size, head_dim / pattern.m_group() * pattern.n_keep()),
        GroupingAxis::Sequence => (head_dim, block_size / pattern.m_group() * pattern.n_keep()),
    };
    let nnz_pool = nnz
        .chunks_exact(nnz_per_block.max(1))
        .take(sparse_count)
        .map(|c| Tensor2D::new(nnz_rows, nnz_cols, c.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    let meta_pool = words
        .chunks_exact(words_per_block.max(1))
        .take(sparse_count)
        .map(|w| GroupMetadata::from_words(w.to_vec(), groups_per_block))
        .collect::<Result<Vec<_>>>()?;
    for (slot, meta) in meta_pool.iter().enumerate() {
        for g in 0..groups_per_block {
            meta.codes(g).map_err(|e| Error::Metadata {
                group: g,
                reason: format!("sparse slot {slot}: {e}"),
            })?;
        }
    }

    CompressedCache::from_parts(
        axis, seq_len, head_dim, block_size, pattern, dense_pool, nnz_pool, meta_pool, index,
    )
}
