//! N:M semi-structured sparsity primitives.
//!
//! Metadata layout (2:4): every group of four source elements keeps two of
//! them and records their in-group positions as two 2-bit codes, lowest kept
//! position in the low bits. Four groups (eight codes, sixteen source
//! elements) share one `u16` word; group `g` occupies bits `4*(g % 4)..+4` of
//! word `g / 4`. Unused trailing slots of the last word are zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor2D;

/// Number of kept elements per group and group width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NmPattern {
    n_keep: usize,
    m_group: usize,
}

impl NmPattern {
    pub const TWO_FOUR: NmPattern = NmPattern { n_keep: 2, m_group: 4 };

    pub fn new(n_keep: usize, m_group: usize) -> Result<Self> {
        if n_keep == 0 || n_keep >= m_group {
            return Err(Error::InvalidPattern {
                n_keep,
                m_group,
                reason: "require 0 < n_keep < m_group",
            });
        }
        Ok(Self { n_keep, m_group })
    }

    #[inline]
    pub fn n_keep(&self) -> usize {
        self.n_keep
    }

    #[inline]
    pub fn m_group(&self) -> usize {
        self.m_group
    }

    pub fn is_two_four(&self) -> bool {
        *self == Self::TWO_FOUR
    }

    /// Errors unless the pattern is one the metadata codec can encode.
    pub fn require_codec(&self) -> Result<()> {
        if self.is_two_four() {
            Ok(())
        } else {
            Err(Error::UnsupportedPattern {
                n_keep: self.n_keep,
                m_group: self.m_group,
            })
        }
    }
}

impl Default for NmPattern {
    fn default() -> Self {
        Self::TWO_FOUR
    }
}

const CODE_BITS: usize = 2;
const CODES_PER_WORD: usize = 16 / CODE_BITS;
const GROUPS_PER_WORD: usize = CODES_PER_WORD / 2;

/// Packed 2-bit position codes for a run of 2:4 groups.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GroupMetadata {
    words: Vec<u16>,
    groups: usize,
}

impl GroupMetadata {
    pub const GROUPS_PER_WORD: usize = GROUPS_PER_WORD;

    /// Wraps raw words. `groups` is the number of valid groups they carry.
    pub fn from_words(words: Vec<u16>, groups: usize) -> Result<Self> {
        let needed = groups.div_ceil(GROUPS_PER_WORD);
        if words.len() != needed {
            return Err(Error::Shape(format!(
                "{groups} groups need {needed} metadata words, got {}",
                words.len()
            )));
        }
        Ok(Self { words, groups })
    }

    pub fn words(&self) -> &[u16] {
        &self.words
    }

    pub fn group_count(&self) -> usize {
        self.groups
    }

    /// The two kept positions of group `g`, validated to be strictly increasing.
    #[inline]
    pub fn codes(&self, g: usize) -> Result<[u8; 2]> {
        if g >= self.groups {
            return Err(Error::Metadata {
                group: g,
                reason: format!("only {} groups present", self.groups),
            });
        }
        let nibble = (self.words[g / GROUPS_PER_WORD] >> (4 * (g % GROUPS_PER_WORD))) & 0xF;
        let lo = (nibble & 0b11) as u8;
        let hi = (nibble >> 2) as u8;
        if lo >= hi {
            return Err(Error::Metadata {
                group: g,
                reason: format!("codes {lo},{hi} are not strictly increasing"),
            });
        }
        Ok([lo, hi])
    }
}

/// Incremental 2:4 metadata packer used by the compressor hot path.
#[derive(Debug, Default)]
pub(crate) struct MetadataWriter {
    words: Vec<u16>,
    groups: usize,
}

impl MetadataWriter {
    pub(crate) fn with_groups(groups: usize) -> Self {
        Self {
            words: Vec::with_capacity(groups.div_ceil(GROUPS_PER_WORD)),
            groups: 0,
        }
    }

    /// Caller guarantees `lo < hi < 4`.
    #[inline]
    pub(crate) fn push(&mut self, lo: u8, hi: u8) {
        debug_assert!(lo < hi && hi < 4);
        let nibble = u16::from(lo) | (u16::from(hi) << 2);
        let slot = self.groups % GROUPS_PER_WORD;
        if slot == 0 {
            self.words.push(0);
        }
        *self.words.last_mut().unwrap() |= nibble << (4 * slot);
        self.groups += 1;
    }

    pub(crate) fn finish(self) -> GroupMetadata {
        GroupMetadata {
            words: self.words,
            groups: self.groups,
        }
    }
}

/// Packs per-group kept positions into 16-bit metadata words.
pub fn pack_metadata<G: AsRef<[u8]>>(groups: &[G], pattern: NmPattern) -> Result<GroupMetadata> {
    pattern.require_codec()?;
    let mut writer = MetadataWriter::with_groups(groups.len());
    for (g, kept) in groups.iter().enumerate() {
        let kept = kept.as_ref();
        if kept.len() != pattern.n_keep() {
            return Err(Error::Metadata {
                group: g,
                reason: format!("expected {} kept positions, got {}", pattern.n_keep(), kept.len()),
            });
        }
        if let Some(&bad) = kept.iter().find(|&&p| usize::from(p) >= pattern.m_group()) {
            return Err(Error::Metadata {
                group: g,
                reason: format!("position {bad} outside group of {}", pattern.m_group()),
            });
        }
        if kept[0] >= kept[1] {
            return Err(Error::Metadata {
                group: g,
                reason: format!("positions {:?} are not strictly increasing", kept),
            });
        }
        writer.push(kept[0], kept[1]);
    }
    Ok(writer.finish())
}

/// Inverse of [`pack_metadata`] for the first `group_count` groups.
pub fn unpack_metadata(meta: &GroupMetadata, group_count: usize) -> Result<Vec<Vec<u8>>> {
    if group_count > meta.group_count() {
        return Err(Error::Shape(format!(
            "requested {group_count} groups from metadata holding {}",
            meta.group_count()
        )));
    }
    (0..group_count).map(|g| meta.codes(g).map(|c| c.to_vec())).collect()
}

/// Scatters compressed values back to their coded positions. Groups run
/// along each row, row-major; the result is `nnz.rows() × full_cols` with
/// zeros at pruned positions.
pub fn expand_sparse(nnz: &Tensor2D, meta: &GroupMetadata, pattern: NmPattern, full_cols: usize) -> Result<Tensor2D> {
    pattern.require_codec()?;
    let m = pattern.m_group();
    let n = pattern.n_keep();
    if !full_cols.is_multiple_of(m) || nnz.cols() * m != full_cols * n {
        return Err(Error::Shape(format!(
            "{} compressed columns cannot expand to {full_cols}",
            nnz.cols()
        )));
    }
    let groups_per_row = full_cols / m;
    let total = nnz.rows() * groups_per_row;
    if meta.group_count() < total {
        return Err(Error::Shape(format!(
            "metadata covers {} groups, tensor needs {total}",
            meta.group_count()
        )));
    }
    let mut out = vec![0.0f32; nnz.rows() * full_cols];
    for r in 0..nnz.rows() {
        let src = nnz.row(r);
        let dst = &mut out[r * full_cols..(r + 1) * full_cols];
        for g in 0..groups_per_row {
            let codes = meta.codes(r * groups_per_row + g)?;
            for (k, &code) in codes.iter().enumerate() {
                dst[g * m + usize::from(code)] = src[g * n + k];
            }
        }
    }
    Ok(Tensor2D::from_parts(nnz.rows(), full_cols, out))
}

/// Axis along which the N:M groups of a cache run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupingAxis {
    /// Groups of consecutive channels within one token (the key cache,
    /// reduced over the head dimension by `K × Qᵀ`).
    HeadDim,
    /// Groups of consecutive tokens within one channel of a block (the value
    /// cache, reduced over the sequence by `Vᵀ × Pᵀ`).
    Sequence,
}

/// One boolean per cache element; `true` means kept.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ElementMask {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl ElementMask {
    pub fn new(rows: usize, cols: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{rows}x{cols} mask needs {} bits, got {}",
                rows * cols,
                bits.len()
            )));
        }
        Ok(Self { rows, cols, bits })
    }

    pub fn all_kept(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            bits: vec![true; rows * cols],
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.cols + c]
    }

    #[inline]
    pub(crate) fn set(&mut self, r: usize, c: usize, kept: bool) {
        self.bits[r * self.cols + c] = kept;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn kept_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// `x ⊙ m`.
    pub fn apply(&self, x: &Tensor2D) -> Result<Tensor2D> {
        if x.shape() != self.shape() {
            return Err(Error::Shape(format!(
                "mask {:?} applied to tensor {:?}",
                self.shape(),
                x.shape()
            )));
        }
        let data = x
            .data()
            .iter()
            .zip(&self.bits)
            .map(|(&v, &k)| if k { v } else { 0.0 })
            .collect();
        Ok(Tensor2D::from_parts(self.rows, self.cols, data))
    }

    /// Rows `start..end` as a new mask.
    pub fn slice_rows(&self, start: usize, end: usize) -> ElementMask {
        Self {
            rows: end - start,
            cols: self.cols,
            bits: self.bits[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Checks the exactly-`n_keep`-per-group invariant over rows
    /// `start..end`, grouping along `axis`. Returns the first offending
    /// group's flat element index on failure.
    pub fn check_cardinality(
        &self,
        start: usize,
        end: usize,
        axis: GroupingAxis,
        pattern: NmPattern,
    ) -> std::result::Result<(), usize> {
        let m = pattern.m_group();
        match axis {
            GroupingAxis::HeadDim => {
                for r in start..end {
                    for g in (0..self.cols).step_by(m) {
                        let kept = (g..g + m).filter(|&c| self.get(r, c)).count();
                        if kept != pattern.n_keep() {
                            return Err(r * self.cols + g);
                        }
                    }
                }
            }
            GroupingAxis::Sequence => {
                for c in 0..self.cols {
                    for g in (start..end).step_by(m) {
                        let kept = (g..g + m).filter(|&r| self.get(r, c)).count();
                        if kept != pattern.n_keep() {
                            return Err(g * self.cols + c);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
