use std::ops::Range;

use rayon::prelude::*;

use super::prefill::{blocks_for, stream_on_path, KernelPath};
use super::{AttentionWorkload, Phase, SoftmaxState, SplitPartial, TileConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor2D;

/// Contiguous block ranges for `splits` workers; the split count is clamped
/// to `1..=blocks` so no range is empty.
pub fn split_ranges(blocks: usize, splits: usize) -> Vec<Range<usize>> {
    if blocks == 0 {
        return Vec::new();
    }
    let n = splits.clamp(1, blocks);
    let (base, extra) = (blocks / n, blocks % n);
    let mut start = 0;
    (0..n)
        .map(|i| {
            let len = base + usize::from(i < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

/// Merges split partials with a log-sum-exp rescale.
pub fn combine_splits(partials: &[SplitPartial]) -> Result<Tensor2D> {
    let first = partials
        .first()
        .ok_or_else(|| Error::Config("no split partials to combine".into()))?;
    let (rows, d) = first.output.shape();
    if partials
        .iter()
        .any(|p| p.output.shape() != (rows, d) || p.max.len() != rows || p.sum.len() != rows)
    {
        return Err(Error::Shape("split partials disagree in shape".into()));
    }
    let mut out = Vec::with_capacity(rows * d);
    for r in 0..rows {
        let m = partials.iter().map(|p| p.max[r]).fold(f32::NEG_INFINITY, f32::max);
        let weight = |p: &SplitPartial| {
            if p.max[r] == f32::NEG_INFINITY {
                0.0
            } else {
                (p.max[r] - m).exp()
            }
        };
        let w0 = weight(first);
        let mut l = first.sum[r] * w0;
        let mut acc: Vec<f32> = first.output.row(r).iter().map(|&o| o * w0).collect();
        for p in &partials[1..] {
            let ws = weight(p);
            l += p.sum[r] * ws;
            for (a, &o) in acc.iter_mut().zip(p.output.row(r)) {
                *a += o * ws;
            }
        }
        out.extend(acc.into_iter().map(|a| a / l));
    }
    Ok(Tensor2D::from_parts(rows, d, out))
}

/// One decode step: every query head of the group (one row each) is stacked
/// into a single tile, the cache blocks are split into contiguous ranges
/// processed independently, and the partials are merged.
pub fn decode_attention(w: &AttentionWorkload, splits: usize) -> Result<Vec<Tensor2D>> {
    if w.phase != Phase::Decode {
        return Err(Error::Config("decode_attention needs a decode-phase workload".into()));
    }
    let tiles = TileConfig::for_workload(w.gqa_group(), w);
    let (keys, values) = blocks_for(w, tiles)?;
    let path = KernelPath::select(&keys, &values);
    let d = w.head_dim();
    let g = w.gqa_group();
    let stacked: Vec<&Tensor2D> = w.queries.iter().collect();
    let q_t = Tensor2D::vstack(&stacked)?.transpose();
    let visible = |_: usize| usize::MAX;

    let partials: Vec<SplitPartial> = split_ranges(keys.len(), splits)
        .into_par_iter()
        .map(|range| {
            let mut state = SoftmaxState::new(d, g);
            stream_on_path(
                path,
                &q_t,
                &keys[range.clone()],
                &values[range],
                w.scale,
                &visible,
                &mut state,
            )?;
            Ok(state.into_partial())
        })
        .collect::<Result<_>>()?;

    let merged = combine_splits(&partials)?;
    Ok((0..g).map(|h| merged.slice_rows(h, h + 1)).collect())
}

/// Single pass over all blocks, normalized directly without a combine step.
pub fn decode_attention_unsplit(w: &AttentionWorkload) -> Result<Vec<Tensor2D>> {
    let tiles = TileConfig::for_workload(w.gqa_group(), w);
    let (keys, values) = blocks_for(w, tiles)?;
    let path = KernelPath::select(&keys, &values);
    let stacked: Vec<&Tensor2D> = w.queries.iter().collect();
    let q_t = Tensor2D::vstack(&stacked)?.transpose();
    let mut state = SoftmaxState::new(w.head_dim(), w.gqa_group());
    stream_on_path(path, &q_t, &keys, &values, w.scale, &|_| usize::MAX, &mut state)?;
    let out = state.finish();
    Ok((0..w.gqa_group()).map(|h| out.slice_rows(h, h + 1)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{dense_attention_oracle, KvSource};
    use crate::compressor::compress;
    use crate::pruner::{prune_cache, SparsityConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn workload(seed: u64, g: usize, l: usize, tail: usize) -> AttentionWorkload {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 16;
        let k = Tensor2D::gaussian(l, d, 1.0, &mut rng);
        let v = Tensor2D::gaussian(l, d, 1.0, &mut rng);
        let cfg = SparsityConfig::unprotected(0.5, 0.5, 8);
        let (mk, mv) = prune_cache(&k, &v, &cfg).unwrap();
        let tail_k = (tail > 0).then(|| Tensor2D::gaussian(tail, d, 1.0, &mut rng));
        let tail_v = (tail > 0).then(|| Tensor2D::gaussian(tail, d, 1.0, &mut rng));
        let key = KvSource::Compressed {
            cache: compress(&k, &mk, &cfg).unwrap(),
            tail: tail_k,
        };
        let value = KvSource::Compressed {
            cache: compress(&v, &mv, &cfg).unwrap(),
            tail: tail_v,
        };
        let qs = (0..g).map(|_| Tensor2D::gaussian(1, d, 1.0, &mut rng)).collect();
        AttentionWorkload::new(qs, key, value, true, Phase::Decode).unwrap()
    }

    #[test]
    fn ranges_cover_and_clamp() {
        assert_eq!(split_ranges(5, 2), vec![0..3, 3..5]);
        assert_eq!(split_ranges(3, 8), vec![0..1, 1..2, 2..3]);
        assert_eq!(split_ranges(4, 0), vec![0..4]);
        assert!(split_ranges(0, 3).is_empty());
    }

    #[test]
    fn splits_match_oracle() {
        let w = workload(1, 4, 64, 3);
        let oracle = dense_attention_oracle(&w).unwrap();
        for splits in [1, 2, 5, 100] {
            let got = decode_attention(&w, splits).unwrap();
            for (a, b) in got.iter().zip(&oracle) {
                assert!(a.max_abs_diff(b) < 1e-5);
            }
        }
    }

    #[test]
    fn one_split_is_bitwise_unsplit() {
        let w = workload(2, 2, 48, 0);
        assert_eq!(decode_attention(&w, 1).unwrap(), decode_attention_unsplit(&w).unwrap());
    }

    #[test]
    fn rejects_prefill_phase() {
        let mut w = workload(3, 1, 16, 0);
        w.phase = Phase::Prefill;
        assert!(decode_attention(&w, 2).is_err());
    }

    #[test]
    fn combine_two_halves_by_hand() {
        let a = SplitPartial {
            output: Tensor2D::new(1, 1, vec![2.0]).unwrap(),
            max: vec![0.0],
            sum: vec![1.0],
        };
        let b = SplitPartial {
            output: Tensor2D::new(1, 1, vec![4.0]).unwrap(),
            max: vec![0.0],
            sum: vec![1.0],
        };
        assert_eq!(combine_splits(&[a, b]).unwrap().data(), &[3.0]);
        assert!(combine_splits(&[]).is_err());
    }
}
