use serde::Serialize;

use super::AttentionWorkload;

/// Analytic work for one pass of a workload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct WorkCount {
    /// Multiply-adds of both GEMMs, two flops each. Sparse blocks count half.
    pub flops: u64,
    /// Key plus value cache bytes streamed, at 16-bit accounting. Shared by
    /// every query head of the group, so counted once.
    pub bytes_moved: u64,
}

/// Flops and cache traffic of `w`. Only causally visible (query, key) pairs
/// contribute; tile-level skipping is not modelled.
pub fn flop_and_byte_count(w: &AttentionWorkload) -> WorkCount {
    let d = w.head_dim() as u64;
    let n_q = w.queries[0].rows() as u64;
    let kv = w.kv_len() as u64;
    let bc = w.key.block_size().unwrap_or(64);
    let heads = w.gqa_group() as u64;
    // queries visible to key position k: n_q - max(0, k - offset), clamped
    let offset = kv.saturating_sub(n_q);
    let visible = |k: u64| -> u64 {
        if w.causal {
            n_q.saturating_sub(k.saturating_sub(offset))
        } else {
            n_q
        }
    };
    let mut flops = 0u64;
    for (kb, vb) in w.key.blocks(bc).iter().zip(w.value.blocks(bc).iter()) {
        let start = kb.start as u64;
        let pairs: u64 = (start..start + kb.rows as u64).map(visible).sum();
        let full = 2 * pairs * d;
        let half = |sparse: bool| if sparse { full / 2 } else { full };
        flops += half(kb.operand.is_sparse()) + half(vb.operand.is_sparse());
    }
    WorkCount {
        flops: flops * heads,
        bytes_moved: w.key.storage_bytes() + w.value.storage_bytes(),
    }
}
