//! Hierarchical N:M sparsity for attention KV caches.
//!
//! A cache is cut into token blocks. Each block is either kept dense or
//! pruned to 2:4 sparsity (keys along channels, values along tokens), and the
//! compressed cache stores the two kinds in separate pools behind a block
//! index map. The attention engine consumes that layout directly.
//!
//! ```
//! use hierasparse::{compress, prune_cache, decompress, SparsityConfig, Tensor2D};
//!
//! let k = Tensor2D::from_fn(128, 16, |r, c| ((r * 16 + c) % 7) as f32 - 3.0);
//! let cfg = SparsityConfig::unprotected(1.0, 1.0, 64);
//! let (mk, _) = prune_cache(&k, &k, &cfg).unwrap();
//! let ck = compress(&k, &mk, &cfg).unwrap();
//! assert_eq!(ck.sparse_count(), 2);
//! assert_eq!(decompress(&ck).unwrap(), mk.element.apply(&k).unwrap());
//! ```

pub mod attention;
pub mod compressor;
pub mod container;
pub mod cost;
pub mod error;
pub mod nm;
pub mod pipeline;
pub mod pruner;
pub mod tensor;

pub use attention::{
    decode_attention, dense_attention_oracle, flop_and_byte_count, prefill_attention, AttentionWorkload, KvSource,
    Phase, TileConfig, WorkCount,
};
pub use compressor::{
    baseline_bytes, compress, decompress, fused_magnitude_compress, measure_size, BlockRef, CompressedCache,
    SizeBreakdown,
};
pub use cost::{compression_ratio, decode_speedup, prefill_speedup, CostParams, CostReport};
pub use error::{ContainerError, Error, Result};
pub use nm::{pack_metadata, unpack_metadata, ElementMask, GroupMetadata, GroupingAxis, NmPattern};
pub use pipeline::{run_pipeline, RunConfig, RunReport};
pub use pruner::{further_prune, prune_cache, select_blocks, BlockMask, HierarchicalMask, SparsityConfig};
pub use tensor::Tensor2D;
