//! Criterion benchmarks for the `hierasparse` crate; see `benches/`.
