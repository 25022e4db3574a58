//! Criterion benchmarks for `loramud`; see `benches/`.
