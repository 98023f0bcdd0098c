//! Criterion benchmarks for the search pipeline live in `benches/`.
