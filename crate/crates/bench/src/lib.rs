//! Criterion benchmarks for cellqa live in `benches/`.
