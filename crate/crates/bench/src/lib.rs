//! Criterion benchmarks for the estimators live in `benches/`.
