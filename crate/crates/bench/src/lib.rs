//! Criterion benchmarks for the training hot paths live in `benches/`.
