//! Criterion benchmarks for the per-record hot paths; see `benches/`.
