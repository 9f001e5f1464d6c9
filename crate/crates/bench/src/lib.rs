//! Criterion benchmarks for the occrebench pipeline; see `benches/`.
