//! Criterion benchmarks for the metric and descent kernels; see `benches/`.
