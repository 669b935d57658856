//! Criterion benchmarks for the detector and the proposal baseline; see `benches/`.
