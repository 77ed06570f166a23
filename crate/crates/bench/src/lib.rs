//! Criterion benchmarks for the actor runtime; see `benches/`.
