//! Criterion benchmarks for the gaitmeta engine; see `benches/`.
