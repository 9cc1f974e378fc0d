//! Benchmarks for the tracker hot paths live in `benches/`.
