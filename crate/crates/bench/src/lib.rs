//! Criterion benchmarks for `pdmp-core`; see `benches/core.rs`.
