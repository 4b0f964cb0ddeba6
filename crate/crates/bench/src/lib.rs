//! Criterion benchmarks for the attribute-transfer pipeline live in
//! `benches/`; this crate has no library code of its own.
