//! Criterion micro-benchmarks live in `benches/`; this crate has no library
//! surface of its own.
