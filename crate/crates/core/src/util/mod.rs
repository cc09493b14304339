//! Small shared utilities: deterministic RNG, digests, timing helpers.

pub mod digest;
pub mod rng;
pub mod timing;
