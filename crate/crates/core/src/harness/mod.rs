//! Measurement harnesses behind the `bench` subcommands: the environment
//! ring law, trainer saturation, prefetch overlap, and data-parallel
//! equivalence.

pub mod prefetch;
pub mod ring;
pub mod saturation;
pub mod spmd;
