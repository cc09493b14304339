//! Domain types, the binary wire format, experiment configuration, and
//! config validation. Everything else in the crate builds on this module.

pub mod config;
pub mod types;
pub mod validate;
pub mod wire;

pub use types::{
    ActionId, InferenceRequest, InferenceResponse, ObservationVector, ParameterBlob, PollResult,
    SampleBatch, Trajectory, TransitionStep,
};
pub use wire::{WireDecode, WireEncode, WireError};
