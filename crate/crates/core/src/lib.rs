//! A desk-scale distributed reinforcement-learning runtime built around
//! decoupled workers and streams.
//!
//! Actor workers host environment rings and generate trajectories, policy
//! workers serve batched inference, trainer workers run data-parallel PPO
//! updates and publish versioned parameters. Workers communicate through two
//! transport abstractions — duplex inference streams and simplex sample
//! streams — each available over shared memory, sockets, or in-process
//! (inline), and a controller orchestrates the whole experiment lifecycle.

pub mod actor;
pub mod control;
pub mod envs;
pub mod harness;
pub mod learning;
pub mod model;
pub mod params;
pub mod policy;
pub mod streams;
pub mod trainer;
pub mod util;

pub use model::{
    ActionId, InferenceRequest, InferenceResponse, ObservationVector, ParameterBlob, PollResult,
    SampleBatch, Trajectory, TransitionStep,
};
