//! Stream transports: duplex inference streams and simplex sample streams,
//! each over shared memory, sockets, or in-process (inline).
//!
//! Endpoints are single-owner: one client handle per actor, one server
//! handle per policy worker, one producer handle per posting worker, one
//! consumer handle per trainer. The only cross-context state is the shared
//! region (or socket), governed by the ordering protocols in [`shm`].

pub mod framing;
pub mod inference;
pub mod inline;
pub mod sample;
pub mod shm;
pub mod socket;

use thiserror::Error;

pub use inference::{InferenceClient, InferenceServer};
pub use sample::{PostOutcome, SampleConsumer, SampleProducer};
pub use shm::QueueCounters;

use crate::model::wire::WireError;

#[derive(Debug, Error)]
pub enum StreamError {
    /// A request is already outstanding on this client slot.
    #[error("slot busy: request already outstanding for client {0}")]
    SlotBusy(u64),
    /// Response targets a request this server never flushed.
    #[error("unknown request: client {client_id} request {request_id}")]
    UnknownRequest { client_id: u64, request_id: u64 },
    #[error("queue closed")]
    QueueClosed,
    #[error("transport unavailable: {0}")]
    TransportUnavailable(String),
    #[error(transparent)]
    Malformed(#[from] WireError),
    #[error("i/o: {0}")]
    Io(String),
}

impl From<std::io::Error> for StreamError {
    fn from(e: std::io::Error) -> Self {
        StreamError::Io(e.to_string())
    }
}

/// Roles an endpoint can take on a stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamRole {
    /// Inference client (actor side).
    Client,
    /// Inference server (policy worker side).
    Server,
    /// Sample producer (actor side).
    Producer,
    /// Sample consumer (trainer side).
    Consumer,
}

/// How long openers wait for the server side of a transport to appear.
pub const OPEN_TIMEOUT: std::time::Duration = std::time::Duration::from_secs(15);
