//! The worker abstraction: lifecycle states, the poll contract, and the
//! address book that wires endpoints together at start time.
//!
//! Life of a worker: it is spawned knowing only its identity, configured
//! with its slice of the validated plan (binding its server-side endpoints),
//! started with the address book of everyone's bound endpoints (connecting
//! its client sides), then polled in a loop until told to exit.

use std::collections::BTreeMap;
use std::net::SocketAddr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::EnvError;
use crate::learning::AlgoError;
use crate::model::types::PollResult;
use crate::params::ServiceError;
use crate::streams::StreamError;

#[derive(Debug, Error)]
pub enum WorkerError {
    #[error(transparent)]
    Stream(#[from] StreamError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error(transparent)]
    Algo(#[from] AlgoError),
    #[error("gradient reduce timed out: {0}")]
    ReduceTimeout(String),
    #[error("configuration: {0}")]
    Config(String),
}

/// Lifecycle states; transitions outside the legal set are protocol errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LifecycleState {
    Spawned,
    Configured,
    Running,
    Paused,
    Exited,
    Failed,
}

impl LifecycleState {
    /// Legal edges: SPAWNED->CONFIGURED->RUNNING<->PAUSED, RUNNING/PAUSED/
    /// CONFIGURED->EXITED, and any->FAILED.
    pub fn can_transition(self, to: LifecycleState) -> bool {
        use LifecycleState::*;
        matches!(
            (self, to),
            (Spawned, Configured)
                | (Configured, Running)
                | (Running, Paused)
                | (Paused, Running)
                | (Running, Exited)
                | (Paused, Exited)
                | (Configured, Exited)
                | (_, Failed)
        )
    }
}

/// Resolved socket addresses of every server-side endpoint, keyed by a
/// stable string. Shared-memory endpoints need no entry (region names are
/// derived from the plan); inline endpoints resolve through the in-process
/// registry.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AddressBook {
    pub entries: BTreeMap<String, SocketAddr>,
    pub param_service: Option<SocketAddr>,
}

impl AddressBook {
    pub fn inference_key(stream: &str, server: u32) -> String {
        format!("inf.{stream}.srv{server}")
    }

    pub fn sample_key(stream: &str, consumer: u32) -> String {
        format!("spl.{stream}.cons{consumer}")
    }

    pub fn group_key(policy: &str, rank: u32) -> String {
        format!("grp.{policy}.{rank}")
    }

    pub fn lookup(&self, key: &str) -> Result<SocketAddr, WorkerError> {
        self.entries
            .get(key)
            .copied()
            .ok_or_else(|| WorkerError::Config(format!("no address for endpoint `{key}`")))
    }
}

/// Endpoint addresses a worker bound during configure, to be merged into
/// the experiment's address book.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct BoundEndpoints {
    pub entries: Vec<(String, SocketAddr)>,
}

/// A point-in-time dump of a worker's counters and gauges, plus any episode
/// returns completed since the last snapshot.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MetricsSnapshot {
    pub counters: BTreeMap<String, u64>,
    pub gauges: BTreeMap<String, f64>,
    pub episode_returns: Vec<f64>,
}

/// The polled worker interface every kind implements.
pub trait Worker: Send {
    fn kind(&self) -> String;
    fn index(&self) -> u32;

    /// Connect client-side endpoints once every worker has configured.
    fn connect(&mut self, book: &AddressBook) -> Result<(), WorkerError>;

    /// One unit of work; idle results let the loop back off.
    fn poll(&mut self) -> Result<PollResult, WorkerError>;

    /// Drain a metrics snapshot (cheap; called on a timer).
    fn metrics(&mut self) -> MetricsSnapshot;

    /// One-shot structured dump written at exit (digests, traces, logs).
    fn final_report(&mut self) -> serde_json::Value {
        serde_json::Value::Null
    }

    /// Release transports and flush state before exit.
    fn shutdown(&mut self);
}
