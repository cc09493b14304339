//! The versioned parameter store and its socket service.
//!
//! Trainers push strictly increasing versions per policy name; policy
//! workers check the head version cheaply and pull the blob only when it
//! changed. The store keeps the latest blob per policy (history depth 1) and
//! swaps it atomically, so a pull never observes a torn write.

mod client;
mod server;

pub use client::ParamClient;
pub use server::{ParamServer, ParamServerHandle};

use std::collections::HashMap;
use std::sync::Mutex;

use thiserror::Error;

use crate::model::types::ParameterBlob;
use crate::util::timing::unix_millis;

#[derive(Debug, Error, PartialEq)]
pub enum ServiceError {
    #[error("version conflict: pushed {pushed}, current {current}")]
    VersionConflict { pushed: u64, current: u64 },
    #[error("unknown policy `{0}`")]
    UnknownPolicy(String),
    #[error("service unreachable: {0}")]
    Unreachable(String),
    #[error("protocol error: {0}")]
    Protocol(String),
}

/// One recorded publish event, for freshness accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PublishEvent {
    pub version: u64,
    pub unix_ms: u64,
}

struct Entry {
    blob: ParameterBlob,
    log: Vec<PublishEvent>,
}

/// In-memory store; the service wraps it with a socket front end.
#[derive(Default)]
pub struct ParameterStore {
    entries: Mutex<HashMap<String, Entry>>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Accept a blob whose version is exactly current+1 (or 1 for a new
    /// policy). Returns the accepted version.
    pub fn push(&self, blob: ParameterBlob) -> Result<u64, ServiceError> {
        let mut entries = self.entries.lock().unwrap();
        match entries.get_mut(&blob.policy_name) {
            None => {
                if blob.version != 1 {
                    return Err(ServiceError::VersionConflict {
                        pushed: blob.version,
                        current: 0,
                    });
                }
                let version = blob.version;
                let log = vec![PublishEvent {
                    version,
                    unix_ms: unix_millis(),
                }];
                entries.insert(blob.policy_name.clone(), Entry { blob, log });
                Ok(version)
            }
            Some(entry) => {
                if blob.version != entry.blob.version + 1 {
                    return Err(ServiceError::VersionConflict {
                        pushed: blob.version,
                        current: entry.blob.version,
                    });
                }
                entry.blob = blob;
                if entry.log.len() < 1_000_000 {
                    entry.log.push(PublishEvent {
                        version: entry.blob.version,
                        unix_ms: unix_millis(),
                    });
                }
                Ok(entry.blob.version)
            }
        }
    }

    /// Latest version per policy; None when the policy is absent.
    pub fn head(&self, policy_name: &str) -> Option<u64> {
        self.entries
            .lock()
            .unwrap()
            .get(policy_name)
            .map(|e| e.blob.version)
    }

    /// The head blob if it is newer than `have_version`.
    pub fn pull(
        &self,
        policy_name: &str,
        have_version: u64,
    ) -> Result<Option<ParameterBlob>, ServiceError> {
        let entries = self.entries.lock().unwrap();
        match entries.get(policy_name) {
            None => Err(ServiceError::UnknownPolicy(policy_name.to_string())),
            Some(e) if e.blob.version > have_version => Ok(Some(e.blob.clone())),
            Some(_) => Ok(None),
        }
    }

    pub fn publish_log(&self, policy_name: &str) -> Vec<PublishEvent> {
        self.entries
            .lock()
            .unwrap()
            .get(policy_name)
            .map(|e| e.log.clone())
            .unwrap_or_default()
    }

    pub fn policy_names(&self) -> Vec<String> {
        self.entries.lock().unwrap().keys().cloned().collect()
    }
}

/// Wire opcodes for the service protocol (documented in docs/wire-format.md).
pub(crate) mod op {
    pub const PUSH: u8 = 0x10;
    pub const HEAD: u8 = 0x11;
    pub const PULL: u8 = 0x12;
    pub const LOG: u8 = 0x13;

    pub const OK_PUSH: u8 = 0x20;
    pub const OK_HEAD: u8 = 0x21;
    pub const OK_PULL_BLOB: u8 = 0x22;
    pub const OK_PULL_UPTODATE: u8 = 0x23;
    pub const OK_LOG: u8 = 0x24;
    pub const ERR_VERSION_CONFLICT: u8 = 0x2e;
    pub const ERR_UNKNOWN_POLICY: u8 = 0x2f;
    pub const ERR_OTHER: u8 = 0x30;
}
