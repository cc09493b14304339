//! The worker-kind registry: the extension seam through which built-in and
//! custom workers are constructed from their plan slice.
//!
//! A factory takes the configure payload and returns the worker plus
//! whatever server endpoints it bound. Custom kinds register once per
//! process before the experiment launches; the controller then treats them
//! exactly like built-ins.

use std::collections::HashMap;
use std::sync::{OnceLock, RwLock};

use thiserror::Error;

use crate::actor::{ActorBuild, ActorWorker};
use crate::model::validate::WorkerSlice;
use crate::policy::{PolicyBuild, PolicyWorker};
use crate::trainer::{TrainerBuild, TrainerWorker};

use super::buffer_worker::BufferWorker;
use super::rpc::ConfigurePayload;
use super::worker::{BoundEndpoints, Worker, WorkerError};

pub type BuildOutput = Result<(Box<dyn Worker>, BoundEndpoints), WorkerError>;
pub type WorkerFactory = fn(&ConfigurePayload) -> BuildOutput;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RegistryError {
    #[error("worker kind `{0}` already registered")]
    DuplicateKind(String),
}

fn registry() -> &'static RwLock<HashMap<String, WorkerFactory>> {
    static REGISTRY: OnceLock<RwLock<HashMap<String, WorkerFactory>>> = OnceLock::new();
    REGISTRY.get_or_init(|| {
        let mut m: HashMap<String, WorkerFactory> = HashMap::new();
        m.insert("actor".into(), build_actor);
        m.insert("policy".into(), build_policy);
        m.insert("trainer".into(), build_trainer);
        m.insert("buffer".into(), BufferWorker::factory);
        RwLock::new(m)
    })
}

/// Register a custom worker kind. Errors if the name is taken.
pub fn register_worker_kind(name: &str, factory: WorkerFactory) -> Result<(), RegistryError> {
    let mut reg = registry().write().unwrap();
    if reg.contains_key(name) {
        return Err(RegistryError::DuplicateKind(name.to_string()));
    }
    reg.insert(name.to_string(), factory);
    Ok(())
}

pub fn known_kinds() -> Vec<String> {
    registry().read().unwrap().keys().cloned().collect()
}

/// Build the worker described by a configure payload.
pub fn build_worker(payload: &ConfigurePayload) -> BuildOutput {
    let kind = payload.worker.kind.clone();
    let factory = {
        let reg = registry().read().unwrap();
        reg.get(&kind).copied()
    };
    match factory {
        Some(f) => f(payload),
        None => Err(WorkerError::Config(format!(
            "unknown worker kind `{kind}` (registered: {:?})",
            known_kinds()
        ))),
    }
}

fn build_actor(p: &ConfigurePayload) -> BuildOutput {
    let WorkerSlice::Actor(slice) = &p.worker.slice else {
        return Err(WorkerError::Config("actor factory got a non-actor slice".into()));
    };
    let worker = ActorWorker::configure(ActorBuild {
        experiment: &p.experiment,
        seed: p.seed,
        index: p.worker.index,
        slice,
        streams: &p.streams,
        models: &p.models,
        param_service: p.param_service,
    })?;
    Ok((Box::new(worker), BoundEndpoints::default()))
}

fn build_policy(p: &ConfigurePayload) -> BuildOutput {
    let WorkerSlice::Policy(slice) = &p.worker.slice else {
        return Err(WorkerError::Config("policy factory got a non-policy slice".into()));
    };
    let (worker, bound) = PolicyWorker::configure(PolicyBuild {
        experiment: &p.experiment,
        seed: p.seed,
        index: p.worker.index,
        slice,
        streams: &p.streams,
        models: &p.models,
        param_service: p.param_service,
    })?;
    Ok((Box::new(worker), bound))
}

fn build_trainer(p: &ConfigurePayload) -> BuildOutput {
    let WorkerSlice::Trainer(slice) = &p.worker.slice else {
        return Err(WorkerError::Config("trainer factory got a non-trainer slice".into()));
    };
    let (worker, bound) = TrainerWorker::configure(TrainerBuild {
        experiment: &p.experiment,
        seed: p.seed,
        index: p.worker.index,
        slice,
        streams: &p.streams,
        models: &p.models,
        param_service: p.param_service,
    })?;
    Ok((Box::new(worker), bound))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_present_and_duplicates_rejected() {
        let kinds = known_kinds();
        for k in ["actor", "policy", "trainer", "buffer"] {
            assert!(kinds.iter().any(|x| x == k), "missing builtin {k}");
        }
        assert_eq!(
            register_worker_kind("actor", |_p| unreachable!()),
            Err(RegistryError::DuplicateKind("actor".into()))
        );
    }
}
