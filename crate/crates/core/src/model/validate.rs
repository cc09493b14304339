//! Config validation and plan construction.
//!
//! `validate` either returns every violation it can find or a
//! [`ValidatedPlan`]: the fully resolved wiring of the experiment. The plan
//! assigns every worker a process slot, every stream a set of server-side
//! endpoints, every (actor, ring instance, agent) a client id and a slot on
//! one server, and every actor a producer ring on one consumer. Workers
//! receive only their own slice of the plan at configure time.

use std::collections::{BTreeMap, BTreeSet};

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs;
use crate::model::config::{
    AgentSpec, AlgorithmConfig, DropPolicy, EnvConfig, ExperimentConfig, ParamMap,
    SchedulerConfig, StopCondition, StreamKind, Transport,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConfigErrorKind {
    UnknownStream,
    KindMismatch,
    DuplicateName,
    UnmatchedAgentIndex,
    AmbiguousAgentIndex,
    InvalidValue,
}

/// One violation, with a path into the config ("actors[0]", "streams[2]", ...).
#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("{kind:?} at {path}: {message}")]
pub struct ConfigError {
    pub kind: ConfigErrorKind,
    pub path: String,
    pub message: String,
}

impl ConfigError {
    fn new(kind: ConfigErrorKind, path: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            kind,
            path: path.into(),
            message: message.into(),
        }
    }
}

/// Kind tag for planned workers.
pub const KIND_ACTOR: &str = "actor";
pub const KIND_POLICY: &str = "policy";
pub const KIND_TRAINER: &str = "trainer";

/// Resolved network architecture for one named policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub obs_dim: usize,
    pub action_count: usize,
    pub hidden: Vec<usize>,
}

/// A stream with its endpoint fan-out resolved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannedStream {
    pub name: String,
    pub kind: StreamKind,
    pub transport: Transport,
    pub capacity: usize,
    pub drop_policy: DropPolicy,
    /// Policy served in-process when the transport is inline.
    pub inline_policy: Option<String>,
    /// Parameter refresh cadence for inline engines.
    pub pull_interval_ms: u64,
    /// Server-side endpoint count: policy workers (inference) or consumers
    /// (sample). Zero for inline streams and sink streams nobody consumes.
    pub servers: u32,
    /// Inference: client slot count on each server endpoint.
    pub slots_per_server: Vec<u32>,
    /// Sample: producer ring count on each consumer endpoint.
    pub producers_per_consumer: Vec<u32>,
    /// Upper bound on one encoded message, for shared-memory sizing.
    pub payload_capacity: u32,
}

/// One (ring instance, agent) inference client owned by an actor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientAssignment {
    pub instance: u32,
    pub agent: u32,
    pub client_id: u64,
    pub agent_id: String,
    pub inference_stream: String,
    pub inference_server: u32,
    pub slot: u32,
    pub sample_stream: String,
    pub policy_name: String,
    pub deterministic_action: bool,
}

/// One producer ring an actor owns on a sample stream consumer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProducerAssignment {
    pub stream: String,
    /// Consumer endpoint index; None for sink streams with no consumer.
    pub consumer: Option<u32>,
    pub ring: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActorSlice {
    pub env: EnvConfig,
    pub ring_size: u32,
    pub chunk_length: u32,
    pub frame_skip: u32,
    pub clients: Vec<ClientAssignment>,
    pub producers: Vec<ProducerAssignment>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySlice {
    pub stream: String,
    pub server_index: u32,
    pub policy: String,
    pub slot_count: u32,
    pub max_batch_size: u32,
    pub max_wait_us: u64,
    pub pull_interval_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerSlice {
    pub policy: String,
    pub sample_stream: String,
    pub consumer_index: u32,
    pub producer_rings: u32,
    pub batch_size: u32,
    pub prefetch: bool,
    pub publish_every: u64,
    pub buffer_capacity: u32,
    pub algorithm: AlgorithmConfig,
    pub group_rank: u32,
    pub group_size: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CustomSlice {
    pub kind: String,
    pub params: ParamMap,
    /// (stream, consumer index, ring count) for each consumed stream.
    pub consumes: Vec<(String, u32, u32)>,
    pub produces: Vec<ProducerAssignment>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum WorkerSlice {
    Actor(ActorSlice),
    Policy(PolicySlice),
    Trainer(TrainerSlice),
    Custom(CustomSlice),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannedWorker {
    pub kind: String,
    pub index: u32,
    /// Process slot assigned by the scheduler model.
    pub slot: u32,
    pub slice: WorkerSlice,
}

impl PlannedWorker {
    /// Stable identifier used in region names, metrics, and logs.
    pub fn ident(&self) -> String {
        format!("{}:{}", self.kind, self.index)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidatedPlan {
    pub experiment: String,
    pub seed: u64,
    pub streams: Vec<PlannedStream>,
    pub workers: Vec<PlannedWorker>,
    pub models: BTreeMap<String, ModelSpec>,
    /// Trainer worker indices per policy, in group-rank order.
    pub trainer_groups: BTreeMap<String, Vec<u32>>,
    pub param_service_bind: String,
    pub snapshot_every: u64,
    pub stop: StopCondition,
    pub scheduler: SchedulerConfig,
}

impl ValidatedPlan {
    pub fn stream(&self, name: &str) -> Option<&PlannedStream> {
        self.streams.iter().find(|s| s.name == name)
    }

    pub fn worker_count(&self) -> usize {
        self.workers.len()
    }
}

/// Match a set of agent specs against an agent index; the index must match
/// exactly one spec (full-match over the decimal string).
pub fn route_agent(agent_index: usize, specs: &[(Regex, &AgentSpec)]) -> Result<usize, ConfigErrorKind> {
    let text = agent_index.to_string();
    let mut found = None;
    for (i, (re, _)) in specs.iter().enumerate() {
        if re.is_match(&text) {
            if found.is_some() {
                return Err(ConfigErrorKind::AmbiguousAgentIndex);
            }
            found = Some(i);
        }
    }
    found.ok_or(ConfigErrorKind::UnmatchedAgentIndex)
}

fn full_match_regex(pattern: &str) -> Result<Regex, regex::Error> {
    Regex::new(&format!("^(?:{pattern})$"))
}

/// Upper bound on an encoded inference request/response with `obs_dim`
/// observation entries and generous identifier headroom.
fn inference_payload_capacity(obs_dim: usize) -> u32 {
    (160 + 8 * obs_dim) as u32
}

/// Upper bound on an encoded trajectory of `chunk` steps of `obs_dim` floats.
fn trajectory_payload_capacity(obs_dim: usize, chunk: usize) -> u32 {
    (256 + chunk * (64 + 8 * obs_dim)) as u32
}

pub fn validate(cfg: &ExperimentConfig) -> Result<ValidatedPlan, Vec<ConfigError>> {
    let mut errors = Vec::new();

    if cfg.name.is_empty() || !cfg.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
    {
        errors.push(ConfigError::new(
            ConfigErrorKind::InvalidValue,
            "name",
            "experiment name must be non-empty and [A-Za-z0-9_-]",
        ));
    }

    // Stream table; duplicate names are fatal for everything downstream.
    let mut stream_idx: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, s) in cfg.streams.iter().enumerate() {
        if stream_idx.insert(s.name.as_str(), i).is_some() {
            errors.push(ConfigError::new(
                ConfigErrorKind::DuplicateName,
                format!("streams[{i}]"),
                format!("stream `{}` defined more than once", s.name),
            ));
        }
        match s.kind {
            StreamKind::Inference => {
                if s.transport == Transport::Inline && s.policy.is_none() {
                    errors.push(ConfigError::new(
                        ConfigErrorKind::InvalidValue,
                        format!("streams[{i}]"),
                        "inline inference stream needs a `policy`",
                    ));
                }
                if s.transport != Transport::Inline && s.policy.is_some() {
                    errors.push(ConfigError::new(
                        ConfigErrorKind::InvalidValue,
                        format!("streams[{i}]"),
                        "`policy` is only meaningful on inline streams",
                    ));
                }
            }
            StreamKind::Sample => {
                if s.policy.is_some() {
                    errors.push(ConfigError::new(
                        ConfigErrorKind::InvalidValue,
                        format!("streams[{i}]"),
                        "sample streams do not take a `policy`",
                    ));
                }
                if s.capacity == 0 {
                    errors.push(ConfigError::new(
                        ConfigErrorKind::InvalidValue,
                        format!("streams[{i}]"),
                        "sample stream capacity must be positive",
                    ));
                }
            }
        }
    }

    let lookup = |name: &str, path: String, errors: &mut Vec<ConfigError>| -> Option<usize> {
        match stream_idx.get(name) {
            Some(&i) => Some(i),
            None => {
                errors.push(ConfigError::new(
                    ConfigErrorKind::UnknownStream,
                    path,
                    format!("stream `{name}` is not defined"),
                ));
                None
            }
        }
    };

    let expect_kind = |idx: usize, want: StreamKind, path: String, errors: &mut Vec<ConfigError>| {
        let s = &cfg.streams[idx];
        if s.kind != want {
            errors.push(ConfigError::new(
                ConfigErrorKind::KindMismatch,
                path,
                format!(
                    "stream `{}` has kind {:?}, expected {:?}",
                    s.name, s.kind, want
                ),
            ));
        }
    };

    // Policy workers: group per stream, check kinds, count servers.
    // stream name -> (policy name, list of worker configs expanded by count)
    let mut servers_per_stream: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, p) in cfg.policies.iter().enumerate() {
        let path = format!("policies[{i}]");
        if p.count == 0 {
            errors.push(ConfigError::new(
                ConfigErrorKind::InvalidValue,
                path.clone(),
                "count must be >= 1",
            ));
        }
        if let Some(idx) = lookup(&p.inference_stream, path.clone(), &mut errors) {
            expect_kind(idx, StreamKind::Inference, path.clone(), &mut errors);
            let s = &cfg.streams[idx];
            if s.transport == Transport::Inline {
                errors.push(ConfigError::new(
                    ConfigErrorKind::InvalidValue,
                    path.clone(),
                    format!("stream `{}` is inline; it cannot have policy workers", s.name),
                ));
            }
            servers_per_stream.entry(s.name.as_str()).or_default().push(i);
        }
    }
    // One policy name per inference stream.
    for (stream, worker_ids) in &servers_per_stream {
        let names: BTreeSet<&str> = worker_ids
            .iter()
            .map(|&i| cfg.policies[i].policy.as_str())
            .collect();
        if names.len() > 1 {
            errors.push(ConfigError::new(
                ConfigErrorKind::InvalidValue,
                format!("policies (stream `{stream}`)"),
                format!("stream served by multiple policies: {names:?}"),
            ));
        }
    }

    // The policy each inference stream serves (worker-backed or inline).
    let mut stream_policy: BTreeMap<&str, String> = BTreeMap::new();
    for s in &cfg.streams {
        if s.kind != StreamKind::Inference {
            continue;
        }
        if let Some(p) = &s.policy {
            stream_policy.insert(s.name.as_str(), p.clone());
        } else if let Some(ids) = servers_per_stream.get(s.name.as_str()) {
            if let Some(&first) = ids.first() {
                stream_policy.insert(s.name.as_str(), cfg.policies[first].policy.clone());
            }
        }
    }

    // Trainers: check streams, group by policy.
    for (i, t) in cfg.trainers.iter().enumerate() {
        let path = format!("trainers[{i}]");
        if t.count == 0 || t.batch_size == 0 {
            errors.push(ConfigError::new(
                ConfigErrorKind::InvalidValue,
                path.clone(),
                "count and batch_size must be >= 1",
            ));
        }
        if let Some(idx) = lookup(&t.sample_stream, path.clone(), &mut errors) {
            expect_kind(idx, StreamKind::Sample, path, &mut errors);
        }
    }

    // Custom workers: streams must exist and be sample streams.
    for (i, w) in cfg.custom_workers.iter().enumerate() {
        for (j, name) in w.consume_streams.iter().enumerate() {
            let path = format!("custom_workers[{i}].consume_streams[{j}]");
            if let Some(idx) = lookup(name, path.clone(), &mut errors) {
                expect_kind(idx, StreamKind::Sample, path, &mut errors);
            }
        }
        for (j, name) in w.produce_streams.iter().enumerate() {
            let path = format!("custom_workers[{i}].produce_streams[{j}]");
            if let Some(idx) = lookup(name, path.clone(), &mut errors) {
                expect_kind(idx, StreamKind::Sample, path, &mut errors);
            }
        }
    }

    // Actors: env resolution, agent routing, stream references.
    struct ActorResolution {
        env_spec: envs::EnvironmentSpec,
        // per agent index: (agent spec position, inference stream name, sample stream name)
        routes: Vec<(usize, String, String)>,
    }
    let mut actor_resolutions: Vec<Option<ActorResolution>> = Vec::new();

    for (i, a) in cfg.actors.iter().enumerate() {
        let path = format!("actors[{i}]");
        if a.count == 0 || a.ring_size == 0 || a.chunk_length == 0 {
            errors.push(ConfigError::new(
                ConfigErrorKind::InvalidValue,
                path.clone(),
                "count, ring_size, and chunk_length must be >= 1",
            ));
        }
        for (j, name) in a.inference_streams.iter().enumerate() {
            if let Some(idx) = lookup(name, path.clone(), &mut errors) {
                expect_kind(
                    idx,
                    StreamKind::Inference,
                    format!("{path}.inference_streams[{j}]"),
                    &mut errors,
                );
            }
        }
        for (j, name) in a.sample_streams.iter().enumerate() {
            if let Some(idx) = lookup(name, path.clone(), &mut errors) {
                expect_kind(
                    idx,
                    StreamKind::Sample,
                    format!("{path}.sample_streams[{j}]"),
                    &mut errors,
                );
            }
        }

        let env_spec = match envs::resolve_spec(&a.env) {
            Ok(s) => s,
            Err(e) => {
                errors.push(ConfigError::new(
                    ConfigErrorKind::InvalidValue,
                    path.clone(),
                    e.to_string(),
                ));
                actor_resolutions.push(None);
                continue;
            }
        };

        // Compile agent patterns.
        let mut compiled: Vec<(Regex, &AgentSpec)> = Vec::new();
        let mut pattern_ok = true;
        for (j, spec) in a.agent_specs.iter().enumerate() {
            match full_match_regex(&spec.index_pattern) {
                Ok(re) => compiled.push((re, spec)),
                Err(e) => {
                    pattern_ok = false;
                    errors.push(ConfigError::new(
                        ConfigErrorKind::InvalidValue,
                        format!("{path}.agent_specs[{j}]"),
                        format!("bad index pattern: {e}"),
                    ));
                }
            }
            if spec.inference_stream_idx >= a.inference_streams.len() {
                pattern_ok = false;
                errors.push(ConfigError::new(
                    ConfigErrorKind::InvalidValue,
                    format!("{path}.agent_specs[{j}]"),
                    "inference_stream_idx out of range",
                ));
            }
            if spec.sample_stream_idx >= a.sample_streams.len() {
                pattern_ok = false;
                errors.push(ConfigError::new(
                    ConfigErrorKind::InvalidValue,
                    format!("{path}.agent_specs[{j}]"),
                    "sample_stream_idx out of range",
                ));
            }
        }
        if !pattern_ok {
            actor_resolutions.push(None);
            continue;
        }

        let mut routes = Vec::new();
        let mut routed_ok = true;
        for agent in 0..env_spec.agent_count {
            match route_agent(agent, &compiled) {
                Ok(spec_pos) => {
                    let spec = &a.agent_specs[spec_pos];
                    routes.push((
                        spec_pos,
                        a.inference_streams[spec.inference_stream_idx].clone(),
                        a.sample_streams[spec.sample_stream_idx].clone(),
                    ));
                }
                Err(kind) => {
                    routed_ok = false;
                    errors.push(ConfigError::new(
                        kind,
                        path.clone(),
                        format!("agent index {agent} of `{}`", env_spec.name),
                    ));
                }
            }
        }
        actor_resolutions.push(if routed_ok {
            Some(ActorResolution { env_spec, routes })
        } else {
            None
        });
    }

    // Model resolution: every inference stream with routed agents must serve
    // a policy, and all agents routed to one policy must share dimensions.
    let mut models: BTreeMap<String, ModelSpec> = BTreeMap::new();
    for (i, _a) in cfg.actors.iter().enumerate() {
        let Some(res) = &actor_resolutions[i] else {
            continue;
        };
        for (agent, (_, inf_stream, _)) in res.routes.iter().enumerate() {
            let Some(policy) = stream_policy.get(inf_stream.as_str()) else {
                errors.push(ConfigError::new(
                    ConfigErrorKind::InvalidValue,
                    format!("actors[{i}]"),
                    format!(
                        "stream `{inf_stream}` (agent {agent}) has no policy worker and is not inline"
                    ),
                ));
                continue;
            };
            let hidden = cfg
                .models
                .get(policy)
                .map(|m| m.hidden.clone())
                .unwrap_or_else(|| vec![64, 64]);
            let spec = ModelSpec {
                obs_dim: res.env_spec.observation_dim,
                action_count: res.env_spec.action_count,
                hidden,
            };
            match models.get(policy) {
                None => {
                    models.insert(policy.clone(), spec);
                }
                Some(existing) if *existing != spec => {
                    errors.push(ConfigError::new(
                        ConfigErrorKind::InvalidValue,
                        format!("actors[{i}]"),
                        format!(
                            "policy `{policy}` sees conflicting dimensions ({}x{} vs {}x{})",
                            existing.obs_dim, existing.action_count, spec.obs_dim, spec.action_count
                        ),
                    ));
                }
                _ => {}
            }
        }
    }

    // Trainers must train a policy whose shape is known.
    for (i, t) in cfg.trainers.iter().enumerate() {
        if !models.contains_key(&t.policy) {
            errors.push(ConfigError::new(
                ConfigErrorKind::InvalidValue,
                format!("trainers[{i}]"),
                format!(
                    "policy `{}` is never served by any inference stream; its shape is unknown",
                    t.policy
                ),
            ));
        }
    }

    if !errors.is_empty() {
        return Err(errors);
    }

    // ---- Assignment phase (config is structurally sound from here). ----

    // Expand replicated worker entries.
    struct FlatActor<'a> {
        cfg_index: usize,
        actor: &'a crate::model::config::ActorConfig,
    }
    let mut flat_actors = Vec::new();
    for (i, a) in cfg.actors.iter().enumerate() {
        for _ in 0..a.count {
            flat_actors.push(FlatActor {
                cfg_index: i,
                actor: a,
            });
        }
    }
    let mut flat_policies = Vec::new();
    for p in &cfg.policies {
        for _ in 0..p.count {
            flat_policies.push(p);
        }
    }
    let mut flat_trainers = Vec::new();
    for t in &cfg.trainers {
        for _ in 0..t.count {
            flat_trainers.push(t);
        }
    }
    let mut flat_custom = Vec::new();
    for w in &cfg.custom_workers {
        for _ in 0..w.count {
            flat_custom.push(w);
        }
    }

    // Server counts per inference stream (expanded policy workers, in order).
    let mut inf_servers: BTreeMap<&str, u32> = BTreeMap::new();
    for p in &flat_policies {
        *inf_servers.entry(p.inference_stream.as_str()).or_insert(0) += 1;
    }
    // Consumer counts per sample stream: trainers first, then custom readers.
    let mut spl_consumers: BTreeMap<&str, u32> = BTreeMap::new();
    for t in &flat_trainers {
        *spl_consumers.entry(t.sample_stream.as_str()).or_insert(0) += 1;
    }
    for w in &flat_custom {
        for name in &w.consume_streams {
            *spl_consumers.entry(name.as_str()).or_insert(0) += 1;
        }
    }

    // Round-robin cursors for slot / ring assignment.
    let mut inf_rr: BTreeMap<&str, u32> = BTreeMap::new(); // next server per stream
    let mut inf_slots: BTreeMap<(String, u32), u32> = BTreeMap::new(); // slots used per (stream, server)
    let mut spl_rr: BTreeMap<&str, u32> = BTreeMap::new();
    let mut spl_rings: BTreeMap<(String, u32), u32> = BTreeMap::new();

    // Payload capacity per stream (max over users).
    let mut payload_cap: BTreeMap<&str, u32> = BTreeMap::new();

    let mut workers: Vec<PlannedWorker> = Vec::new();

    for (actor_index, fa) in flat_actors.iter().enumerate() {
        let res = actor_resolutions[fa.cfg_index].as_ref().unwrap();
        let a = fa.actor;
        let mut clients = Vec::new();

        // Producer ring per (actor, referenced sample stream).
        let mut producers: Vec<ProducerAssignment> = Vec::new();
        let mut producer_of: BTreeMap<&str, usize> = BTreeMap::new();
        for name in &a.sample_streams {
            if producer_of.contains_key(name.as_str()) {
                continue;
            }
            let consumers = spl_consumers.get(name.as_str()).copied().unwrap_or(0);
            let assignment = if consumers == 0 {
                ProducerAssignment {
                    stream: name.clone(),
                    consumer: None,
                    ring: 0,
                }
            } else {
                let rr = spl_rr.entry(name.as_str()).or_insert(0);
                let consumer = *rr % consumers;
                *rr += 1;
                let ring = spl_rings
                    .entry((name.clone(), consumer))
                    .or_insert(0);
                let r = *ring;
                *ring += 1;
                ProducerAssignment {
                    stream: name.clone(),
                    consumer: Some(consumer),
                    ring: r,
                }
            };
            producer_of.insert(name.as_str(), producers.len());
            producers.push(assignment);

            let cap = trajectory_payload_capacity(res.env_spec.observation_dim, a.chunk_length);
            let e = payload_cap.entry(name.as_str()).or_insert(0);
            *e = (*e).max(cap);
        }

        for instance in 0..a.ring_size {
            for agent in 0..res.env_spec.agent_count {
                let (spec_pos, inf_stream, spl_stream) = &res.routes[agent];
                let spec = &a.agent_specs[*spec_pos];
                let client_id =
                    (actor_index as u64) << 24 | (instance as u64) << 12 | agent as u64;
                let servers = inf_servers.get(inf_stream.as_str()).copied().unwrap_or(0);
                let (server, slot) = if servers == 0 {
                    // Inline stream: slots are per actor, assigned densely.
                    let key = (format!("{}#a{actor_index}", inf_stream), 0u32);
                    let slot = inf_slots.entry(key).or_insert(0);
                    let s = *slot;
                    *slot += 1;
                    (0, s)
                } else {
                    let rr = inf_rr.entry(inf_stream.as_str()).or_insert(0);
                    let server = *rr % servers;
                    *rr += 1;
                    let slot = inf_slots.entry((inf_stream.clone(), server)).or_insert(0);
                    let s = *slot;
                    *slot += 1;
                    (server, s)
                };
                let cap = inference_payload_capacity(res.env_spec.observation_dim);
                let e = payload_cap.entry(inf_stream.as_str()).or_insert(0);
                *e = (*e).max(cap);

                clients.push(ClientAssignment {
                    instance: instance as u32,
                    agent: agent as u32,
                    client_id,
                    agent_id: format!("{actor_index}:{instance}:{agent}"),
                    inference_stream: inf_stream.clone(),
                    inference_server: server,
                    slot,
                    sample_stream: spl_stream.clone(),
                    policy_name: stream_policy
                        .get(inf_stream.as_str())
                        .cloned()
                        .unwrap_or_default(),
                    deterministic_action: spec.deterministic_action,
                });
            }
        }

        workers.push(PlannedWorker {
            kind: KIND_ACTOR.into(),
            index: actor_index as u32,
            slot: 0,
            slice: WorkerSlice::Actor(ActorSlice {
                env: a.env.clone(),
                ring_size: a.ring_size as u32,
                chunk_length: a.chunk_length as u32,
                frame_skip: res.env_spec.frame_skip,
                clients,
                producers,
            }),
        });
    }

    // Policy workers: server index within their stream, in declaration order.
    let mut server_cursor: BTreeMap<&str, u32> = BTreeMap::new();
    for (policy_index, p) in flat_policies.iter().enumerate() {
        let cursor = server_cursor.entry(p.inference_stream.as_str()).or_insert(0);
        let server_index = *cursor;
        *cursor += 1;
        let slot_count = inf_slots
            .get(&(p.inference_stream.clone(), server_index))
            .copied()
            .unwrap_or(0);
        workers.push(PlannedWorker {
            kind: KIND_POLICY.into(),
            index: policy_index as u32,
            slot: 0,
            slice: WorkerSlice::Policy(PolicySlice {
                stream: p.inference_stream.clone(),
                server_index,
                policy: p.policy.clone(),
                slot_count,
                max_batch_size: p.max_batch_size as u32,
                max_wait_us: p.max_wait_us,
                pull_interval_ms: p.pull_interval_ms,
            }),
        });
    }

    // Trainers: consumer index per stream + group ranks per policy.
    let mut trainer_groups: BTreeMap<String, Vec<u32>> = BTreeMap::new();
    let mut consumer_cursor: BTreeMap<&str, u32> = BTreeMap::new();
    for (trainer_index, t) in flat_trainers.iter().enumerate() {
        let cursor = consumer_cursor.entry(t.sample_stream.as_str()).or_insert(0);
        let consumer_index = *cursor;
        *cursor += 1;
        trainer_groups
            .entry(t.policy.clone())
            .or_default()
            .push(trainer_index as u32);
        let producer_rings = spl_rings
            .get(&(t.sample_stream.clone(), consumer_index))
            .copied()
            .unwrap_or(0);
        workers.push(PlannedWorker {
            kind: KIND_TRAINER.into(),
            index: trainer_index as u32,
            slot: 0,
            slice: WorkerSlice::Trainer(TrainerSlice {
                policy: t.policy.clone(),
                sample_stream: t.sample_stream.clone(),
                consumer_index,
                producer_rings,
                batch_size: t.batch_size as u32,
                prefetch: t.prefetch,
                publish_every: t.publish_every,
                buffer_capacity: if t.buffer_capacity == 0 {
                    (4 * t.batch_size) as u32
                } else {
                    t.buffer_capacity as u32
                },
                algorithm: t.algorithm.clone(),
                group_rank: 0, // filled below
                group_size: 0,
            }),
        });
    }
    // Fill group ranks/sizes.
    for (_, members) in trainer_groups.iter() {
        for (rank, &widx) in members.iter().enumerate() {
            for w in workers.iter_mut() {
                if w.kind == KIND_TRAINER && w.index == widx {
                    if let WorkerSlice::Trainer(ts) = &mut w.slice {
                        ts.group_rank = rank as u32;
                        ts.group_size = members.len() as u32;
                    }
                }
            }
        }
    }

    // Custom workers.
    for (custom_index, w) in flat_custom.iter().enumerate() {
        let mut consumes = Vec::new();
        for name in &w.consume_streams {
            let cursor = consumer_cursor.entry(name.as_str()).or_insert(0);
            let consumer_index = *cursor;
            *cursor += 1;
            let rings = spl_rings
                .get(&(name.clone(), consumer_index))
                .copied()
                .unwrap_or(0);
            consumes.push((name.clone(), consumer_index, rings));
        }
        let mut produces = Vec::new();
        for name in &w.produce_streams {
            let consumers = spl_consumers.get(name.as_str()).copied().unwrap_or(0);
            let assignment = if consumers == 0 {
                ProducerAssignment {
                    stream: name.clone(),
                    consumer: None,
                    ring: 0,
                }
            } else {
                let rr = spl_rr.entry(name.as_str()).or_insert(0);
                let consumer = *rr % consumers;
                *rr += 1;
                let ring = spl_rings.entry((name.clone(), consumer)).or_insert(0);
                let r = *ring;
                *ring += 1;
                ProducerAssignment {
                    stream: name.clone(),
                    consumer: Some(consumer),
                    ring: r,
                }
            };
            produces.push(assignment);
        }
        workers.push(PlannedWorker {
            kind: w.kind.clone(),
            index: custom_index as u32,
            slot: 0,
            slice: WorkerSlice::Custom(CustomSlice {
                kind: w.kind.clone(),
                params: w.params.clone(),
                consumes,
                produces,
            }),
        });
    }

    // Custom producers may have fed rings to consumers planned earlier; a
    // custom worker feeding a trainer is resolved on a second pass where the
    // trainer's ring count is refreshed.
    for w in workers.iter_mut() {
        if let WorkerSlice::Trainer(ts) = &mut w.slice {
            ts.producer_rings = spl_rings
                .get(&(ts.sample_stream.clone(), ts.consumer_index))
                .copied()
                .unwrap_or(0);
        }
        if let WorkerSlice::Custom(cs) = &mut w.slice {
            for (name, consumer_index, rings) in cs.consumes.iter_mut() {
                *rings = spl_rings
                    .get(&(name.clone(), *consumer_index))
                    .copied()
                    .unwrap_or(0);
            }
        }
    }

    // Pass-through workers re-post payloads they consume, so a produce
    // stream must admit anything its worker's consume streams admit.
    // Iterate to cover chains of custom workers.
    for _ in 0..=flat_custom.len() {
        for w in &flat_custom {
            let incoming = w
                .consume_streams
                .iter()
                .filter_map(|s| payload_cap.get(s.as_str()).copied())
                .max()
                .unwrap_or(0);
            for name in &w.produce_streams {
                if let Some((key, _)) = stream_idx.get_key_value(name.as_str()) {
                    let e = payload_cap.entry(key).or_insert(0);
                    *e = (*e).max(incoming);
                }
            }
        }
    }

    // Process slots: one per worker.
    for (slot, w) in workers.iter_mut().enumerate() {
        w.slot = slot as u32;
    }

    // Planned streams with fan-out.
    let mut planned_streams = Vec::new();
    for s in &cfg.streams {
        let servers = match s.kind {
            StreamKind::Inference => inf_servers.get(s.name.as_str()).copied().unwrap_or(0),
            StreamKind::Sample => spl_consumers.get(s.name.as_str()).copied().unwrap_or(0),
        };
        let slots_per_server = (0..servers)
            .map(|k| {
                inf_slots
                    .get(&(s.name.clone(), k))
                    .copied()
                    .unwrap_or(0)
            })
            .collect();
        let producers_per_consumer = (0..servers)
            .map(|k| {
                spl_rings
                    .get(&(s.name.clone(), k))
                    .copied()
                    .unwrap_or(0)
            })
            .collect();
        planned_streams.push(PlannedStream {
            name: s.name.clone(),
            kind: s.kind,
            transport: s.transport,
            capacity: s.capacity,
            drop_policy: s.drop_policy,
            inline_policy: s.policy.clone(),
            pull_interval_ms: s.pull_interval_ms,
            servers,
            slots_per_server,
            producers_per_consumer,
            payload_capacity: payload_cap.get(s.name.as_str()).copied().unwrap_or(256),
        });
    }

    Ok(ValidatedPlan {
        experiment: cfg.name.clone(),
        seed: cfg.seed,
        streams: planned_streams,
        workers,
        models,
        trainer_groups,
        param_service_bind: cfg.parameter_service.bind.clone(),
        snapshot_every: cfg.parameter_service.snapshot_every,
        stop: cfg.stop.clone(),
        scheduler: cfg.scheduler.clone(),
    })
}
