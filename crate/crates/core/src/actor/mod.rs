//! The actor worker: hosts a ring of environment instances, routes per-agent
//! observations and actions over the configured streams, and accumulates
//! trajectories.
//!
//! Each poll services exactly one ring position: if that instance's agents
//! all have actions ready it steps the environment, otherwise the cursor
//! moves on — that is what hides inference latency behind simulation of the
//! other instances. Inline inference streams are served in-process between
//! the post and poll phases with the same engine a policy worker runs.

pub mod accumulator;

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::time::Duration;

use crate::control::worker::{AddressBook, MetricsSnapshot, Worker, WorkerError};
use crate::envs::{make_env, Environment};
use crate::learning::MlpPolicy;
use crate::model::config::Transport;
use crate::model::types::{
    ActionId, ObservationVector, PollResult, TransitionStep,
};
use crate::model::validate::{ActorSlice, ClientAssignment, ModelSpec, PlannedStream};
use crate::model::wire::WireEncode;
use crate::params::ParamClient;
use crate::policy::PolicyEngine;
use crate::streams::inference::ClientBinding;
use crate::streams::inline::InlineTable;
use crate::streams::shm::region_name;
use crate::streams::{
    InferenceClient, InferenceServer, PostOutcome, SampleProducer,
};
use crate::util::digest::fnv1a;
use crate::util::rng::mix_key;

use accumulator::{Emitted, TrajectoryAccumulator};

/// Everything an actor needs to configure itself.
pub struct ActorBuild<'a> {
    pub experiment: &'a str,
    pub seed: u64,
    pub index: u32,
    pub slice: &'a ActorSlice,
    pub streams: &'a [PlannedStream],
    pub models: &'a BTreeMap<String, ModelSpec>,
    pub param_service: Option<SocketAddr>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum InstanceState {
    NeedsReset,
    Awaiting,
}

struct RingInstance {
    env: Box<dyn Environment>,
    state: InstanceState,
    episode: u64,
    /// Agents that still owe us a response this step.
    pending: Vec<u32>,
    /// Collected responses for the in-flight step, indexed by agent.
    actions: Vec<Option<ActionId>>,
    annotations: Vec<Option<(f64, f64, u64)>>, // log_prob, value_pred, version
    last_obs: Vec<Option<ObservationVector>>,
    return_acc: f64,
}

/// Where one agent's requests go.
enum InferenceRoute {
    Remote { endpoint: usize },
    Inline,
}

struct InlineLane {
    table: std::sync::Arc<InlineTable>,
    server: InferenceServer,
    engine: PolicyEngine,
}

pub struct ActorWorker {
    experiment: String,
    seed: u64,
    index: u32,
    slice: ActorSlice,
    stream_info: BTreeMap<String, PlannedStream>,

    instances: Vec<RingInstance>,
    cursor: usize,

    /// (instance, agent) -> assignment (route, ids, policy).
    assignments: BTreeMap<(u32, u32), ClientAssignment>,
    /// (stream, server) -> index into `remote_endpoints` (filled at connect).
    remote_index: BTreeMap<(String, u32), usize>,
    remote_endpoints: Vec<InferenceClient>,
    /// Pre-connect bindings for each remote endpoint.
    remote_bindings: BTreeMap<(String, u32), Vec<ClientBinding>>,
    inline_lanes: Vec<InlineLane>,
    inline_clients: BTreeMap<String, InferenceClient>,
    routes: BTreeMap<(u32, u32), InferenceRoute>,

    /// stream name -> producer position (filled at connect).
    producer_index: BTreeMap<String, usize>,
    producers: Vec<SampleProducer>,

    accumulators: BTreeMap<(u32, u32), TrajectoryAccumulator>,
    pending_bootstrap: BTreeMap<(u32, u32), crate::model::types::Trajectory>,

    // Counters.
    agent_steps: u64,
    env_frames: u64,
    trajectories_posted: u64,
    frames_posted: u64,
    post_drops: u64,
    episodes: u64,
    completed_returns: Vec<f64>,
    /// Per-agent chain of digests over posted trajectory bytes: entry k is
    /// the rolling digest after the (k+1)-th trajectory, so equal prefixes
    /// across runs mean byte-identical trajectory streams.
    traj_digests: BTreeMap<String, Vec<u64>>,
    connected: bool,
}

impl ActorWorker {
    pub fn configure(b: ActorBuild<'_>) -> Result<Self, WorkerError> {
        let mut instances = Vec::with_capacity(b.slice.ring_size as usize);
        let probe = make_env(&b.slice.env)?;
        let agent_count = probe.spec().agent_count;
        drop(probe);
        for _ in 0..b.slice.ring_size {
            instances.push(RingInstance {
                env: make_env(&b.slice.env)?,
                state: InstanceState::NeedsReset,
                episode: 0,
                pending: Vec::new(),
                actions: vec![None; agent_count],
                annotations: vec![None; agent_count],
                last_obs: vec![None; agent_count],
                return_acc: 0.0,
            });
        }

        let stream_info: BTreeMap<String, PlannedStream> = b
            .streams
            .iter()
            .map(|s| (s.name.clone(), s.clone()))
            .collect();

        let mut assignments = BTreeMap::new();
        let mut remote_bindings: BTreeMap<(String, u32), Vec<ClientBinding>> = BTreeMap::new();
        let mut inline_slots: BTreeMap<String, Vec<ClientBinding>> = BTreeMap::new();
        let mut accumulators = BTreeMap::new();
        for c in &b.slice.clients {
            let key = (c.instance, c.agent);
            let info = stream_info.get(&c.inference_stream).ok_or_else(|| {
                WorkerError::Config(format!("stream `{}` missing from plan", c.inference_stream))
            })?;
            let binding = ClientBinding {
                client_id: c.client_id,
                slot: c.slot,
            };
            if info.transport == Transport::Inline {
                inline_slots
                    .entry(c.inference_stream.clone())
                    .or_default()
                    .push(binding);
            } else {
                remote_bindings
                    .entry((c.inference_stream.clone(), c.inference_server))
                    .or_default()
                    .push(binding);
            }
            accumulators.insert(
                key,
                TrajectoryAccumulator::new(
                    c.agent_id.clone(),
                    c.policy_name.clone(),
                    b.slice.chunk_length as usize,
                    b.slice.frame_skip,
                ),
            );
            assignments.insert(key, c.clone());
        }

        // Inline lanes are self-contained: build table, server, engine now.
        let mut inline_index = BTreeMap::new();
        let mut inline_lanes = Vec::new();
        let mut inline_clients = BTreeMap::new();
        for (stream, bindings) in inline_slots {
            let info = &stream_info[&stream];
            let policy_name = info.inline_policy.clone().ok_or_else(|| {
                WorkerError::Config(format!("inline stream `{stream}` lacks a policy"))
            })?;
            let model = b.models.get(&policy_name).ok_or_else(|| {
                WorkerError::Config(format!("no model spec for policy `{policy_name}`"))
            })?;
            // Slot indices for inline tables are dense per actor; remap.
            let dense: Vec<ClientBinding> = bindings
                .iter()
                .enumerate()
                .map(|(i, b)| ClientBinding {
                    client_id: b.client_id,
                    slot: i as u32,
                })
                .collect();
            let table = InlineTable::new(dense.len());
            let server = InferenceServer::inline(table.clone());
            let param_client = match b.param_service {
                Some(addr) => Some(
                    ParamClient::connect(addr).map_err(WorkerError::Service)?,
                ),
                None => None,
            };
            let mut engine = PolicyEngine::new(
                MlpPolicy::init(model, mix_key(&[b.seed, fnv1a(policy_name.as_bytes())])),
                policy_name,
                b.seed,
                param_client,
                Duration::from_millis(info.pull_interval_ms),
            );
            engine.force_pull().map_err(WorkerError::Service)?;
            inline_clients.insert(stream.clone(), InferenceClient::inline(table.clone(), &dense));
            inline_index.insert(stream.clone(), inline_lanes.len());
            inline_lanes.push(InlineLane {
                table,
                server,
                engine,
            });
        }

        let _ = &inline_index;
        // Routes per (instance, agent).
        let mut routes = BTreeMap::new();
        for (key, c) in &assignments {
            let info = &stream_info[&c.inference_stream];
            let route = if info.transport == Transport::Inline {
                InferenceRoute::Inline
            } else {
                InferenceRoute::Remote { endpoint: usize::MAX } // resolved at connect
            };
            routes.insert(*key, route);
        }

        Ok(Self {
            experiment: b.experiment.to_string(),
            seed: b.seed,
            index: b.index,
            slice: b.slice.clone(),
            stream_info,
            instances,
            cursor: 0,
            assignments,
            remote_index: BTreeMap::new(),
            remote_endpoints: Vec::new(),
            remote_bindings,
            inline_lanes,
            inline_clients,
            routes,
            producer_index: BTreeMap::new(),
            producers: Vec::new(),
            accumulators,
            pending_bootstrap: BTreeMap::new(),
            agent_steps: 0,
            env_frames: 0,
            trajectories_posted: 0,
            frames_posted: 0,
            post_drops: 0,
            episodes: 0,
            completed_returns: Vec::new(),
            traj_digests: BTreeMap::new(),
            connected: false,
        })
    }

    fn client_for(&mut self, key: (u32, u32)) -> &mut InferenceClient {
        let c = &self.assignments[&key];
        match &self.routes[&key] {
            InferenceRoute::Inline => self
                .inline_clients
                .get_mut(&c.inference_stream)
                .expect("inline client"),
            InferenceRoute::Remote { endpoint } => &mut self.remote_endpoints[*endpoint],
        }
    }

    fn post_request(&mut self, key: (u32, u32), obs: ObservationVector) -> Result<(), WorkerError> {
        let c = self.assignments[&key].clone();
        let client = self.client_for(key);
        client
            .post(c.client_id, &c.agent_id, obs, None, c.deterministic_action)
            .map_err(WorkerError::Stream)?;
        Ok(())
    }

    fn post_trajectory(
        &mut self,
        key: (u32, u32),
        traj: crate::model::types::Trajectory,
    ) -> Result<(), WorkerError> {
        let stream = self.assignments[&key].sample_stream.clone();
        self.frames_posted += traj.env_frames;
        let bytes = traj.encode();
        let chain = self.traj_digests.entry(traj.agent_id.clone()).or_default();
        if chain.len() < 20_000 {
            let prev = chain.last().copied().unwrap_or(0xcbf2_9ce4_8422_2325);
            chain.push(crate::util::digest::fnv1a_with(prev, &bytes));
        }
        let idx = *self
            .producer_index
            .get(&stream)
            .unwrap_or_else(|| panic!("producer for `{stream}` not connected"));
        match self.producers[idx].post_bytes(bytes)? {
            PostOutcome::Posted => {}
            PostOutcome::Dropped => self.post_drops += 1,
        }
        self.trajectories_posted += 1;
        Ok(())
    }

    /// Service every inline lane once: batch whatever requests the ring has
    /// posted and answer them synchronously.
    fn service_inline(&mut self) -> Result<(), WorkerError> {
        for lane in &mut self.inline_lanes {
            lane.engine.maybe_pull();
            let max_batch = lane.table.slot_count().max(1);
            lane.engine
                .serve_once(&mut lane.server, max_batch, Duration::ZERO)
                .map_err(WorkerError::Stream)?;
        }
        Ok(())
    }

    /// Per-agent digest chains of posted trajectory byte streams, for
    /// equivalence checks across runs.
    pub fn trajectory_digests(&self) -> &BTreeMap<String, Vec<u64>> {
        &self.traj_digests
    }
}

impl Worker for ActorWorker {
    fn kind(&self) -> String {
        "actor".into()
    }

    fn index(&self) -> u32 {
        self.index
    }

    fn connect(&mut self, book: &AddressBook) -> Result<(), WorkerError> {
        // Remote inference endpoints.
        let bindings = std::mem::take(&mut self.remote_bindings);
        for ((stream, server), binds) in bindings {
            let info = &self.stream_info[&stream];
            let client = match info.transport {
                Transport::SharedMemory => {
                    let region = region_name(&self.experiment, &stream, "srv", server);
                    InferenceClient::open_shm(&region, &binds)?
                }
                Transport::Socket => {
                    let addr = book.lookup(&AddressBook::inference_key(&stream, server))?;
                    InferenceClient::open_socket(addr, &binds)?
                }
                Transport::Inline => unreachable!("inline endpoints are built at configure"),
            };
            self.remote_index
                .insert((stream.clone(), server), self.remote_endpoints.len());
            self.remote_endpoints.push(client);
        }
        // Resolve remote routes now that endpoints exist.
        for (key, c) in &self.assignments {
            if let InferenceRoute::Remote { endpoint } = self.routes.get_mut(key).unwrap() {
                *endpoint = self.remote_index[&(c.inference_stream.clone(), c.inference_server)];
            }
        }
        // Sample producers.
        for p in &self.slice.producers.clone() {
            let info = &self.stream_info[&p.stream];
            let producer = match p.consumer {
                None => SampleProducer::sink(),
                Some(consumer) => match info.transport {
                    Transport::SharedMemory => {
                        let region = region_name(&self.experiment, &p.stream, "cons", consumer);
                        SampleProducer::open_shm(
                            &region,
                            p.ring,
                            info.drop_policy == crate::model::config::DropPolicy::Block,
                        )?
                    }
                    Transport::Socket => {
                        let addr = book.lookup(&AddressBook::sample_key(&p.stream, consumer))?;
                        SampleProducer::open_socket(addr)?
                    }
                    Transport::Inline => {
                        let queue = crate::streams::inline::lookup_queue(
                            &self.experiment,
                            &p.stream,
                            consumer,
                            crate::streams::OPEN_TIMEOUT,
                        )?;
                        SampleProducer::inline(queue)
                    }
                },
            };
            self.producer_index
                .insert(p.stream.clone(), self.producers.len());
            self.producers.push(producer);
        }
        self.connected = true;
        Ok(())
    }

    fn poll(&mut self) -> Result<PollResult, WorkerError> {
        assert!(self.connected, "poll before connect");
        let idx = self.cursor;
        self.cursor = (self.cursor + 1) % self.instances.len();

        // Phase 1 on this instance: reset or collect responses.
        let state = self.instances[idx].state;
        match state {
            InstanceState::NeedsReset => {
                let seed = mix_key(&[
                    self.seed,
                    self.index as u64,
                    idx as u64,
                    self.instances[idx].episode,
                ]);
                let result = self.instances[idx].env.reset(seed);
                let mut to_post = Vec::new();
                {
                    let inst = &mut self.instances[idx];
                    inst.pending.clear();
                    inst.return_acc = 0.0;
                    for (agent, entry) in result.agents.iter().enumerate() {
                        inst.actions[agent] = None;
                        inst.annotations[agent] = None;
                        inst.last_obs[agent] = None;
                        if let Some(step) = entry {
                            if !step.done && !step.truncated {
                                inst.pending.push(agent as u32);
                                inst.last_obs[agent] = Some(step.obs.clone());
                                to_post.push((agent as u32, step.obs.clone()));
                            }
                        }
                    }
                    inst.state = InstanceState::Awaiting;
                }
                for (agent, obs) in to_post {
                    self.post_request((idx as u32, agent), obs)?;
                }
                self.service_inline()?;
                Ok(PollResult::idle())
            }
            InstanceState::Awaiting => {
                self.service_inline()?;
                // Collect any responses that have landed.
                let pending = self.instances[idx].pending.clone();
                for agent in &pending {
                    let key = (idx as u32, *agent);
                    if self.instances[idx].actions[*agent as usize].is_some() {
                        continue;
                    }
                    let client_id = self.assignments[&key].client_id;
                    let resp = {
                        let client = self.client_for(key);
                        client.poll(client_id).map_err(WorkerError::Stream)?
                    };
                    if let Some(resp) = resp {
                        // A full chunk waiting for its bootstrap gets the
                        // value estimate of this next state.
                        if let Some(mut t) = self.pending_bootstrap.remove(&key) {
                            t.bootstrap_value = resp.value_pred;
                            self.post_trajectory(key, t)?;
                        }
                        let inst = &mut self.instances[idx];
                        inst.actions[*agent as usize] = Some(resp.action);
                        inst.annotations[*agent as usize] =
                            Some((resp.log_prob, resp.value_pred, resp.policy_version));
                    }
                }

                let ready = {
                    let inst = &self.instances[idx];
                    !inst.pending.is_empty()
                        && inst
                            .pending
                            .iter()
                            .all(|a| inst.actions[*a as usize].is_some())
                };
                if !ready {
                    return Ok(PollResult::idle());
                }

                // Phase 2: step the environment with the collected actions.
                let actions: Vec<Option<ActionId>> = self.instances[idx].actions.clone();
                let result = self.instances[idx].env.step(&actions)?;

                let mut steps_taken = 0u64;
                let mut emitted = 0u64;
                let mut to_post_traj = Vec::new();
                let mut to_post_req = Vec::new();
                {
                    let inst = &mut self.instances[idx];
                    let prev_pending = std::mem::take(&mut inst.pending);
                    for agent in &prev_pending {
                        let a = *agent as usize;
                        let Some(agent_step) = result.agents[a].as_ref() else {
                            continue;
                        };
                        let (log_prob, value_pred, version) =
                            inst.annotations[a].take().expect("annotation for acted agent");
                        let action = inst.actions[a].take().expect("action for acted agent");
                        let obs = inst.last_obs[a].take().expect("observation for acted agent");
                        let step = TransitionStep {
                            obs,
                            action,
                            reward: agent_step.reward,
                            done: agent_step.done,
                            truncated: agent_step.truncated,
                            log_prob_old: log_prob,
                            value_pred,
                            policy_version: version,
                        };
                        if a == 0 {
                            inst.return_acc += agent_step.reward;
                        }
                        steps_taken += 1;
                        let key = (idx as u32, *agent);
                        match self.accumulators.get_mut(&key).unwrap().push(step) {
                            Emitted::None => {}
                            Emitted::Terminal(t) => {
                                emitted += 1;
                                to_post_traj.push((key, t));
                            }
                            Emitted::NeedsBootstrap(t) => {
                                emitted += 1;
                                self.pending_bootstrap.insert(key, t);
                            }
                        }
                    }
                    // Decide what happens next on this instance.
                    if result.episode_over() {
                        inst.state = InstanceState::NeedsReset;
                        inst.episode += 1;
                        self.episodes += 1;
                        self.completed_returns.push(inst.return_acc);
                    } else {
                        for (agent, entry) in result.agents.iter().enumerate() {
                            inst.actions[agent] = None;
                            inst.annotations[agent] = None;
                            if let Some(step) = entry {
                                if !step.done && !step.truncated {
                                    inst.pending.push(agent as u32);
                                    inst.last_obs[agent] = Some(step.obs.clone());
                                    to_post_req.push((agent as u32, step.obs.clone()));
                                }
                            }
                        }
                    }
                }
                self.agent_steps += steps_taken;
                self.env_frames += steps_taken * self.slice.frame_skip as u64;
                for (key, t) in to_post_traj {
                    self.post_trajectory(key, t)?;
                }
                for (agent, obs) in to_post_req {
                    self.post_request((idx as u32, agent), obs)?;
                }
                self.service_inline()?;
                Ok(PollResult {
                    sample_count: steps_taken,
                    batch_count: emitted,
                })
            }
        }
    }

    fn metrics(&mut self) -> MetricsSnapshot {
        let mut m = MetricsSnapshot::default();
        m.counters.insert("agent_steps".into(), self.agent_steps);
        m.counters.insert("env_frames".into(), self.env_frames);
        m.counters
            .insert("trajectories_posted".into(), self.trajectories_posted);
        m.counters.insert("frames_posted".into(), self.frames_posted);
        m.counters.insert("post_drops".into(), self.post_drops);
        m.counters.insert("episodes".into(), self.episodes);
        for lane in &self.inline_lanes {
            *m.counters.entry("inline_served".into()).or_insert(0) +=
                lane.engine.served_requests;
            m.gauges.insert(
                "inline_version".into(),
                lane.engine.policy.version as f64,
            );
        }
        m.episode_returns = std::mem::take(&mut self.completed_returns);
        m
    }

    fn final_report(&mut self) -> serde_json::Value {
        let digests: BTreeMap<String, Vec<String>> = self
            .traj_digests
            .iter()
            .map(|(k, chain)| {
                (
                    k.clone(),
                    chain.iter().map(|d| format!("{d:016x}")).collect(),
                )
            })
            .collect();
        serde_json::json!({ "trajectory_digests": digests })
    }

    fn shutdown(&mut self) {
        self.producers.clear();
        self.remote_endpoints.clear();
    }
}
