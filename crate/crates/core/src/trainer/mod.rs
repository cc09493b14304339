//! The trainer worker: consumes trajectories, assembles batches, runs
//! gradient steps, averages gradients across the trainer group, applies the
//! optimizer update, and publishes parameter versions.
//!
//! With prefetch enabled, stream receive and batch assembly run on a data
//! lane feeding the two-slot stage; the poll lane takes READY batches and
//! trains. With prefetch off, everything is sequential inside poll. Each
//! trajectory is trained at most once (pure-online): batches remove items
//! from the buffer, and overflow evicts the oldest resident trajectory.

pub mod prefetch;
pub mod reduce;

use std::collections::{BTreeMap, VecDeque};
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use crate::control::worker::{AddressBook, BoundEndpoints, MetricsSnapshot, Worker, WorkerError};
use crate::learning::ppo::moments_to_norm;
use crate::learning::{Adam, MlpPolicy, Optimizer, PpoAlgorithm, Sgd};
use crate::model::config::{AlgorithmConfig, DropPolicy, Transport};
use crate::model::types::{PollResult, SampleBatch, Trajectory};
use crate::model::validate::{ModelSpec, PlannedStream, TrainerSlice};
use crate::params::ParamClient;
use crate::streams::shm::region_name;
use crate::streams::SampleConsumer;
use crate::util::digest::fnv1a;
use crate::util::rng::mix_key;
use crate::util::timing::occupy;

use prefetch::PrefetchSlots;
use reduce::{GroupLink, MeshLink, Reduced, KIND_FRAMES, KIND_GRAD, KIND_MOMENTS, REDUCE_TIMEOUT};

/// FIFO of trajectories awaiting batching. Pure-online: an item leaves the
/// buffer exactly once, into a batch or evicted.
pub struct TrainBuffer {
    items: VecDeque<Trajectory>,
    capacity: usize,
}

impl TrainBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            items: VecDeque::with_capacity(capacity),
            capacity: capacity.max(1),
        }
    }

    /// Push one trajectory; returns true if an old one was evicted.
    pub fn push(&mut self, t: Trajectory) -> bool {
        let evicted = if self.items.len() >= self.capacity {
            self.items.pop_front();
            true
        } else {
            false
        };
        self.items.push_back(t);
        evicted
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Remove exactly `n` trajectories in FIFO order, or nothing.
    pub fn take_batch(&mut self, n: usize) -> Option<Vec<Trajectory>> {
        if self.items.len() < n {
            return None;
        }
        Some(self.items.drain(..n).collect())
    }
}

/// Counters shared between the data lane and the poll lane.
#[derive(Default)]
struct SharedCounters {
    received: AtomicU64,
    frames_received: AtomicU64,
    buffer_drops: AtomicU64,
    buffer_len: AtomicU64,
    /// Trajectories tagged with some other policy's name: stream isolation
    /// violations.
    foreign: AtomicU64,
}

enum AlgoKind {
    Ppo {
        algo: PpoAlgorithm,
        optimizer: Box<dyn Optimizer>,
    },
    Synthetic {
        step: Duration,
    },
}

enum DataLane {
    /// Prefetch off: poll owns the consumer and buffer directly.
    Direct {
        consumer: Option<SampleConsumer>,
        buffer: TrainBuffer,
    },
    /// Prefetch on: a thread owns them and feeds the slots.
    Threaded {
        handle: Option<std::thread::JoinHandle<()>>,
        stop: Arc<AtomicBool>,
    },
}

pub struct TrainerBuild<'a> {
    pub experiment: &'a str,
    pub seed: u64,
    pub index: u32,
    pub slice: &'a TrainerSlice,
    pub streams: &'a [PlannedStream],
    pub models: &'a BTreeMap<String, ModelSpec>,
    pub param_service: Option<SocketAddr>,
}

pub struct TrainerWorker {
    index: u32,
    slice: TrainerSlice,
    param_service: Option<SocketAddr>,

    algo: AlgoKind,
    group: GroupLink,
    mesh_acceptor: Option<crate::streams::socket::Acceptor>,

    lane: DataLane,
    slots: Arc<PrefetchSlots>,
    counters: Arc<SharedCounters>,
    parked_consumer: Option<SampleConsumer>,

    param_client: Option<ParamClient>,
    published_version: u64,

    step_counter: u64,
    trained: u64,
    frames_trained: u64,
    batches: u64,
    last_stats: BTreeMap<String, f64>,
    /// Composition digest of every trained batch (capped), for determinism
    /// and prefetch-equivalence checks.
    batch_digest_log: Vec<u64>,
    /// Loss per step for PPO (capped).
    loss_log: Vec<f64>,
    param_checksum_every: u64,
    /// Set when a group peer departed; training stops, draining continues.
    group_closed: bool,
    connected: bool,
}

impl TrainerWorker {
    pub fn configure(b: TrainerBuild<'_>) -> Result<(Self, BoundEndpoints), WorkerError> {
        let stream_info = b
            .streams
            .iter()
            .find(|s| s.name == b.slice.sample_stream)
            .cloned()
            .ok_or_else(|| {
                WorkerError::Config(format!(
                    "stream `{}` missing from plan",
                    b.slice.sample_stream
                ))
            })?;

        let mut bound = BoundEndpoints::default();

        let consumer = match stream_info.transport {
            Transport::SharedMemory => SampleConsumer::create_shm(
                &region_name(b.experiment, &stream_info.name, "cons", b.slice.consumer_index),
                (b.slice.producer_rings as usize).max(1),
                stream_info.capacity,
                stream_info.payload_capacity as usize,
            )?,
            Transport::Socket => {
                let (consumer, addr) = SampleConsumer::bind_socket(
                    "127.0.0.1:0",
                    stream_info.capacity,
                    stream_info.drop_policy,
                )?;
                bound.entries.push((
                    AddressBook::sample_key(&stream_info.name, b.slice.consumer_index),
                    addr,
                ));
                consumer
            }
            Transport::Inline => {
                let queue = crate::streams::inline::register_queue(
                    b.experiment,
                    &stream_info.name,
                    b.slice.consumer_index,
                    stream_info.capacity,
                    stream_info.drop_policy == DropPolicy::Block,
                );
                SampleConsumer::inline(queue)
            }
        };

        let mesh_acceptor = if b.slice.group_size > 1 {
            let (acceptor, addr) = MeshLink::bind("127.0.0.1:0")?;
            bound.entries.push((
                AddressBook::group_key(&b.slice.policy, b.slice.group_rank),
                addr,
            ));
            Some(acceptor)
        } else {
            None
        };

        let algo = match &b.slice.algorithm {
            AlgorithmConfig::Ppo(params) => {
                let model = b.models.get(&b.slice.policy).ok_or_else(|| {
                    WorkerError::Config(format!("no model spec for policy `{}`", b.slice.policy))
                })?;
                let policy = MlpPolicy::init(
                    model,
                    mix_key(&[b.seed, fnv1a(b.slice.policy.as_bytes())]),
                );
                let optimizer: Box<dyn Optimizer> = match params.optimizer.as_str() {
                    "sgd" => Box::new(Sgd::new(params.lr)),
                    _ => Box::new(Adam::new(params.lr, policy.param_count())),
                };
                AlgoKind::Ppo {
                    algo: PpoAlgorithm::new(params.clone(), policy),
                    optimizer,
                }
            }
            AlgorithmConfig::Synthetic(s) => AlgoKind::Synthetic {
                step: Duration::from_micros(s.step_us),
            },
        };

        Ok((
            Self {
                index: b.index,
                slice: b.slice.clone(),
                param_service: b.param_service,
                algo,
                group: GroupLink::Solo,
                mesh_acceptor,
                lane: DataLane::Direct {
                    consumer: None,
                    buffer: TrainBuffer::new(b.slice.buffer_capacity as usize),
                },
                slots: Arc::new(PrefetchSlots::new()),
                counters: Arc::new(SharedCounters::default()),
                parked_consumer: Some(consumer),
                param_client: None,
                published_version: 0,
                step_counter: 0,
                trained: 0,
                frames_trained: 0,
                batches: 0,
                last_stats: BTreeMap::new(),
                batch_digest_log: Vec::new(),
                loss_log: Vec::new(),
                param_checksum_every: 16,
                group_closed: false,
                connected: false,
            },
            bound,
        ))
    }

    fn drain_into_buffer(
        consumer: &mut SampleConsumer,
        buffer: &mut TrainBuffer,
        counters: &SharedCounters,
        expected_policy: &str,
        max: usize,
    ) -> Result<u64, WorkerError> {
        let mut scratch = Vec::new();
        let n = consumer.consume_to(&mut scratch, max)?;
        for t in scratch {
            if t.policy_name != expected_policy {
                counters.foreign.fetch_add(1, Ordering::Relaxed);
            }
            counters
                .frames_received
                .fetch_add(t.env_frames, Ordering::Relaxed);
            if buffer.push(t) {
                counters.buffer_drops.fetch_add(1, Ordering::Relaxed);
            }
        }
        counters.received.fetch_add(n as u64, Ordering::Relaxed);
        counters
            .buffer_len
            .store(buffer.len() as u64, Ordering::Relaxed);
        Ok(n as u64)
    }

    /// One gradient step (or synthetic stand-in) over a batch.
    fn train_on(&mut self, batch: SampleBatch) -> Result<(), WorkerError> {
        let batch_frames = batch.total_env_frames;
        let batch_trajs = batch.trajectories.len() as u64;
        if self.batch_digest_log.len() < 100_000 {
            let mut digest = 0xcbf2_9ce4_8422_2325u64;
            for t in &batch.trajectories {
                digest = fnv1a(&{
                    let mut b = t.agent_id.as_bytes().to_vec();
                    b.extend_from_slice(&(t.len() as u64).to_le_bytes());
                    b.extend_from_slice(&digest.to_le_bytes());
                    b
                });
            }
            self.batch_digest_log.push(digest);
        }
        match &mut self.algo {
            AlgoKind::Synthetic { step } => {
                occupy(*step);
            }
            AlgoKind::Ppo { algo, optimizer } => {
                if algo.cfg.anneal_frames > 0 {
                    // The schedule must be identical on every group member,
                    // so pool the member-local frame counters first.
                    let mean = match self.group.reduce_mean(
                        KIND_FRAMES,
                        self.step_counter,
                        &[self.frames_trained as f64],
                        REDUCE_TIMEOUT,
                    )? {
                        Reduced::Value(v) => v[0],
                        Reduced::Closed => {
                            self.group_closed = true;
                            return Ok(());
                        }
                    };
                    let global = mean * self.group.size() as f64;
                    let frac = (global / algo.cfg.anneal_frames as f64).min(1.0);
                    optimizer.set_lr(algo.cfg.lr * (1.0 - 0.9 * frac));
                }
                let prep = algo.prepare(&batch).map_err(WorkerError::Algo)?;
                let norm = if algo.cfg.normalize_advantages {
                    // Pool moments across the group so every member
                    // normalizes with the same statistics.
                    let local = prep.advantage_moments();
                    let mean_of = match self.group.reduce_mean(
                        KIND_MOMENTS,
                        self.step_counter,
                        &local,
                        REDUCE_TIMEOUT,
                    )? {
                        Reduced::Value(v) => v,
                        Reduced::Closed => {
                            self.group_closed = true;
                            return Ok(());
                        }
                    };
                    let k = self.group.size() as f64;
                    let pooled = [mean_of[0] * k, mean_of[1] * k, mean_of[2] * k];
                    Some(moments_to_norm(&pooled))
                } else {
                    None
                };
                let minis = prep.minibatches(algo.cfg.minibatch_count);
                let mut agg: BTreeMap<String, f64> = BTreeMap::new();
                let count = minis.len() as f64;
                for mb in minis {
                    let (stats, grad) = algo.gradient(&mb, norm).map_err(WorkerError::Algo)?;
                    let mut grad = match self.group.reduce_mean(
                        KIND_GRAD,
                        self.step_counter,
                        &grad,
                        REDUCE_TIMEOUT,
                    )? {
                        Reduced::Value(v) => v,
                        Reduced::Closed => {
                            self.group_closed = true;
                            return Ok(());
                        }
                    };
                    if algo.cfg.max_grad_norm > 0.0 {
                        crate::learning::ppo::clip_grad_norm(&mut grad, algo.cfg.max_grad_norm);
                    }
                    let mut params = algo.policy.flat_params().to_vec();
                    optimizer.apply(&mut params, &grad);
                    algo.policy.set_flat_params(&params);
                    for (k, v) in stats.to_map() {
                        *agg.entry(k).or_insert(0.0) += v / count;
                    }
                }
                algo.policy.version += 1;
                if let Some(loss) = agg.get("loss") {
                    if self.loss_log.len() < 100_000 {
                        self.loss_log.push(*loss);
                    }
                }
                self.last_stats = agg;

                // Periodic group-wide checksum: after reduce and apply, every
                // member must hold bit-identical parameters.
                if self.group.size() > 1 && self.step_counter % self.param_checksum_every == 0 {
                    let digest = crate::util::digest::fnv1a_f64(algo.policy.flat_params());
                    match self.group.exchange(
                        KIND_MOMENTS,
                        u64::MAX - self.step_counter,
                        &[f64::from_bits(digest)],
                        REDUCE_TIMEOUT,
                    )? {
                        Reduced::Value(all) => {
                            if all.iter().any(|v| v[0].to_bits() != digest) {
                                return Err(WorkerError::Config(format!(
                                    "trainer group parameter divergence at step {}",
                                    self.step_counter
                                )));
                            }
                        }
                        Reduced::Closed => {
                            self.group_closed = true;
                        }
                    }
                }

                // Publish: only group rank 0 pushes; every member tracks the
                // published version so bookkeeping agrees.
                if self.slice.publish_every > 0
                    && (self.step_counter + 1) % self.slice.publish_every == 0
                {
                    let next_version = self.published_version + 1;
                    if self.slice.group_rank == 0 {
                        if let Some(client) = self.param_client.as_mut() {
                            let mut blob = algo.policy.to_blob(&self.slice.policy);
                            blob.version = next_version;
                            match client.push(&blob) {
                                Ok(_) => {}
                                Err(crate::params::ServiceError::Unreachable(_)) => {
                                    // Keep training; retry at the next boundary.
                                }
                                Err(e) => return Err(WorkerError::Service(e)),
                            }
                        }
                    }
                    self.published_version = next_version;
                }
            }
        }
        self.step_counter += 1;
        self.trained += batch_trajs;
        self.frames_trained += batch_frames;
        self.batches += 1;
        Ok(())
    }

    pub fn policy(&self) -> Option<&MlpPolicy> {
        match &self.algo {
            AlgoKind::Ppo { algo, .. } => Some(&algo.policy),
            AlgoKind::Synthetic { .. } => None,
        }
    }

    pub fn last_stats(&self) -> &BTreeMap<String, f64> {
        &self.last_stats
    }

    pub fn steps_taken(&self) -> u64 {
        self.step_counter
    }

    pub fn batch_digests(&self) -> &[u64] {
        &self.batch_digest_log
    }

    pub fn loss_log(&self) -> &[f64] {
        &self.loss_log
    }
}

impl Worker for TrainerWorker {
    fn kind(&self) -> String {
        "trainer".into()
    }

    fn index(&self) -> u32 {
        self.index
    }

    fn connect(&mut self, book: &AddressBook) -> Result<(), WorkerError> {
        if self.slice.group_size > 1 {
            let acceptor = self
                .mesh_acceptor
                .take()
                .ok_or_else(|| WorkerError::Config("mesh acceptor consumed twice".into()))?;
            let mesh = MeshLink::establish(
                acceptor,
                &self.slice.policy,
                self.slice.group_rank,
                self.slice.group_size,
                book,
            )?;
            self.group = GroupLink::Mesh(mesh);
        }

        // Fetch the seeded blob so all members and all policy workers start
        // from identical parameters.
        if let Some(addr) = book.param_service.or(self.param_service) {
            let mut client = ParamClient::connect(addr).map_err(WorkerError::Service)?;
            if let AlgoKind::Ppo { algo, .. } = &mut self.algo {
                if let Some(blob) = client
                    .pull(&self.slice.policy, 0)
                    .map_err(WorkerError::Service)?
                {
                    self.published_version = blob.version;
                    algo.policy.load_blob(&blob).map_err(WorkerError::Config)?;
                }
            }
            self.param_client = Some(client);
        }

        let consumer = self
            .parked_consumer
            .take()
            .ok_or_else(|| WorkerError::Config("consumer consumed twice".into()))?;
        if self.slice.prefetch {
            let stop = Arc::new(AtomicBool::new(false));
            let slots = self.slots.clone();
            let counters = self.counters.clone();
            let batch_size = self.slice.batch_size as usize;
            let capacity = self.slice.buffer_capacity as usize;
            let stop2 = stop.clone();
            let mut consumer = consumer;
            let policy_name = self.slice.policy.clone();
            let handle = std::thread::Builder::new()
                .name(format!("trainer{}-data", self.index))
                .spawn(move || {
                    let mut buffer = TrainBuffer::new(capacity);
                    while !stop2.load(Ordering::Acquire) {
                        let drained = Self::drain_into_buffer(
                            &mut consumer,
                            &mut buffer,
                            &counters,
                            &policy_name,
                            1024,
                        )
                        .unwrap_or(0);
                        let mut loaded = false;
                        if buffer.len() >= batch_size {
                            if let Some(idx) = slots.begin_load() {
                                match buffer.take_batch(batch_size) {
                                    Some(trajs) => {
                                        slots.finish_load(
                                            idx,
                                            SampleBatch::from_trajectories(trajs),
                                        );
                                        loaded = true;
                                    }
                                    None => slots.abort_load(idx),
                                }
                            }
                        }
                        counters
                            .buffer_len
                            .store(buffer.len() as u64, Ordering::Relaxed);
                        if drained == 0 && !loaded {
                            std::thread::sleep(Duration::from_micros(200));
                        }
                    }
                    consumer.close();
                })
                .map_err(|e| WorkerError::Config(e.to_string()))?;
            self.lane = DataLane::Threaded {
                handle: Some(handle),
                stop,
            };
        } else {
            self.lane = DataLane::Direct {
                consumer: Some(consumer),
                buffer: TrainBuffer::new(self.slice.buffer_capacity as usize),
            };
        }
        self.connected = true;
        Ok(())
    }

    fn poll(&mut self) -> Result<PollResult, WorkerError> {
        assert!(self.connected, "poll before connect");
        let before = self.counters.received.load(Ordering::Relaxed);
        let mut slot_to_release = None;
        let batch = if self.group_closed {
            // A peer left (experiment stopping): keep draining for counter
            // sanity but train no further batches.
            if let DataLane::Direct { consumer, buffer } = &mut self.lane {
                let consumer = consumer.as_mut().expect("consumer present when direct");
                Self::drain_into_buffer(
                    consumer,
                    buffer,
                    &self.counters,
                    &self.slice.policy,
                    1024,
                )?;
            }
            None
        } else {
            match &mut self.lane {
            DataLane::Direct { consumer, buffer } => {
                let consumer = consumer.as_mut().expect("consumer present when direct");
                Self::drain_into_buffer(
                    consumer,
                    buffer,
                    &self.counters,
                    &self.slice.policy,
                    1024,
                )?;
                buffer
                    .take_batch(self.slice.batch_size as usize)
                    .map(SampleBatch::from_trajectories)
            }
            DataLane::Threaded { .. } => {
                match self.slots.take_ready(Duration::from_millis(1)) {
                    Some((idx, batch)) => {
                        slot_to_release = Some(idx);
                        Some(batch)
                    }
                    None => None,
                }
            }
            }
        };
        let received_now = self.counters.received.load(Ordering::Relaxed) - before;

        let trained = match batch {
            Some(batch) => {
                let r = self.train_on(batch);
                if let Some(idx) = slot_to_release {
                    self.slots.release(idx);
                }
                r?;
                1
            }
            None => 0,
        };
        Ok(PollResult {
            sample_count: received_now,
            batch_count: trained,
        })
    }

    fn metrics(&mut self) -> MetricsSnapshot {
        let mut m = MetricsSnapshot::default();
        m.counters.insert(
            "trajectories_received".into(),
            self.counters.received.load(Ordering::Relaxed),
        );
        m.counters.insert(
            "frames_received".into(),
            self.counters.frames_received.load(Ordering::Relaxed),
        );
        m.counters.insert(
            "buffer_drops".into(),
            self.counters.buffer_drops.load(Ordering::Relaxed),
        );
        m.counters.insert(
            "foreign_trajectories".into(),
            self.counters.foreign.load(Ordering::Relaxed),
        );
        m.counters
            .insert("trajectories_trained".into(), self.trained);
        m.counters.insert("frames_trained".into(), self.frames_trained);
        m.counters.insert("batches".into(), self.batches);
        m.counters.insert("version".into(), self.published_version);
        m.gauges.insert(
            "buffer_len".into(),
            self.counters.buffer_len.load(Ordering::Relaxed) as f64,
        );
        for (k, v) in &self.last_stats {
            m.gauges.insert(format!("ppo_{k}"), *v);
        }
        m
    }

    fn final_report(&mut self) -> serde_json::Value {
        let digests: Vec<String> = self
            .batch_digest_log
            .iter()
            .map(|d| format!("{d:016x}"))
            .collect();
        serde_json::json!({
            "batch_digests": digests,
            "loss_log": self.loss_log,
            "steps": self.step_counter,
        })
    }

    fn shutdown(&mut self) {
        self.slots.close();
        if let DataLane::Threaded { handle, stop } = &mut self.lane {
            stop.store(true, Ordering::Release);
            if let Some(h) = handle.take() {
                h.join().ok();
            }
        }
        if let DataLane::Direct { consumer, .. } = &mut self.lane {
            if let Some(c) = consumer.take() {
                c.close();
            }
        }
    }
}
