//! Environment-ring throughput measurement.
//!
//! One actor hosts R synthetic environments (each step occupies the actor
//! for t_env) and posts inference requests to a responder that answers each
//! request exactly t_inf after it arrived. While one instance waits for its
//! action, the ring lets the actor step the others, so the steady-state rate
//! follows `min(R, 1 + t_inf/t_env) / (t_env + t_inf)` until the actor's own
//! stepping time saturates at `1 / t_env`.

use std::collections::BinaryHeap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::actor::{ActorBuild, ActorWorker};
use crate::control::worker::{AddressBook, Worker};
use crate::model::config::ExperimentConfig;
use crate::model::types::{ActionId, InferenceResponse};
use crate::model::validate::{validate, WorkerSlice};
use crate::streams::shm::region_name;
use crate::streams::{InferenceServer, SampleConsumer};

#[derive(Debug, Clone)]
pub struct RingBenchParams {
    pub ring_sizes: Vec<usize>,
    pub env_step_us: u64,
    pub inference_delay_us: u64,
    pub warmup: Duration,
    pub measure: Duration,
}

impl Default for RingBenchParams {
    fn default() -> Self {
        Self {
            ring_sizes: vec![1, 2, 4, 8, 16],
            env_step_us: 2_000,
            inference_delay_us: 10_000,
            warmup: Duration::from_millis(1_500),
            measure: Duration::from_secs(3),
        }
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct RingPoint {
    pub ring: usize,
    pub steps_per_sec: f64,
    pub predicted: f64,
    pub ratio: f64,
}

/// The pipeline model: each environment cycle costs t_env of actor time plus
/// t_inf of waiting; R instances overlap the waits until the actor itself
/// saturates.
pub fn predicted_rate(env_step_us: u64, inference_delay_us: u64, ring: usize) -> f64 {
    let t_env = env_step_us as f64 * 1e-6;
    let t_inf = inference_delay_us as f64 * 1e-6;
    let effective = (ring as f64).min(1.0 + t_inf / t_env);
    effective / (t_env + t_inf)
}

struct Due {
    at: Instant,
    resp: InferenceResponse,
}

impl PartialEq for Due {
    fn eq(&self, other: &Self) -> bool {
        self.at == other.at
    }
}
impl Eq for Due {}
impl PartialOrd for Due {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Due {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        other.at.cmp(&self.at) // min-heap
    }
}

/// Answer every request exactly `delay` after it arrives.
fn responder(mut server: InferenceServer, delay: Duration, stop: Arc<AtomicBool>) {
    let mut due: BinaryHeap<Due> = BinaryHeap::new();
    while !stop.load(Ordering::Acquire) {
        let batch = server
            .flush(usize::MAX, Duration::from_micros(200))
            .unwrap_or_default();
        let now = Instant::now();
        for req in batch {
            due.push(Due {
                at: now + delay,
                resp: InferenceResponse {
                    client_id: req.client_id,
                    request_id: req.request_id,
                    action: ActionId::new(0),
                    policy_state: None,
                    log_prob: -0.69,
                    value_pred: 0.0,
                    policy_version: 1,
                },
            });
        }
        let now = Instant::now();
        let mut ready = Vec::new();
        while due.peek().map(|d| d.at <= now).unwrap_or(false) {
            ready.push(due.pop().unwrap().resp);
        }
        if !ready.is_empty() {
            server.respond(&ready).ok();
        }
    }
}

fn bench_config(exp: &str, ring: usize, env_step_us: u64) -> ExperimentConfig {
    ExperimentConfig::from_toml_str(&format!(
        r#"
        name = "{exp}"
        seed = 1

        [[streams]]
        name = "inf"
        kind = "inference"
        transport = "shared_memory"

        [[streams]]
        name = "spl"
        kind = "sample"
        transport = "shared_memory"
        capacity = 256

        [[actors]]
        env = {{ name = "synthetic_delay", params = {{ step_time_us = {env_step_us}, obs_dim = 4, episode_len = 1000000 }} }}
        ring_size = {ring}
        chunk_length = 16
        inference_streams = ["inf"]
        sample_streams = ["spl"]
        [[actors.agent_specs]]
        index_pattern = ".*"
        inference_stream_idx = 0
        sample_stream_idx = 0

        [[policies]]
        inference_stream = "inf"
        policy = "rl"

        [[trainers]]
        policy = "rl"
        sample_stream = "spl"
        batch_size = 8
        "#
    ))
    .expect("ring bench config")
}

/// Measure one ring size; returns steps/second over the measure window.
pub fn measure_ring(
    ring: usize,
    env_step_us: u64,
    inference_delay_us: u64,
    warmup: Duration,
    measure: Duration,
) -> f64 {
    let exp = format!("ringbench-r{ring}-{}", std::process::id());
    let cfg = bench_config(&exp, ring, env_step_us);
    let plan = validate(&cfg).expect("ring bench plan");

    let inf = plan.stream("inf").unwrap();
    let server = InferenceServer::create_shm(
        &region_name(&exp, "inf", "srv", 0),
        inf.slots_per_server[0] as usize,
        inf.payload_capacity as usize,
    )
    .expect("responder table");
    let spl = plan.stream("spl").unwrap();
    let _consumer = SampleConsumer::create_shm(
        &region_name(&exp, "spl", "cons", 0),
        spl.producers_per_consumer[0] as usize,
        spl.capacity,
        spl.payload_capacity as usize,
    )
    .expect("sink consumer");

    let stop = Arc::new(AtomicBool::new(false));
    let responder_handle = {
        let stop = stop.clone();
        let delay = Duration::from_micros(inference_delay_us);
        std::thread::spawn(move || responder(server, delay, stop))
    };

    let w = plan
        .workers
        .iter()
        .find(|w| w.kind == "actor")
        .expect("actor in plan");
    let WorkerSlice::Actor(slice) = &w.slice else {
        unreachable!()
    };
    let mut actor = ActorWorker::configure(ActorBuild {
        experiment: &plan.experiment,
        seed: plan.seed,
        index: 0,
        slice,
        streams: &plan.streams,
        models: &plan.models,
        param_service: None,
    })
    .expect("actor configure");
    actor.connect(&AddressBook::default()).expect("actor connect");

    // Warm up until the pipeline fills, then count.
    let warm_end = Instant::now() + warmup;
    while Instant::now() < warm_end {
        actor.poll().expect("actor poll");
    }
    let t0 = Instant::now();
    let mut steps = 0u64;
    while t0.elapsed() < measure {
        steps += actor.poll().expect("actor poll").sample_count;
    }
    let rate = steps as f64 / t0.elapsed().as_secs_f64();

    stop.store(true, Ordering::Release);
    responder_handle.join().ok();
    rate
}

pub fn run(params: &RingBenchParams) -> Vec<RingPoint> {
    params
        .ring_sizes
        .iter()
        .map(|&ring| {
            let steps_per_sec = measure_ring(
                ring,
                params.env_step_us,
                params.inference_delay_us,
                params.warmup,
                params.measure,
            );
            let predicted = predicted_rate(params.env_step_us, params.inference_delay_us, ring);
            RingPoint {
                ring,
                steps_per_sec,
                predicted,
                ratio: steps_per_sec / predicted,
            }
        })
        .collect()
}
