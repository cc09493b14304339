//! Data-parallel equivalence measurement: K mesh-connected trainers with
//! per-member batch B against one trainer with batch K*B on the same data in
//! the same order. With per-sample mean losses, pooled advantage moments,
//! and rank-ordered gradient averaging, the parameter trajectories must
//! agree to floating-point noise, step by step.

use std::collections::BTreeMap;

use crate::control::worker::{AddressBook, Worker};
use crate::model::config::{AlgorithmConfig, PpoParams, StreamKind, Transport};
use crate::model::types::{ActionId, ObservationVector, Trajectory, TransitionStep};
use crate::model::validate::{ModelSpec, PlannedStream, TrainerSlice};
use crate::trainer::{TrainerBuild, TrainerWorker};
use crate::util::rng::CounterRng;

#[derive(Debug, Clone)]
pub struct SpmdParams {
    pub members: u32,
    pub per_member_batch: u32,
    pub steps: u64,
    pub trajectory_len: usize,
    pub seed: u64,
}

impl Default for SpmdParams {
    fn default() -> Self {
        Self {
            members: 4,
            per_member_batch: 8,
            steps: 100,
            trajectory_len: 4,
            seed: 17,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct SpmdResult {
    /// Max relative coordinate error between the group and the reference,
    /// per step.
    pub per_step_max_rel_err: Vec<f64>,
    pub max_rel_err: f64,
    /// Whether all group members held bit-identical parameters at every step.
    pub members_identical: bool,
    pub steps: u64,
}

fn model() -> ModelSpec {
    ModelSpec {
        obs_dim: 8,
        action_count: 4,
        hidden: vec![32, 32],
    }
}

fn models() -> BTreeMap<String, ModelSpec> {
    let mut m = BTreeMap::new();
    m.insert("rl".to_string(), model());
    m
}

fn synth_trajectory(rng: &mut CounterRng, tag: u64, len: usize) -> Trajectory {
    let steps: Vec<TransitionStep> = (0..len)
        .map(|i| TransitionStep {
            obs: ObservationVector::new((0..8).map(|_| rng.normal() * 0.7).collect()),
            action: ActionId::new(rng.below(4) as u32),
            reward: rng.normal(),
            done: false,
            truncated: i + 1 == len,
            log_prob_old: -(0.2 + rng.next_f64()),
            value_pred: rng.normal() * 0.3,
            policy_version: 1,
        })
        .collect();
    Trajectory {
        agent_id: format!("s{tag}"),
        policy_name: "rl".into(),
        steps,
        bootstrap_value: 0.0,
        env_frames: len as u64,
    }
}

fn inline_stream(capacity: usize, consumers: u32) -> PlannedStream {
    PlannedStream {
        name: "spl".into(),
        kind: StreamKind::Sample,
        transport: Transport::Inline,
        capacity,
        drop_policy: crate::model::config::DropPolicy::DropOldest,
        inline_policy: None,
        pull_interval_ms: 100,
        servers: consumers,
        slots_per_server: vec![],
        producers_per_consumer: vec![1; consumers as usize],
        payload_capacity: 16_384,
    }
}

fn trainer_slice(batch: u32, rank: u32, size: u32, total_backlog: u32) -> TrainerSlice {
    TrainerSlice {
        policy: "rl".into(),
        sample_stream: "spl".into(),
        consumer_index: rank,
        producer_rings: 1,
        batch_size: batch,
        prefetch: false,
        publish_every: 0,
        buffer_capacity: total_backlog,
        algorithm: AlgorithmConfig::Ppo(PpoParams {
            lr: 1e-3,
            ..PpoParams::default()
        }),
        group_rank: rank,
        group_size: size,
    }
}

/// Drive one trainer until `steps`, snapshotting parameters after each step.
fn drive(mut trainer: TrainerWorker, book: AddressBook, steps: u64) -> Vec<Vec<f64>> {
    trainer.connect(&book).expect("trainer connect");
    let mut snapshots = Vec::with_capacity(steps as usize);
    let deadline = std::time::Instant::now() + std::time::Duration::from_secs(240);
    while trainer.steps_taken() < steps {
        let before = trainer.steps_taken();
        trainer.poll().expect("trainer poll");
        if trainer.steps_taken() > before {
            snapshots.push(trainer.policy().unwrap().flat_params().to_vec());
        }
        assert!(
            std::time::Instant::now() < deadline,
            "spmd trainer stalled at step {before}"
        );
    }
    trainer.shutdown();
    snapshots
}

pub fn run(p: &SpmdParams) -> SpmdResult {
    let k = p.members;
    let b = p.per_member_batch as usize;
    let total = (p.steps as usize) * (k as usize) * b;
    let mut rng = CounterRng::from_key(&[p.seed, 0x5bd]);
    let data: Vec<Trajectory> = (0..total)
        .map(|i| synth_trajectory(&mut rng, i as u64, p.trajectory_len))
        .collect();

    let backlog = (total / k as usize + 8) as u32;

    // --- Group run ---
    let exp = format!("spmdbench-{}-{}", k, std::process::id());
    let stream = inline_stream(backlog as usize + 8, k);
    let mut book = AddressBook::default();
    let mut members = Vec::new();
    for rank in 0..k {
        let sl = trainer_slice(p.per_member_batch, rank, k, backlog);
        let (trainer, bound) = TrainerWorker::configure(TrainerBuild {
            experiment: &exp,
            seed: p.seed,
            index: rank,
            slice: &sl,
            streams: std::slice::from_ref(&stream),
            models: &models(),
            param_service: None,
        })
        .expect("trainer configure");
        for (key, addr) in bound.entries {
            book.entries.insert(key, addr);
        }
        members.push(trainer);
    }
    // Feed: flat order chunked into per-member batches, round-robin.
    for (i, chunk) in data.chunks(b).enumerate() {
        let rank = (i % k as usize) as u32;
        let queue = crate::streams::inline::lookup_queue(
            &exp,
            "spl",
            rank,
            std::time::Duration::from_secs(1),
        )
        .expect("member queue");
        let mut producer = crate::streams::SampleProducer::inline(queue);
        for t in chunk {
            producer.post(t).expect("feed member");
        }
    }
    let handles: Vec<_> = members
        .into_iter()
        .map(|t| {
            let book = book.clone();
            let steps = p.steps;
            std::thread::spawn(move || drive(t, book, steps))
        })
        .collect();
    let member_snapshots: Vec<Vec<Vec<f64>>> =
        handles.into_iter().map(|h| h.join().unwrap()).collect();
    for rank in 0..k as usize {
        crate::streams::inline::unregister_queue(&exp, "spl", rank as u32);
    }

    // --- Reference run ---
    let exp_ref = format!("spmdbench-ref-{}", std::process::id());
    let stream = inline_stream((total + 8) as usize, 1);
    let sl = trainer_slice(p.per_member_batch * k, 0, 1, total as u32 + 8);
    let (reference, _) = TrainerWorker::configure(TrainerBuild {
        experiment: &exp_ref,
        seed: p.seed,
        index: 0,
        slice: &sl,
        streams: std::slice::from_ref(&stream),
        models: &models(),
        param_service: None,
    })
    .expect("reference configure");
    {
        let queue = crate::streams::inline::lookup_queue(
            &exp_ref,
            "spl",
            0,
            std::time::Duration::from_secs(1),
        )
        .expect("reference queue");
        let mut producer = crate::streams::SampleProducer::inline(queue);
        for t in &data {
            producer.post(t).expect("feed reference");
        }
    }
    let reference_snapshots = drive(reference, AddressBook::default(), p.steps);
    crate::streams::inline::unregister_queue(&exp_ref, "spl", 0);

    // --- Compare ---
    let mut members_identical = true;
    for s in 0..p.steps as usize {
        for m in 1..k as usize {
            if member_snapshots[m][s] != member_snapshots[0][s] {
                members_identical = false;
            }
        }
    }
    let mut per_step = Vec::with_capacity(p.steps as usize);
    let mut overall: f64 = 0.0;
    for s in 0..p.steps as usize {
        let mut worst: f64 = 0.0;
        for (g, r) in member_snapshots[0][s].iter().zip(&reference_snapshots[s]) {
            let rel = (g - r).abs() / r.abs().max(1.0);
            worst = worst.max(rel);
        }
        overall = overall.max(worst);
        per_step.push(worst);
    }
    SpmdResult {
        per_step_max_rel_err: per_step,
        max_rel_err: overall,
        members_identical,
        steps: p.steps,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Small version; the full K=4, 100-step run is in the acceptance suite.
    #[test]
    fn two_members_ten_steps_match_reference() {
        let r = run(&SpmdParams {
            members: 2,
            per_member_batch: 4,
            steps: 10,
            trajectory_len: 4,
            seed: 3,
        });
        assert!(r.members_identical);
        assert!(
            r.max_rel_err < 1e-10,
            "max relative error {:.3e}",
            r.max_rel_err
        );
    }
}
