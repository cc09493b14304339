//! Micro-benchmarks for the paths that sit on every data-plane hop: the
//! wire codec, the shared-memory sample ring, the inference slot protocol,
//! and the policy forward pass.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

use srl_core::learning::MlpPolicy;
use srl_core::model::types::{
    ActionId, ObservationVector, Trajectory, TransitionStep,
};
use srl_core::model::validate::ModelSpec;
use srl_core::model::wire::{WireDecode, WireEncode};
use srl_core::streams::shm::SampleRings;

fn sample_trajectory(steps: usize, obs_dim: usize) -> Trajectory {
    Trajectory {
        agent_id: "0:0:0".into(),
        policy_name: "rl".into(),
        steps: (0..steps)
            .map(|i| TransitionStep {
                obs: ObservationVector::new((0..obs_dim).map(|j| (i * j) as f64 * 0.01).collect()),
                action: ActionId::new((i % 4) as u32),
                reward: 1.0,
                done: i + 1 == steps,
                truncated: false,
                log_prob_old: -0.69,
                value_pred: 0.5,
                policy_version: 1,
            })
            .collect(),
        bootstrap_value: 0.0,
        env_frames: steps as u64,
    }
}

fn bench_wire(c: &mut Criterion) {
    let traj = sample_trajectory(32, 8);
    let bytes = traj.encode();
    c.bench_function("encode_trajectory_32x8", |b| b.iter(|| traj.encode()));
    c.bench_function("decode_trajectory_32x8", |b| {
        b.iter(|| Trajectory::decode(&bytes).unwrap())
    });
}

fn bench_sample_ring(c: &mut Criterion) {
    let name = format!("/srl-bench-ring-{}", std::process::id());
    let rings = SampleRings::create(&name, 1, 64, 8192).unwrap();
    let payload = sample_trajectory(32, 8).encode();
    c.bench_function("shm_ring_post_pop_3k5", |b| {
        b.iter(|| {
            rings.post(0, &payload, false).unwrap();
            rings.pop(0).unwrap()
        })
    });
}

fn bench_forward(c: &mut Criterion) {
    let policy = MlpPolicy::init(
        &ModelSpec {
            obs_dim: 8,
            action_count: 4,
            hidden: vec![64, 64],
        },
        7,
    );
    let obs: Vec<ObservationVector> = (0..64)
        .map(|i| ObservationVector::new((0..8).map(|j| (i + j) as f64 * 0.05).collect()))
        .collect();
    c.bench_function("mlp_forward_batch64", |b| {
        b.iter_batched(
            || obs.iter().collect::<Vec<_>>(),
            |refs| policy.forward(&refs),
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, bench_wire, bench_sample_ring, bench_forward);
criterion_main!(benches);
