//! Trainer saturation sweep: hold one trainer's processing capacity fixed
//! and ramp the number of actors feeding it. Trainer FPS rises until the
//! trainer saturates and flattens; past that point extra samples are
//! discarded and utilization (trained/produced) decays.
//!
//! Workers run on the thread scheduler through the regular controller path;
//! the synthetic environment and a synthetic per-batch train cost pin the
//! rates.

use std::time::Duration;

use crate::control::controller::run_experiment;
use crate::control::metrics::{fps_between, read_all_metrics};
use crate::model::config::ExperimentConfig;

#[derive(Debug, Clone)]
pub struct SaturationParams {
    pub actor_counts: Vec<usize>,
    /// Synthetic environment step time per agent step.
    pub env_step_us: u64,
    /// Synthetic cost of one trainer batch.
    pub train_step_us: u64,
    pub batch_size: usize,
    pub chunk_length: usize,
    pub warmup: Duration,
    pub measure: Duration,
}

impl Default for SaturationParams {
    fn default() -> Self {
        Self {
            actor_counts: vec![1, 2, 4, 8, 16, 32],
            env_step_us: 4_000,
            train_step_us: 64_000,
            batch_size: 8,
            chunk_length: 16,
            warmup: Duration::from_millis(1_500),
            measure: Duration::from_secs(4),
        }
    }
}

impl SaturationParams {
    /// Frames/second one actor generates.
    pub fn per_actor_rate(&self) -> f64 {
        1e6 / self.env_step_us as f64
    }

    /// The trainer's processing ceiling in frames/second.
    pub fn trainer_capacity(&self) -> f64 {
        (self.batch_size * self.chunk_length) as f64 / (self.train_step_us as f64 * 1e-6)
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct SaturationPoint {
    pub actors: usize,
    pub trainer_fps: f64,
    pub produced_fps: f64,
    pub utilization: f64,
}

fn sweep_config(p: &SaturationParams, exp: &str, actors: usize) -> ExperimentConfig {
    let wall = (p.warmup + p.measure).as_secs_f64();
    ExperimentConfig::from_toml_str(&format!(
        r#"
        name = "{exp}"
        seed = 1

        [scheduler]
        backend = "thread"

        [stop]
        wall_clock_s = {wall}

        [models.rl]
        hidden = [16]

        [[streams]]
        name = "inf"
        kind = "inference"
        transport = "inline"
        policy = "rl"

        [[streams]]
        name = "spl"
        kind = "sample"
        transport = "shared_memory"
        capacity = 64

        [[actors]]
        env = {{ name = "synthetic_delay", params = {{ step_time_us = {env_step_us}, obs_dim = 4, episode_len = {chunk} }} }}
        ring_size = 1
        chunk_length = {chunk}
        count = {actors}
        inference_streams = ["inf"]
        sample_streams = ["spl"]
        [[actors.agent_specs]]
        index_pattern = ".*"
        inference_stream_idx = 0
        sample_stream_idx = 0

        [[trainers]]
        policy = "rl"
        sample_stream = "spl"
        batch_size = {batch}
        prefetch = true
        algorithm = {{ kind = "synthetic", step_us = {train_step_us} }}
        "#,
        env_step_us = p.env_step_us,
        chunk = p.chunk_length,
        batch = p.batch_size,
        train_step_us = p.train_step_us,
    ))
    .expect("saturation config")
}

/// Run one point of the sweep.
pub fn measure_point(p: &SaturationParams, actors: usize) -> SaturationPoint {
    let exp = format!("satbench-a{actors}-{}", std::process::id());
    let cfg = sweep_config(p, &exp, actors);
    let report = run_experiment(&cfg).expect("saturation run");

    let all = read_all_metrics(&report.run_dir);
    let warmup_ms = p.warmup.as_millis() as u64;
    let mut trainer_fps = 0.0;
    let mut produced_fps = 0.0;
    let mut frames_trained = 0u64;
    let mut frames_posted = 0u64;
    for (worker, records) in &all {
        let start = records.first().map(|r| r.unix_ms).unwrap_or(0);
        let steady: Vec<_> = records
            .iter()
            .filter(|r| r.unix_ms >= start + warmup_ms)
            .cloned()
            .collect();
        if worker.starts_with("trainer") {
            trainer_fps += fps_between(&steady, "frames_trained");
            if let Some(last) = records.last() {
                frames_trained += last.counters.get("frames_trained").copied().unwrap_or(0);
            }
        }
        if worker.starts_with("actor") {
            produced_fps += fps_between(&steady, "frames_posted");
            if let Some(last) = records.last() {
                frames_posted += last.counters.get("frames_posted").copied().unwrap_or(0);
            }
        }
    }
    let utilization = if frames_posted == 0 {
        0.0
    } else {
        frames_trained as f64 / frames_posted as f64
    };
    SaturationPoint {
        actors,
        trainer_fps,
        produced_fps,
        utilization,
    }
}

pub fn run(p: &SaturationParams) -> Vec<SaturationPoint> {
    p.actor_counts
        .iter()
        .map(|&actors| measure_point(p, actors))
        .collect()
}

/// Smallest actor count whose FPS reaches 90% of the sweep's maximum.
pub fn saturating_actor_count(points: &[SaturationPoint]) -> Option<usize> {
    let max = points.iter().map(|p| p.trainer_fps).fold(0.0, f64::max);
    points
        .iter()
        .find(|p| p.trainer_fps >= 0.9 * max)
        .map(|p| p.actors)
}
