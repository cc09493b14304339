//! Prefetch overlap measurement.
//!
//! A trainer's cycle has a data side (receive into the buffer, stage into a
//! slot) and a compute side (the gradient step). With prefetch off the three
//! run back to back: one batch costs `load + step`. With prefetch on they
//! pipeline across three lanes — receive, stage, step — with the two-slot
//! stage in the middle, so the steady-state cost per batch is
//! `max(load/2, load/2, step)`; the load is split evenly between its two
//! lanes. Synthetic sleeps model the stage costs.

use std::sync::mpsc::sync_channel;
use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::model::types::SampleBatch;
use crate::trainer::prefetch::PrefetchSlots;
use crate::util::timing::occupy;

#[derive(Debug, Clone)]
pub struct PrefetchParams {
    /// Total data-side cost per batch, microseconds (split across the
    /// receive and stage lanes when prefetching).
    pub load_us: u64,
    /// Gradient-step cost per batch, microseconds.
    pub step_us: u64,
    pub batches: u64,
    pub warmup_batches: u64,
}

impl Default for PrefetchParams {
    fn default() -> Self {
        Self {
            load_us: 5_000,
            step_us: 5_000,
            batches: 120,
            warmup_batches: 8,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct PrefetchResult {
    pub on_rate: f64,
    pub off_rate: f64,
    pub speedup: f64,
    pub ideal_speedup: f64,
}

fn empty_batch(tag: u64) -> SampleBatch {
    SampleBatch {
        trajectories: Vec::new(),
        total_env_frames: tag,
    }
}

/// Sequential baseline: receive, stage, and step one batch at a time.
pub fn measure_off(p: &PrefetchParams) -> f64 {
    let half_load = Duration::from_micros(p.load_us / 2);
    let step = Duration::from_micros(p.step_us);
    let mut done = 0u64;
    let mut t0 = Instant::now();
    let total = p.batches + p.warmup_batches;
    for i in 0..total {
        if i == p.warmup_batches {
            t0 = Instant::now();
        }
        occupy(half_load); // receive
        occupy(half_load); // stage
        occupy(step); // step
        if i >= p.warmup_batches {
            done += 1;
        }
    }
    done as f64 / t0.elapsed().as_secs_f64()
}

/// Pipelined version: a receive lane, a stage lane feeding the two slots,
/// and the train lane taking READY batches.
pub fn measure_on(p: &PrefetchParams) -> f64 {
    let slots = Arc::new(PrefetchSlots::new());
    let total = p.batches + p.warmup_batches;
    let half_load = Duration::from_micros(p.load_us / 2);
    let step = Duration::from_micros(p.step_us);

    // Receive lane -> bounded handoff -> stage lane.
    let (tx, rx) = sync_channel::<u64>(2);
    let receive = std::thread::spawn(move || {
        for i in 0..total {
            occupy(half_load);
            if tx.send(i).is_err() {
                return;
            }
        }
    });
    let slots_stage = slots.clone();
    let stage = std::thread::spawn(move || {
        while let Ok(tag) = rx.recv() {
            occupy(half_load);
            loop {
                if let Some(idx) = slots_stage.begin_load() {
                    slots_stage.finish_load(idx, empty_batch(tag));
                    break;
                }
                if slots_stage.is_closed() {
                    return;
                }
                std::thread::sleep(Duration::from_micros(50));
            }
        }
    });

    let mut done = 0u64;
    let mut t0 = Instant::now();
    for i in 0..total {
        let (idx, _batch) = slots
            .take_ready(Duration::from_secs(30))
            .expect("stage lane stalled");
        occupy(step);
        slots.release(idx);
        if i + 1 == p.warmup_batches {
            t0 = Instant::now();
        }
        if i >= p.warmup_batches {
            done += 1;
        }
    }
    let rate = done as f64 / t0.elapsed().as_secs_f64();
    slots.close();
    receive.join().ok();
    stage.join().ok();
    rate
}

pub fn run(p: &PrefetchParams) -> PrefetchResult {
    let off_rate = measure_off(p);
    let on_rate = measure_on(p);
    let seq = (p.load_us + p.step_us) as f64;
    let pipe = (p.load_us as f64 / 2.0).max(p.step_us as f64);
    PrefetchResult {
        on_rate,
        off_rate,
        speedup: on_rate / off_rate,
        ideal_speedup: seq / pipe,
    }
}
