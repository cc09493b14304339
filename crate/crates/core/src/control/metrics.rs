//! Line-delimited metrics records: each worker appends snapshots to its own
//! file under `{run_dir}/metrics/`, and the controller (or `report`) reads
//! them back to compute FPS and utilization.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::util::timing::unix_millis;

use super::worker::MetricsSnapshot;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub unix_ms: u64,
    pub worker: String,
    pub counters: BTreeMap<String, u64>,
    pub gauges: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub episode_returns: Vec<f64>,
}

impl MetricsRecord {
    pub fn from_snapshot(worker: &str, snap: MetricsSnapshot) -> Self {
        Self {
            unix_ms: unix_millis(),
            worker: worker.to_string(),
            counters: snap.counters,
            gauges: snap.gauges,
            episode_returns: snap.episode_returns,
        }
    }
}

pub fn metrics_dir(run_dir: &Path) -> PathBuf {
    run_dir.join("metrics")
}

pub fn metrics_path(run_dir: &Path, worker_ident: &str) -> PathBuf {
    metrics_dir(run_dir).join(format!("{}.jsonl", worker_ident.replace(':', "-")))
}

pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn open(run_dir: &Path, worker_ident: &str) -> std::io::Result<Self> {
        std::fs::create_dir_all(metrics_dir(run_dir))?;
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(metrics_path(run_dir, worker_ident))?;
        Ok(Self {
            out: BufWriter::new(file),
        })
    }

    pub fn append(&mut self, record: &MetricsRecord) -> std::io::Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")?;
        self.out.flush()
    }
}

pub fn read_metrics_file(path: &Path) -> Vec<MetricsRecord> {
    let Ok(file) = File::open(path) else {
        return Vec::new();
    };
    BufReader::new(file)
        .lines()
        .map_while(Result::ok)
        .filter_map(|line| serde_json::from_str(&line).ok())
        .collect()
}

/// All records in a run directory, keyed by worker identity.
pub fn read_all_metrics(run_dir: &Path) -> BTreeMap<String, Vec<MetricsRecord>> {
    let mut out = BTreeMap::new();
    let Ok(entries) = std::fs::read_dir(metrics_dir(run_dir)) else {
        return out;
    };
    for entry in entries.flatten() {
        let records = read_metrics_file(&entry.path());
        if let Some(first) = records.first() {
            out.insert(first.worker.clone(), records);
        }
    }
    out
}

/// Frames-per-second over one trainer's records within a window: the counter
/// delta divided by the time delta.
pub fn fps_between(records: &[MetricsRecord], counter: &str) -> f64 {
    let points: Vec<(u64, u64)> = records
        .iter()
        .filter_map(|r| r.counters.get(counter).map(|c| (r.unix_ms, *c)))
        .collect();
    if points.len() < 2 {
        return 0.0;
    }
    let (t0, c0) = points[0];
    let (t1, c1) = points[points.len() - 1];
    if t1 <= t0 {
        return 0.0;
    }
    (c1 - c0) as f64 / ((t1 - t0) as f64 / 1000.0)
}

/// Experiment-level FPS: summed trainer frame counters over the run span.
/// Returns (fps, total_frames, duration_s); fps * duration == total frames
/// by construction.
pub fn aggregate_fps(all: &BTreeMap<String, Vec<MetricsRecord>>) -> (f64, u64, f64) {
    let mut total_frames = 0u64;
    let mut t_min = u64::MAX;
    let mut t_max = 0u64;
    for (worker, records) in all {
        if !worker.starts_with("trainer") {
            continue;
        }
        for r in records {
            t_min = t_min.min(r.unix_ms);
            t_max = t_max.max(r.unix_ms);
        }
        if let Some(last) = records.last() {
            total_frames += last.counters.get("frames_trained").copied().unwrap_or(0);
        }
    }
    if t_max <= t_min {
        return (0.0, total_frames, 0.0);
    }
    let duration = (t_max - t_min) as f64 / 1000.0;
    (total_frames as f64 / duration, total_frames, duration)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn write_read_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = MetricsWriter::open(dir.path(), "trainer:0").unwrap();
        for i in 0..3u64 {
            let mut counters = BTreeMap::new();
            counters.insert("frames_trained".into(), i * 512);
            w.append(&MetricsRecord {
                unix_ms: 1000 + i * 1000,
                worker: "trainer:0".into(),
                counters,
                gauges: BTreeMap::new(),
                episode_returns: vec![],
            })
            .unwrap();
        }
        let records = read_metrics_file(&metrics_path(dir.path(), "trainer:0"));
        assert_eq!(records.len(), 3);
        // 1024 frames over 2 seconds.
        assert!((fps_between(&records, "frames_trained") - 512.0).abs() < 1e-9);

        let all = read_all_metrics(dir.path());
        let (fps, frames, duration) = aggregate_fps(&all);
        assert_eq!(frames, 1024);
        assert!((fps * duration - frames as f64).abs() < 1e-6);
    }

    #[test]
    fn trainer_example_arithmetic() {
        // 2 batches of 32 trajectories x 8 steps in one second = 512 FPS.
        let mut records = Vec::new();
        for i in 0..2u64 {
            let mut counters = BTreeMap::new();
            counters.insert("frames_trained".into(), i * 512);
            records.push(MetricsRecord {
                unix_ms: 5000 + i * 1000,
                worker: "trainer:0".into(),
                counters,
                gauges: BTreeMap::new(),
                episode_returns: vec![],
            });
        }
        assert!((fps_between(&records, "frames_trained") - 512.0).abs() < 1e-9);
        // No activity: zero.
        assert_eq!(fps_between(&records[..1], "frames_trained"), 0.0);
    }
}
