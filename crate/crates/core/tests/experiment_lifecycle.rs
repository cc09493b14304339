//! Controller and lifecycle behavior, exercised with thread-backed workers:
//! clean runs, refusal of bad configs, run-to-run determinism, the custom
//! worker seam, and the verb state machine.

use std::collections::BTreeMap;
use std::net::TcpListener;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use srl_core::control::controller::{run_experiment, RunError};
use srl_core::control::metrics::read_all_metrics;
use srl_core::control::registry::register_worker_kind;
use srl_core::control::rpc::{recv_msg, send_msg, ConfigurePayload, Reply, Verb};
use srl_core::control::worker::{
    AddressBook, BoundEndpoints, MetricsSnapshot, Worker, WorkerError,
};
use srl_core::model::config::ExperimentConfig;
use srl_core::model::types::PollResult;
use srl_core::model::validate::{CustomSlice, PlannedWorker, WorkerSlice};

fn thread_cfg(name: &str, extra: &str) -> ExperimentConfig {
    ExperimentConfig::from_toml_str(&format!(
        r#"
name = "{name}"
seed = 3

[scheduler]
backend = "thread"

{extra}

[models.rl]
hidden = [16]

[[streams]]
name = "inf0"
kind = "inference"
transport = "inline"
policy = "rl"

[[streams]]
name = "spl0"
kind = "sample"
transport = "shared_memory"
capacity = 8
drop_policy = "block"

[[actors]]
env = {{ name = "pole_balance" }}
ring_size = 1
chunk_length = 16
inference_streams = ["inf0"]
sample_streams = ["spl0"]
[[actors.agent_specs]]
index_pattern = ".*"
inference_stream_idx = 0
sample_stream_idx = 0

[[trainers]]
policy = "rl"
sample_stream = "spl0"
batch_size = 4
buffer_capacity = 8
prefetch = false
publish_every = 0
algorithm = {{ kind = "ppo", lr = 1e-3, normalize_advantages = false }}
"#
    ))
    .unwrap()
}

#[test]
fn minimal_run_reaches_budget_and_exits_clean() {
    let tmp = tempfile::tempdir().unwrap();
    std::env::set_var("SRL_RUN_DIR", tmp.path());
    let cfg = thread_cfg("lc-smoke", "[stop]\nframes = 10000");
    let report = run_experiment(&cfg).unwrap();
    assert!(report.stop_reason.contains("frame budget"), "{}", report.stop_reason);
    assert!(report.frames_trained >= 10_000);
    assert!(report.all_exited(), "{:?}", report.worker_states);
    assert!(report.failures.is_empty(), "{:?}", report.failures);

    // FPS ledger: reported rate integrates back to the frame counter.
    let all = read_all_metrics(&report.run_dir);
    let (fps, frames, duration) = srl_core::control::metrics::aggregate_fps(&all);
    assert_eq!(frames, report.frames_trained);
    assert!((fps * duration - frames as f64).abs() < 1e-6);
}

#[test]
fn invalid_config_refused_before_launch() {
    let cfg = {
        let mut c = thread_cfg("lc-bad", "[stop]\nframes = 1000");
        c.actors[0].sample_streams = vec!["rwd_inf".into()];
        c
    };
    match run_experiment(&cfg) {
        Err(RunError::Config(errors)) => {
            assert!(!errors.is_empty());
        }
        other => panic!("expected config refusal, got {other:?}"),
    }
}

#[test]
fn missing_stop_condition_is_an_error() {
    let cfg = thread_cfg("lc-nostop", "");
    match run_experiment(&cfg) {
        Err(RunError::Runtime(msg)) => assert!(msg.contains("stop condition"), "{msg}"),
        other => panic!("expected runtime refusal, got {other:?}"),
    }
}

/// Same seed, same config, parameters frozen at v1: the trained-loss traces
/// of two runs must agree on their common prefix.
#[test]
fn duplicate_runs_share_loss_trace() {
    let run = |name: &str| -> Vec<f64> {
        let tmp = tempfile::tempdir().unwrap();
        std::env::set_var("SRL_RUN_DIR", tmp.path());
        let cfg = thread_cfg(name, "[stop]\nframes = 6000");
        let report = run_experiment(&cfg).unwrap();
        assert!(report.all_exited());
        let final_json: serde_json::Value = serde_json::from_slice(
            &std::fs::read(report.run_dir.join("final").join("trainer-0.json")).unwrap(),
        )
        .unwrap();
        final_json["loss_log"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_f64().unwrap())
            .collect()
    };
    let a = run("lc-det-a");
    let b = run("lc-det-b");
    let common = a.len().min(b.len());
    assert!(common > 10, "too little overlap: {} vs {}", a.len(), b.len());
    assert_eq!(a[..common], b[..common], "loss traces diverged");
}

/// A pass-through buffer worker between actors and trainer leaves the
/// deterministic training trace unchanged.
#[test]
fn buffer_worker_hop_preserves_training() {
    let direct = {
        let tmp = tempfile::tempdir().unwrap();
        std::env::set_var("SRL_RUN_DIR", tmp.path());
        let cfg = thread_cfg("lc-direct", "[stop]\nframes = 5000");
        let report = run_experiment(&cfg).unwrap();
        assert!(report.all_exited());
        let v: serde_json::Value = serde_json::from_slice(
            &std::fs::read(report.run_dir.join("final").join("trainer-0.json")).unwrap(),
        )
        .unwrap();
        v["loss_log"]
            .as_array()
            .unwrap()
            .iter()
            .map(|x| x.as_f64().unwrap())
            .collect::<Vec<f64>>()
    };

    // Same experiment with the trajectories routed through a buffer hop:
    // actors -> up -> buffer -> spl0 -> trainer.
    let buffered = {
        let tmp = tempfile::tempdir().unwrap();
        std::env::set_var("SRL_RUN_DIR", tmp.path());
        let mut cfg = thread_cfg("lc-buffered", "[stop]\nframes = 5000");
        cfg.streams.push(srl_core::model::config::StreamConfig {
            name: "up".into(),
            kind: srl_core::model::config::StreamKind::Sample,
            transport: srl_core::model::config::Transport::SharedMemory,
            policy: None,
            pull_interval_ms: 100,
            capacity: 8,
            drop_policy: srl_core::model::config::DropPolicy::Block,
        });
        cfg.actors[0].sample_streams = vec!["up".into()];
        cfg.custom_workers.push(srl_core::model::config::CustomWorkerConfig {
            kind: "buffer".into(),
            consume_streams: vec!["up".into()],
            produce_streams: vec!["spl0".into()],
            params: Default::default(),
            count: 1,
        });
        let report = run_experiment(&cfg).unwrap();
        assert!(report.all_exited(), "{:?}", report.worker_states);
        assert!(
            report.final_counters.get("buffer:0").map(|c| c["moved"]).unwrap_or(0) > 0,
            "buffer worker moved nothing"
        );
        let v: serde_json::Value = serde_json::from_slice(
            &std::fs::read(report.run_dir.join("final").join("trainer-0.json")).unwrap(),
        )
        .unwrap();
        v["loss_log"]
            .as_array()
            .unwrap()
            .iter()
            .map(|x| x.as_f64().unwrap())
            .collect::<Vec<f64>>()
    };

    let common = direct.len().min(buffered.len());
    assert!(common > 10);
    assert_eq!(
        direct[..common],
        buffered[..common],
        "buffer hop changed the training trace"
    );
}

// ---- Custom worker seam + verb state machine over the raw protocol. ----

struct NapWorker {
    polls: Arc<AtomicU64>,
}

impl Worker for NapWorker {
    fn kind(&self) -> String {
        "nap".into()
    }
    fn index(&self) -> u32 {
        0
    }
    fn connect(&mut self, _book: &AddressBook) -> Result<(), WorkerError> {
        Ok(())
    }
    fn poll(&mut self) -> Result<PollResult, WorkerError> {
        self.polls.fetch_add(1, Ordering::Relaxed);
        std::thread::sleep(std::time::Duration::from_micros(200));
        Ok(PollResult {
            sample_count: 1,
            batch_count: 0,
        })
    }
    fn metrics(&mut self) -> MetricsSnapshot {
        let mut m = MetricsSnapshot::default();
        m.counters
            .insert("polls".into(), self.polls.load(Ordering::Relaxed));
        m
    }
    fn shutdown(&mut self) {}
}

static NAP_POLLS: std::sync::OnceLock<Arc<AtomicU64>> = std::sync::OnceLock::new();

fn nap_factory(
    _p: &ConfigurePayload,
) -> Result<(Box<dyn Worker>, BoundEndpoints), WorkerError> {
    let polls = NAP_POLLS.get_or_init(|| Arc::new(AtomicU64::new(0))).clone();
    Ok((Box::new(NapWorker { polls }), BoundEndpoints::default()))
}

fn nap_payload(run_dir: &std::path::Path) -> ConfigurePayload {
    ConfigurePayload {
        experiment: "lc-verbs".into(),
        seed: 0,
        worker: PlannedWorker {
            kind: "nap".into(),
            index: 0,
            slot: 0,
            slice: WorkerSlice::Custom(CustomSlice {
                kind: "nap".into(),
                params: Default::default(),
                consumes: vec![],
                produces: vec![],
            }),
        },
        streams: vec![],
        models: BTreeMap::new(),
        param_service: None,
        run_dir: run_dir.to_string_lossy().into_owned(),
        metrics_interval_ms: 50,
    }
}

#[test]
fn verb_state_machine_over_control_channel() {
    register_worker_kind("nap", nap_factory).ok();
    let tmp = tempfile::tempdir().unwrap();

    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let worker = std::thread::spawn(move || srl_core::control::worker_main(addr, "nap", 0));

    let (mut conn, _) = listener.accept().unwrap();
    let hello: Reply = recv_msg(&mut conn).unwrap();
    assert!(matches!(hello, Reply::Hello { .. }));

    // CONFIGURE then START.
    send_msg(&mut conn, &Verb::Configure(Box::new(nap_payload(tmp.path())))).unwrap();
    let r: Reply = recv_msg(&mut conn).unwrap();
    assert!(matches!(r, Reply::Configured { .. }), "{r:?}");
    send_msg(&mut conn, &Verb::Start(Box::new(AddressBook::default()))).unwrap();
    let r: Reply = recv_msg(&mut conn).unwrap();
    assert!(matches!(r, Reply::Ack));

    // Run a little, then PAUSE; poll count must stop advancing.
    std::thread::sleep(std::time::Duration::from_millis(50));
    send_msg(&mut conn, &Verb::Pause).unwrap();
    let r: Reply = recv_msg(&mut conn).unwrap();
    assert!(matches!(r, Reply::Ack));
    let polls = NAP_POLLS.get().unwrap();
    std::thread::sleep(std::time::Duration::from_millis(30));
    let at_pause = polls.load(Ordering::Relaxed);
    assert!(at_pause > 0);
    std::thread::sleep(std::time::Duration::from_millis(60));
    assert_eq!(polls.load(Ordering::Relaxed), at_pause, "polled while paused");

    // PAUSE while paused is rejected; START resumes.
    send_msg(&mut conn, &Verb::Pause).unwrap();
    let r: Reply = recv_msg(&mut conn).unwrap();
    assert!(matches!(r, Reply::Rejected { .. }), "{r:?}");
    send_msg(&mut conn, &Verb::Start(Box::new(AddressBook::default()))).unwrap();
    let r: Reply = recv_msg(&mut conn).unwrap();
    assert!(matches!(r, Reply::Ack));
    std::thread::sleep(std::time::Duration::from_millis(50));
    assert!(polls.load(Ordering::Relaxed) > at_pause, "did not resume");

    // EXIT acks and the worker returns cleanly.
    send_msg(&mut conn, &Verb::Exit).unwrap();
    let r: Reply = recv_msg(&mut conn).unwrap();
    assert!(matches!(r, Reply::Ack));
    assert!(worker.join().unwrap().is_ok());

    // Metrics appeared in the run dir like for any built-in.
    let records = srl_core::control::metrics::read_metrics_file(
        &srl_core::control::metrics::metrics_path(tmp.path(), "nap:0"),
    );
    assert!(!records.is_empty());
    assert!(records.last().unwrap().counters["polls"] > 0);
}

#[test]
fn start_before_configure_is_rejected() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let worker = std::thread::spawn(move || srl_core::control::worker_main(addr, "nap", 1));
    let (mut conn, _) = listener.accept().unwrap();
    let _hello: Reply = recv_msg(&mut conn).unwrap();
    send_msg(&mut conn, &Verb::Start(Box::new(AddressBook::default()))).unwrap();
    let r: Reply = recv_msg(&mut conn).unwrap();
    assert!(matches!(r, Reply::Rejected { .. }), "{r:?}");
    assert!(worker.join().unwrap().is_err());
}
