//! The controller: runs a whole experiment end to end.
//!
//! Five phases: validate the config into a plan, allocate process slots via
//! the local scheduler, launch and configure workers (collecting their bound
//! endpoints), start everyone with the assembled address book, then watch
//! metrics until a stop condition fires and tear the experiment down in
//! producer-before-consumer order.

use std::collections::{BTreeMap, VecDeque};
use std::io;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::learning::MlpPolicy;
use crate::model::config::{ExperimentConfig, StreamKind, Transport};
use crate::model::validate::{validate, ConfigError, PlannedWorker, ValidatedPlan};
use crate::model::wire::WireEncode;
use crate::params::{ParamServer, ParameterStore};
use crate::streams::shm::{region_name, unlink_region};
use crate::util::digest::fnv1a;
use crate::util::rng::mix_key;
use crate::util::timing::unix_millis;

use super::metrics::{aggregate_fps, read_all_metrics, MetricsRecord};
use super::rpc::{send_msg, ConfigurePayload, MsgReader, Reply, Verb, RPC_TIMEOUT};
use super::scheduler::{Scheduler, WorkerProc};
use super::worker::AddressBook;

#[derive(Debug)]
pub enum RunError {
    Config(Vec<ConfigError>),
    Runtime(String),
}

impl std::fmt::Display for RunError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RunError::Config(errors) => {
                writeln!(f, "configuration invalid ({} errors):", errors.len())?;
                for e in errors {
                    writeln!(f, "  - {e}")?;
                }
                Ok(())
            }
            RunError::Runtime(msg) => write!(f, "runtime failure: {msg}"),
        }
    }
}

impl std::error::Error for RunError {}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: String,
    pub run_dir: PathBuf,
    pub stop_reason: String,
    pub wall_clock_s: f64,
    pub frames_trained: u64,
    pub fps: f64,
    pub worker_states: BTreeMap<String, String>,
    pub failures: Vec<String>,
    pub final_counters: BTreeMap<String, BTreeMap<String, u64>>,
}

impl ExperimentReport {
    pub fn all_exited(&self) -> bool {
        self.worker_states.values().all(|s| s == "exited")
    }
}

struct ManagedWorker {
    planned: PlannedWorker,
    proc: WorkerProc,
    conn: Option<TcpStream>,
    reader: MsgReader,
    state: String,
    failure: Option<String>,
}

impl ManagedWorker {
    fn ident(&self) -> String {
        self.planned.ident()
    }
}

/// Resolve the run directory root: `SRL_RUN_DIR` or `./runs`.
pub fn run_root() -> PathBuf {
    std::env::var_os("SRL_RUN_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport, RunError> {
    let plan = validate(cfg).map_err(RunError::Config)?;
    run_planned(&plan)
}

pub fn run_planned(plan: &ValidatedPlan) -> Result<ExperimentReport, RunError> {
    if plan.stop.frames.is_none()
        && plan.stop.wall_clock_s.is_none()
        && plan.stop.return_threshold.is_none()
    {
        return Err(RunError::Runtime(
            "no stop condition configured (stop.frames, stop.wall_clock_s, or stop.return_threshold)"
                .into(),
        ));
    }

    let run_dir = run_root().join(format!("{}-{}", plan.experiment, unix_millis()));
    std::fs::create_dir_all(run_dir.join("metrics"))
        .and_then(|_| std::fs::create_dir_all(run_dir.join("final")))
        .and_then(|_| std::fs::create_dir_all(run_dir.join("params")))
        .map_err(|e| RunError::Runtime(format!("run dir: {e}")))?;
    std::fs::write(
        run_dir.join("plan.json"),
        serde_json::to_vec_pretty(plan).unwrap_or_default(),
    )
    .ok();

    // Parameter service, seeded with version 1 of every policy so all
    // workers start from identical parameters.
    let store = Arc::new(ParameterStore::new());
    for (policy, model) in &plan.models {
        let mut seeded = MlpPolicy::init(model, mix_key(&[plan.seed, fnv1a(policy.as_bytes())]));
        seeded.version = 1;
        store
            .push(seeded.to_blob(policy))
            .map_err(|e| RunError::Runtime(format!("seeding parameters: {e}")))?;
    }
    let mut service = ParamServer::start(&plan.param_service_bind, store.clone())
        .map_err(|e| RunError::Runtime(format!("parameter service: {e}")))?;

    let outcome = Orchestrator::new(plan, &run_dir, service.addr, store.clone()).run();

    // Persist publish logs and final parameters regardless of outcome.
    persist_service_state(&store, &run_dir);
    service.stop();
    sweep_regions(plan);

    outcome
}

fn persist_service_state(store: &ParameterStore, run_dir: &Path) {
    let mut log_lines = String::new();
    for policy in store.policy_names() {
        for e in store.publish_log(&policy) {
            log_lines.push_str(
                &serde_json::to_string(&serde_json::json!({
                    "policy": policy,
                    "version": e.version,
                    "unix_ms": e.unix_ms,
                }))
                .unwrap_or_default(),
            );
            log_lines.push('\n');
        }
        if let Ok(Some(blob)) = store.pull(&policy, 0) {
            std::fs::write(
                run_dir.join("params").join(format!("{policy}.bin")),
                blob.encode(),
            )
            .ok();
        }
    }
    std::fs::write(run_dir.join("publishes.jsonl"), log_lines).ok();
}

/// Unlink every shared-memory region the plan could have created.
fn sweep_regions(plan: &ValidatedPlan) {
    for s in &plan.streams {
        if s.transport != Transport::SharedMemory {
            continue;
        }
        let (role, count) = match s.kind {
            StreamKind::Inference => ("srv", s.servers),
            StreamKind::Sample => ("cons", s.servers),
        };
        for i in 0..count.max(1) {
            unlink_region(&region_name(&plan.experiment, &s.name, role, i));
        }
    }
    // Thread-backed runs may have registered inline queues.
    for s in &plan.streams {
        if s.transport == Transport::Inline && s.kind == StreamKind::Sample {
            for i in 0..s.servers.max(1) {
                crate::streams::inline::unregister_queue(&plan.experiment, &s.name, i);
            }
        }
    }
}

struct Orchestrator<'a> {
    plan: &'a ValidatedPlan,
    run_dir: &'a Path,
    service_addr: SocketAddr,
    store: Arc<ParameterStore>,
    workers: Vec<ManagedWorker>,
    started_at: Instant,
}

impl<'a> Orchestrator<'a> {
    fn new(
        plan: &'a ValidatedPlan,
        run_dir: &'a Path,
        service_addr: SocketAddr,
        store: Arc<ParameterStore>,
    ) -> Self {
        Self {
            plan,
            run_dir,
            service_addr,
            store,
            workers: Vec::new(),
            started_at: Instant::now(),
        }
    }

    fn run(mut self) -> Result<ExperimentReport, RunError> {
        let result = self.launch_and_monitor();
        let (stop_reason, mut failures) = match result {
            Ok(reason) => (reason, Vec::new()),
            Err(e) => ("failure".to_string(), vec![e]),
        };
        failures.extend(self.teardown());
        Ok(self.build_report(stop_reason, failures))
    }

    fn launch_and_monitor(&mut self) -> Result<String, String> {
        let listener =
            TcpListener::bind("127.0.0.1:0").map_err(|e| format!("control listener: {e}"))?;
        listener.set_nonblocking(true).ok();
        let control_addr = listener.local_addr().map_err(|e| e.to_string())?;

        let scheduler = Scheduler::new(&self.plan.scheduler)?;
        for planned in &self.plan.workers {
            let proc = scheduler.spawn(
                control_addr,
                &planned.kind,
                planned.index,
                planned.slot,
            )?;
            self.workers.push(ManagedWorker {
                planned: planned.clone(),
                proc,
                conn: None,
                reader: MsgReader::new(),
                state: "spawned".into(),
                failure: None,
            });
        }

        // Collect hellos.
        let deadline = Instant::now() + Duration::from_secs(20);
        let mut pending = self.workers.len();
        while pending > 0 {
            match listener.accept() {
                Ok((mut conn, _)) => {
                    conn.set_nodelay(true).ok();
                    conn.set_nonblocking(false).ok();
                    conn.set_read_timeout(Some(RPC_TIMEOUT)).ok();
                    let hello: Reply =
                        super::rpc::recv_msg(&mut conn).map_err(|e| format!("hello: {e}"))?;
                    let Reply::Hello { kind, index } = hello else {
                        return Err("expected hello".into());
                    };
                    let w = self
                        .workers
                        .iter_mut()
                        .find(|w| w.planned.kind == kind && w.planned.index == index)
                        .ok_or_else(|| format!("unexpected worker {kind}:{index}"))?;
                    w.conn = Some(conn);
                    pending -= 1;
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                    if Instant::now() >= deadline {
                        return Err(format!("{pending} workers never dialed in"));
                    }
                    for w in self.workers.iter_mut() {
                        if w.conn.is_none() && !w.proc.is_alive() {
                            return Err(format!("worker {} died before hello", w.ident()));
                        }
                    }
                    std::thread::sleep(Duration::from_millis(10));
                }
                Err(e) => return Err(format!("accept: {e}")),
            }
        }

        // Configure all workers, gathering their bound endpoints.
        let mut book = AddressBook {
            entries: BTreeMap::new(),
            param_service: Some(self.service_addr),
        };
        for i in 0..self.workers.len() {
            let payload = ConfigurePayload {
                experiment: self.plan.experiment.clone(),
                seed: self.plan.seed,
                worker: self.workers[i].planned.clone(),
                streams: self.plan.streams.clone(),
                models: self.plan.models.clone(),
                param_service: Some(self.service_addr),
                run_dir: self.run_dir.to_string_lossy().into_owned(),
                metrics_interval_ms: 250,
            };
            let conn = self.workers[i].conn.as_mut().unwrap();
            send_msg(conn, &Verb::Configure(Box::new(payload)))
                .map_err(|e| format!("configure send: {e}"))?;
        }
        for w in self.workers.iter_mut() {
            let conn = w.conn.as_mut().unwrap();
            match super::rpc::recv_msg::<Reply>(conn) {
                Ok(Reply::Configured { bound }) => {
                    w.state = "configured".into();
                    for (key, addr) in bound.entries {
                        book.entries.insert(key, addr);
                    }
                }
                Ok(Reply::Failed { message }) | Ok(Reply::Rejected { message }) => {
                    return Err(format!("{} failed to configure: {message}", w.ident()));
                }
                Ok(other) => return Err(format!("{}: unexpected {other:?}", w.ident())),
                Err(e) => return Err(format!("{} configure ack: {e}", w.ident())),
            }
        }

        // Start everyone: send all verbs first (trainer meshes need their
        // peers started too), then collect acks.
        for w in self.workers.iter_mut() {
            let conn = w.conn.as_mut().unwrap();
            send_msg(conn, &Verb::Start(Box::new(book.clone())))
                .map_err(|e| format!("start send: {e}"))?;
        }
        for w in self.workers.iter_mut() {
            let conn = w.conn.as_mut().unwrap();
            conn.set_read_timeout(Some(Duration::from_secs(30))).ok();
            match super::rpc::recv_msg::<Reply>(conn) {
                Ok(Reply::Ack) => w.state = "running".into(),
                Ok(Reply::Failed { message }) => {
                    return Err(format!("{} failed to start: {message}", w.ident()))
                }
                Ok(other) => return Err(format!("{}: unexpected {other:?}", w.ident())),
                Err(e) => return Err(format!("{} start ack: {e}", w.ident())),
            }
            conn.set_nonblocking(true).ok();
        }

        self.monitor()
    }

    /// Watch stop conditions and worker health each tick.
    fn monitor(&mut self) -> Result<String, String> {
        let stop = self.plan.stop.clone();
        let window = stop.return_window.max(1);
        let mut recent_returns: VecDeque<f64> = VecDeque::with_capacity(window);
        let mut seen_returns: BTreeMap<String, usize> = BTreeMap::new();
        let mut last_snapshot: BTreeMap<String, u64> = BTreeMap::new();
        loop {
            std::thread::sleep(Duration::from_millis(250));

            // Periodic parameter snapshots for offline evaluation.
            if self.plan.snapshot_every > 0 {
                for policy in self.store.policy_names() {
                    let head = self.store.head(&policy).unwrap_or(0);
                    let last = last_snapshot.get(&policy).copied().unwrap_or(0);
                    if head >= last + self.plan.snapshot_every {
                        if let Ok(Some(blob)) = self.store.pull(&policy, 0) {
                            std::fs::write(
                                self.run_dir
                                    .join("params")
                                    .join(format!("{policy}.v{}.bin", blob.version)),
                                blob.encode(),
                            )
                            .ok();
                            last_snapshot.insert(policy.clone(), blob.version);
                        }
                    }
                }
            }

            // Unsolicited failures and process deaths.
            for w in self.workers.iter_mut() {
                if let Some(conn) = w.conn.as_mut() {
                    loop {
                        match w.reader.poll::<Reply>(conn) {
                            Ok(Some(Reply::Failed { message })) => {
                                w.failure = Some(message.clone());
                                w.state = "failed".into();
                            }
                            Ok(Some(_)) => {}
                            Ok(None) => break,
                            Err(_) => break,
                        }
                    }
                }
                if w.state == "running" && !w.proc.is_alive() {
                    w.failure = Some("process exited unexpectedly".into());
                    w.state = "failed".into();
                }
            }
            if let Some(w) = self.workers.iter().find(|w| w.state == "failed") {
                return Err(format!(
                    "worker {} failed: {}",
                    w.ident(),
                    w.failure.clone().unwrap_or_default()
                ));
            }

            // Metrics-driven stop conditions.
            let all = read_all_metrics(self.run_dir);
            let mut frames = 0u64;
            for (worker, records) in &all {
                if worker.starts_with("trainer") {
                    if let Some(last) = records.last() {
                        frames += last.counters.get("frames_trained").copied().unwrap_or(0);
                    }
                }
                // Fold any new episode returns into the rolling window.
                let seen = seen_returns.entry(worker.clone()).or_insert(0);
                let mut count = 0usize;
                for r in records {
                    for ret in &r.episode_returns {
                        count += 1;
                        if count > *seen {
                            if recent_returns.len() == window {
                                recent_returns.pop_front();
                            }
                            recent_returns.push_back(*ret);
                        }
                    }
                }
                *seen = (*seen).max(count);
            }

            if let Some(budget) = stop.frames {
                if frames >= budget {
                    return Ok(format!("frame budget reached ({frames} >= {budget})"));
                }
            }
            if let Some(limit) = stop.wall_clock_s {
                if self.started_at.elapsed().as_secs_f64() >= limit {
                    return Ok(format!("wall clock budget reached ({limit}s)"));
                }
            }
            if let Some(threshold) = stop.return_threshold {
                if recent_returns.len() >= window {
                    let mean: f64 =
                        recent_returns.iter().sum::<f64>() / recent_returns.len() as f64;
                    if mean >= threshold {
                        return Ok(format!(
                            "return threshold reached (mean {mean:.2} >= {threshold})"
                        ));
                    }
                }
            }
        }
    }

    /// Stop workers in producer-before-consumer order, then reap processes.
    fn teardown(&mut self) -> Vec<String> {
        let mut failures = Vec::new();
        let order = |kind: &str| match kind {
            "actor" => 0,
            "policy" => 2,
            "trainer" => 3,
            _ => 1, // custom workers sit between producers and consumers
        };
        let mut indices: Vec<usize> = (0..self.workers.len()).collect();
        indices.sort_by_key(|&i| order(&self.workers[i].planned.kind));

        for &i in &indices {
            let w = &mut self.workers[i];
            if w.state == "failed" || w.conn.is_none() {
                continue;
            }
            let conn = w.conn.as_mut().unwrap();
            if send_msg(conn, &Verb::Exit).is_err() {
                w.state = "exited".into();
                continue;
            }
            // Await the ack, tolerating already-queued frames.
            conn.set_nonblocking(false).ok();
            conn.set_read_timeout(Some(RPC_TIMEOUT)).ok();
            let deadline = Instant::now() + RPC_TIMEOUT;
            loop {
                match super::rpc::recv_msg::<Reply>(conn) {
                    Ok(Reply::Ack) => {
                        w.state = "exited".into();
                        break;
                    }
                    Ok(Reply::Failed { message }) => {
                        w.state = "failed".into();
                        w.failure = Some(message.clone());
                        failures.push(format!("{} during exit: {message}", w.ident()));
                        break;
                    }
                    Ok(_) => {}
                    Err(_) => {
                        // Connection closed while exiting counts as exited.
                        w.state = "exited".into();
                        break;
                    }
                }
                if Instant::now() >= deadline {
                    failures.push(format!("{}: exit ack timeout", w.ident()));
                    break;
                }
            }
        }

        for w in self.workers.iter_mut() {
            if !w.proc.join_within(Duration::from_secs(10)) {
                failures.push(format!("{}: did not exit; killed", w.ident()));
                w.proc.kill();
            }
        }
        failures
    }

    fn build_report(&mut self, stop_reason: String, failures: Vec<String>) -> ExperimentReport {
        let all = read_all_metrics(self.run_dir);
        let (fps, frames_trained, _) = aggregate_fps(&all);
        let final_counters: BTreeMap<String, BTreeMap<String, u64>> = all
            .iter()
            .filter_map(|(worker, records)| {
                records
                    .last()
                    .map(|r: &MetricsRecord| (worker.clone(), r.counters.clone()))
            })
            .collect();
        let worker_states = self
            .workers
            .iter()
            .map(|w| (w.ident(), w.state.clone()))
            .collect();
        let report = ExperimentReport {
            experiment: self.plan.experiment.clone(),
            run_dir: self.run_dir.to_path_buf(),
            stop_reason,
            wall_clock_s: self.started_at.elapsed().as_secs_f64(),
            frames_trained,
            fps,
            worker_states,
            failures,
            final_counters,
        };
        std::fs::write(
            self.run_dir.join("report.json"),
            serde_json::to_vec_pretty(&report).unwrap_or_default(),
        )
        .ok();
        report
    }
}
