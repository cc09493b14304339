//! Policy serving: batched rollout over an inference stream plus parameter
//! freshness via the parameter service.
//!
//! [`PolicyEngine`] is the transport-agnostic half: it owns the network,
//! samples actions with the counter-based key (seed, client id, request id),
//! and rate-limits version checks. The standalone policy worker drives it
//! over a shared-memory or socket server; an actor in inline mode drives the
//! same engine over an in-process table, which is why the two paths produce
//! identical outputs for identical inputs and parameters.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use crate::learning::{MlpPolicy, RolloutRequest};
use crate::model::types::{InferenceResponse, PollResult};
use crate::params::{ParamClient, ServiceError};
use crate::streams::{InferenceServer, StreamError};
use crate::util::timing::unix_millis;

/// One aggregated sample of "responses served at version v around time t".
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct VersionTracePoint {
    pub unix_ms: u64,
    pub version: u64,
    pub count: u64,
}

pub struct PolicyEngine {
    pub policy: MlpPolicy,
    pub policy_name: String,
    seed: u64,
    param_client: Option<ParamClient>,
    pull_interval: Duration,
    last_version_check: Option<Instant>,
    pub served_requests: u64,
    pub served_batches: u64,
    pub stale_serves: u64,
    pub batch_histogram: BTreeMap<usize, u64>,
    pub version_trace: Vec<VersionTracePoint>,
}

impl PolicyEngine {
    pub fn new(
        policy: MlpPolicy,
        policy_name: String,
        seed: u64,
        param_client: Option<ParamClient>,
        pull_interval: Duration,
    ) -> Self {
        Self {
            policy,
            policy_name,
            seed,
            param_client,
            pull_interval,
            last_version_check: None,
            served_requests: 0,
            served_batches: 0,
            stale_serves: 0,
            batch_histogram: BTreeMap::new(),
            version_trace: Vec::new(),
        }
    }

    /// Unconditionally fetch the newest parameters. Used at configure time
    /// so every worker starts from the seeded version.
    pub fn force_pull(&mut self) -> Result<bool, ServiceError> {
        let Some(client) = self.param_client.as_mut() else {
            return Ok(false);
        };
        match client.pull(&self.policy_name, self.policy.version)? {
            Some(blob) => {
                self.policy
                    .load_blob(&blob)
                    .map_err(ServiceError::Protocol)?;
                Ok(true)
            }
            None => Ok(false),
        }
    }

    /// Rate-limited version check; swaps parameters between batches when the
    /// service has a newer blob. Unreachable service keeps the stale
    /// parameters serving and is counted, not fatal.
    pub fn maybe_pull(&mut self) -> bool {
        if self.param_client.is_none() {
            return false;
        }
        let due = match self.last_version_check {
            None => true,
            Some(at) => at.elapsed() >= self.pull_interval,
        };
        if !due {
            return false;
        }
        self.last_version_check = Some(Instant::now());
        let have = self.policy.version;
        let name = self.policy_name.clone();
        let client = self.param_client.as_mut().unwrap();
        match client.head(&name) {
            Ok(Some(v)) if v > have => match client.pull(&name, have) {
                Ok(Some(blob)) => match self.policy.load_blob(&blob) {
                    Ok(()) => true,
                    Err(_) => {
                        self.stale_serves += 1;
                        false
                    }
                },
                _ => {
                    self.stale_serves += 1;
                    false
                }
            },
            Ok(_) => false,
            Err(_) => {
                self.stale_serves += 1;
                false
            }
        }
    }

    /// Flush once, run one batched rollout, respond to every request.
    pub fn serve_once(
        &mut self,
        server: &mut InferenceServer,
        max_batch: usize,
        max_wait: Duration,
    ) -> Result<PollResult, StreamError> {
        let requests = server.flush(max_batch, max_wait)?;
        if requests.is_empty() {
            return Ok(PollResult::idle());
        }
        let rows: Vec<RolloutRequest<'_>> = requests
            .iter()
            .map(|r| RolloutRequest {
                client_id: r.client_id,
                request_id: r.request_id,
                obs: &r.obs,
                deterministic: r.deterministic,
            })
            .collect();
        let outputs = self.policy.rollout(self.seed, &rows);
        let version = self.policy.version;
        let responses: Vec<InferenceResponse> = requests
            .iter()
            .zip(outputs)
            .map(|(req, out)| InferenceResponse {
                client_id: req.client_id,
                request_id: req.request_id,
                action: out.action,
                policy_state: out.policy_state,
                log_prob: out.log_prob,
                value_pred: out.value_pred,
                policy_version: version,
            })
            .collect();
        server.respond(&responses)?;

        let n = requests.len();
        self.served_requests += n as u64;
        self.served_batches += 1;
        *self.batch_histogram.entry(n).or_insert(0) += 1;
        self.record_trace(version, n as u64);
        Ok(PollResult {
            sample_count: n as u64,
            batch_count: 1,
        })
    }

    fn record_trace(&mut self, version: u64, count: u64) {
        let now = unix_millis();
        if let Some(last) = self.version_trace.last_mut() {
            if last.version == version && now.saturating_sub(last.unix_ms) < 100 {
                last.count += count;
                return;
            }
        }
        if self.version_trace.len() < 1_000_000 {
            self.version_trace.push(VersionTracePoint {
                unix_ms: now,
                version,
                count,
            });
        }
    }
}

/// The standalone policy worker: one engine serving one stream endpoint.
pub struct PolicyWorker {
    index: u32,
    engine: PolicyEngine,
    server: InferenceServer,
    max_batch: usize,
    max_wait: Duration,
    param_service: Option<std::net::SocketAddr>,
    connected: bool,
}

pub struct PolicyBuild<'a> {
    pub experiment: &'a str,
    pub seed: u64,
    pub index: u32,
    pub slice: &'a crate::model::validate::PolicySlice,
    pub streams: &'a [crate::model::validate::PlannedStream],
    pub models: &'a std::collections::BTreeMap<String, crate::model::validate::ModelSpec>,
    pub param_service: Option<std::net::SocketAddr>,
}

impl PolicyWorker {
    pub fn configure(
        b: PolicyBuild<'_>,
    ) -> Result<
        (Self, crate::control::worker::BoundEndpoints),
        crate::control::worker::WorkerError,
    > {
        use crate::control::worker::{AddressBook, BoundEndpoints, WorkerError};
        use crate::model::config::Transport;
        use crate::streams::shm::region_name;

        let info = b
            .streams
            .iter()
            .find(|s| s.name == b.slice.stream)
            .ok_or_else(|| {
                WorkerError::Config(format!("stream `{}` missing from plan", b.slice.stream))
            })?;
        let mut bound = BoundEndpoints::default();
        let server = match info.transport {
            Transport::SharedMemory => InferenceServer::create_shm(
                &region_name(b.experiment, &info.name, "srv", b.slice.server_index),
                (b.slice.slot_count as usize).max(1),
                info.payload_capacity as usize,
            )?,
            Transport::Socket => {
                let (server, addr) = InferenceServer::bind_socket("127.0.0.1:0")?;
                bound.entries.push((
                    AddressBook::inference_key(&info.name, b.slice.server_index),
                    addr,
                ));
                server
            }
            Transport::Inline => {
                return Err(WorkerError::Config(
                    "inline streams have no standalone policy workers".into(),
                ))
            }
        };
        let model = b.models.get(&b.slice.policy).ok_or_else(|| {
            WorkerError::Config(format!("no model spec for policy `{}`", b.slice.policy))
        })?;
        let policy = MlpPolicy::init(
            model,
            crate::util::rng::mix_key(&[b.seed, crate::util::digest::fnv1a(b.slice.policy.as_bytes())]),
        );
        let engine = PolicyEngine::new(
            policy,
            b.slice.policy.clone(),
            b.seed,
            None,
            Duration::from_millis(b.slice.pull_interval_ms),
        );
        Ok((
            Self {
                index: b.index,
                engine,
                server,
                max_batch: b.slice.max_batch_size as usize,
                max_wait: Duration::from_micros(b.slice.max_wait_us),
                param_service: b.param_service,
                connected: false,
            },
            bound,
        ))
    }
}

impl crate::control::worker::Worker for PolicyWorker {
    fn kind(&self) -> String {
        "policy".into()
    }

    fn index(&self) -> u32 {
        self.index
    }

    fn connect(
        &mut self,
        book: &crate::control::worker::AddressBook,
    ) -> Result<(), crate::control::worker::WorkerError> {
        if let Some(addr) = book.param_service.or(self.param_service) {
            let client = ParamClient::connect(addr)
                .map_err(crate::control::worker::WorkerError::Service)?;
            self.engine.param_client = Some(client);
            self.engine
                .force_pull()
                .map_err(crate::control::worker::WorkerError::Service)?;
        }
        self.connected = true;
        Ok(())
    }

    fn poll(&mut self) -> Result<PollResult, crate::control::worker::WorkerError> {
        assert!(self.connected, "poll before connect");
        self.engine.maybe_pull();
        self.engine
            .serve_once(&mut self.server, self.max_batch, self.max_wait)
            .map_err(crate::control::worker::WorkerError::Stream)
    }

    fn metrics(&mut self) -> crate::control::worker::MetricsSnapshot {
        let mut m = crate::control::worker::MetricsSnapshot::default();
        m.counters
            .insert("requests_served".into(), self.engine.served_requests);
        m.counters
            .insert("batches_served".into(), self.engine.served_batches);
        m.counters
            .insert("stale_serves".into(), self.engine.stale_serves);
        m.counters
            .insert("version".into(), self.engine.policy.version);
        if self.engine.served_batches > 0 {
            m.gauges.insert(
                "batch_size_mean".into(),
                self.engine.served_requests as f64 / self.engine.served_batches as f64,
            );
        }
        m
    }

    fn final_report(&mut self) -> serde_json::Value {
        serde_json::json!({
            "version_trace": self.engine.version_trace,
            "batch_histogram": self.engine.batch_histogram,
        })
    }

    fn shutdown(&mut self) {}
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::types::ObservationVector;
    use crate::model::validate::ModelSpec;
    use crate::params::{ParamServer, ParameterStore};
    use crate::streams::inference::ClientBinding;
    use crate::streams::inline::InlineTable;
    use crate::streams::InferenceClient;
    use std::sync::Arc;

    fn spec() -> ModelSpec {
        ModelSpec {
            obs_dim: 3,
            action_count: 4,
            hidden: vec![8],
        }
    }

    fn engine_no_service(seed: u64) -> PolicyEngine {
        PolicyEngine::new(
            MlpPolicy::init(&spec(), 11),
            "rl".into(),
            seed,
            None,
            Duration::from_millis(100),
        )
    }

    #[test]
    fn serves_batches_and_counts() {
        let table = InlineTable::new(4);
        let bindings: Vec<ClientBinding> = (0..4)
            .map(|i| ClientBinding {
                client_id: i,
                slot: i as u32,
            })
            .collect();
        let mut client = InferenceClient::inline(table.clone(), &bindings);
        let mut server = InferenceServer::inline(table);
        let mut engine = engine_no_service(7);

        for i in 0..4u64 {
            client
                .post(i, "a", ObservationVector::new(vec![0.1 * i as f64; 3]), None, false)
                .unwrap();
        }
        let r = engine
            .serve_once(&mut server, 16, Duration::from_millis(1))
            .unwrap();
        assert_eq!(r.sample_count, 4);
        assert_eq!(r.batch_count, 1);
        assert_eq!(engine.batch_histogram.get(&4), Some(&1));
        for i in 0..4u64 {
            let resp = client.poll(i).unwrap().unwrap();
            assert!((resp.action.index as usize) < 4);
            assert!(resp.log_prob <= 0.0);
        }
    }

    #[test]
    fn empty_flush_is_idle() {
        let table = InlineTable::new(1);
        let mut server = InferenceServer::inline(table);
        let mut engine = engine_no_service(7);
        let r = engine
            .serve_once(&mut server, 4, Duration::from_millis(1))
            .unwrap();
        assert!(r.is_idle());
    }

    #[test]
    fn batched_rollout_equals_single_rollouts_greedy() {
        // One batch of B deterministic requests must match B singleton
        // batches with the same parameters.
        let mut engine_a = engine_no_service(3);
        let mut engine_b = engine_no_service(3);

        let table_a = InlineTable::new(8);
        let bindings: Vec<ClientBinding> = (0..8)
            .map(|i| ClientBinding {
                client_id: i,
                slot: i as u32,
            })
            .collect();
        let mut client_a = InferenceClient::inline(table_a.clone(), &bindings);
        let mut server_a = InferenceServer::inline(table_a);
        for i in 0..8u64 {
            client_a
                .post(
                    i,
                    "a",
                    ObservationVector::new(vec![i as f64 * 0.3, -0.2, 0.9]),
                    None,
                    true,
                )
                .unwrap();
        }
        engine_a
            .serve_once(&mut server_a, 8, Duration::from_millis(1))
            .unwrap();
        let batch_responses: Vec<_> = (0..8u64)
            .map(|i| client_a.poll(i).unwrap().unwrap())
            .collect();

        let table_b = InlineTable::new(8);
        let mut client_b = InferenceClient::inline(table_b.clone(), &bindings);
        let mut server_b = InferenceServer::inline(table_b);
        for i in 0..8u64 {
            client_b
                .post(
                    i,
                    "a",
                    ObservationVector::new(vec![i as f64 * 0.3, -0.2, 0.9]),
                    None,
                    true,
                )
                .unwrap();
            engine_b
                .serve_once(&mut server_b, 1, Duration::from_millis(1))
                .unwrap();
        }
        for i in 0..8u64 {
            let single = client_b.poll(i).unwrap().unwrap();
            let batched = &batch_responses[i as usize];
            assert_eq!(single.action, batched.action);
            assert_eq!(single.log_prob, batched.log_prob);
            assert_eq!(single.value_pred, batched.value_pred);
        }
    }

    #[test]
    fn pull_swaps_between_batches() {
        let store = Arc::new(ParameterStore::new());
        let mut seeded = MlpPolicy::init(&spec(), 1);
        seeded.version = 1;
        store.push(seeded.to_blob("rl")).unwrap();
        let handle = ParamServer::start("127.0.0.1:0", store.clone()).unwrap();

        let mut engine = PolicyEngine::new(
            MlpPolicy::init(&spec(), 99),
            "rl".into(),
            7,
            Some(ParamClient::connect(handle.addr).unwrap()),
            Duration::from_millis(0),
        );
        assert!(engine.force_pull().unwrap());
        assert_eq!(engine.policy.version, 1);
        assert_eq!(engine.policy.flat_params(), seeded.flat_params());

        // Same version: no pull.
        assert!(!engine.maybe_pull());

        // Newer version appears.
        let mut v2 = seeded.clone();
        v2.version = 2;
        store.push(v2.to_blob("rl")).unwrap();
        std::thread::sleep(Duration::from_millis(1));
        assert!(engine.maybe_pull());
        assert_eq!(engine.policy.version, 2);
    }
}
