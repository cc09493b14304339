//! Declarative experiment configuration.
//!
//! A config file wires workers to streams the same way the runtime does:
//! actors name the streams they post to, agent specs route each agent index
//! to one inference stream and one sample stream, policy workers serve a
//! named stream, trainers consume one. Files are TOML with keys matching the
//! field names here; see `configs/` for working examples.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// A scalar environment/worker parameter as written in a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Bool(bool),
    Int(i64),
    Float(f64),
    Str(String),
}

impl ParamValue {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            ParamValue::Int(v) => Some(*v as f64),
            ParamValue::Float(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_u64(&self) -> Option<u64> {
        match self {
            ParamValue::Int(v) if *v >= 0 => Some(*v as u64),
            _ => None,
        }
    }

    pub fn as_bool(&self) -> Option<bool> {
        match self {
            ParamValue::Bool(v) => Some(*v),
            _ => None,
        }
    }
}

pub type ParamMap = BTreeMap<String, ParamValue>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamKind {
    Inference,
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transport {
    SharedMemory,
    Socket,
    Inline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropPolicy {
    DropOldest,
    Block,
}

/// Definition of one stream: its kind, its transport, and queue behavior for
/// sample streams. `policy` names the policy an inline inference stream
/// serves inside the actor process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    pub name: String,
    pub kind: StreamKind,
    pub transport: Transport,
    #[serde(default)]
    pub policy: Option<String>,
    /// Parameter refresh cadence for the in-actor engine (inline inference
    /// streams only).
    #[serde(default = "default_pull_interval_ms")]
    pub pull_interval_ms: u64,
    #[serde(default = "default_stream_capacity")]
    pub capacity: usize,
    #[serde(default = "default_drop_policy")]
    pub drop_policy: DropPolicy,
}

fn default_stream_capacity() -> usize {
    64
}

fn default_drop_policy() -> DropPolicy {
    DropPolicy::DropOldest
}

/// Routes a set of agent indices (full-match pattern over the decimal index)
/// to positions in the owning actor's stream lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub index_pattern: String,
    pub inference_stream_idx: usize,
    pub sample_stream_idx: usize,
    #[serde(default)]
    pub deterministic_action: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub name: String,
    #[serde(default)]
    pub params: ParamMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActorConfig {
    pub env: EnvConfig,
    #[serde(default = "default_ring_size")]
    pub ring_size: usize,
    #[serde(default = "default_chunk_length")]
    pub chunk_length: usize,
    pub agent_specs: Vec<AgentSpec>,
    pub inference_streams: Vec<String>,
    pub sample_streams: Vec<String>,
    /// Number of identical actor workers stamped out from this entry.
    #[serde(default = "default_count")]
    pub count: usize,
}

fn default_ring_size() -> usize {
    2
}

fn default_chunk_length() -> usize {
    32
}

fn default_count() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyWorkerConfig {
    pub inference_stream: String,
    pub policy: String,
    /// 0 means "as many as there are connected clients".
    #[serde(default)]
    pub max_batch_size: usize,
    #[serde(default = "default_max_wait_us")]
    pub max_wait_us: u64,
    #[serde(default = "default_pull_interval_ms")]
    pub pull_interval_ms: u64,
    #[serde(default = "default_count")]
    pub count: usize,
}

fn default_max_wait_us() -> u64 {
    2_000
}

fn default_pull_interval_ms() -> u64 {
    100
}

/// Training algorithm selection plus hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AlgorithmConfig {
    Ppo(PpoParams),
    /// Sleeps for a fixed duration per step; used by throughput harnesses.
    Synthetic(SyntheticTrainParams),
}

impl Default for AlgorithmConfig {
    fn default() -> Self {
        AlgorithmConfig::Ppo(PpoParams::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoParams {
    pub clip_ratio: f64,
    pub discount: f64,
    pub gae_lambda: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub lr: f64,
    pub minibatch_count: usize,
    pub normalize_advantages: bool,
    /// "adam" or "sgd"; SGD exists for exactness-oriented tests.
    pub optimizer: String,
    pub max_grad_norm: f64,
    /// Linearly decay the learning rate to 10% over this many environment
    /// frames (counted across the whole trainer group); 0 disables decay.
    pub anneal_frames: u64,
}

impl Default for PpoParams {
    fn default() -> Self {
        Self {
            clip_ratio: 0.2,
            discount: 0.99,
            gae_lambda: 0.95,
            value_coef: 0.5,
            entropy_coef: 0.01,
            lr: 3e-4,
            minibatch_count: 1,
            normalize_advantages: true,
            optimizer: "adam".into(),
            max_grad_norm: 0.0,
            anneal_frames: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticTrainParams {
    /// Wall-clock cost of one synthetic gradient step, microseconds.
    pub step_us: u64,
}

impl Default for SyntheticTrainParams {
    fn default() -> Self {
        Self { step_us: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub policy: String,
    pub sample_stream: String,
    pub batch_size: usize,
    #[serde(default = "default_prefetch")]
    pub prefetch: bool,
    /// Publish parameters every N steps; 0 disables publishing.
    #[serde(default = "default_publish_every")]
    pub publish_every: u64,
    /// Buffer capacity in trajectories; 0 means 4 * batch_size.
    #[serde(default)]
    pub buffer_capacity: usize,
    #[serde(default)]
    pub algorithm: AlgorithmConfig,
    #[serde(default = "default_count")]
    pub count: usize,
}

fn default_prefetch() -> bool {
    true
}

fn default_publish_every() -> u64 {
    1
}

/// Architecture of a named policy's network. Input/output widths come from
/// the environments routed to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { hidden: vec![64, 64] }
    }
}

/// A worker kind registered through the extension seam, wired to streams by
/// name like the built-ins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CustomWorkerConfig {
    pub kind: String,
    #[serde(default)]
    pub consume_streams: Vec<String>,
    #[serde(default)]
    pub produce_streams: Vec<String>,
    #[serde(default)]
    pub params: ParamMap,
    #[serde(default = "default_count")]
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ParameterServiceConfig {
    pub bind: String,
    /// Save a parameter snapshot to the run directory every N published
    /// versions (0 disables periodic snapshots; the final blob is always
    /// saved).
    pub snapshot_every: u64,
}

impl Default for ParameterServiceConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:0".into(),
            snapshot_every: 0,
        }
    }
}

/// Experiment stop condition; the first satisfied clause stops the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StopCondition {
    /// Stop after this many environment frames have been trained.
    pub frames: Option<u64>,
    pub wall_clock_s: Option<f64>,
    /// Stop when the mean return over `return_window` recent episodes
    /// reaches this value.
    pub return_threshold: Option<f64>,
    pub return_window: usize,
}

impl Default for StopCondition {
    fn default() -> Self {
        Self {
            frames: None,
            wall_clock_s: None,
            return_threshold: None,
            return_window: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulerBackend {
    /// One OS process per worker (the default).
    Process,
    /// One thread per worker inside the controller process.
    Thread,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SchedulerConfig {
    pub backend: SchedulerBackend,
    pub pin_cores: bool,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            backend: SchedulerBackend::Process,
            pin_cores: false,
        }
    }
}

/// The whole experiment: workers, streams, models, service, stop condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    #[serde(default)]
    pub actors: Vec<ActorConfig>,
    #[serde(default)]
    pub policies: Vec<PolicyWorkerConfig>,
    #[serde(default)]
    pub trainers: Vec<TrainerConfig>,
    pub streams: Vec<StreamConfig>,
    #[serde(default)]
    pub custom_workers: Vec<CustomWorkerConfig>,
    #[serde(default)]
    pub models: BTreeMap<String, ModelConfig>,
    #[serde(default)]
    pub parameter_service: ParameterServiceConfig,
    #[serde(default)]
    pub stop: StopCondition,
    #[serde(default)]
    pub scheduler: SchedulerConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, String> {
        toml::from_str(s).map_err(|e| e.to_string())
    }

    pub fn from_toml_file(path: &std::path::Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("reading {}: {e}", path.display()))?;
        Self::from_toml_str(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_toml_parses_with_defaults() {
        let cfg = ExperimentConfig::from_toml_str(
            r#"
            name = "mini"
            seed = 7

            [[streams]]
            name = "inf0"
            kind = "inference"
            transport = "shared_memory"

            [[streams]]
            name = "spl0"
            kind = "sample"
            transport = "shared_memory"

            [[actors]]
            env = { name = "pole_balance" }
            inference_streams = ["inf0"]
            sample_streams = ["spl0"]
            [[actors.agent_specs]]
            index_pattern = ".*"
            inference_stream_idx = 0
            sample_stream_idx = 0

            [[policies]]
            inference_stream = "inf0"
            policy = "rl"

            [[trainers]]
            policy = "rl"
            sample_stream = "spl0"
            batch_size = 16
            "#,
        )
        .unwrap();
        assert_eq!(cfg.actors[0].ring_size, 2);
        assert_eq!(cfg.actors[0].chunk_length, 32);
        assert_eq!(cfg.policies[0].max_wait_us, 2_000);
        assert_eq!(cfg.trainers[0].publish_every, 1);
        assert!(cfg.trainers[0].prefetch);
        assert!(matches!(
            cfg.trainers[0].algorithm,
            AlgorithmConfig::Ppo(_)
        ));
        assert_eq!(cfg.streams[0].capacity, 64);
    }

    #[test]
    fn algorithm_variants_parse() {
        let ppo: AlgorithmConfig =
            toml::from_str("kind = \"ppo\"\nlr = 0.001").unwrap();
        match ppo {
            AlgorithmConfig::Ppo(p) => assert_eq!(p.lr, 0.001),
            _ => panic!("expected ppo"),
        }
        let syn: AlgorithmConfig =
            toml::from_str("kind = \"synthetic\"\nstep_us = 5000").unwrap();
        match syn {
            AlgorithmConfig::Synthetic(s) => assert_eq!(s.step_us, 5_000),
            _ => panic!("expected synthetic"),
        }
    }
}
