//! Built-in environments and the environment interface actors drive.
//!
//! Three environments ship with the runtime: `grid_chase` (multi-agent grid
//! pursuit), `pole_balance` (classic 4-dimensional balance control), and
//! `synthetic_delay` (a configurable-latency throughput instrument). All are
//! deterministic given a reset seed.

mod grid_chase;
mod pole_balance;
mod synthetic;

pub use grid_chase::GridChase;
pub use pole_balance::PoleBalance;
pub use synthetic::SyntheticDelay;

use thiserror::Error;

use crate::model::config::{EnvConfig, ParamMap};
use crate::model::types::{ActionId, ObservationVector};

/// Static description of an environment: dimensions, agent count, horizon.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EnvironmentSpec {
    pub name: String,
    pub observation_dim: usize,
    pub action_count: usize,
    pub agent_count: usize,
    pub max_episode_steps: usize,
    pub frame_skip: u32,
}

/// What one agent saw after a step (or reset).
#[derive(Debug, Clone, PartialEq)]
pub struct AgentStep {
    pub obs: ObservationVector,
    pub reward: f64,
    pub done: bool,
    pub truncated: bool,
}

/// Per-agent step outcome; `None` marks an agent skipping this step.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvStepResult {
    pub agents: Vec<Option<AgentStep>>,
}

impl EnvStepResult {
    /// Indices of agents that produced an observation and now await actions.
    pub fn pending_agents(&self) -> Vec<usize> {
        self.agents
            .iter()
            .enumerate()
            .filter_map(|(i, a)| match a {
                Some(s) if !s.done && !s.truncated => Some(i),
                _ => None,
            })
            .collect()
    }

    /// True when no agent can act anymore (episode over).
    pub fn episode_over(&self) -> bool {
        self.agents
            .iter()
            .all(|a| a.as_ref().map(|s| s.done || s.truncated).unwrap_or(true))
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EnvError {
    #[error("action supplied for non-pending agent {0}")]
    WrongAgentSet(usize),
    #[error("unknown environment `{0}`")]
    UnknownEnvironment(String),
    #[error("bad environment parameter: {0}")]
    BadParameter(String),
}

/// A stepped, resettable simulation hosting one or more agents.
pub trait Environment: Send {
    fn spec(&self) -> &EnvironmentSpec;

    /// Start a new episode. Deterministic for a given seed.
    fn reset(&mut self, seed: u64) -> EnvStepResult;

    /// Advance one step. `actions[i]` must be `Some` exactly for the agents
    /// marked pending by the previous result.
    fn step(&mut self, actions: &[Option<ActionId>]) -> Result<EnvStepResult, EnvError>;
}

/// Resolve the spec for a named environment without constructing it.
pub fn resolve_spec(cfg: &EnvConfig) -> Result<EnvironmentSpec, EnvError> {
    make_env(cfg).map(|e| e.spec().clone())
}

/// Construct a built-in environment from its config entry.
pub fn make_env(cfg: &EnvConfig) -> Result<Box<dyn Environment>, EnvError> {
    match cfg.name.as_str() {
        "grid_chase" => Ok(Box::new(GridChase::from_params(&cfg.params)?)),
        "pole_balance" => Ok(Box::new(PoleBalance::from_params(&cfg.params)?)),
        "synthetic_delay" => Ok(Box::new(SyntheticDelay::from_params(&cfg.params)?)),
        other => Err(EnvError::UnknownEnvironment(other.to_string())),
    }
}

pub(crate) fn param_u64(params: &ParamMap, key: &str, default: u64) -> Result<u64, EnvError> {
    match params.get(key) {
        None => Ok(default),
        Some(v) => v
            .as_u64()
            .ok_or_else(|| EnvError::BadParameter(format!("{key} must be a non-negative integer"))),
    }
}
