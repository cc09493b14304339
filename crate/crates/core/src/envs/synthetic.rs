//! A pure throughput instrument: every step occupies the caller for a
//! configured wall-clock duration and returns a zero observation with zero
//! reward. Episodes truncate after `episode_len` steps.

use std::time::Duration;

use crate::model::config::ParamMap;
use crate::model::types::{ActionId, ObservationVector};
use crate::util::timing::occupy;

use super::{param_u64, AgentStep, EnvError, EnvStepResult, Environment, EnvironmentSpec};

#[derive(Debug)]
pub struct SyntheticDelay {
    spec: EnvironmentSpec,
    step_time: Duration,
    steps: usize,
    finished: bool,
}

impl SyntheticDelay {
    pub fn from_params(params: &ParamMap) -> Result<Self, EnvError> {
        let step_time_us = param_u64(params, "step_time_us", 2_000)?;
        let obs_dim = param_u64(params, "obs_dim", 8)? as usize;
        let episode_len = param_u64(params, "episode_len", 100)? as usize;
        let frame_skip = param_u64(params, "frame_skip", 1)?.max(1) as u32;
        if obs_dim == 0 || episode_len == 0 {
            return Err(EnvError::BadParameter(
                "obs_dim and episode_len must be positive".into(),
            ));
        }
        Ok(Self {
            spec: EnvironmentSpec {
                name: "synthetic_delay".into(),
                observation_dim: obs_dim,
                action_count: 2,
                agent_count: 1,
                max_episode_steps: episode_len,
                frame_skip,
            },
            step_time: Duration::from_micros(step_time_us),
            steps: 0,
            finished: true,
        })
    }

    fn zero_step(&self, truncated: bool) -> EnvStepResult {
        EnvStepResult {
            agents: vec![Some(AgentStep {
                obs: ObservationVector::zeros(self.spec.observation_dim),
                reward: 0.0,
                done: false,
                truncated,
            })],
        }
    }
}

impl Environment for SyntheticDelay {
    fn spec(&self) -> &EnvironmentSpec {
        &self.spec
    }

    fn reset(&mut self, _seed: u64) -> EnvStepResult {
        self.steps = 0;
        self.finished = false;
        self.zero_step(false)
    }

    fn step(&mut self, actions: &[Option<ActionId>]) -> Result<EnvStepResult, EnvError> {
        if self.finished || actions.len() != 1 || actions[0].is_none() {
            return Err(EnvError::WrongAgentSet(0));
        }
        occupy(self.step_time);
        self.steps += 1;
        let truncated = self.steps >= self.spec.max_episode_steps;
        self.finished = truncated;
        Ok(self.zero_step(truncated))
    }
}
