//! Pole balancing: keep an inverted pendulum upright by nudging a cart.
//!
//! State is (cart position, cart velocity, pole angle, pole angular
//! velocity); two actions push the cart left or right with a fixed force.
//! Reward is +1 per step; the episode ends when the pole tips past 12
//! degrees, the cart leaves the track, or the step limit is hit.

use crate::model::config::ParamMap;
use crate::model::types::{ActionId, ObservationVector};
use crate::util::rng::CounterRng;

use super::{param_u64, AgentStep, EnvError, EnvStepResult, Environment, EnvironmentSpec};

const GRAVITY: f64 = 9.8;
const CART_MASS: f64 = 1.0;
const POLE_MASS: f64 = 0.1;
const TOTAL_MASS: f64 = CART_MASS + POLE_MASS;
const POLE_HALF_LENGTH: f64 = 0.5;
const POLE_MASS_LENGTH: f64 = POLE_MASS * POLE_HALF_LENGTH;
const FORCE_MAG: f64 = 10.0;
const TAU: f64 = 0.02;
const ANGLE_LIMIT: f64 = 12.0 * std::f64::consts::PI / 180.0;
const POSITION_LIMIT: f64 = 2.4;

#[derive(Debug)]
pub struct PoleBalance {
    spec: EnvironmentSpec,
    state: [f64; 4],
    steps: usize,
    finished: bool,
}

impl PoleBalance {
    pub fn from_params(params: &ParamMap) -> Result<Self, EnvError> {
        let max_episode_steps = param_u64(params, "max_episode_steps", 500)? as usize;
        Ok(Self {
            spec: EnvironmentSpec {
                name: "pole_balance".into(),
                observation_dim: 4,
                action_count: 2,
                agent_count: 1,
                max_episode_steps,
                frame_skip: 1,
            },
            state: [0.0; 4],
            steps: 0,
            finished: true,
        })
    }

    fn observation(&self) -> ObservationVector {
        ObservationVector::new(self.state.to_vec())
    }

    /// One Euler step of the standard cart-pole dynamics.
    pub fn dynamics(state: &[f64; 4], force: f64) -> [f64; 4] {
        let [x, x_dot, theta, theta_dot] = *state;
        let (sin_t, cos_t) = theta.sin_cos();
        let temp = (force + POLE_MASS_LENGTH * theta_dot * theta_dot * sin_t) / TOTAL_MASS;
        let theta_acc = (GRAVITY * sin_t - cos_t * temp)
            / (POLE_HALF_LENGTH * (4.0 / 3.0 - POLE_MASS * cos_t * cos_t / TOTAL_MASS));
        let x_acc = temp - POLE_MASS_LENGTH * theta_acc * cos_t / TOTAL_MASS;
        [
            x + TAU * x_dot,
            x_dot + TAU * x_acc,
            theta + TAU * theta_dot,
            theta_dot + TAU * theta_acc,
        ]
    }

    fn failed(state: &[f64; 4]) -> bool {
        state[0].abs() > POSITION_LIMIT || state[2].abs() > ANGLE_LIMIT
    }
}

impl Environment for PoleBalance {
    fn spec(&self) -> &EnvironmentSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> EnvStepResult {
        let mut rng = CounterRng::from_key(&[seed, 0x706f_6c65]);
        for v in &mut self.state {
            *v = rng.uniform(-0.05, 0.05);
        }
        self.steps = 0;
        self.finished = false;
        EnvStepResult {
            agents: vec![Some(AgentStep {
                obs: self.observation(),
                reward: 0.0,
                done: false,
                truncated: false,
            })],
        }
    }

    fn step(&mut self, actions: &[Option<ActionId>]) -> Result<EnvStepResult, EnvError> {
        if self.finished || actions.len() != 1 || actions[0].is_none() {
            return Err(EnvError::WrongAgentSet(0));
        }
        let action = actions[0].unwrap();
        let force = if action.index == 1 { FORCE_MAG } else { -FORCE_MAG };
        self.state = Self::dynamics(&self.state, force);
        self.steps += 1;

        let done = Self::failed(&self.state);
        let truncated = !done && self.steps >= self.spec.max_episode_steps;
        self.finished = done || truncated;
        Ok(EnvStepResult {
            agents: vec![Some(AgentStep {
                obs: self.observation(),
                reward: 1.0,
                done,
                truncated,
            })],
        })
    }
}
