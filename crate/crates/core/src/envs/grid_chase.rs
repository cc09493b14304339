//! Grid pursuit: a seeker chases a hider on an N-by-N board.
//!
//! Two controlled agents (0 = seeker, 1 = hider) move simultaneously, one
//! cell per step or stay put. When the seeker lands on the hider's cell the
//! episode ends with reward +1 for the seeker and -1 for the hider; all other
//! steps are zero-reward. Hitting the step limit truncates with no reward.

use crate::model::config::ParamMap;
use crate::model::types::{ActionId, ObservationVector};
use crate::util::rng::CounterRng;

use super::{param_u64, AgentStep, EnvError, EnvStepResult, Environment, EnvironmentSpec};

const ACTIONS: [(i64, i64); 5] = [(0, 0), (0, -1), (0, 1), (-1, 0), (1, 0)];

#[derive(Debug)]
pub struct GridChase {
    spec: EnvironmentSpec,
    grid: i64,
    seeker: (i64, i64),
    hider: (i64, i64),
    steps: usize,
    finished: bool,
}

impl GridChase {
    pub fn from_params(params: &ParamMap) -> Result<Self, EnvError> {
        let grid = param_u64(params, "grid_size", 5)? as i64;
        if grid < 2 {
            return Err(EnvError::BadParameter("grid_size must be >= 2".into()));
        }
        let max_episode_steps = param_u64(params, "max_episode_steps", 64)? as usize;
        Ok(Self {
            spec: EnvironmentSpec {
                name: "grid_chase".into(),
                observation_dim: 4,
                action_count: ACTIONS.len(),
                agent_count: 2,
                max_episode_steps,
                frame_skip: 1,
            },
            grid,
            seeker: (0, 0),
            hider: (0, 0),
            steps: 0,
            finished: true,
        })
    }

    fn obs_for(&self, agent: usize) -> ObservationVector {
        let norm = (self.grid - 1).max(1) as f64;
        let (own, other) = if agent == 0 {
            (self.seeker, self.hider)
        } else {
            (self.hider, self.seeker)
        };
        ObservationVector::new(vec![
            own.0 as f64 / norm,
            own.1 as f64 / norm,
            other.0 as f64 / norm,
            other.1 as f64 / norm,
        ])
    }

    fn result(&self, rewards: [f64; 2], done: bool, truncated: bool) -> EnvStepResult {
        EnvStepResult {
            agents: (0..2)
                .map(|i| {
                    Some(AgentStep {
                        obs: self.obs_for(i),
                        reward: rewards[i],
                        done,
                        truncated,
                    })
                })
                .collect(),
        }
    }

    fn apply(&self, pos: (i64, i64), action: ActionId) -> (i64, i64) {
        let (dx, dy) = ACTIONS[action.index as usize % ACTIONS.len()];
        (
            (pos.0 + dx).clamp(0, self.grid - 1),
            (pos.1 + dy).clamp(0, self.grid - 1),
        )
    }
}

impl Environment for GridChase {
    fn spec(&self) -> &EnvironmentSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> EnvStepResult {
        let mut rng = CounterRng::from_key(&[seed, 0x6368_6173_65]);
        self.seeker = (
            rng.below(self.grid as u64) as i64,
            rng.below(self.grid as u64) as i64,
        );
        loop {
            self.hider = (
                rng.below(self.grid as u64) as i64,
                rng.below(self.grid as u64) as i64,
            );
            if self.hider != self.seeker {
                break;
            }
        }
        self.steps = 0;
        self.finished = false;
        self.result([0.0, 0.0], false, false)
    }

    fn step(&mut self, actions: &[Option<ActionId>]) -> Result<EnvStepResult, EnvError> {
        if self.finished {
            return Err(EnvError::WrongAgentSet(0));
        }
        if actions.len() != 2 {
            return Err(EnvError::WrongAgentSet(actions.len()));
        }
        let seeker_act = actions[0].ok_or(EnvError::WrongAgentSet(0))?;
        let hider_act = actions[1].ok_or(EnvError::WrongAgentSet(1))?;

        self.seeker = self.apply(self.seeker, seeker_act);
        self.hider = self.apply(self.hider, hider_act);
        self.steps += 1;

        let caught = self.seeker == self.hider;
        let truncated = !caught && self.steps >= self.spec.max_episode_steps;
        self.finished = caught || truncated;
        if caught {
            Ok(self.result([1.0, -1.0], true, false))
        } else {
            Ok(self.result([0.0, 0.0], false, truncated))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env() -> GridChase {
        GridChase::from_params(&Default::default()).unwrap()
    }

    #[test]
    fn reset_deterministic_and_distinct() {
        let mut a = env();
        let mut b = env();
        assert_eq!(a.reset(7), b.reset(7));
        assert_ne!(a.seeker, a.hider);
    }

    #[test]
    fn catch_gives_opposite_unit_rewards() {
        let mut e = env();
        e.reset(11);
        // Drive both agents toward (0,0); the seeker will land on the hider
        // once both are cornered.
        for _ in 0..20 {
            let r = e
                .step(&[Some(ActionId::new(1)), Some(ActionId::new(1))])
                .and_then(|r| {
                    if r.episode_over() {
                        return Ok(r);
                    }
                    e.step(&[Some(ActionId::new(3)), Some(ActionId::new(3))])
                })
                .unwrap();
            if r.episode_over() {
                let s0 = r.agents[0].as_ref().unwrap();
                let s1 = r.agents[1].as_ref().unwrap();
                assert_eq!(s0.reward, 1.0);
                assert_eq!(s1.reward, -1.0);
                assert!(s0.done && s1.done);
                return;
            }
        }
        panic!("cornering never caught the hider");
    }

    #[test]
    fn truncation_after_limit() {
        let mut params = ParamMap::new();
        params.insert("max_episode_steps".into(), crate::model::config::ParamValue::Int(3));
        params.insert("grid_size".into(), crate::model::config::ParamValue::Int(8));
        let mut e = GridChase::from_params(&params).unwrap();
        e.reset(5);
        // Hold both agents still; they start apart so no catch happens.
        let stay = [Some(ActionId::new(0)), Some(ActionId::new(0))];
        e.step(&stay).unwrap();
        e.step(&stay).unwrap();
        let r = e.step(&stay).unwrap();
        assert!(r.agents[0].as_ref().unwrap().truncated);
        assert_eq!(r.agents[0].as_ref().unwrap().reward, 0.0);
    }

    #[test]
    fn wrong_agent_set_rejected() {
        let mut e = env();
        e.reset(1);
        assert!(e.step(&[Some(ActionId::new(0)), None]).is_err());
        assert!(e.step(&[Some(ActionId::new(0))]).is_err());
    }

    #[test]
    fn observations_normalized() {
        let mut e = env();
        let r = e.reset(9);
        for a in r.agents.iter().flatten() {
            for v in &a.obs.values {
                assert!((0.0..=1.0).contains(v));
            }
        }
    }
}
