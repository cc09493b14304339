//! Policy evaluation: run episodes against a built-in environment and
//! report the mean return of agent 0.

use crate::envs::{make_env, EnvError};
use crate::model::config::EnvConfig;
use crate::model::types::{ActionId, ParameterBlob};
use crate::model::validate::ModelSpec;

use super::mlp::{MlpPolicy, RolloutRequest};

/// Mean return of agent 0 over `episodes` episodes. For multi-agent
/// environments, the remaining agents follow the same policy.
pub fn evaluate(
    policy: &MlpPolicy,
    env_cfg: &EnvConfig,
    episodes: u64,
    seed_base: u64,
    deterministic: bool,
) -> Result<f64, EnvError> {
    let mut env = make_env(env_cfg)?;
    let agent_count = env.spec().agent_count;
    let mut request_id = 0u64;
    let mut total = 0.0;
    for ep in 0..episodes {
        let mut result = env.reset(seed_base.wrapping_add(ep));
        loop {
            let pending = result.pending_agents();
            if pending.is_empty() {
                break;
            }
            let mut actions: Vec<Option<ActionId>> = vec![None; agent_count];
            for agent in &pending {
                let obs = &result.agents[*agent].as_ref().unwrap().obs;
                request_id += 1;
                let out = &policy.rollout(
                    0,
                    &[RolloutRequest {
                        client_id: *agent as u64,
                        request_id,
                        obs,
                        deterministic,
                    }],
                )[0];
                actions[*agent] = Some(out.action);
            }
            result = env.step(&actions)?;
            if let Some(step) = result.agents[0].as_ref() {
                total += step.reward;
            }
            if result.episode_over() {
                break;
            }
        }
    }
    Ok(total / episodes as f64)
}

/// Load a parameter blob (e.g. a run's saved `params/{policy}.bin`) into a
/// fresh policy of the given shape.
pub fn policy_from_blob(spec: &ModelSpec, blob: &ParameterBlob) -> Result<MlpPolicy, String> {
    let mut policy = MlpPolicy::init(spec, 0);
    policy.load_blob(blob)?;
    Ok(policy)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_policy_short_episodes() {
        let spec = ModelSpec {
            obs_dim: 4,
            action_count: 2,
            hidden: vec![8],
        };
        let policy = MlpPolicy::init(&spec, 3);
        let mean = evaluate(
            &policy,
            &EnvConfig {
                name: "pole_balance".into(),
                params: Default::default(),
            },
            10,
            100,
            false,
        )
        .unwrap();
        assert!(mean > 5.0 && mean < 200.0, "implausible return {mean}");
    }
}
