//! In-process learning check: PPO on pole balancing must beat the random
//! baseline within a small frame budget. The full solve gate runs in the
//! acceptance suite; this is the quick canary that the loss, advantages,
//! and optimizer wiring actually learn.

use srl_core::envs::{make_env, Environment};
use srl_core::learning::{Adam, MlpPolicy, PpoAlgorithm, RolloutRequest};
use srl_core::model::config::{EnvConfig, PpoParams};
use srl_core::model::types::{SampleBatch, Trajectory, TransitionStep};
use srl_core::model::validate::ModelSpec;

fn pole() -> Box<dyn Environment> {
    make_env(&EnvConfig {
        name: "pole_balance".into(),
        params: Default::default(),
    })
    .unwrap()
}

/// Collect `frames` of experience in fixed-length chunks with proper value
/// bootstraps, exactly as the actor pipeline would.
fn collect(
    policy: &MlpPolicy,
    seed: u64,
    client: u64,
    request_counter: &mut u64,
    env: &mut Box<dyn Environment>,
    episode: &mut u64,
    frames: usize,
    chunk: usize,
) -> (SampleBatch, f64) {
    let mut trajectories = Vec::new();
    let mut steps: Vec<TransitionStep> = Vec::new();
    let mut returns = Vec::new();
    let mut ret_acc = 0.0;

    let mut obs = {
        let r = env.reset(*episode);
        *episode += 1;
        r.agents[0].as_ref().unwrap().obs.clone()
    };
    let mut collected = 0;
    while collected < frames {
        *request_counter += 1;
        let out = &policy.rollout(
            seed,
            &[RolloutRequest {
                client_id: client,
                request_id: *request_counter,
                obs: &obs,
                deterministic: false,
            }],
        )[0];
        let r = env.step(&[Some(out.action)]).unwrap();
        let agent = r.agents[0].as_ref().unwrap();
        ret_acc += agent.reward;
        steps.push(TransitionStep {
            obs: obs.clone(),
            action: out.action,
            reward: agent.reward,
            done: agent.done,
            truncated: agent.truncated,
            log_prob_old: out.log_prob,
            value_pred: out.value_pred,
            policy_version: policy.version,
        });
        collected += 1;

        let terminal = agent.done || agent.truncated;
        if terminal || steps.len() >= chunk {
            let bootstrap = if terminal {
                0.0
            } else {
                // Value of the next state, as the next response would carry.
                *request_counter += 1;
                policy.rollout(
                    seed,
                    &[RolloutRequest {
                        client_id: client,
                        request_id: *request_counter,
                        obs: &agent.obs,
                        deterministic: false,
                    }],
                )[0]
                    .value_pred
            };
            let taken = std::mem::take(&mut steps);
            let frames = taken.len() as u64;
            trajectories.push(Trajectory {
                agent_id: format!("smoke:{client}"),
                policy_name: "rl".into(),
                steps: taken,
                bootstrap_value: bootstrap,
                env_frames: frames,
            });
        }
        if terminal {
            returns.push(ret_acc);
            ret_acc = 0.0;
            obs = {
                let r = env.reset(*episode);
                *episode += 1;
                r.agents[0].as_ref().unwrap().obs.clone()
            };
        } else {
            obs = agent.obs.clone();
        }
    }
    let mean_return = if returns.is_empty() {
        ret_acc
    } else {
        returns.iter().sum::<f64>() / returns.len() as f64
    };
    (SampleBatch::from_trajectories(trajectories), mean_return)
}

fn eval_policy(policy: &MlpPolicy, episodes: u64, seed_base: u64, deterministic: bool) -> f64 {
    let mut env = pole();
    let mut total = 0.0;
    let mut req = 0u64;
    for ep in 0..episodes {
        let mut obs = env.reset(seed_base + ep).agents[0].as_ref().unwrap().obs.clone();
        loop {
            req += 1;
            let out = &policy.rollout(
                0,
                &[RolloutRequest {
                    client_id: 0,
                    request_id: req,
                    obs: &obs,
                    deterministic,
                }],
            )[0];
            let r = env.step(&[Some(out.action)]).unwrap();
            let agent = r.agents[0].as_ref().unwrap();
            total += agent.reward;
            if agent.done || agent.truncated {
                break;
            }
            obs = agent.obs.clone();
        }
    }
    total / episodes as f64
}

#[test]
fn ppo_improves_over_random_baseline_on_pole_balance() {
    for seed in [1u64, 2, 3] {
        let spec = ModelSpec {
            obs_dim: 4,
            action_count: 2,
            hidden: vec![64, 64],
        };
        let policy = MlpPolicy::init(&spec, seed);
        // The random baseline is the stochastic initial policy.
        let baseline = eval_policy(&policy, 20, 1000 + seed, false);

        let mut algo = PpoAlgorithm::new(
            PpoParams {
                lr: std::env::var("SMOKE_LR").ok().and_then(|v| v.parse().ok()).unwrap_or(1e-3),
                minibatch_count: std::env::var("SMOKE_MB").ok().and_then(|v| v.parse().ok()).unwrap_or(1),
                max_grad_norm: std::env::var("SMOKE_CLIP").ok().and_then(|v| v.parse().ok()).unwrap_or(0.0),
                entropy_coef: std::env::var("SMOKE_ENT").ok().and_then(|v| v.parse().ok()).unwrap_or(0.01),
                gae_lambda: std::env::var("SMOKE_LAM").ok().and_then(|v| v.parse().ok()).unwrap_or(0.95),
                value_coef: std::env::var("SMOKE_VC").ok().and_then(|v| v.parse().ok()).unwrap_or(0.5),
                normalize_advantages: std::env::var("SMOKE_NORM").is_ok(),
                ..PpoParams::default()
            },
            policy,
        );
        let mut opt = Adam::new(algo.cfg.lr, algo.policy.param_count());
        let mut env = pole();
        let mut episode = 0u64;
        let mut req = 0u64;
        let mut frames = 0usize;
        let budget: usize = std::env::var("SMOKE_FRAMES").ok().and_then(|v| v.parse().ok()).unwrap_or(50_000);
        let mut train_return = 0.0;
        while frames < budget {
            let batch_steps: usize = std::env::var("SMOKE_BATCH").ok().and_then(|v| v.parse().ok()).unwrap_or(256);
            let (batch, mean_ret) = collect(
                &algo.policy,
                seed,
                0,
                &mut req,
                &mut env,
                &mut episode,
                batch_steps,
                32,
            );
            frames += batch.total_steps();
            train_return = mean_ret;
            let stats = algo.step_local(&batch, &mut opt).unwrap();
            if std::env::var("SMOKE_VERBOSE").is_ok() && frames % 10_000 < batch_steps {
                eprintln!(
                    "  frames {frames:>7} ret {mean_ret:>6.1} loss {:>8.4} v {:>8.3} ent {:.3} kl {:.4} clip {:.3}",
                    stats.loss, stats.value_loss, stats.entropy, stats.approx_kl, stats.clip_fraction
                );
            }
        }

        let trained = eval_policy(&algo.policy, 20, 2000 + seed, false);
        let eval_eps: u64 = std::env::var("SMOKE_EVAL").ok().and_then(|v| v.parse().ok()).unwrap_or(20);
        let greedy = eval_policy(&algo.policy, eval_eps, 3000 + seed, true);
        eprintln!(
            "seed {seed}: baseline {baseline:.1}, trained {trained:.1}, greedy {greedy:.1} (last train return {train_return:.1})"
        );
        assert!(
            trained > baseline,
            "seed {seed}: no improvement ({baseline:.1} -> {trained:.1})"
        );
    }
}
