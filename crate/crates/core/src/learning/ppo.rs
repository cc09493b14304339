//! PPO: clipped-surrogate policy loss with value and entropy terms, computed
//! over trajectory batches with GAE advantages.
//!
//! The algorithm produces a flat gradient; the trainer worker owns gradient
//! averaging across the trainer group and the optimizer update, so the same
//! code runs single-trainer and data-parallel. Advantage normalization
//! moments are exchanged through the same reducer as gradients, which keeps
//! all group members computing identical losses.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::model::config::PpoParams;
use crate::model::types::SampleBatch;

use super::gae::gae;
use super::mlp::MlpPolicy;
use super::tape::{Tape, Tensor};

#[derive(Debug, Error)]
pub enum AlgoError {
    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),
    #[error("bad batch: {0}")]
    BadBatch(String),
}

/// Scalar diagnostics from one gradient step.
#[derive(Debug, Clone, Default)]
pub struct PpoStats {
    pub loss: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    pub steps: usize,
}

impl PpoStats {
    pub fn to_map(&self) -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        m.insert("loss".into(), self.loss);
        m.insert("policy_loss".into(), self.policy_loss);
        m.insert("value_loss".into(), self.value_loss);
        m.insert("entropy".into(), self.entropy);
        m.insert("clip_fraction".into(), self.clip_fraction);
        m.insert("approx_kl".into(), self.approx_kl);
        m
    }
}

/// Flattened, GAE-annotated view of a sample batch.
#[derive(Debug, Clone)]
pub struct PreparedBatch {
    pub obs: Vec<f64>,
    pub obs_dim: usize,
    pub actions: Vec<usize>,
    pub logp_old: Vec<f64>,
    /// Raw (unnormalized) advantages.
    pub advantages: Vec<f64>,
    /// Value targets: advantage plus the rollout value prediction.
    pub returns: Vec<f64>,
}

impl PreparedBatch {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Sum, sum of squares, and count of the raw advantages; the inputs to
    /// group-wide normalization.
    pub fn advantage_moments(&self) -> [f64; 3] {
        let sum: f64 = self.advantages.iter().sum();
        let sq: f64 = self.advantages.iter().map(|a| a * a).sum();
        [sum, sq, self.advantages.len() as f64]
    }

    /// Split into `n` contiguous minibatches (the last takes the remainder).
    pub fn minibatches(&self, n: usize) -> Vec<PreparedBatch> {
        let n = n.max(1).min(self.len().max(1));
        let chunk = self.len() / n;
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let start = i * chunk;
            let end = if i + 1 == n { self.len() } else { start + chunk };
            out.push(PreparedBatch {
                obs: self.obs[start * self.obs_dim..end * self.obs_dim].to_vec(),
                obs_dim: self.obs_dim,
                actions: self.actions[start..end].to_vec(),
                logp_old: self.logp_old[start..end].to_vec(),
                advantages: self.advantages[start..end].to_vec(),
                returns: self.returns[start..end].to_vec(),
            });
        }
        out
    }
}

/// Mean and standard deviation derived from pooled moments.
pub fn moments_to_norm(m: &[f64; 3]) -> (f64, f64) {
    let n = m[2].max(1.0);
    let mean = m[0] / n;
    let var = (m[1] / n - mean * mean).max(0.0);
    (mean, var.sqrt())
}

pub struct PpoAlgorithm {
    pub cfg: PpoParams,
    pub policy: MlpPolicy,
}

impl PpoAlgorithm {
    pub fn new(cfg: PpoParams, policy: MlpPolicy) -> Self {
        Self { cfg, policy }
    }

    /// Flatten a sample batch and compute per-trajectory GAE from the stored
    /// rollout annotations.
    pub fn prepare(&self, batch: &SampleBatch) -> Result<PreparedBatch, AlgoError> {
        if batch.trajectories.is_empty() {
            return Err(AlgoError::BadBatch("empty batch".into()));
        }
        let obs_dim = self.policy.obs_dim;
        let total: usize = batch.trajectories.iter().map(|t| t.len()).sum();
        let mut prep = PreparedBatch {
            obs: Vec::with_capacity(total * obs_dim),
            obs_dim,
            actions: Vec::with_capacity(total),
            logp_old: Vec::with_capacity(total),
            advantages: Vec::with_capacity(total),
            returns: Vec::with_capacity(total),
        };
        for traj in &batch.trajectories {
            if traj.is_empty() {
                return Err(AlgoError::BadBatch("empty trajectory".into()));
            }
            let rewards: Vec<f64> = traj.steps.iter().map(|s| s.reward).collect();
            let mut values: Vec<f64> = traj.steps.iter().map(|s| s.value_pred).collect();
            values.push(traj.bootstrap_value);
            let dones: Vec<bool> = traj.steps.iter().map(|s| s.done).collect();
            let adv = gae(&rewards, &values, &dones, self.cfg.discount, self.cfg.gae_lambda);
            for (i, s) in traj.steps.iter().enumerate() {
                if s.obs.dim() != obs_dim {
                    return Err(AlgoError::BadBatch(format!(
                        "observation dim {} != policy dim {obs_dim}",
                        s.obs.dim()
                    )));
                }
                prep.obs.extend_from_slice(&s.obs.values);
                prep.actions.push(s.action.index as usize);
                prep.logp_old.push(s.log_prob_old);
                prep.advantages.push(adv[i]);
                prep.returns.push(adv[i] + s.value_pred);
            }
        }
        Ok(prep)
    }

    /// One loss evaluation plus backward pass. `norm` carries the advantage
    /// normalization (mean, std) when enabled; pass `None` to use raw
    /// advantages. Returns diagnostics and the flat gradient.
    pub fn gradient(
        &self,
        prep: &PreparedBatch,
        norm: Option<(f64, f64)>,
    ) -> Result<(PpoStats, Vec<f64>), AlgoError> {
        let n = prep.len();
        if n == 0 {
            return Err(AlgoError::BadBatch("empty prepared batch".into()));
        }
        let adv: Vec<f64> = match norm {
            Some((mean, std)) => prep
                .advantages
                .iter()
                .map(|a| (a - mean) / (std + 1e-8))
                .collect(),
            None => prep.advantages.clone(),
        };

        let eps = self.cfg.clip_ratio;
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(n, prep.obs_dim, prep.obs.clone()));
        let (logits, values, param_nodes) = self.policy.forward_tape(&mut tape, x);

        let lp = tape.log_softmax(logits);
        let lp_a = tape.gather_cols(lp, prep.actions.clone());
        let old = tape.constant(Tensor::new(n, 1, prep.logp_old.clone()));
        let diff = tape.sub(lp_a, old);
        let ratio = tape.exp(diff);
        let surr1 = tape.mul_const(ratio, adv.clone());
        let clipped = tape.clamp(ratio, 1.0 - eps, 1.0 + eps);
        let surr2 = tape.mul_const(clipped, adv.clone());
        let surr = tape.min(surr1, surr2);
        let mean_surr = tape.mean_all(surr);
        let policy_loss = tape.neg(mean_surr);

        let ret = tape.constant(Tensor::new(n, 1, prep.returns.clone()));
        let verr = tape.sub(values, ret);
        let vsq = tape.square(verr);
        let value_loss = tape.mean_all(vsq);

        let probs = tape.exp(lp);
        let plp = tape.mul(probs, lp);
        let row_neg_ent = tape.row_sum(plp);
        let neg_entropy = tape.mean_all(row_neg_ent);

        let v_term = tape.scale(value_loss, self.cfg.value_coef);
        let e_term = tape.scale(neg_entropy, self.cfg.entropy_coef);
        let pv = tape.add(policy_loss, v_term);
        let loss = tape.add(pv, e_term);

        let loss_v = tape.scalar_value(loss);
        if !loss_v.is_finite() {
            return Err(AlgoError::NonFiniteLoss(format!("loss = {loss_v}")));
        }

        let grads = tape.backward(loss);
        let flat = self.policy.flatten_grads(&tape, &grads, &param_nodes);
        if flat.iter().any(|g| !g.is_finite()) {
            return Err(AlgoError::NonFiniteLoss("non-finite gradient".into()));
        }

        // Diagnostics from the tape values.
        let ratio_v = &tape.value(ratio).data;
        let clip_fraction =
            ratio_v.iter().filter(|r| (**r - 1.0).abs() > eps).count() as f64 / n as f64;
        let approx_kl = ratio_v
            .iter()
            .map(|r| (r - 1.0) - r.ln())
            .sum::<f64>()
            / n as f64;

        let stats = PpoStats {
            loss: loss_v,
            policy_loss: tape.scalar_value(policy_loss),
            value_loss: tape.scalar_value(value_loss),
            entropy: -tape.scalar_value(neg_entropy),
            clip_fraction,
            approx_kl,
            steps: n,
        };
        Ok((stats, flat))
    }

    /// Normalization for a single trainer (no group exchange).
    pub fn local_norm(&self, prep: &PreparedBatch) -> Option<(f64, f64)> {
        if self.cfg.normalize_advantages {
            Some(moments_to_norm(&prep.advantage_moments()))
        } else {
            None
        }
    }

    /// Single-machine convenience: prepare, one gradient per minibatch, apply.
    pub fn step_local(
        &mut self,
        batch: &SampleBatch,
        opt: &mut dyn super::optim::Optimizer,
    ) -> Result<PpoStats, AlgoError> {
        let prep = self.prepare(batch)?;
        let norm = self.local_norm(&prep);
        let mut agg = PpoStats::default();
        let minis = prep.minibatches(self.cfg.minibatch_count);
        let count = minis.len();
        for mb in minis {
            let (stats, mut grad) = self.gradient(&mb, norm)?;
            if self.cfg.max_grad_norm > 0.0 {
                clip_grad_norm(&mut grad, self.cfg.max_grad_norm);
            }
            let mut params = self.policy.flat_params().to_vec();
            opt.apply(&mut params, &grad);
            self.policy.set_flat_params(&params);
            agg.loss += stats.loss;
            agg.policy_loss += stats.policy_loss;
            agg.value_loss += stats.value_loss;
            agg.entropy += stats.entropy;
            agg.clip_fraction += stats.clip_fraction;
            agg.approx_kl += stats.approx_kl;
            agg.steps += stats.steps;
        }
        let k = count as f64;
        agg.loss /= k;
        agg.policy_loss /= k;
        agg.value_loss /= k;
        agg.entropy /= k;
        agg.clip_fraction /= k;
        agg.approx_kl /= k;
        self.policy.version += 1;
        Ok(agg)
    }
}

/// Scale the gradient so its l2 norm is at most `max_norm`.
pub fn clip_grad_norm(grad: &mut [f64], max_norm: f64) {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for g in grad.iter_mut() {
            *g *= k;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::types::{
        ActionId, ObservationVector, SampleBatch, Trajectory, TransitionStep,
    };
    use crate::model::validate::ModelSpec;

    fn tiny_policy() -> MlpPolicy {
        // 2 inputs, 2 actions, no hidden layer: params are W[2x3], b[3].
        MlpPolicy::init(
            &ModelSpec {
                obs_dim: 2,
                action_count: 2,
                hidden: vec![],
            },
            0,
        )
    }

    fn one_step_batch(policy: &MlpPolicy, reward: f64) -> SampleBatch {
        let obs = ObservationVector::new(vec![0.4, -0.3]);
        let (logits, values) = policy.forward(&[&obs]);
        let lp = super::super::mlp::log_softmax_row(&logits[0]);
        SampleBatch::from_trajectories(vec![Trajectory {
            agent_id: "0:0:0".into(),
            policy_name: "rl".into(),
            steps: vec![TransitionStep {
                obs,
                action: ActionId::new(0),
                reward,
                done: true,
                truncated: false,
                log_prob_old: lp[0],
                value_pred: values[0],
                policy_version: 1,
            }],
            bootstrap_value: 0.0,
            env_frames: 1,
        }])
    }

    #[test]
    fn identity_ratio_properties() {
        // New params == old params: every ratio is 1, clip fraction 0, and
        // the policy term equals -mean(normalized advantage).
        let policy = tiny_policy();
        let algo = PpoAlgorithm::new(PpoParams::default(), policy.clone());
        let batch = one_step_batch(&policy, 1.0);
        let prep = algo.prepare(&batch).unwrap();
        let (stats, _) = algo.gradient(&prep, None).unwrap();
        assert_eq!(stats.clip_fraction, 0.0);
        assert!(stats.approx_kl.abs() < 1e-12);
        let mean_adv = prep.advantages.iter().sum::<f64>() / prep.len() as f64;
        assert!((stats.policy_loss + mean_adv).abs() < 1e-12);
    }

    #[test]
    fn zero_advantages_zero_policy_gradient() {
        let policy = tiny_policy();
        let algo = PpoAlgorithm::new(
            PpoParams {
                value_coef: 0.0,
                entropy_coef: 0.0,
                normalize_advantages: false,
                ..PpoParams::default()
            },
            policy.clone(),
        );
        let batch = one_step_batch(&policy, 0.0);
        let mut prep = algo.prepare(&batch).unwrap();
        for a in prep.advantages.iter_mut() {
            *a = 0.0;
        }
        let (_, grad) = algo.gradient(&prep, None).unwrap();
        assert!(grad.iter().all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn single_transition_matches_hand_computation() {
        // Pencil-and-paper evaluation of the written loss on a 1-layer,
        // 2-action policy with a single transition.
        let mut policy = tiny_policy();
        policy.set_flat_params(&[
            0.3, -0.2, 0.5, // W row x0: logit0, logit1, value
            -0.1, 0.4, -0.6, // W row x1
            0.05, -0.05, 0.2, // bias
        ]);
        let cfg = PpoParams {
            clip_ratio: 0.2,
            discount: 0.9,
            gae_lambda: 0.8,
            value_coef: 0.5,
            entropy_coef: 0.01,
            normalize_advantages: false,
            ..PpoParams::default()
        };
        let algo = PpoAlgorithm::new(cfg, policy.clone());

        let obs = vec![0.7, -0.4];
        let action = 1usize;
        let logp_old = -0.9;
        let reward = 2.0;
        let value_pred_rollout = 0.3;

        let batch = SampleBatch::from_trajectories(vec![Trajectory {
            agent_id: "a".into(),
            policy_name: "rl".into(),
            steps: vec![TransitionStep {
                obs: ObservationVector::new(obs.clone()),
                action: ActionId::new(action as u32),
                reward,
                done: true,
                truncated: false,
                log_prob_old: logp_old,
                value_pred: value_pred_rollout,
                policy_version: 1,
            }],
            bootstrap_value: 0.0,
            env_frames: 1,
        }]);

        let prep = algo.prepare(&batch).unwrap();
        let (stats, _) = algo.gradient(&prep, None).unwrap();

        // Hand computation.
        let z0 = 0.3 * obs[0] + (-0.1) * obs[1] + 0.05;
        let z1 = -0.2 * obs[0] + 0.4 * obs[1] - 0.05;
        let v = 0.5 * obs[0] + (-0.6) * obs[1] + 0.2;
        let m = z0.max(z1);
        let lse = ((z0 - m).exp() + (z1 - m).exp()).ln() + m;
        let lp1 = z1 - lse;
        // GAE on one terminal step: A = r - v_rollout.
        let advantage = reward - value_pred_rollout;
        let ret = advantage + value_pred_rollout;
        let ratio = (lp1 - logp_old).exp();
        let clipped = ratio.clamp(0.8, 1.2);
        let surr = (ratio * advantage).min(clipped * advantage);
        let p_loss = -surr;
        let v_loss = (v - ret) * (v - ret);
        let p0 = (z0 - lse).exp();
        let p1 = (z1 - lse).exp();
        let entropy = -(p0 * (z0 - lse) + p1 * (z1 - lse));
        let expected = p_loss + 0.5 * v_loss - 0.01 * entropy;

        assert!((stats.loss - expected).abs() <= 1e-12, "{} vs {expected}", stats.loss);
        assert!((stats.policy_loss - p_loss).abs() <= 1e-12);
        assert!((stats.value_loss - v_loss).abs() <= 1e-12);
        assert!((stats.entropy - entropy).abs() <= 1e-12);
    }

    #[test]
    fn uniform_policy_entropy_is_ln_n() {
        let mut policy = tiny_policy();
        policy.set_flat_params(&vec![0.0; policy.param_count()]);
        let algo = PpoAlgorithm::new(
            PpoParams {
                normalize_advantages: false,
                ..PpoParams::default()
            },
            policy.clone(),
        );
        let batch = one_step_batch(&policy, 1.0);
        let prep = algo.prepare(&batch).unwrap();
        let (stats, _) = algo.gradient(&prep, None).unwrap();
        assert!((stats.entropy - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn normalization_is_affine_in_advantages() {
        // The policy gradient is linear in the advantage vector at identity
        // ratios, so normalizing must equal (g_raw - mean * g_ones) / std.
        let policy = tiny_policy();
        let cfg = PpoParams {
            value_coef: 0.0,
            entropy_coef: 0.0,
            normalize_advantages: false,
            ..PpoParams::default()
        };
        let algo = PpoAlgorithm::new(cfg, policy.clone());

        let mut steps = Vec::new();
        let mut rng = crate::util::rng::CounterRng::from_key(&[0x77]);
        for i in 0..6 {
            let obs = ObservationVector::new(vec![rng.normal() * 0.5, rng.normal() * 0.5]);
            let (logits, values) = policy.forward(&[&obs]);
            let lp = super::super::mlp::log_softmax_row(&logits[0]);
            let a = i % 2;
            steps.push(TransitionStep {
                obs,
                action: ActionId::new(a as u32),
                reward: rng.normal(),
                done: i == 5,
                truncated: false,
                log_prob_old: lp[a],
                value_pred: values[0],
                policy_version: 1,
            });
        }
        let batch = SampleBatch::from_trajectories(vec![Trajectory {
            agent_id: "a".into(),
            policy_name: "rl".into(),
            steps,
            bootstrap_value: 0.0,
            env_frames: 6,
        }]);

        let prep = algo.prepare(&batch).unwrap();
        let (mean, std) = moments_to_norm(&prep.advantage_moments());
        assert!(std > 1e-6);

        let (_, g_raw) = algo.gradient(&prep, None).unwrap();
        let (_, g_norm) = algo.gradient(&prep, Some((mean, std))).unwrap();
        let mut ones = prep.clone();
        for a in ones.advantages.iter_mut() {
            *a = 1.0;
        }
        let (_, g_ones) = algo.gradient(&ones, None).unwrap();

        for i in 0..g_raw.len() {
            let expected = (g_raw[i] - mean * g_ones[i]) / (std + 1e-8);
            assert!(
                (g_norm[i] - expected).abs() < 1e-12,
                "coord {i}: {} vs {expected}",
                g_norm[i]
            );
        }
    }

    #[test]
    fn learning_reduces_loss_on_fixed_batch() {
        let policy = tiny_policy();
        let mut algo = PpoAlgorithm::new(
            PpoParams {
                lr: 0.05,
                // A single-transition batch normalizes its own advantage to
                // zero; keep the raw value so there is a learning signal.
                normalize_advantages: false,
                ..PpoParams::default()
            },
            policy.clone(),
        );
        let batch = one_step_batch(&policy, 5.0);
        let mut opt = super::super::optim::Adam::new(0.05, algo.policy.param_count());
        let first = algo.step_local(&batch, &mut opt).unwrap();
        let mut last = first.clone();
        for _ in 0..20 {
            last = algo.step_local(&batch, &mut opt).unwrap();
        }
        assert_eq!(algo.policy.version, 21);
        // The chosen action's probability should have risen: ratios > 1 and
        // the policy term more negative than at the start.
        assert!(last.policy_loss < first.policy_loss);
    }
}
