//! Domain value types shared by every worker and stream.
//!
//! All of these are plain owned values: cheap to clone, safe to move between
//! threads and processes, no interior mutability. Numeric fields are 64-bit
//! throughout so that data-parallel equivalence checks can be exact.

use serde::{Deserialize, Serialize};

/// A fixed-length observation vector. Length is pinned per experiment by the
/// environment spec; all entries must be finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationVector {
    pub values: Vec<f64>,
}

impl ObservationVector {
    pub fn new(values: Vec<f64>) -> Self {
        debug_assert!(values.iter().all(|v| v.is_finite()));
        Self { values }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            values: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// A discrete action, identified by its index into the environment's action
/// set. The bound (`action_count`) lives on the environment spec.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActionId {
    pub index: u32,
}

impl ActionId {
    pub fn new(index: u32) -> Self {
        Self { index }
    }
}

/// One environment transition as recorded by an actor: the observation seen,
/// the action taken, and the reward received, plus the inference-side
/// annotations (log-probability and value prediction) the training algorithm
/// needs later.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionStep {
    pub obs: ObservationVector,
    pub action: ActionId,
    pub reward: f64,
    pub done: bool,
    pub truncated: bool,
    pub log_prob_old: f64,
    pub value_pred: f64,
    pub policy_version: u64,
}

impl TransitionStep {
    /// `done` and `truncated` are mutually exclusive; terminal flags may only
    /// appear on the final step of a trajectory.
    pub fn is_terminal(&self) -> bool {
        self.done || self.truncated
    }
}

/// A time-contiguous run of steps from a single agent, bounded by the chunk
/// length or the episode end. `bootstrap_value` is the value estimate of the
/// state following the last step (zero at episode ends); `env_frames` is
/// `len * frame_skip` for throughput accounting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub agent_id: String,
    pub policy_name: String,
    pub steps: Vec<TransitionStep>,
    pub bootstrap_value: f64,
    pub env_frames: u64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Check the structural invariants: non-empty, terminal flag only on the
    /// last step, never both terminal flags at once.
    pub fn check_invariants(&self) -> bool {
        if self.steps.is_empty() {
            return false;
        }
        for (i, s) in self.steps.iter().enumerate() {
            if s.done && s.truncated {
                return false;
            }
            if i + 1 != self.steps.len() && s.is_terminal() {
                return false;
            }
        }
        true
    }
}

/// A stack of trajectories handed to one gradient step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleBatch {
    pub trajectories: Vec<Trajectory>,
    pub total_env_frames: u64,
}

impl SampleBatch {
    pub fn from_trajectories(trajectories: Vec<Trajectory>) -> Self {
        let total_env_frames = trajectories.iter().map(|t| t.env_frames).sum();
        Self {
            trajectories,
            total_env_frames,
        }
    }

    pub fn total_steps(&self) -> usize {
        self.trajectories.iter().map(|t| t.len()).sum()
    }
}

/// An observation heading to a policy for action selection. `client_id`
/// identifies one (actor, ring instance, agent) source; request ids are
/// strictly increasing per client and at most one request per client is
/// outstanding at a time. `deterministic` asks for the argmax action instead
/// of a sampled one, so servers need no per-client configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceRequest {
    pub client_id: u64,
    pub agent_id: String,
    pub request_id: u64,
    pub obs: ObservationVector,
    pub policy_state: Option<Vec<f64>>,
    pub deterministic: bool,
}

/// The policy's reply: a sampled (or greedy) action plus the annotations the
/// trainer needs, stamped with the parameter version that produced it.
/// `client_id` echoes the request's so multiplexed transports can route it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceResponse {
    pub client_id: u64,
    pub request_id: u64,
    pub action: ActionId,
    pub policy_state: Option<Vec<f64>>,
    pub log_prob: f64,
    pub value_pred: f64,
    pub policy_version: u64,
}

/// A flat, versioned parameter vector as published by trainers and pulled by
/// policy workers. `layout_digest` fingerprints the tensor layout so a blob
/// can never be loaded into a mismatched architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterBlob {
    pub policy_name: String,
    pub version: u64,
    pub flat_params: Vec<f64>,
    pub layout_digest: u64,
}

/// Per-poll work accounting returned by every worker.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PollResult {
    pub sample_count: u64,
    pub batch_count: u64,
}

impl PollResult {
    pub fn idle() -> Self {
        Self::default()
    }

    pub fn is_idle(&self) -> bool {
        self.sample_count == 0 && self.batch_count == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step(done: bool, truncated: bool) -> TransitionStep {
        TransitionStep {
            obs: ObservationVector::zeros(2),
            action: ActionId::new(0),
            reward: 0.0,
            done,
            truncated,
            log_prob_old: -0.5,
            value_pred: 0.0,
            policy_version: 1,
        }
    }

    #[test]
    fn trajectory_invariants() {
        let good = Trajectory {
            agent_id: "0:0:0".into(),
            policy_name: "rl".into(),
            steps: vec![step(false, false), step(true, false)],
            bootstrap_value: 0.0,
            env_frames: 2,
        };
        assert!(good.check_invariants());

        let both_flags = Trajectory {
            steps: vec![step(true, true)],
            ..good.clone()
        };
        assert!(!both_flags.check_invariants());

        let early_terminal = Trajectory {
            steps: vec![step(true, false), step(false, false)],
            ..good.clone()
        };
        assert!(!early_terminal.check_invariants());

        let empty = Trajectory {
            steps: vec![],
            ..good
        };
        assert!(!empty.check_invariants());
    }

    #[test]
    fn sample_batch_frames() {
        let t = Trajectory {
            agent_id: "0:0:0".into(),
            policy_name: "rl".into(),
            steps: vec![step(false, false); 3],
            bootstrap_value: 0.1,
            env_frames: 12, // frame_skip 4
        };
        let b = SampleBatch::from_trajectories(vec![t.clone(), t]);
        assert_eq!(b.total_env_frames, 24);
        assert_eq!(b.total_steps(), 6);
    }
}
