//! Per-agent trajectory accumulation: steps buffer up until the chunk length
//! is reached or the episode ends, then a trajectory is emitted.
//!
//! Chunk-boundary emissions still need the value estimate of the *next*
//! state as their bootstrap, which only exists once the following inference
//! response arrives; the worker parks those via [`Emitted::NeedsBootstrap`].
//! Terminal emissions bootstrap with zero.

use crate::model::types::{Trajectory, TransitionStep};

#[derive(Debug)]
pub enum Emitted {
    None,
    /// Episode ended; trajectory is complete with a zero bootstrap.
    Terminal(Trajectory),
    /// Chunk filled mid-episode; caller must set `bootstrap_value` from the
    /// next inference response before posting.
    NeedsBootstrap(Trajectory),
}

#[derive(Debug)]
pub struct TrajectoryAccumulator {
    agent_id: String,
    policy_name: String,
    chunk_length: usize,
    frame_skip: u32,
    open: Vec<TransitionStep>,
}

impl TrajectoryAccumulator {
    pub fn new(agent_id: String, policy_name: String, chunk_length: usize, frame_skip: u32) -> Self {
        assert!(chunk_length >= 1);
        Self {
            agent_id,
            policy_name,
            chunk_length,
            frame_skip,
            open: Vec::with_capacity(chunk_length),
        }
    }

    pub fn open_len(&self) -> usize {
        self.open.len()
    }

    fn emit(&mut self) -> Trajectory {
        let steps = std::mem::take(&mut self.open);
        let env_frames = steps.len() as u64 * self.frame_skip as u64;
        Trajectory {
            agent_id: self.agent_id.clone(),
            policy_name: self.policy_name.clone(),
            steps,
            bootstrap_value: 0.0,
            env_frames,
        }
    }

    /// Append one step; returns a trajectory when the chunk completes.
    pub fn push(&mut self, step: TransitionStep) -> Emitted {
        debug_assert!(!(step.done && step.truncated));
        let terminal = step.is_terminal();
        self.open.push(step);
        if terminal {
            Emitted::Terminal(self.emit())
        } else if self.open.len() >= self.chunk_length {
            Emitted::NeedsBootstrap(self.emit())
        } else {
            Emitted::None
        }
    }
}
