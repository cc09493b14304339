//! The learning stack: tape autodiff, the MLP policy, GAE, PPO, optimizers.

pub mod eval;
pub mod gae;
pub mod mlp;
pub mod optim;
pub mod ppo;
pub mod tape;

pub use gae::gae;
pub use mlp::{MlpPolicy, RolloutOutput, RolloutRequest};
pub use optim::{Adam, Optimizer, Sgd};
pub use ppo::{AlgoError, PpoAlgorithm, PpoStats, PreparedBatch};
