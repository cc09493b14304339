//! Experiment orchestration: worker lifecycle, control RPC, the registry of
//! worker kinds, metrics, the local scheduler, and the controller.

pub mod buffer_worker;
pub mod controller;
pub mod metrics;
pub mod registry;
pub mod rpc;
pub mod runloop;
pub mod scheduler;
pub mod worker;

pub use controller::{run_experiment, run_planned, ExperimentReport, RunError};
pub use registry::register_worker_kind;
pub use runloop::worker_main;
pub use worker::{AddressBook, LifecycleState, MetricsSnapshot, Worker, WorkerError};
