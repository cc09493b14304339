//! The local scheduler: maps worker slots onto OS processes (default) or
//! threads inside the controller process, with optional core pinning.
//!
//! Process workers re-enter through the CLI's hidden `worker` subcommand;
//! the binary defaults to the current executable and can be overridden with
//! `SRL_WORKER_BIN` (useful when the controller runs inside a test harness).

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

use crate::model::config::{SchedulerBackend, SchedulerConfig};

use super::runloop::worker_main;

pub enum WorkerProc {
    Process(Child),
    Thread(Option<std::thread::JoinHandle<Result<(), String>>>),
}

impl WorkerProc {
    pub fn is_alive(&mut self) -> bool {
        match self {
            WorkerProc::Process(child) => matches!(child.try_wait(), Ok(None)),
            WorkerProc::Thread(handle) => {
                handle.as_ref().map(|h| !h.is_finished()).unwrap_or(false)
            }
        }
    }

    /// Wait for clean exit until the deadline; true if it exited.
    pub fn join_within(&mut self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        loop {
            match self {
                WorkerProc::Process(child) => match child.try_wait() {
                    Ok(Some(_)) => return true,
                    Ok(None) => {}
                    Err(_) => return true,
                },
                WorkerProc::Thread(handle) => {
                    if handle.as_ref().map(|h| h.is_finished()).unwrap_or(true) {
                        if let Some(h) = handle.take() {
                            h.join().ok();
                        }
                        return true;
                    }
                }
            }
            if Instant::now() >= deadline {
                return false;
            }
            std::thread::sleep(Duration::from_millis(10));
        }
    }

    pub fn kill(&mut self) {
        if let WorkerProc::Process(child) = self {
            child.kill().ok();
            child.wait().ok();
        }
        // Threads cannot be killed; they exit when their control channel
        // drops.
    }
}

pub struct Scheduler {
    backend: SchedulerBackend,
    pin_cores: bool,
    worker_bin: PathBuf,
}

impl Scheduler {
    pub fn new(cfg: &SchedulerConfig) -> Result<Self, String> {
        let worker_bin = match std::env::var_os("SRL_WORKER_BIN") {
            Some(p) => PathBuf::from(p),
            None => std::env::current_exe().map_err(|e| format!("current_exe: {e}"))?,
        };
        Ok(Self {
            backend: cfg.backend,
            pin_cores: cfg.pin_cores,
            worker_bin,
        })
    }

    pub fn backend(&self) -> SchedulerBackend {
        self.backend
    }

    pub fn spawn(
        &self,
        controller: SocketAddr,
        kind: &str,
        index: u32,
        slot: u32,
    ) -> Result<WorkerProc, String> {
        match self.backend {
            SchedulerBackend::Process => {
                let child = Command::new(&self.worker_bin)
                    .arg("worker")
                    .arg("--controller")
                    .arg(controller.to_string())
                    .arg("--kind")
                    .arg(kind)
                    .arg("--index")
                    .arg(index.to_string())
                    .stdin(Stdio::null())
                    .spawn()
                    .map_err(|e| format!("spawn {kind}:{index}: {e}"))?;
                if self.pin_cores {
                    pin_pid(child.id(), slot);
                }
                Ok(WorkerProc::Process(child))
            }
            SchedulerBackend::Thread => {
                let kind = kind.to_string();
                let handle = std::thread::Builder::new()
                    .name(format!("{kind}:{index}"))
                    .spawn(move || worker_main(controller, &kind, index))
                    .map_err(|e| e.to_string())?;
                Ok(WorkerProc::Thread(Some(handle)))
            }
        }
    }
}

/// Pin a process to one core, wrapping around the available set. Failure is
/// non-fatal: pinning is an optimization, not a correctness requirement.
fn pin_pid(pid: u32, slot: u32) {
    unsafe {
        let cores = libc::sysconf(libc::_SC_NPROCESSORS_ONLN);
        if cores <= 0 {
            return;
        }
        let core = (slot as libc::c_long % cores) as usize;
        let mut set: libc::cpu_set_t = std::mem::zeroed();
        libc::CPU_ZERO(&mut set);
        libc::CPU_SET(core, &mut set);
        libc::sched_setaffinity(
            pid as libc::pid_t,
            std::mem::size_of::<libc::cpu_set_t>(),
            &set,
        );
    }
}
