//! The worker-side main loop: dial the controller, announce identity, then
//! serve lifecycle verbs while polling the worker between frames.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use crate::streams::socket::connect_retry;

use super::metrics::{MetricsRecord, MetricsWriter};
use super::registry;
use super::rpc::{recv_msg, send_msg, ConfigurePayload, MsgReader, Reply, Verb};
use super::worker::{LifecycleState, Worker};

/// Backoff applied when a poll returns no work.
const IDLE_BACKOFF: Duration = Duration::from_micros(200);

/// Entry point for a worker process or thread. Returns after EXIT or on a
/// fatal error (which is reported to the controller as Failed).
pub fn worker_main(controller: SocketAddr, kind: &str, index: u32) -> Result<(), String> {
    let mut conn = connect_retry(controller, Duration::from_secs(15))
        .map_err(|e| format!("dial controller: {e}"))?;
    send_msg(
        &mut conn,
        &Reply::Hello {
            kind: kind.to_string(),
            index,
        },
    )
    .map_err(|e| format!("hello: {e}"))?;

    // Configure arrives first, synchronously.
    let payload: ConfigurePayload = match recv_msg::<Verb>(&mut conn) {
        Ok(Verb::Configure(p)) => *p,
        Ok(other) => {
            let msg = format!("expected Configure, got {other:?}");
            send_msg(&mut conn, &Reply::Rejected { message: msg.clone() }).ok();
            return Err(msg);
        }
        Err(e) => return Err(format!("awaiting configure: {e}")),
    };
    let ident = format!("{kind}:{index}");
    let run_dir = PathBuf::from(&payload.run_dir);
    let metrics_interval = Duration::from_millis(payload.metrics_interval_ms.max(50));

    let (mut worker, bound) = match registry::build_worker(&payload) {
        Ok(x) => x,
        Err(e) => {
            let message = format!("configure failed: {e}");
            send_msg(&mut conn, &Reply::Failed { message: message.clone() }).ok();
            return Err(message);
        }
    };
    send_msg(&mut conn, &Reply::Configured { bound }).map_err(|e| e.to_string())?;
    let mut state = LifecycleState::Configured;

    let mut writer = MetricsWriter::open(&run_dir, &ident)
        .map_err(|e| format!("metrics file: {e}"))?;
    let mut last_metrics = Instant::now();

    // From here on, verbs arrive interleaved with polling.
    conn.set_nonblocking(true).map_err(|e| e.to_string())?;
    let mut reader = MsgReader::new();

    let finish = |worker: &mut Box<dyn Worker>,
                  writer: &mut MetricsWriter,
                  ident: &str,
                  run_dir: &PathBuf| {
        writer
            .append(&MetricsRecord::from_snapshot(ident, worker.metrics()))
            .ok();
        let report = worker.final_report();
        if !report.is_null() {
            let dir = run_dir.join("final");
            std::fs::create_dir_all(&dir).ok();
            std::fs::write(
                dir.join(format!("{}.json", ident.replace(':', "-"))),
                serde_json::to_vec_pretty(&report).unwrap_or_default(),
            )
            .ok();
        }
        worker.shutdown();
    };

    loop {
        // Control frames between polls.
        match reader.poll::<Verb>(&mut conn) {
            Ok(Some(verb)) => {
                let reply = match (&verb, state) {
                    (Verb::Start(book), LifecycleState::Configured) => {
                        match worker.connect(book) {
                            Ok(()) => {
                                state = LifecycleState::Running;
                                Reply::Ack
                            }
                            Err(e) => {
                                let message = format!("connect failed: {e}");
                                send_msg(&mut conn, &Reply::Failed { message: message.clone() })
                                    .ok();
                                finish(&mut worker, &mut writer, &ident, &run_dir);
                                return Err(message);
                            }
                        }
                    }
                    (Verb::Start(_), LifecycleState::Paused) => {
                        state = LifecycleState::Running;
                        Reply::Ack
                    }
                    (Verb::Pause, LifecycleState::Running) => {
                        state = LifecycleState::Paused;
                        Reply::Ack
                    }
                    (Verb::Exit, _) => {
                        finish(&mut worker, &mut writer, &ident, &run_dir);
                        send_msg(&mut conn, &Reply::Ack).ok();
                        return Ok(());
                    }
                    (v, s) => Reply::Rejected {
                        message: format!("illegal transition: {v:?} in state {s:?}"),
                    },
                };
                send_msg(&mut conn, &reply).ok();
            }
            Ok(None) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => {
                // Controller went away: shut down quietly.
                finish(&mut worker, &mut writer, &ident, &run_dir);
                return Ok(());
            }
            Err(e) => {
                finish(&mut worker, &mut writer, &ident, &run_dir);
                return Err(format!("control channel: {e}"));
            }
        }

        if state == LifecycleState::Running {
            match worker.poll() {
                Ok(r) => {
                    if r.is_idle() {
                        std::thread::sleep(IDLE_BACKOFF);
                    }
                }
                Err(e) => {
                    let message = format!("poll failed: {e}");
                    send_msg(&mut conn, &Reply::Failed { message: message.clone() }).ok();
                    finish(&mut worker, &mut writer, &ident, &run_dir);
                    return Err(message);
                }
            }
        } else {
            std::thread::sleep(Duration::from_millis(2));
        }

        if last_metrics.elapsed() >= metrics_interval {
            last_metrics = Instant::now();
            writer
                .append(&MetricsRecord::from_snapshot(&ident, worker.metrics()))
                .ok();
        }
    }
}
