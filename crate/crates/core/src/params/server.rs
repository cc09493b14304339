//! The parameter service front end: a serving thread that answers PUSH,
//! HEAD, PULL, and LOG requests over framed sockets, one handler thread per
//! connection.

use std::io;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use crate::model::types::ParameterBlob;
use crate::model::wire::{Reader, WireDecode, WireEncode};
use crate::streams::framing::{read_frame, write_frame};

use super::{op, ParameterStore, ServiceError};

pub struct ParamServer;

/// Running service; dropping it (or calling `stop`) shuts the threads down.
pub struct ParamServerHandle {
    pub addr: SocketAddr,
    store: Arc<ParameterStore>,
    stop: Arc<AtomicBool>,
    accept_thread: Option<std::thread::JoinHandle<()>>,
}

impl ParamServer {
    /// Bind and start serving. `bind` is typically `127.0.0.1:0`.
    pub fn start(bind: &str, store: Arc<ParameterStore>) -> Result<ParamServerHandle, ServiceError> {
        let listener = TcpListener::bind(bind)
            .map_err(|e| ServiceError::Unreachable(format!("bind {bind}: {e}")))?;
        listener
            .set_nonblocking(true)
            .map_err(|e| ServiceError::Unreachable(e.to_string()))?;
        let addr = listener
            .local_addr()
            .map_err(|e| ServiceError::Unreachable(e.to_string()))?;
        let stop = Arc::new(AtomicBool::new(false));
        let accept_thread = {
            let store = store.clone();
            let stop = stop.clone();
            std::thread::Builder::new()
                .name("param-service".into())
                .spawn(move || accept_loop(listener, store, stop))
                .map_err(|e| ServiceError::Unreachable(e.to_string()))?
        };
        Ok(ParamServerHandle {
            addr,
            store,
            stop,
            accept_thread: Some(accept_thread),
        })
    }
}

impl ParamServerHandle {
    pub fn store(&self) -> &Arc<ParameterStore> {
        &self.store
    }

    pub fn stop(&mut self) {
        self.stop.store(true, Ordering::Release);
        if let Some(t) = self.accept_thread.take() {
            t.join().ok();
        }
    }
}

impl Drop for ParamServerHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

fn accept_loop(listener: TcpListener, store: Arc<ParameterStore>, stop: Arc<AtomicBool>) {
    let mut handlers = Vec::new();
    while !stop.load(Ordering::Acquire) {
        match listener.accept() {
            Ok((conn, _)) => {
                conn.set_nodelay(true).ok();
                conn.set_read_timeout(Some(Duration::from_millis(200))).ok();
                let store = store.clone();
                let stop = stop.clone();
                handlers.push(std::thread::spawn(move || conn_loop(conn, store, stop)));
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                std::thread::sleep(Duration::from_millis(5));
            }
            Err(_) => break,
        }
    }
    for h in handlers {
        h.join().ok();
    }
}

fn conn_loop(mut conn: TcpStream, store: Arc<ParameterStore>, stop: Arc<AtomicBool>) {
    while !stop.load(Ordering::Acquire) {
        let frame = match read_frame(&mut conn) {
            Ok(f) => f,
            Err(e)
                if e.kind() == io::ErrorKind::WouldBlock
                    || e.kind() == io::ErrorKind::TimedOut =>
            {
                continue;
            }
            Err(_) => return,
        };
        let reply = handle_request(&frame, &store);
        if write_frame(&mut conn, &reply).is_err() {
            return;
        }
    }
}

fn handle_request(frame: &[u8], store: &ParameterStore) -> Vec<u8> {
    match try_handle(frame, store) {
        Ok(reply) => reply,
        Err(msg) => {
            let mut out = vec![op::ERR_OTHER];
            out.extend_from_slice(&(msg.len() as u32).to_le_bytes());
            out.extend_from_slice(msg.as_bytes());
            out
        }
    }
}

fn try_handle(frame: &[u8], store: &ParameterStore) -> Result<Vec<u8>, String> {
    if frame.is_empty() {
        return Err("empty request".into());
    }
    let body = &frame[1..];
    match frame[0] {
        op::PUSH => {
            let blob = ParameterBlob::decode(body).map_err(|e| e.to_string())?;
            match store.push(blob) {
                Ok(version) => {
                    let mut out = vec![op::OK_PUSH];
                    out.extend_from_slice(&version.to_le_bytes());
                    Ok(out)
                }
                Err(ServiceError::VersionConflict { current, .. }) => {
                    let mut out = vec![op::ERR_VERSION_CONFLICT];
                    out.extend_from_slice(&current.to_le_bytes());
                    Ok(out)
                }
                Err(e) => Err(e.to_string()),
            }
        }
        op::HEAD => {
            let name = read_name(body)?;
            let mut out = vec![op::OK_HEAD];
            match store.head(&name) {
                Some(v) => {
                    out.push(1);
                    out.extend_from_slice(&v.to_le_bytes());
                }
                None => out.push(0),
            }
            Ok(out)
        }
        op::PULL => {
            let mut r = Reader::new(body);
            let name = r.string().map_err(|e| e.to_string())?;
            let have = r.u64().map_err(|e| e.to_string())?;
            match store.pull(&name, have) {
                Ok(Some(blob)) => {
                    let mut out = vec![op::OK_PULL_BLOB];
                    blob.encode_into(&mut out);
                    Ok(out)
                }
                Ok(None) => Ok(vec![op::OK_PULL_UPTODATE]),
                Err(ServiceError::UnknownPolicy(_)) => Ok(vec![op::ERR_UNKNOWN_POLICY]),
                Err(e) => Err(e.to_string()),
            }
        }
        op::LOG => {
            let name = read_name(body)?;
            let log = store.publish_log(&name);
            let mut out = vec![op::OK_LOG];
            out.extend_from_slice(&(log.len() as u32).to_le_bytes());
            for e in log {
                out.extend_from_slice(&e.version.to_le_bytes());
                out.extend_from_slice(&e.unix_ms.to_le_bytes());
            }
            Ok(out)
        }
        other => Err(format!("unknown opcode 0x{other:02x}")),
    }
}

fn read_name(body: &[u8]) -> Result<String, String> {
    let mut r = Reader::new(body);
    r.string().map_err(|e| e.to_string())
}
