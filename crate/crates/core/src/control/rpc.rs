//! Control-channel protocol between the controller and workers.
//!
//! Workers dial the controller, announce themselves with a hello, then
//! process synchronous verbs: CONFIGURE (build from the plan slice, bind
//! server endpoints), START (connect clients and run), PAUSE, EXIT. Frames
//! are the same 4-byte length prefix as data streams; payloads are JSON
//! because the control plane is low-rate and debuggability wins.

use std::collections::BTreeMap;
use std::io;
use std::net::{SocketAddr, TcpStream};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::model::validate::{ModelSpec, PlannedStream, PlannedWorker};
use crate::streams::framing::{read_frame, write_frame, FrameReader};

use super::worker::{AddressBook, BoundEndpoints};

pub const RPC_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfigurePayload {
    pub experiment: String,
    pub seed: u64,
    pub worker: PlannedWorker,
    pub streams: Vec<PlannedStream>,
    pub models: BTreeMap<String, ModelSpec>,
    pub param_service: Option<SocketAddr>,
    pub run_dir: String,
    pub metrics_interval_ms: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Verb {
    Configure(Box<ConfigurePayload>),
    Start(Box<AddressBook>),
    Pause,
    Exit,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Reply {
    Hello { kind: String, index: u32 },
    Configured { bound: BoundEndpoints },
    Ack,
    /// Verb rejected (e.g. illegal transition); the worker keeps running.
    Rejected { message: String },
    /// The worker hit a fatal error and is going down.
    Failed { message: String },
}

pub fn send_msg<T: Serialize>(conn: &mut TcpStream, msg: &T) -> io::Result<()> {
    let bytes = serde_json::to_vec(msg)?;
    write_frame(conn, &bytes)
}

pub fn recv_msg<T: for<'de> Deserialize<'de>>(conn: &mut TcpStream) -> io::Result<T> {
    let frame = read_frame(conn)?;
    serde_json::from_slice(&frame).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
}

/// Nonblocking receive used inside worker poll loops.
pub struct MsgReader {
    reader: FrameReader,
}

impl Default for MsgReader {
    fn default() -> Self {
        Self::new()
    }
}

impl MsgReader {
    pub fn new() -> Self {
        Self {
            reader: FrameReader::new(),
        }
    }

    pub fn poll<T: for<'de> Deserialize<'de>>(
        &mut self,
        conn: &mut TcpStream,
    ) -> io::Result<Option<T>> {
        match self.reader.poll_frame(conn)? {
            Some(frame) => serde_json::from_slice(&frame)
                .map(Some)
                .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e)),
            None => Ok(None),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::net::TcpListener;

    #[test]
    fn verb_reply_roundtrip() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let t = std::thread::spawn(move || {
            let (mut conn, _) = listener.accept().unwrap();
            let verb: Verb = recv_msg(&mut conn).unwrap();
            match verb {
                Verb::Pause => send_msg(&mut conn, &Reply::Ack).unwrap(),
                _ => send_msg(
                    &mut conn,
                    &Reply::Rejected {
                        message: "unexpected".into(),
                    },
                )
                .unwrap(),
            }
        });
        let mut conn = TcpStream::connect(addr).unwrap();
        send_msg(&mut conn, &Verb::Pause).unwrap();
        let reply: Reply = recv_msg(&mut conn).unwrap();
        assert!(matches!(reply, Reply::Ack));
        t.join().unwrap();
    }
}
