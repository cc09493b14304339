//! Gradient averaging across a trainer group.
//!
//! Every member sends its local vector to every other member and averages
//! the full set in ascending rank order, so all members compute bit-identical
//! results. The exchange runs over plain framed sockets in a full mesh;
//! single-member groups short-circuit.
//!
//! Exchange frame: `[kind u8][step u64][count u32][f64 * count]`, all
//! little-endian. `kind` separates the advantage-moment exchange from the
//! gradient exchange within one step.

use std::collections::BTreeMap;
use std::net::{SocketAddr, TcpStream};
use std::time::{Duration, Instant};

use crate::control::worker::{AddressBook, WorkerError};
use crate::streams::framing::{read_frame, write_frame};
use crate::streams::socket::{connect_retry, Acceptor};

pub const KIND_MOMENTS: u8 = 1;
pub const KIND_GRAD: u8 = 2;
pub const KIND_FRAMES: u8 = 3;

/// Default deadline for a group exchange before declaring a member stalled.
pub const REDUCE_TIMEOUT: Duration = Duration::from_secs(30);

/// A group exchange either yields every member's value or reports that a
/// peer's connection closed — which happens when the controller stops the
/// experiment and members leave at different step boundaries. Closure is a
/// clean stop signal; a peer that is alive but silent past the deadline is a
/// stall and stays a hard [`WorkerError::ReduceTimeout`].
#[derive(Debug)]
pub enum Reduced<T> {
    Value(T),
    Closed,
}

pub enum GroupLink {
    /// Single-member group: reduce is the identity.
    Solo,
    Mesh(MeshLink),
}

impl GroupLink {
    pub fn rank(&self) -> u32 {
        match self {
            GroupLink::Solo => 0,
            GroupLink::Mesh(m) => m.rank,
        }
    }

    pub fn size(&self) -> u32 {
        match self {
            GroupLink::Solo => 1,
            GroupLink::Mesh(m) => m.size,
        }
    }

    /// All-to-all exchange; returns every member's vector in rank order.
    pub fn exchange(
        &mut self,
        kind: u8,
        step: u64,
        local: &[f64],
        timeout: Duration,
    ) -> Result<Reduced<Vec<Vec<f64>>>, WorkerError> {
        match self {
            GroupLink::Solo => Ok(Reduced::Value(vec![local.to_vec()])),
            GroupLink::Mesh(m) => m.exchange(kind, step, local, timeout),
        }
    }

    /// Arithmetic mean across members with fixed (rank-ascending) summation
    /// order; bit-identical on every member.
    pub fn reduce_mean(
        &mut self,
        kind: u8,
        step: u64,
        local: &[f64],
        timeout: Duration,
    ) -> Result<Reduced<Vec<f64>>, WorkerError> {
        let all = match self.exchange(kind, step, local, timeout)? {
            Reduced::Value(v) => v,
            Reduced::Closed => return Ok(Reduced::Closed),
        };
        let k = all.len();
        let mut mean = vec![0.0; local.len()];
        for member in &all {
            if member.len() != local.len() {
                return Err(WorkerError::Config(format!(
                    "reduce length mismatch: {} vs {}",
                    member.len(),
                    local.len()
                )));
            }
            for (m, v) in mean.iter_mut().zip(member) {
                *m += v;
            }
        }
        let inv = 1.0 / k as f64;
        for m in mean.iter_mut() {
            *m *= inv;
        }
        Ok(Reduced::Value(mean))
    }
}

fn is_disconnect(e: &std::io::Error) -> bool {
    matches!(
        e.kind(),
        std::io::ErrorKind::UnexpectedEof
            | std::io::ErrorKind::ConnectionReset
            | std::io::ErrorKind::ConnectionAborted
            | std::io::ErrorKind::BrokenPipe
    )
}

/// One member's view of the full mesh.
pub struct MeshLink {
    rank: u32,
    size: u32,
    peers: BTreeMap<u32, TcpStream>,
}

impl MeshLink {
    /// Bind the listener for this member at configure time.
    pub fn bind(bind: &str) -> Result<(Acceptor, SocketAddr), WorkerError> {
        let acceptor = Acceptor::bind(bind).map_err(WorkerError::Stream)?;
        let addr = acceptor.local_addr;
        Ok((acceptor, addr))
    }

    /// Establish the full mesh: connect to every lower rank, accept from
    /// every higher rank. Peer identity travels in a hello frame.
    pub fn establish(
        acceptor: Acceptor,
        policy: &str,
        rank: u32,
        size: u32,
        book: &AddressBook,
    ) -> Result<Self, WorkerError> {
        assert!(size > 1);
        let mut peers = BTreeMap::new();
        for lower in 0..rank {
            let addr = book.lookup(&AddressBook::group_key(policy, lower))?;
            let mut conn =
                connect_retry(addr, crate::streams::OPEN_TIMEOUT).map_err(WorkerError::Stream)?;
            conn.set_nonblocking(false).map_err(StreamIo::wrap)?;
            write_frame(&mut conn, &rank.to_le_bytes()).map_err(StreamIo::wrap)?;
            peers.insert(lower, conn);
        }
        let expect_higher = (size - 1 - rank) as usize;
        let deadline = Instant::now() + crate::streams::OPEN_TIMEOUT;
        while peers.len() < (size - 1) as usize {
            for conn in acceptor.accept_ready().map_err(WorkerError::Stream)? {
                let mut stream = conn.stream;
                stream.set_nonblocking(false).map_err(StreamIo::wrap)?;
                let hello = read_frame(&mut stream).map_err(StreamIo::wrap)?;
                if hello.len() != 4 {
                    return Err(WorkerError::Config("bad mesh hello".into()));
                }
                let peer_rank = u32::from_le_bytes(hello.try_into().unwrap());
                peers.insert(peer_rank, stream);
            }
            if Instant::now() >= deadline {
                return Err(WorkerError::ReduceTimeout(format!(
                    "mesh rank {rank}: only {}/{} peers connected ({expect_higher} higher expected)",
                    peers.len(),
                    size - 1
                )));
            }
            std::thread::sleep(Duration::from_millis(2));
        }
        Ok(Self { rank, size, peers })
    }

    fn exchange(
        &mut self,
        kind: u8,
        step: u64,
        local: &[f64],
        timeout: Duration,
    ) -> Result<Reduced<Vec<Vec<f64>>>, WorkerError> {
        let mut payload = Vec::with_capacity(13 + local.len() * 8);
        payload.push(kind);
        payload.extend_from_slice(&step.to_le_bytes());
        payload.extend_from_slice(&(local.len() as u32).to_le_bytes());
        for v in local {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        for (peer, conn) in self.peers.iter_mut() {
            match write_frame(conn, &payload) {
                Ok(()) => {}
                Err(e) if is_disconnect(&e) => return Ok(Reduced::Closed),
                Err(e) => {
                    return Err(WorkerError::ReduceTimeout(format!(
                        "send to rank {peer}: {e}"
                    )))
                }
            }
        }
        let deadline = Instant::now() + timeout;
        let mut all: Vec<Option<Vec<f64>>> = vec![None; self.size as usize];
        all[self.rank as usize] = Some(local.to_vec());
        for (peer, conn) in self.peers.iter_mut() {
            let remaining = deadline.saturating_duration_since(Instant::now());
            if remaining.is_zero() {
                return Err(WorkerError::ReduceTimeout(format!(
                    "step {step}: rank {peer} did not reply in time"
                )));
            }
            conn.set_read_timeout(Some(remaining)).map_err(StreamIo::wrap)?;
            let frame = match read_frame(conn) {
                Ok(f) => f,
                Err(e) if is_disconnect(&e) => return Ok(Reduced::Closed),
                Err(e) => {
                    return Err(WorkerError::ReduceTimeout(format!(
                        "step {step}: recv from rank {peer}: {e}"
                    )))
                }
            };
            let (got_kind, got_step, values) = decode_exchange(&frame)?;
            if got_kind != kind || got_step != step {
                return Err(WorkerError::Config(format!(
                    "mesh desync: expected (kind {kind}, step {step}), got (kind {got_kind}, step {got_step})"
                )));
            }
            all[*peer as usize] = Some(values);
        }
        Ok(Reduced::Value(all.into_iter().map(|v| v.unwrap()).collect()))
    }
}

fn decode_exchange(frame: &[u8]) -> Result<(u8, u64, Vec<f64>), WorkerError> {
    if frame.len() < 13 {
        return Err(WorkerError::Config("short exchange frame".into()));
    }
    let kind = frame[0];
    let step = u64::from_le_bytes(frame[1..9].try_into().unwrap());
    let count = u32::from_le_bytes(frame[9..13].try_into().unwrap()) as usize;
    if frame.len() != 13 + count * 8 {
        return Err(WorkerError::Config("exchange frame length mismatch".into()));
    }
    let mut values = Vec::with_capacity(count);
    for i in 0..count {
        let at = 13 + i * 8;
        values.push(f64::from_le_bytes(frame[at..at + 8].try_into().unwrap()));
    }
    Ok((kind, step, values))
}

/// Tiny adapter so io errors map into WorkerError uniformly here.
struct StreamIo;
impl StreamIo {
    fn wrap(e: std::io::Error) -> WorkerError {
        WorkerError::Stream(crate::streams::StreamError::Io(e.to_string()))
    }
}
