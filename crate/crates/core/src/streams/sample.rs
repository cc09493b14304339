//! Simplex sample stream endpoints: producers post encoded trajectories,
//! one consumer per endpoint drains them in per-producer FIFO order.
//!
//! Backends: shared-memory ring banks (one single-producer ring per posting
//! worker), sockets (per-connection bounded queues on the consumer side,
//! applying the same drop policy), and in-process queues for thread-backed
//! experiments. A stream defined with no consumer at all degrades to a
//! counting sink.

use std::collections::VecDeque;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use crate::model::config::DropPolicy;
use crate::model::types::Trajectory;
use crate::model::wire::{WireDecode, WireEncode};

use super::inline::InlineSampleQueue;
use super::shm::{QueueCounters, SampleRings};
use super::socket::{connect_retry, write_frame_nonblocking, Acceptor, Connection};
use super::{StreamError, OPEN_TIMEOUT};

/// What happened to a post: `Dropped` means the queue was full and the
/// oldest resident item was evicted to make room (DropOldest policy only).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PostOutcome {
    Posted,
    Dropped,
}

enum ProducerBackend {
    Shm { rings: SampleRings, ring: usize, block: bool },
    Socket { stream: std::net::TcpStream },
    Inline { queue: Arc<InlineSampleQueue> },
    /// No consumer exists; count and discard.
    Sink,
}

/// Posting endpoint owned by one worker.
pub struct SampleProducer {
    backend: ProducerBackend,
    produced: u64,
    dropped: u64,
}

impl SampleProducer {
    pub fn open_shm(region: &str, ring: u32, block: bool) -> Result<Self, StreamError> {
        let rings = SampleRings::open(region, OPEN_TIMEOUT)?;
        if ring as usize >= rings.ring_count() {
            return Err(StreamError::TransportUnavailable(format!(
                "ring {ring} out of range for region {region}"
            )));
        }
        Ok(Self {
            backend: ProducerBackend::Shm {
                rings,
                ring: ring as usize,
                block,
            },
            produced: 0,
            dropped: 0,
        })
    }

    pub fn open_socket(addr: SocketAddr) -> Result<Self, StreamError> {
        let stream = connect_retry(addr, OPEN_TIMEOUT)?;
        stream.set_nonblocking(true)?;
        Ok(Self {
            backend: ProducerBackend::Socket { stream },
            produced: 0,
            dropped: 0,
        })
    }

    pub fn inline(queue: Arc<InlineSampleQueue>) -> Self {
        Self {
            backend: ProducerBackend::Inline { queue },
            produced: 0,
            dropped: 0,
        }
    }

    pub fn sink() -> Self {
        Self {
            backend: ProducerBackend::Sink,
            produced: 0,
            dropped: 0,
        }
    }

    pub fn post(&mut self, traj: &Trajectory) -> Result<PostOutcome, StreamError> {
        self.post_bytes(traj.encode())
    }

    /// Post pre-encoded bytes (pass-through workers re-post without decode).
    pub fn post_bytes(&mut self, bytes: Vec<u8>) -> Result<PostOutcome, StreamError> {
        let outcome = match &mut self.backend {
            ProducerBackend::Shm { rings, ring, block } => {
                if rings.post(*ring, &bytes, *block)? {
                    PostOutcome::Dropped
                } else {
                    PostOutcome::Posted
                }
            }
            ProducerBackend::Socket { stream } => {
                write_frame_nonblocking(stream, &bytes)?;
                PostOutcome::Posted
            }
            ProducerBackend::Inline { queue } => {
                if queue.post(bytes)? {
                    PostOutcome::Dropped
                } else {
                    PostOutcome::Posted
                }
            }
            ProducerBackend::Sink => {
                self.dropped += 1;
                PostOutcome::Dropped
            }
        };
        self.produced += 1;
        if outcome == PostOutcome::Dropped && !matches!(self.backend, ProducerBackend::Sink) {
            self.dropped += 1;
        }
        Ok(outcome)
    }

    /// Local view: posts made through this handle and evictions it caused.
    pub fn counters(&self) -> QueueCounters {
        QueueCounters {
            produced: self.produced,
            consumed: 0,
            dropped: self.dropped,
        }
    }
}

struct ConnQueue {
    conn: Connection,
    queue: VecDeque<Vec<u8>>,
}

enum ConsumerBackend {
    Shm { rings: SampleRings, cursor: usize },
    Socket {
        acceptor: Acceptor,
        conns: Vec<ConnQueue>,
        capacity: usize,
        block: bool,
        produced: u64,
        consumed: u64,
        dropped: u64,
        cursor: usize,
    },
    Inline { queue: Arc<InlineSampleQueue> },
}

/// Draining endpoint owned by one worker.
pub struct SampleConsumer {
    backend: ConsumerBackend,
}

impl SampleConsumer {
    /// Create the shared-memory ring bank for `rings` producers.
    pub fn create_shm(
        region: &str,
        rings: usize,
        capacity: usize,
        payload_cap: usize,
    ) -> Result<Self, StreamError> {
        Ok(Self {
            backend: ConsumerBackend::Shm {
                rings: SampleRings::create(region, rings, capacity, payload_cap)?,
                cursor: 0,
            },
        })
    }

    pub fn bind_socket(
        bind: &str,
        capacity: usize,
        drop_policy: DropPolicy,
    ) -> Result<(Self, SocketAddr), StreamError> {
        let acceptor = Acceptor::bind(bind)?;
        let addr = acceptor.local_addr;
        Ok((
            Self {
                backend: ConsumerBackend::Socket {
                    acceptor,
                    conns: Vec::new(),
                    capacity,
                    block: drop_policy == DropPolicy::Block,
                    produced: 0,
                    consumed: 0,
                    dropped: 0,
                    cursor: 0,
                },
            },
            addr,
        ))
    }

    pub fn inline(queue: Arc<InlineSampleQueue>) -> Self {
        Self {
            backend: ConsumerBackend::Inline { queue },
        }
    }

    /// Move up to `max_count` trajectories into `buf` in per-producer FIFO
    /// order. Nonblocking; returns the number moved.
    pub fn consume_to(
        &mut self,
        buf: &mut Vec<Trajectory>,
        max_count: usize,
    ) -> Result<usize, StreamError> {
        let mut moved = 0;
        while moved < max_count {
            match self.pop_bytes()? {
                Some(bytes) => {
                    buf.push(Trajectory::decode(&bytes)?);
                    moved += 1;
                }
                None => break,
            }
        }
        Ok(moved)
    }

    /// Raw variant of `consume_to` for pass-through workers.
    pub fn pop_bytes(&mut self) -> Result<Option<Vec<u8>>, StreamError> {
        match &mut self.backend {
            ConsumerBackend::Shm { rings, cursor } => {
                let n = rings.ring_count();
                for _ in 0..n {
                    let r = *cursor % n.max(1);
                    *cursor = cursor.wrapping_add(1);
                    if let Some(bytes) = rings.pop(r) {
                        return Ok(Some(bytes));
                    }
                }
                Ok(None)
            }
            ConsumerBackend::Socket {
                acceptor,
                conns,
                capacity,
                block,
                produced,
                dropped,
                consumed,
                cursor,
            } => {
                for conn in acceptor.accept_ready()? {
                    conns.push(ConnQueue {
                        conn,
                        queue: VecDeque::new(),
                    });
                }
                // Ingest available frames under the queue policy. Under
                // Block, a full queue stops reads on that connection and TCP
                // backpressure stalls the producer.
                for cq in conns.iter_mut() {
                    loop {
                        if cq.queue.len() >= *capacity && *block {
                            break;
                        }
                        match cq.conn.poll_frame()? {
                            Some(frame) => {
                                if cq.queue.len() >= *capacity {
                                    cq.queue.pop_front();
                                    *dropped += 1;
                                }
                                cq.queue.push_back(frame);
                                *produced += 1;
                            }
                            None => break,
                        }
                    }
                }
                let n = conns.len();
                for _ in 0..n {
                    let i = *cursor % n.max(1);
                    *cursor = cursor.wrapping_add(1);
                    if let Some(bytes) = conns[i].queue.pop_front() {
                        *consumed += 1;
                        return Ok(Some(bytes));
                    }
                }
                Ok(None)
            }
            ConsumerBackend::Inline { queue } => Ok(queue.pop()),
        }
    }

    /// Aggregate queue counters as visible from the consumer side.
    pub fn counters(&self) -> QueueCounters {
        match &self.backend {
            ConsumerBackend::Shm { rings, .. } => {
                let mut total = QueueCounters::default();
                for r in 0..rings.ring_count() {
                    let c = rings.counters(r);
                    total.produced += c.produced;
                    total.consumed += c.consumed;
                    total.dropped += c.dropped;
                }
                total
            }
            ConsumerBackend::Socket {
                produced,
                consumed,
                dropped,
                ..
            } => QueueCounters {
                produced: *produced,
                consumed: *consumed,
                dropped: *dropped,
            },
            ConsumerBackend::Inline { queue } => queue.counters(),
        }
    }

    /// Signal producers that the queue is closing (shared-memory only; other
    /// backends surface closure through the transport itself).
    pub fn close(&self) {
        if let ConsumerBackend::Shm { rings, .. } = &self.backend {
            rings.close_all();
        }
        if let ConsumerBackend::Inline { queue } = &self.backend {
            queue.close();
        }
    }
}

/// Convenience: wait until at least one trajectory can be consumed or the
/// timeout passes. Returns how many were moved.
pub fn consume_blocking(
    consumer: &mut SampleConsumer,
    buf: &mut Vec<Trajectory>,
    max_count: usize,
    timeout: Duration,
) -> Result<usize, StreamError> {
    let deadline = std::time::Instant::now() + timeout;
    loop {
        let n = consumer.consume_to(buf, max_count)?;
        if n > 0 || std::time::Instant::now() >= deadline {
            return Ok(n);
        }
        std::thread::sleep(Duration::from_micros(200));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::types::{ActionId, ObservationVector, TransitionStep};

    fn traj(tag: u64, steps: usize) -> Trajectory {
        Trajectory {
            agent_id: format!("0:0:{tag}"),
            policy_name: "rl".into(),
            steps: (0..steps)
                .map(|i| TransitionStep {
                    obs: ObservationVector::new(vec![tag as f64, i as f64]),
                    action: ActionId::new(0),
                    reward: 1.0,
                    done: i + 1 == steps,
                    truncated: false,
                    log_prob_old: -0.2,
                    value_pred: 0.0,
                    policy_version: 1,
                })
                .collect(),
            bootstrap_value: 0.0,
            env_frames: steps as u64,
        }
    }

    #[test]
    fn shm_post_consume_fifo() {
        let region = format!("/srl-test.spl.{}", std::process::id());
        let mut consumer = SampleConsumer::create_shm(&region, 1, 4, 4096).unwrap();
        let mut producer = SampleProducer::open_shm(&region, 0, false).unwrap();
        for i in 0..4 {
            assert_eq!(producer.post(&traj(i, 3)).unwrap(), PostOutcome::Posted);
        }
        let mut buf = Vec::new();
        assert_eq!(consumer.consume_to(&mut buf, 2).unwrap(), 2);
        assert_eq!(buf[0].agent_id, "0:0:0");
        assert_eq!(buf[1].agent_id, "0:0:1");
        assert_eq!(consumer.consume_to(&mut buf, 10).unwrap(), 2);
        assert_eq!(consumer.consume_to(&mut buf, 10).unwrap(), 0);
    }

    #[test]
    fn shm_eviction_accounting() {
        let region = format!("/srl-test.splev.{}", std::process::id());
        let consumer = SampleConsumer::create_shm(&region, 1, 4, 4096).unwrap();
        let mut producer = SampleProducer::open_shm(&region, 0, false).unwrap();
        for i in 0..4 {
            assert_eq!(producer.post(&traj(i, 2)).unwrap(), PostOutcome::Posted);
        }
        assert_eq!(producer.post(&traj(4, 2)).unwrap(), PostOutcome::Dropped);
        let c = consumer.counters();
        assert_eq!(c.produced, 5);
        assert_eq!(c.dropped, 1);
        assert_eq!(c.resident(), 4);
    }

    #[test]
    fn socket_roundtrip_and_policy() {
        let (mut consumer, addr) =
            SampleConsumer::bind_socket("127.0.0.1:0", 4, DropPolicy::DropOldest).unwrap();
        let mut producer = SampleProducer::open_socket(addr).unwrap();
        for i in 0..6 {
            producer.post(&traj(i, 2)).unwrap();
        }
        // Wait for the frames to arrive and the drop policy to apply.
        let mut buf = Vec::new();
        let deadline = std::time::Instant::now() + Duration::from_secs(5);
        while buf.len() < 4 && std::time::Instant::now() < deadline {
            consumer.consume_to(&mut buf, 16).unwrap();
            std::thread::sleep(Duration::from_millis(1));
        }
        // 6 produced, capacity 4: at least the last items survive, FIFO.
        assert!(buf.len() >= 4);
        let ids: Vec<&str> = buf.iter().map(|t| t.agent_id.as_str()).collect();
        let mut sorted = ids.clone();
        sorted.sort();
        // FIFO per single producer: arrival order is increasing tags.
        assert_eq!(ids, {
            let mut v = ids.clone();
            v.sort();
            v
        });
        assert_eq!(sorted.last().unwrap(), &"0:0:5");
    }

    #[test]
    fn sink_counts_and_discards() {
        let mut p = SampleProducer::sink();
        assert_eq!(p.post(&traj(0, 2)).unwrap(), PostOutcome::Dropped);
        let c = p.counters();
        assert_eq!((c.produced, c.dropped), (1, 1));
    }
}
