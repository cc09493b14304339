//! In-process stream backends.
//!
//! Inline inference pairs a client and server view over one slot table that
//! lives inside the actor process; the actor services it synchronously with
//! its local policy. Inline sample queues connect workers running as threads
//! in one process, discovered through a process-wide registry keyed by
//! `{experiment}.{stream}.{consumer}`.

use std::collections::{HashMap, VecDeque};
use std::sync::{Arc, Mutex, OnceLock};

use super::shm::QueueCounters;
use super::StreamError;

/// One in-process inference slot: the same EMPTY/REQUEST/RESPONSE machine as
/// the shared-memory table, holding encoded payloads.
#[derive(Debug, Default)]
struct InlineSlot {
    state: u32,
    payload: Vec<u8>,
    seq: u64,
}

/// Slot table shared between the inline client and server halves. The actor
/// owns both halves, so the mutex is uncontended; it exists to make the pair
/// `Send` when a worker is moved onto its thread.
#[derive(Debug)]
pub struct InlineTable {
    slots: Mutex<Vec<InlineSlot>>,
}

impl InlineTable {
    pub fn new(slot_count: usize) -> Arc<Self> {
        Arc::new(Self {
            slots: Mutex::new((0..slot_count).map(|_| InlineSlot::default()).collect()),
        })
    }

    pub fn slot_count(&self) -> usize {
        self.slots.lock().unwrap().len()
    }

    pub fn state(&self, slot: usize) -> u32 {
        self.slots.lock().unwrap()[slot].state
    }

    pub fn seq(&self, slot: usize) -> u64 {
        self.slots.lock().unwrap()[slot].seq
    }

    pub fn publish(&self, slot: usize, payload: &[u8], state: u32, bump_seq: bool) {
        let mut slots = self.slots.lock().unwrap();
        let s = &mut slots[slot];
        s.payload = payload.to_vec();
        if bump_seq {
            s.seq += 1;
        }
        s.state = state;
    }

    pub fn read_if(&self, slot: usize, state: u32) -> Option<Vec<u8>> {
        let slots = self.slots.lock().unwrap();
        let s = &slots[slot];
        if s.state == state {
            Some(s.payload.clone())
        } else {
            None
        }
    }

    pub fn set_state(&self, slot: usize, state: u32) {
        self.slots.lock().unwrap()[slot].state = state;
    }
}

/// An in-process bounded sample queue with the same counter semantics as the
/// shared-memory rings. One per (stream, consumer); producers share it.
#[derive(Debug)]
pub struct InlineSampleQueue {
    inner: Mutex<InlineQueueInner>,
    capacity: usize,
    block: bool,
}

#[derive(Debug, Default)]
struct InlineQueueInner {
    items: VecDeque<Vec<u8>>,
    produced: u64,
    consumed: u64,
    dropped: u64,
    closed: bool,
}

impl InlineSampleQueue {
    pub fn new(capacity: usize, block: bool) -> Arc<Self> {
        Arc::new(Self {
            inner: Mutex::new(InlineQueueInner::default()),
            capacity,
            block,
        })
    }

    /// Returns true if an eviction happened.
    pub fn post(&self, payload: Vec<u8>) -> Result<bool, StreamError> {
        loop {
            {
                let mut q = self.inner.lock().unwrap();
                if q.closed {
                    return Err(StreamError::QueueClosed);
                }
                if q.items.len() < self.capacity {
                    q.items.push_back(payload);
                    q.produced += 1;
                    return Ok(false);
                }
                if !self.block {
                    q.items.pop_front();
                    q.dropped += 1;
                    q.items.push_back(payload);
                    q.produced += 1;
                    return Ok(true);
                }
            }
            std::thread::sleep(std::time::Duration::from_micros(100));
        }
    }

    pub fn pop(&self) -> Option<Vec<u8>> {
        let mut q = self.inner.lock().unwrap();
        let item = q.items.pop_front();
        if item.is_some() {
            q.consumed += 1;
        }
        item
    }

    pub fn close(&self) {
        self.inner.lock().unwrap().closed = true;
    }

    pub fn counters(&self) -> QueueCounters {
        let q = self.inner.lock().unwrap();
        QueueCounters {
            produced: q.produced,
            consumed: q.consumed,
            dropped: q.dropped,
        }
    }
}

type QueueRegistry = Mutex<HashMap<String, Arc<InlineSampleQueue>>>;

fn registry() -> &'static QueueRegistry {
    static REGISTRY: OnceLock<QueueRegistry> = OnceLock::new();
    REGISTRY.get_or_init(|| Mutex::new(HashMap::new()))
}

fn queue_key(experiment: &str, stream: &str, consumer: u32) -> String {
    format!("{experiment}.{stream}.{consumer}")
}

/// Consumer side: create and register the queue.
pub fn register_queue(
    experiment: &str,
    stream: &str,
    consumer: u32,
    capacity: usize,
    block: bool,
) -> Arc<InlineSampleQueue> {
    let q = InlineSampleQueue::new(capacity, block);
    registry()
        .lock()
        .unwrap()
        .insert(queue_key(experiment, stream, consumer), q.clone());
    q
}

/// Producer side: look up the consumer's queue, waiting briefly for it to be
/// registered.
pub fn lookup_queue(
    experiment: &str,
    stream: &str,
    consumer: u32,
    timeout: std::time::Duration,
) -> Result<Arc<InlineSampleQueue>, StreamError> {
    let key = queue_key(experiment, stream, consumer);
    let deadline = std::time::Instant::now() + timeout;
    loop {
        if let Some(q) = registry().lock().unwrap().get(&key) {
            return Ok(q.clone());
        }
        if std::time::Instant::now() >= deadline {
            return Err(StreamError::TransportUnavailable(format!(
                "inline queue {key} not registered"
            )));
        }
        std::thread::sleep(std::time::Duration::from_millis(2));
    }
}

/// Drop a queue from the registry at experiment teardown.
pub fn unregister_queue(experiment: &str, stream: &str, consumer: u32) {
    registry()
        .lock()
        .unwrap()
        .remove(&queue_key(experiment, stream, consumer));
}
