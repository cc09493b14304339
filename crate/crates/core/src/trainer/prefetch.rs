//! Double-buffered batch staging.
//!
//! Two slots hold assembled training batches. The data lane claims a FREE
//! slot, loads it (FREE -> LOADING -> READY); the train lane takes the
//! oldest READY batch (READY -> IN_USE) and releases it after the step
//! (IN_USE -> FREE). At most one slot is LOADING and at most one IN_USE, so
//! batch assembly overlaps the gradient step without reordering batches.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use crate::model::types::SampleBatch;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotState {
    Free,
    Loading,
    Ready,
    InUse,
}

struct SlotEntry {
    state: SlotState,
    batch: Option<SampleBatch>,
    /// Load sequence number, so READY batches are consumed in load order.
    loaded_at: u64,
}

struct Inner {
    slots: [SlotEntry; 2],
    load_counter: u64,
    closed: bool,
}

pub struct PrefetchSlots {
    inner: Mutex<Inner>,
    ready_cv: Condvar,
}

impl Default for PrefetchSlots {
    fn default() -> Self {
        Self::new()
    }
}

impl PrefetchSlots {
    pub fn new() -> Self {
        Self {
            inner: Mutex::new(Inner {
                slots: [
                    SlotEntry {
                        state: SlotState::Free,
                        batch: None,
                        loaded_at: 0,
                    },
                    SlotEntry {
                        state: SlotState::Free,
                        batch: None,
                        loaded_at: 0,
                    },
                ],
                load_counter: 0,
                closed: false,
            }),
            ready_cv: Condvar::new(),
        }
    }

    /// Claim a slot for loading. None while another load is in progress or
    /// no slot is free.
    pub fn begin_load(&self) -> Option<usize> {
        let mut inner = self.inner.lock().unwrap();
        if inner.closed || inner.slots.iter().any(|s| s.state == SlotState::Loading) {
            return None;
        }
        let idx = inner
            .slots
            .iter()
            .position(|s| s.state == SlotState::Free)?;
        inner.slots[idx].state = SlotState::Loading;
        Some(idx)
    }

    pub fn finish_load(&self, idx: usize, batch: SampleBatch) {
        let mut inner = self.inner.lock().unwrap();
        assert_eq!(inner.slots[idx].state, SlotState::Loading);
        inner.load_counter += 1;
        let counter = inner.load_counter;
        let slot = &mut inner.slots[idx];
        slot.batch = Some(batch);
        slot.loaded_at = counter;
        slot.state = SlotState::Ready;
        self.ready_cv.notify_all();
    }

    pub fn abort_load(&self, idx: usize) {
        let mut inner = self.inner.lock().unwrap();
        assert_eq!(inner.slots[idx].state, SlotState::Loading);
        inner.slots[idx].state = SlotState::Free;
    }

    /// Take the oldest READY batch, waiting up to `timeout`. None on timeout
    /// or when another batch is still IN_USE.
    pub fn take_ready(&self, timeout: Duration) -> Option<(usize, SampleBatch)> {
        let mut inner = self.inner.lock().unwrap();
        let deadline = std::time::Instant::now() + timeout;
        loop {
            if inner.slots.iter().any(|s| s.state == SlotState::InUse) {
                return None;
            }
            let ready: Option<usize> = inner
                .slots
                .iter()
                .enumerate()
                .filter(|(_, s)| s.state == SlotState::Ready)
                .min_by_key(|(_, s)| s.loaded_at)
                .map(|(i, _)| i);
            if let Some(idx) = ready {
                let slot = &mut inner.slots[idx];
                slot.state = SlotState::InUse;
                return Some((idx, slot.batch.take().expect("ready slot holds a batch")));
            }
            if inner.closed {
                return None;
            }
            let now = std::time::Instant::now();
            if now >= deadline {
                return None;
            }
            let (guard, _) = self
                .ready_cv
                .wait_timeout(inner, deadline - now)
                .unwrap();
            inner = guard;
        }
    }

    pub fn release(&self, idx: usize) {
        let mut inner = self.inner.lock().unwrap();
        assert_eq!(inner.slots[idx].state, SlotState::InUse);
        inner.slots[idx].state = SlotState::Free;
    }

    pub fn close(&self) {
        let mut inner = self.inner.lock().unwrap();
        inner.closed = true;
        self.ready_cv.notify_all();
    }

    pub fn is_closed(&self) -> bool {
        self.inner.lock().unwrap().closed
    }

    /// (free, loading, ready, in_use) counts, for assertions and gauges.
    pub fn census(&self) -> (usize, usize, usize, usize) {
        let inner = self.inner.lock().unwrap();
        let count = |st: SlotState| inner.slots.iter().filter(|s| s.state == st).count();
        (
            count(SlotState::Free),
            count(SlotState::Loading),
            count(SlotState::Ready),
            count(SlotState::InUse),
        )
    }
}
