//! POSIX shared-memory regions and the two data structures living in them:
//! the inference slot table and per-producer sample rings.
//!
//! All cross-process coordination goes through atomics embedded in the
//! mapped region; payload bytes are copied with volatile accesses and
//! validated by the surrounding flag/stamp protocol before use. The byte
//! layout is fixed and documented in `docs/shm-layout.md`.
//!
//! Slot state machine (one slot per client):
//!   EMPTY -> REQUEST   client: write payload, then store state (Release)
//!   REQUEST -> RESPONSE server: read (Acquire), write reply, store (Release)
//!   RESPONSE -> EMPTY  client: read (Acquire), then store EMPTY (Release)
//!
//! Sample rings are single-producer bounded queues with ticket stamps:
//! stamp `2t+1` marks "writing ticket t", `2t+2` marks "ticket t complete".
//! The consumer copies a slot and re-checks the stamp to detect overwrites;
//! eviction under DropOldest is a head CAS that either the consumer (pop) or
//! the producer (drop) wins.

use std::sync::atomic::{fence, AtomicU32, AtomicU64, Ordering};
use std::time::{Duration, Instant};

use super::StreamError;

const MAGIC: u64 = 0x5352_4c53_484d_3031; // "SRLSHM01"
const LAYOUT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 64;

pub const KIND_INFERENCE: u32 = 1;
pub const KIND_SAMPLE: u32 = 2;

pub const STATE_EMPTY: u32 = 0;
pub const STATE_REQUEST: u32 = 1;
pub const STATE_RESPONSE: u32 = 2;

const SLOT_HEADER: usize = 24; // state u32, pad, seq u64, len u32, pad
const RING_HEADER: usize = 64; // head, tail, produced, consumed, dropped u64; closed u32
const RING_SLOT_HEADER: usize = 16; // stamp u64, len u32, pad

fn align8(n: usize) -> usize {
    (n + 7) & !7
}

pub fn slot_stride(payload_cap: usize) -> usize {
    align8(SLOT_HEADER + payload_cap)
}

pub fn ring_slot_stride(payload_cap: usize) -> usize {
    align8(RING_SLOT_HEADER + payload_cap)
}

pub fn ring_stride(payload_cap: usize, capacity: usize) -> usize {
    RING_HEADER + capacity * ring_slot_stride(payload_cap)
}

/// Region name for one server-side stream endpoint:
/// `/srl.{experiment}.{stream}.{role}{index}`.
pub fn region_name(experiment: &str, stream: &str, role: &str, index: u32) -> String {
    format!("/srl.{experiment}.{stream}.{role}{index}")
}

/// Best-effort unlink, for teardown sweeps. Missing regions are fine.
pub fn unlink_region(name: &str) {
    if let Ok(cname) = std::ffi::CString::new(name) {
        unsafe {
            libc::shm_unlink(cname.as_ptr());
        }
    }
}

/// A mapped POSIX shared-memory object. The creator initializes the header
/// and unlinks the name on drop; openers just unmap.
pub struct ShmRegion {
    ptr: *mut u8,
    len: usize,
    name: std::ffi::CString,
    owner: bool,
}

// The region is plain shared bytes; every access from safe code goes through
// the atomics and copy protocols below, which are what make cross-thread and
// cross-process use sound.
unsafe impl Send for ShmRegion {}
unsafe impl Sync for ShmRegion {}

impl ShmRegion {
    /// Create (or replace) a region of `len` bytes. Any stale object with
    /// the same name — e.g. from a crashed run — is unlinked first.
    pub fn create(name: &str, len: usize) -> Result<Self, StreamError> {
        let cname = std::ffi::CString::new(name)
            .map_err(|_| StreamError::TransportUnavailable("bad region name".into()))?;
        unsafe {
            libc::shm_unlink(cname.as_ptr());
            let fd = libc::shm_open(
                cname.as_ptr(),
                libc::O_CREAT | libc::O_EXCL | libc::O_RDWR,
                0o600,
            );
            if fd < 0 {
                return Err(StreamError::TransportUnavailable(format!(
                    "shm_open({name}): {}",
                    std::io::Error::last_os_error()
                )));
            }
            if libc::ftruncate(fd, len as libc::off_t) != 0 {
                let err = std::io::Error::last_os_error();
                libc::close(fd);
                libc::shm_unlink(cname.as_ptr());
                return Err(StreamError::TransportUnavailable(format!(
                    "ftruncate({name}): {err}"
                )));
            }
            let ptr = libc::mmap(
                std::ptr::null_mut(),
                len,
                libc::PROT_READ | libc::PROT_WRITE,
                libc::MAP_SHARED,
                fd,
                0,
            );
            libc::close(fd);
            if ptr == libc::MAP_FAILED {
                libc::shm_unlink(cname.as_ptr());
                return Err(StreamError::TransportUnavailable(format!(
                    "mmap({name}): {}",
                    std::io::Error::last_os_error()
                )));
            }
            Ok(Self {
                ptr: ptr as *mut u8,
                len,
                name: cname,
                owner: true,
            })
        }
    }

    /// Map an existing region, retrying until its creator marks it ready or
    /// the deadline passes.
    pub fn open(name: &str, len: usize, timeout: Duration) -> Result<Self, StreamError> {
        let cname = std::ffi::CString::new(name)
            .map_err(|_| StreamError::TransportUnavailable("bad region name".into()))?;
        let deadline = Instant::now() + timeout;
        loop {
            let mapped = unsafe {
                let fd = libc::shm_open(cname.as_ptr(), libc::O_RDWR, 0);
                if fd < 0 {
                    None
                } else {
                    let ptr = libc::mmap(
                        std::ptr::null_mut(),
                        len,
                        libc::PROT_READ | libc::PROT_WRITE,
                        libc::MAP_SHARED,
                        fd,
                        0,
                    );
                    libc::close(fd);
                    if ptr == libc::MAP_FAILED {
                        None
                    } else {
                        Some(ptr as *mut u8)
                    }
                }
            };
            if let Some(ptr) = mapped {
                let region = Self {
                    ptr,
                    len,
                    name: cname.clone(),
                    owner: false,
                };
                if region.header_ready() {
                    return Ok(region);
                }
                // Not initialized yet; unmap happens in Drop, retry below.
            }
            if Instant::now() >= deadline {
                return Err(StreamError::TransportUnavailable(format!(
                    "region {name} not available within {timeout:?}"
                )));
            }
            std::thread::sleep(Duration::from_millis(5));
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn check(&self, offset: usize, size: usize) {
        assert!(offset + size <= self.len, "region access out of bounds");
    }

    pub fn atomic_u32(&self, offset: usize) -> &AtomicU32 {
        self.check(offset, 4);
        debug_assert_eq!(offset % 4, 0);
        unsafe { AtomicU32::from_ptr(self.ptr.add(offset) as *mut u32) }
    }

    pub fn atomic_u64(&self, offset: usize) -> &AtomicU64 {
        self.check(offset, 8);
        debug_assert_eq!(offset % 8, 0);
        unsafe { AtomicU64::from_ptr(self.ptr.add(offset) as *mut u64) }
    }

    /// Volatile byte copy into the region. Callers must hold the write side
    /// of the slot/stamp protocol for this range.
    pub fn write_bytes(&self, offset: usize, src: &[u8]) {
        self.check(offset, src.len());
        unsafe {
            let mut dst = self.ptr.add(offset);
            for &b in src {
                std::ptr::write_volatile(dst, b);
                dst = dst.add(1);
            }
        }
    }

    /// Volatile byte copy out of the region. The caller validates the copy
    /// afterwards via the protocol (stamp re-check or state flag ownership).
    pub fn read_bytes(&self, offset: usize, dst: &mut [u8]) {
        self.check(offset, dst.len());
        unsafe {
            let mut src = self.ptr.add(offset);
            for b in dst.iter_mut() {
                *b = std::ptr::read_volatile(src);
                src = src.add(1);
            }
        }
    }

    pub fn init_header(&self, kind: u32, count: u32, payload_cap: u32, ring_capacity: u32) {
        self.atomic_u64(0).store(MAGIC, Ordering::Relaxed);
        self.atomic_u32(8).store(LAYOUT_VERSION, Ordering::Relaxed);
        self.atomic_u32(12).store(kind, Ordering::Relaxed);
        self.atomic_u32(16).store(count, Ordering::Relaxed);
        self.atomic_u32(20).store(payload_cap, Ordering::Relaxed);
        self.atomic_u32(24).store(ring_capacity, Ordering::Relaxed);
        self.atomic_u32(28).store(1, Ordering::Release); // ready
    }

    pub fn header_ready(&self) -> bool {
        if self.len < HEADER_LEN {
            return false;
        }
        self.atomic_u32(28).load(Ordering::Acquire) == 1
            && self.atomic_u64(0).load(Ordering::Relaxed) == MAGIC
            && self.atomic_u32(8).load(Ordering::Relaxed) == LAYOUT_VERSION
    }

    pub fn header_kind(&self) -> u32 {
        self.atomic_u32(12).load(Ordering::Relaxed)
    }

    pub fn header_count(&self) -> u32 {
        self.atomic_u32(16).load(Ordering::Relaxed)
    }

    pub fn header_payload_cap(&self) -> u32 {
        self.atomic_u32(20).load(Ordering::Relaxed)
    }

    pub fn header_ring_capacity(&self) -> u32 {
        self.atomic_u32(24).load(Ordering::Relaxed)
    }
}

impl Drop for ShmRegion {
    fn drop(&mut self) {
        unsafe {
            libc::munmap(self.ptr as *mut libc::c_void, self.len);
            if self.owner {
                libc::shm_unlink(self.name.as_ptr());
            }
        }
    }
}

/// View over an inference slot table (header + `slot_count` slots).
pub struct SlotTable {
    region: ShmRegion,
    slot_count: usize,
    payload_cap: usize,
}

impl SlotTable {
    pub fn create(name: &str, slot_count: usize, payload_cap: usize) -> Result<Self, StreamError> {
        let payload_cap = align8(payload_cap);
        let len = HEADER_LEN + slot_count.max(1) * slot_stride(payload_cap);
        let region = ShmRegion::create(name, len)?;
        // Slots start EMPTY with zero sequence; fresh mappings are zeroed.
        region.init_header(KIND_INFERENCE, slot_count as u32, payload_cap as u32, 0);
        Ok(Self {
            region,
            slot_count,
            payload_cap,
        })
    }

    pub fn open(name: &str, timeout: Duration) -> Result<Self, StreamError> {
        // Map the header first to learn the true size, then remap fully.
        let head = ShmRegion::open(name, HEADER_LEN, timeout)?;
        if head.header_kind() != KIND_INFERENCE {
            return Err(StreamError::TransportUnavailable(format!(
                "region {name} is not an inference table"
            )));
        }
        let slot_count = head.header_count() as usize;
        let payload_cap = head.header_payload_cap() as usize;
        drop(head);
        let len = HEADER_LEN + slot_count.max(1) * slot_stride(payload_cap);
        let region = ShmRegion::open(name, len, timeout)?;
        Ok(Self {
            region,
            slot_count,
            payload_cap,
        })
    }

    pub fn slot_count(&self) -> usize {
        self.slot_count
    }

    pub fn payload_cap(&self) -> usize {
        self.payload_cap
    }

    fn slot_offset(&self, slot: usize) -> usize {
        assert!(slot < self.slot_count, "slot index out of range");
        HEADER_LEN + slot * slot_stride(self.payload_cap)
    }

    pub fn state(&self, slot: usize) -> &AtomicU32 {
        self.region.atomic_u32(self.slot_offset(slot))
    }

    pub fn seq(&self, slot: usize) -> &AtomicU64 {
        self.region.atomic_u64(self.slot_offset(slot) + 8)
    }

    /// Write a payload and publish the new state with Release ordering.
    pub fn publish(&self, slot: usize, payload: &[u8], state: u32) -> Result<(), StreamError> {
        if payload.len() > self.payload_cap {
            return Err(StreamError::TransportUnavailable(format!(
                "payload {} exceeds slot capacity {}",
                payload.len(),
                self.payload_cap
            )));
        }
        let base = self.slot_offset(slot);
        self.region
            .atomic_u32(base + 16)
            .store(payload.len() as u32, Ordering::Relaxed);
        self.region.write_bytes(base + SLOT_HEADER, payload);
        self.state(slot).store(state, Ordering::Release);
        Ok(())
    }

    /// Read the payload of a slot whose state the caller has already
    /// observed with Acquire ordering (and therefore owns until it flips the
    /// state onward).
    pub fn read_payload(&self, slot: usize) -> Vec<u8> {
        let base = self.slot_offset(slot);
        let len = self.region.atomic_u32(base + 16).load(Ordering::Relaxed) as usize;
        let len = len.min(self.payload_cap);
        let mut buf = vec![0u8; len];
        self.region.read_bytes(base + SLOT_HEADER, &mut buf);
        buf
    }
}

/// Counters shared by every sample-queue backend.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct QueueCounters {
    pub produced: u64,
    pub consumed: u64,
    pub dropped: u64,
}

impl QueueCounters {
    pub fn resident(&self) -> u64 {
        self.produced - self.consumed - self.dropped
    }
}

/// View over a bank of single-producer sample rings.
pub struct SampleRings {
    region: ShmRegion,
    ring_count: usize,
    capacity: usize,
    payload_cap: usize,
}

impl SampleRings {
    pub fn create(
        name: &str,
        ring_count: usize,
        capacity: usize,
        payload_cap: usize,
    ) -> Result<Self, StreamError> {
        let payload_cap = align8(payload_cap);
        let len = HEADER_LEN + ring_count.max(1) * ring_stride(payload_cap, capacity);
        let region = ShmRegion::create(name, len)?;
        region.init_header(
            KIND_SAMPLE,
            ring_count as u32,
            payload_cap as u32,
            capacity as u32,
        );
        Ok(Self {
            region,
            ring_count,
            capacity,
            payload_cap,
        })
    }

    pub fn open(name: &str, timeout: Duration) -> Result<Self, StreamError> {
        let head = ShmRegion::open(name, HEADER_LEN, timeout)?;
        if head.header_kind() != KIND_SAMPLE {
            return Err(StreamError::TransportUnavailable(format!(
                "region {name} is not a sample ring bank"
            )));
        }
        let ring_count = head.header_count() as usize;
        let payload_cap = head.header_payload_cap() as usize;
        let capacity = head.header_ring_capacity() as usize;
        drop(head);
        let len = HEADER_LEN + ring_count.max(1) * ring_stride(payload_cap, capacity);
        let region = ShmRegion::open(name, len, timeout)?;
        Ok(Self {
            region,
            ring_count,
            capacity,
            payload_cap,
        })
    }

    pub fn ring_count(&self) -> usize {
        self.ring_count
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn payload_cap(&self) -> usize {
        self.payload_cap
    }

    fn ring_offset(&self, ring: usize) -> usize {
        assert!(ring < self.ring_count, "ring index out of range");
        HEADER_LEN + ring * ring_stride(self.payload_cap, self.capacity)
    }

    fn head(&self, ring: usize) -> &AtomicU64 {
        self.region.atomic_u64(self.ring_offset(ring))
    }

    fn tail(&self, ring: usize) -> &AtomicU64 {
        self.region.atomic_u64(self.ring_offset(ring) + 8)
    }

    fn produced(&self, ring: usize) -> &AtomicU64 {
        self.region.atomic_u64(self.ring_offset(ring) + 16)
    }

    fn consumed(&self, ring: usize) -> &AtomicU64 {
        self.region.atomic_u64(self.ring_offset(ring) + 24)
    }

    fn dropped(&self, ring: usize) -> &AtomicU64 {
        self.region.atomic_u64(self.ring_offset(ring) + 32)
    }

    fn closed_flag(&self, ring: usize) -> &AtomicU32 {
        self.region.atomic_u32(self.ring_offset(ring) + 40)
    }

    fn slot_base(&self, ring: usize, ticket: u64) -> usize {
        let idx = (ticket % self.capacity as u64) as usize;
        self.ring_offset(ring) + RING_HEADER + idx * ring_slot_stride(self.payload_cap)
    }

    fn stamp(&self, ring: usize, ticket: u64) -> &AtomicU64 {
        self.region.atomic_u64(self.slot_base(ring, ticket))
    }

    pub fn counters(&self, ring: usize) -> QueueCounters {
        QueueCounters {
            produced: self.produced(ring).load(Ordering::Acquire),
            consumed: self.consumed(ring).load(Ordering::Acquire),
            dropped: self.dropped(ring).load(Ordering::Acquire),
        }
    }

    pub fn close(&self, ring: usize) {
        self.closed_flag(ring).store(1, Ordering::Release);
    }

    pub fn close_all(&self) {
        for r in 0..self.ring_count {
            self.close(r);
        }
    }

    pub fn is_closed(&self, ring: usize) -> bool {
        self.closed_flag(ring).load(Ordering::Acquire) == 1
    }

    /// Producer-side post. `block` selects the Block policy; otherwise the
    /// oldest resident item is evicted when full. Returns true if an
    /// eviction happened.
    pub fn post(&self, ring: usize, payload: &[u8], block: bool) -> Result<bool, StreamError> {
        if payload.len() > self.payload_cap {
            return Err(StreamError::TransportUnavailable(format!(
                "payload {} exceeds ring capacity {}",
                payload.len(),
                self.payload_cap
            )));
        }
        let t = self.tail(ring).load(Ordering::Relaxed);
        let mut evicted = false;
        loop {
            if self.is_closed(ring) {
                return Err(StreamError::QueueClosed);
            }
            let h = self.head(ring).load(Ordering::Acquire);
            if t - h < self.capacity as u64 {
                break;
            }
            if block {
                std::thread::sleep(Duration::from_micros(100));
                continue;
            }
            // DropOldest: claim the head ticket; the consumer may win instead.
            if self
                .head(ring)
                .compare_exchange(h, h + 1, Ordering::AcqRel, Ordering::Acquire)
                .is_ok()
            {
                self.dropped(ring).fetch_add(1, Ordering::AcqRel);
                evicted = true;
            }
        }
        let base = self.slot_base(ring, t);
        self.stamp(ring, t).store(2 * t + 1, Ordering::Relaxed);
        fence(Ordering::Release);
        self.region
            .atomic_u32(base + 8)
            .store(payload.len() as u32, Ordering::Relaxed);
        self.region.write_bytes(base + RING_SLOT_HEADER, payload);
        self.stamp(ring, t).store(2 * t + 2, Ordering::Release);
        self.tail(ring).store(t + 1, Ordering::Release);
        self.produced(ring).fetch_add(1, Ordering::AcqRel);
        Ok(evicted)
    }

    /// Consumer-side pop. Returns None when the ring is empty.
    pub fn pop(&self, ring: usize) -> Option<Vec<u8>> {
        loop {
            let h = self.head(ring).load(Ordering::Acquire);
            let t = self.tail(ring).load(Ordering::Acquire);
            if h >= t {
                return None;
            }
            let s1 = self.stamp(ring, h).load(Ordering::Acquire);
            if s1 == 2 * h + 1 || s1 < 2 * h + 2 {
                // Mid-write or not yet visible; nothing deliverable now.
                return None;
            }
            if s1 > 2 * h + 2 {
                // Slot already recycled for a later ticket: our head view is
                // stale (producer evicted); reload and retry.
                continue;
            }
            let base = self.slot_base(ring, h);
            let len = (self.region.atomic_u32(base + 8).load(Ordering::Relaxed) as usize)
                .min(self.payload_cap);
            let mut buf = vec![0u8; len];
            self.region.read_bytes(base + RING_SLOT_HEADER, &mut buf);
            fence(Ordering::Acquire);
            let s2 = self.stamp(ring, h).load(Ordering::Relaxed);
            if s2 != s1 {
                // Overwritten mid-copy; the copy is torn, discard and retry.
                continue;
            }
            if self
                .head(ring)
                .compare_exchange(h, h + 1, Ordering::AcqRel, Ordering::Acquire)
                .is_ok()
            {
                self.consumed(ring).fetch_add(1, Ordering::AcqRel);
                return Some(buf);
            }
            // Lost the head race to an eviction; retry.
        }
    }
}
