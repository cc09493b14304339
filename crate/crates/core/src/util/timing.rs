//! Wall-clock helpers shared by workers and benchmark harnesses.

use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

/// Milliseconds since the Unix epoch, for metrics records.
pub fn unix_millis() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Occupy the calling thread for `d`, sleeping rather than spinning.
///
/// Synthetic environments and synthetic trainer steps use this to model
/// wall-clock work without burning a core, which keeps multi-worker timing
/// experiments honest on small machines.
pub fn occupy(d: Duration) {
    if d.is_zero() {
        return;
    }
    let deadline = Instant::now() + d;
    loop {
        let now = Instant::now();
        if now >= deadline {
            return;
        }
        std::thread::sleep(deadline - now);
    }
}

/// A simple rate probe: counts events and reports events/second over the
/// elapsed window since construction or the last reset.
#[derive(Debug)]
pub struct RateProbe {
    started: Instant,
    count: u64,
}

impl RateProbe {
    pub fn start() -> Self {
        Self {
            started: Instant::now(),
            count: 0,
        }
    }

    pub fn add(&mut self, n: u64) {
        self.count += n;
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn elapsed(&self) -> Duration {
        self.started.elapsed()
    }

    pub fn per_second(&self) -> f64 {
        let secs = self.started.elapsed().as_secs_f64();
        if secs <= 0.0 {
            0.0
        } else {
            self.count as f64 / secs
        }
    }
}
