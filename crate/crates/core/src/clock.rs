//! Monotonic time sources.
//!
//! All stage timings and pacing go through [`Clock`] so that sessions can
//! run in real time, accelerated, or on a hand-advanced virtual timeline.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

pub trait Clock: Send + Sync {
    /// Time since the clock's origin.
    fn now(&self) -> Duration;
    /// Blocks (or, for virtual clocks, advances) for `d` of clock time.
    fn sleep(&self, d: Duration);

    fn now_ms(&self) -> f64 {
        self.now().as_secs_f64() * 1000.0
    }
}

pub type SharedClock = Arc<dyn Clock>;

/// Wall-clock time from `Instant`.
#[derive(Debug, Clone)]
pub struct MonotonicClock {
    origin: Instant,
}

impl MonotonicClock {
    pub fn new() -> Self {
        Self {
            origin: Instant::now(),
        }
    }
}

impl Default for MonotonicClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for MonotonicClock {
    fn now(&self) -> Duration {
        self.origin.elapsed()
    }

    fn sleep(&self, d: Duration) {
        std::thread::sleep(d);
    }
}

/// Wall-clock time running `speed` times faster than real time.
#[derive(Debug, Clone)]
pub struct ScaledClock {
    origin: Instant,
    speed: f64,
}

impl ScaledClock {
    pub fn new(speed: f64) -> Self {
        assert!(speed > 0.0, "clock speed must be positive");
        Self {
            origin: Instant::now(),
            speed,
        }
    }

    /// Shares the origin of another scaled clock so two activities agree on
    /// "now".
    pub fn with_origin(origin: Instant, speed: f64) -> Self {
        assert!(speed > 0.0, "clock speed must be positive");
        Self { origin, speed }
    }

    pub fn speed(&self) -> f64 {
        self.speed
    }
}

impl Clock for ScaledClock {
    fn now(&self) -> Duration {
        self.origin.elapsed().mul_f64(self.speed)
    }

    fn sleep(&self, d: Duration) {
        std::thread::sleep(d.div_f64(self.speed));
    }
}

/// A timeline that only moves when told to. `sleep` advances it.
#[derive(Debug, Default)]
pub struct VirtualClock {
    nanos: AtomicU64,
}

impl VirtualClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&self, t: Duration) {
        self.nanos.store(t.as_nanos() as u64, Ordering::SeqCst);
    }

    pub fn advance(&self, d: Duration) {
        self.nanos.fetch_add(d.as_nanos() as u64, Ordering::SeqCst);
    }
}

impl Clock for VirtualClock {
    fn now(&self) -> Duration {
        Duration::from_nanos(self.nanos.load(Ordering::SeqCst))
    }

    fn sleep(&self, d: Duration) {
        self.advance(d);
    }
}

pub fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1000.0
}
