//! Injectable clocks. Nothing in the engine reads wall-clock time directly.

use std::sync::Arc;
use std::time::Instant;

use chrono::{DateTime, Duration, Utc};
use parking_lot::Mutex;

pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

/// Manually advanced clock shared between a simulation driver and the
/// components under test. Clones observe the same instant.
#[derive(Debug, Clone)]
pub struct VirtualClock {
    now: Arc<Mutex<DateTime<Utc>>>,
}

impl VirtualClock {
    pub fn new(start: DateTime<Utc>) -> Self {
        VirtualClock {
            now: Arc::new(Mutex::new(start)),
        }
    }

    pub fn set(&self, t: DateTime<Utc>) {
        let mut now = self.now.lock();
        debug_assert!(t >= *now, "virtual clock moved backwards");
        *now = t;
    }

    pub fn advance(&self, by: Duration) {
        *self.now.lock() += by;
    }
}

impl Clock for VirtualClock {
    fn now(&self) -> DateTime<Utc> {
        *self.now.lock()
    }
}

/// Wall-clock time re-based onto `start` and optionally sped up.
/// Used to run a real edge process inside a chosen school morning.
#[derive(Debug, Clone)]
pub struct OffsetClock {
    start: DateTime<Utc>,
    origin: Instant,
    speed: f64,
}

impl OffsetClock {
    pub fn new(start: DateTime<Utc>, speed: f64) -> Self {
        OffsetClock {
            start,
            origin: Instant::now(),
            speed,
        }
    }
}

impl Clock for OffsetClock {
    fn now(&self) -> DateTime<Utc> {
        let elapsed = self.origin.elapsed().as_secs_f64() * self.speed;
        self.start + Duration::microseconds((elapsed * 1e6) as i64)
    }
}

impl<C: Clock + ?Sized> Clock for Arc<C> {
    fn now(&self) -> DateTime<Utc> {
        (**self).now()
    }
}
