//! Time sources. Reports record elapsed times through a [`Clock`] so that
//! scripted runs can be made bit-for-bit reproducible.

use std::sync::Mutex;
use std::time::{Duration, Instant};

pub trait Clock: Send + Sync {
    /// Monotonic time since an arbitrary origin.
    fn now(&self) -> Duration;

    fn since(&self, start: Duration) -> Duration {
        self.now().saturating_sub(start)
    }
}

#[derive(Debug)]
pub struct SystemClock {
    origin: Instant,
}

impl Default for SystemClock {
    fn default() -> Self {
        Self {
            origin: Instant::now(),
        }
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Duration {
        self.origin.elapsed()
    }
}

/// A clock that only moves when told to.
#[derive(Debug, Default)]
pub struct FrozenClock {
    at: Mutex<Duration>,
}

impl FrozenClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn advance(&self, by: Duration) {
        *self.at.lock().unwrap() += by;
    }
}

impl Clock for FrozenClock {
    fn now(&self) -> Duration {
        *self.at.lock().unwrap()
    }
}
