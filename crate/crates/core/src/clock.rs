//! Injectable time sources.
//!
//! Every time-dependent path (reminder ticks, prompt rendering, horizon
//! clamping) reads the current instant through [`Clock`], so tests and the
//! replay harness can drive the whole system from a [`VirtualClock`].

use std::sync::{Arc, Mutex};

use chrono::{DateTime, Duration, Utc};

pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
}

/// Wall clock.
#[derive(Debug, Clone, Copy, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

/// A manually stepped clock. Clones share the same instant.
#[derive(Debug, Clone)]
pub struct VirtualClock {
    now: Arc<Mutex<DateTime<Utc>>>,
}

impl VirtualClock {
    pub fn new(start: DateTime<Utc>) -> Self {
        Self {
            now: Arc::new(Mutex::new(start)),
        }
    }

    /// Moves the clock forward. Negative steps are ignored so that readers
    /// always observe a non-decreasing sequence.
    pub fn advance(&self, step: Duration) -> DateTime<Utc> {
        let mut now = self.now.lock().expect("virtual clock poisoned");
        if step > Duration::zero() {
            *now += step;
        }
        *now
    }

    /// Jumps to `t` if it is not earlier than the current instant.
    pub fn set(&self, t: DateTime<Utc>) -> DateTime<Utc> {
        let mut now = self.now.lock().expect("virtual clock poisoned");
        if t > *now {
            *now = t;
        }
        *now
    }
}

impl Clock for VirtualClock {
    fn now(&self) -> DateTime<Utc> {
        *self.now.lock().expect("virtual clock poisoned")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    #[test]
    fn virtual_clock_advances_and_shares_state() {
        let start = Utc.with_ymd_and_hms(2024, 6, 1, 8, 0, 0).unwrap();
        let clock = VirtualClock::new(start);
        let other = clock.clone();
        clock.advance(Duration::minutes(2));
        assert_eq!(other.now(), start + Duration::minutes(2));
    }

    #[test]
    fn virtual_clock_never_goes_backwards() {
        let start = Utc.with_ymd_and_hms(2024, 6, 1, 8, 0, 0).unwrap();
        let clock = VirtualClock::new(start);
        clock.advance(Duration::minutes(-5));
        clock.set(start - Duration::hours(1));
        assert_eq!(clock.now(), start);
    }
}
