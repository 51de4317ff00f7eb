use std::sync::atomic::{AtomicU64, Ordering};

use chrono::{Duration, NaiveDateTime};

pub trait Clock: Send + Sync + std::fmt::Debug {
    fn now(&self) -> NaiveDateTime;
}

/// Local wall-clock time.
#[derive(Debug, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> NaiveDateTime {
        chrono::Local::now().naive_local()
    }
}

/// Starts at `start` and advances by `step` on every reading.
#[derive(Debug)]
pub struct SteppedClock {
    start: NaiveDateTime,
    step: Duration,
    ticks: AtomicU64,
}

impl SteppedClock {
    pub fn new(start: NaiveDateTime, step: Duration) -> Self {
        Self {
            start,
            step,
            ticks: AtomicU64::new(0),
        }
    }
}

impl Clock for SteppedClock {
    fn now(&self) -> NaiveDateTime {
        let n = self.ticks.fetch_add(1, Ordering::Relaxed);
        self.start + self.step * n as i32
    }
}
