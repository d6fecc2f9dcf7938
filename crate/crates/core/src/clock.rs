//! Time sources. The broker never reads the system clock directly so tests
//! and the benchmark harness can drive it with a virtual clock.

use std::sync::{Arc, Mutex};

use chrono::{DateTime, TimeDelta, TimeZone, Utc};

pub type Timestamp = DateTime<Utc>;

/// Shared, manually advanced clock.
#[derive(Debug, Clone)]
pub struct VirtualClock {
    now: Arc<Mutex<Timestamp>>,
}

impl VirtualClock {
    pub fn new(start: Timestamp) -> Self {
        Self {
            now: Arc::new(Mutex::new(start)),
        }
    }

    /// Starts at 2018-05-24T00:00:00Z, a fixed and readable origin.
    pub fn at_default_origin() -> Self {
        Self::new(Utc.with_ymd_and_hms(2018, 5, 24, 0, 0, 0).unwrap())
    }

    pub fn now(&self) -> Timestamp {
        *self.now.lock().unwrap()
    }

    pub fn advance(&self, by: TimeDelta) -> Timestamp {
        let mut now = self.now.lock().unwrap();
        *now += by;
        *now
    }

    pub fn advance_secs(&self, secs: i64) -> Timestamp {
        self.advance(TimeDelta::seconds(secs))
    }
}

#[derive(Debug, Clone)]
pub enum Clock {
    System,
    Virtual(VirtualClock),
}

impl Clock {
    pub fn now(&self) -> Timestamp {
        match self {
            Clock::System => Utc::now(),
            Clock::Virtual(v) => v.now(),
        }
    }

    pub fn is_virtual(&self) -> bool {
        matches!(self, Clock::Virtual(_))
    }

    pub fn as_virtual(&self) -> Option<&VirtualClock> {
        match self {
            Clock::Virtual(v) => Some(v),
            Clock::System => None,
        }
    }
}
