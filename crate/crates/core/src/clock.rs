//! Time sources. Every module reads time through [`Clock`] so the harness
//! can drive expiry, policy date constraints and audit timestamps from a
//! single logical clock.

use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::Arc;

use crate::model::Timestamp;

pub trait Clock: Send + Sync {
    fn now(&self) -> Timestamp;
}

/// Manually advanced clock shared by every component of a simulated federation.
#[derive(Debug, Clone)]
pub struct LogicalClock(Arc<AtomicI64>);

impl LogicalClock {
    /// 2026-01-01T00:00:00Z, the default epoch for simulations.
    pub const DEFAULT_START: Timestamp = Timestamp::from_unix(1_767_225_600);

    pub fn new(start: Timestamp) -> Self {
        LogicalClock(Arc::new(AtomicI64::new(start.unix())))
    }

    pub fn advance(&self, secs: i64) -> Timestamp {
        Timestamp::from_unix(self.0.fetch_add(secs, Ordering::SeqCst) + secs)
    }

    pub fn set(&self, t: Timestamp) {
        self.0.store(t.unix(), Ordering::SeqCst);
    }
}

impl Default for LogicalClock {
    fn default() -> Self {
        Self::new(Self::DEFAULT_START)
    }
}

impl Clock for LogicalClock {
    fn now(&self) -> Timestamp {
        Timestamp::from_unix(self.0.load(Ordering::SeqCst))
    }
}

/// Wall-clock time, truncated to whole seconds.
#[derive(Debug, Clone, Copy, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> Timestamp {
        let secs = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs() as i64)
            .unwrap_or(0);
        Timestamp::from_unix(secs)
    }
}
