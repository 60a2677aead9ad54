use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockMode {
    Wall,
    Injected,
}

/// Time source for message timestamps and wait deadlines.
///
/// The injected variant only moves when [`Clock::set`] or
/// [`Clock::advance`] is called; the server wakes blocked waiters whenever
/// it does.
#[derive(Debug, Clone)]
pub enum Clock {
    Wall { origin: Instant, epoch_ms: u64 },
    Injected(Arc<AtomicU64>),
}

impl Clock {
    pub fn wall() -> Self {
        let epoch_ms = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0);
        Clock::Wall {
            origin: Instant::now(),
            epoch_ms,
        }
    }

    pub fn injected(start: u64) -> Self {
        Clock::Injected(Arc::new(AtomicU64::new(start)))
    }

    pub fn for_mode(mode: ClockMode) -> Self {
        match mode {
            ClockMode::Wall => Clock::wall(),
            ClockMode::Injected => Clock::injected(0),
        }
    }

    pub fn now_ms(&self) -> u64 {
        match self {
            Clock::Wall { origin, epoch_ms } => epoch_ms + origin.elapsed().as_millis() as u64,
            Clock::Injected(now) => now.load(Ordering::SeqCst),
        }
    }

    pub fn is_injected(&self) -> bool {
        matches!(self, Clock::Injected(_))
    }

    /// Moves an injected clock forward to `t`; never moves it backwards.
    /// Returns false for a wall clock.
    pub(crate) fn set(&self, t: u64) -> bool {
        match self {
            Clock::Injected(now) => {
                now.fetch_max(t, Ordering::SeqCst);
                true
            }
            Clock::Wall { .. } => false,
        }
    }

    /// Wall-clock instant at which `deadline_ms` will be reached, if this is
    /// a wall clock.
    pub(crate) fn wall_instant(&self, deadline_ms: u64) -> Option<Instant> {
        match self {
            Clock::Wall { .. } => {
                let now = self.now_ms();
                Some(Instant::now() + Duration::from_millis(deadline_ms.saturating_sub(now)))
            }
            Clock::Injected(_) => None,
        }
    }
}
