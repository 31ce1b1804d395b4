//! Sliding-window bytes-per-second estimation.
//!
//! Timestamps are supplied by the caller as offsets from an arbitrary
//! origin, so the same tracker works under a wall clock and in simulation.
//! The estimate divides the bytes seen in the trailing window by the window
//! length, regardless of how long the connection has existed.

use std::collections::{HashMap, VecDeque};
use std::hash::Hash;
use std::time::Duration;

pub const DEFAULT_RATE_WINDOW: Duration = Duration::from_millis(1000);

#[derive(Debug, Default, Clone)]
struct Samples {
    ring: VecDeque<(Duration, u64)>,
    total: u64,
}

impl Samples {
    fn evict_before(&mut self, cutoff: Duration) {
        while let Some(&(t, bytes)) = self.ring.front() {
            if t > cutoff {
                break;
            }
            self.ring.pop_front();
            self.total -= bytes;
        }
    }
}

#[derive(Debug, Clone)]
pub struct RateTracker<K> {
    window: Duration,
    conns: HashMap<K, Samples>,
}

impl<K: Eq + Hash + Clone> RateTracker<K> {
    pub fn new(window: Duration) -> Self {
        assert!(!window.is_zero(), "rate window must be positive");
        RateTracker {
            window,
            conns: HashMap::new(),
        }
    }

    pub fn window(&self) -> Duration {
        self.window
    }

    /// Records `bytes` sent or received on `conn` at `at`.
    ///
    /// Timestamps for one connection must not go backwards.
    pub fn record(&mut self, conn: K, bytes: u64, at: Duration) {
        let samples = self.conns.entry(conn).or_default();
        debug_assert!(
            samples.ring.back().is_none_or(|&(t, _)| t <= at),
            "timestamps must be non-decreasing per connection"
        );
        if let Some(cutoff) = at.checked_sub(self.window) {
            samples.evict_before(cutoff);
        }
        samples.ring.push_back((at, bytes));
        samples.total += bytes;
    }

    /// Bytes counted in the window `(at - window, at]`.
    pub fn bytes_in_window(&self, conn: &K, at: Duration) -> u64 {
        let Some(samples) = self.conns.get(conn) else {
            return 0;
        };
        let mut total = samples.total;
        if let Some(cutoff) = at.checked_sub(self.window) {
            for &(t, bytes) in &samples.ring {
                if t > cutoff {
                    break;
                }
                total -= bytes;
            }
        }
        for &(t, bytes) in samples.ring.iter().rev() {
            if t <= at {
                break;
            }
            total -= bytes;
        }
        total
    }

    pub fn bps(&self, conn: &K, at: Duration) -> f64 {
        self.bytes_in_window(conn, at) as f64 / self.window.as_secs_f64()
    }

    /// Drops all history for `conn`.
    pub fn forget(&mut self, conn: &K) {
        self.conns.remove(conn);
    }

    pub fn len(&self) -> usize {
        self.conns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conns.is_empty()
    }
}

impl<K: Eq + Hash + Clone> Default for RateTracker<K> {
    fn default() -> Self {
        Self::new(DEFAULT_RATE_WINDOW)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ms(v: u64) -> Duration {
        Duration::from_millis(v)
    }

    #[test]
    fn single_sample() {
        let mut r = RateTracker::default();
        r.record(1u32, 1000, ms(0));
        assert_eq!(r.bps(&1, ms(500)), 1000.0);
    }

    #[test]
    fn empty_is_zero() {
        let r: RateTracker<u32> = RateTracker::default();
        assert_eq!(r.bps(&9, ms(0)), 0.0);
        assert_eq!(r.bps(&9, ms(123_456)), 0.0);
    }

    #[test]
    fn expired_sample_drops_out() {
        let mut r = RateTracker::default();
        r.record(1u32, 500, ms(0));
        r.record(1, 500, ms(900));
        assert_eq!(r.bps(&1, ms(1100)), 500.0);
        assert_eq!(r.bps(&1, ms(950)), 1000.0);
        assert_eq!(r.bps(&1, ms(2000)), 0.0);
    }

    #[test]
    fn window_edge_is_exclusive() {
        let mut r = RateTracker::default();
        r.record(1u32, 100, ms(0));
        assert_eq!(r.bps(&1, ms(999)), 100.0);
        assert_eq!(r.bps(&1, ms(1000)), 0.0);
    }

    #[test]
    fn samples_after_query_are_ignored() {
        let mut r = RateTracker::default();
        r.record(1u32, 100, ms(10));
        r.record(1, 50, ms(20));
        assert_eq!(r.bytes_in_window(&1, ms(15)), 100);
        assert_eq!(r.bytes_in_window(&1, ms(5)), 0);
    }

    #[test]
    fn custom_window_scales_denominator() {
        let mut r = RateTracker::new(ms(500));
        r.record("a", 100, ms(0));
        assert_eq!(r.bps(&"a", ms(100)), 200.0);
    }

    proptest! {
        #[test]
        fn adding_in_window_sample_never_decreases(
            gaps in proptest::collection::vec(0u64..400, 1..40),
            sizes in proptest::collection::vec(1u64..5000, 40),
            extra in 1u64..5000,
        ) {
            let mut r = RateTracker::default();
            let mut t = 0;
            for (g, s) in gaps.iter().zip(&sizes) {
                t += g;
                r.record(0u8, *s, ms(t));
            }
            let before = r.bps(&0, ms(t));
            r.record(0u8, extra, ms(t));
            prop_assert!(r.bps(&0, ms(t)) >= before);
            prop_assert!(before >= 0.0);
        }

        #[test]
        fn expired_history_is_invisible(
            old in proptest::collection::vec((0u64..5000, 1u64..1000), 0..30),
            recent in proptest::collection::vec((0u64..1000, 1u64..1000), 0..30),
        ) {
            let base = 10_000u64;
            let mut old = old;
            old.sort();
            let mut recent = recent;
            recent.sort();
            let mut with_history = RateTracker::default();
            let mut fresh = RateTracker::default();
            for (t, b) in &old {
                with_history.record(0u8, *b, ms(*t));
            }
            for (t, b) in &recent {
                with_history.record(0u8, *b, ms(base + t));
                fresh.record(0u8, *b, ms(base + t));
            }
            let q = ms(base + 1000);
            prop_assert_eq!(with_history.bps(&0, q), fresh.bps(&0, q));
        }
    }
}
