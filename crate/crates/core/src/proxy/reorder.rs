//! Per-connection in-order delivery of Relay payloads.

use std::collections::HashMap;
use std::time::Duration;

use thiserror::Error;

pub const REORDER_CAP: usize = 256;
pub const REORDER_TIMEOUT: Duration = Duration::from_millis(5000);

// Sequence numbers within half the space ahead of `expected` are future
// frames; the rest are already-delivered duplicates.
const HALF_SPACE: u16 = 0x8000;

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum ReorderError {
    #[error("more than {REORDER_CAP} frames waiting for a gap to fill")]
    Overflow,
}

#[derive(Debug, Default)]
pub struct ReorderBuffer {
    expected: u16,
    pending: HashMap<u16, Vec<u8>>,
    end_seq: Option<u16>,
    stalled_since: Option<Duration>,
}

impl ReorderBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Accepts the payload for `seq` and returns every payload that is now
    /// deliverable, in order. Duplicates are dropped silently.
    pub fn push(
        &mut self,
        seq: u16,
        payload: Vec<u8>,
        now: Duration,
    ) -> Result<Vec<Vec<u8>>, ReorderError> {
        let ahead = seq.wrapping_sub(self.expected);
        if ahead >= HALF_SPACE || self.pending.contains_key(&seq) {
            return Ok(Vec::new());
        }
        if ahead > 0 {
            if self.pending.len() >= REORDER_CAP {
                return Err(ReorderError::Overflow);
            }
            self.pending.insert(seq, payload);
            self.stalled_since.get_or_insert(now);
            return Ok(Vec::new());
        }
        let mut ready = vec![payload];
        self.expected = self.expected.wrapping_add(1);
        while let Some(next) = self.pending.remove(&self.expected) {
            ready.push(next);
            self.expected = self.expected.wrapping_add(1);
        }
        self.stalled_since = if self.pending.is_empty() {
            None
        } else {
            Some(now)
        };
        Ok(ready)
    }

    /// Marks `end_seq` as one past the final sequence number.
    pub fn set_end(&mut self, end_seq: u16) {
        self.end_seq = Some(end_seq);
    }

    /// True once the end marker is known and everything before it arrived.
    pub fn is_complete(&self) -> bool {
        self.end_seq == Some(self.expected)
    }

    pub fn end_seq(&self) -> Option<u16> {
        self.end_seq
    }

    pub fn expected(&self) -> u16 {
        self.expected
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    /// True if a gap has blocked delivery for at least `REORDER_TIMEOUT`.
    /// An end marker that is still unsatisfied also counts as a gap.
    pub fn is_stalled(&self, now: Duration) -> bool {
        self.stalled_since
            .is_some_and(|since| now >= since + REORDER_TIMEOUT)
    }

    /// Starts the stall clock if the end marker is waiting on missing frames.
    pub fn note_waiting(&mut self, now: Duration) {
        if self.end_seq.is_some() && !self.is_complete() {
            self.stalled_since.get_or_insert(now);
        }
    }
}
