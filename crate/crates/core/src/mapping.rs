//! Real-to-virtual connection mapping.
//!
//! With more than `S` real connections the engine shuffles them onto
//! `M = max(floor(alpha * N), m_min)` virtual connections (never more than
//! `N - 1`), sending each unit on the least-loaded one. With `S` or fewer it
//! splits them across `M = max(ceil(beta * N), m_min)` virtual connections,
//! sending each unit where the virtual load differs most from the real
//! connection's own rate.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::time::Duration;

use thiserror::Error;

use crate::rate::{RateTracker, DEFAULT_RATE_WINDOW};
use crate::wire::ConnId;

/// How long a closed real-connection ID stays unusable.
pub const QUARANTINE: Duration = Duration::from_millis(5000);

// Guards floor/ceil against products like 0.29 * 100 = 28.999999999999996.
const ROUNDING_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VirtualId(pub u32);

impl fmt::Display for VirtualId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "v{}", self.0)
    }
}

/// Key into the shared rate tracker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ConnKey {
    Real(ConnId),
    Virtual(VirtualId),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("alpha (shuffling factor) must be in (0, 1), got {0}")]
    Alpha(f64),
    #[error("beta (splitting factor) must be greater than 1, got {0}")]
    Beta(f64),
    #[error("shuffle threshold must be at least 1")]
    ShuffleThreshold,
    #[error("m_min must be at least 1")]
    MMin,
    #[error("remap interval must be positive")]
    RemapInterval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObfuscationConfig {
    pub alpha: f64,
    pub beta: f64,
    pub shuffle_threshold: usize,
    pub m_min: usize,
    pub remap_interval: Duration,
    pub rate_window: Duration,
}

impl Default for ObfuscationConfig {
    fn default() -> Self {
        ObfuscationConfig {
            alpha: 0.1,
            beta: 2.0,
            shuffle_threshold: 4,
            m_min: 3,
            remap_interval: Duration::from_millis(1000),
            rate_window: DEFAULT_RATE_WINDOW,
        }
    }
}

impl ObfuscationConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(ConfigError::Alpha(self.alpha));
        }
        if !(self.beta > 1.0 && self.beta.is_finite()) {
            return Err(ConfigError::Beta(self.beta));
        }
        if self.shuffle_threshold < 1 {
            return Err(ConfigError::ShuffleThreshold);
        }
        if self.m_min < 1 {
            return Err(ConfigError::MMin);
        }
        if self.remap_interval.is_zero() || self.rate_window.is_zero() {
            return Err(ConfigError::RemapInterval);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Shuffle,
    Split,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mode::Shuffle => f.write_str("shuffle"),
            Mode::Split => f.write_str("split"),
        }
    }
}

pub fn select_mode(n_real: usize, config: &ObfuscationConfig) -> Mode {
    if n_real > config.shuffle_threshold {
        Mode::Shuffle
    } else {
        Mode::Split
    }
}

pub fn target_virtual_count(n_real: usize, mode: Mode, config: &ObfuscationConfig) -> usize {
    let n = n_real as f64;
    match mode {
        Mode::Shuffle => {
            let scaled = (config.alpha * n + ROUNDING_SLACK).floor() as usize;
            scaled
                .max(config.m_min)
                .min(n_real.saturating_sub(1).max(1))
        }
        Mode::Split => {
            let scaled = (config.beta * n - ROUNDING_SLACK).ceil().max(0.0) as usize;
            scaled.max(config.m_min)
        }
    }
}

/// Picks the virtual connection with the lowest current rate. Ties go to
/// the earliest entry of `virtual_ids`.
pub fn select_virtual_shuffle(
    rates: &RateTracker<ConnKey>,
    virtual_ids: &[VirtualId],
    at: Duration,
) -> Option<VirtualId> {
    let mut best: Option<(VirtualId, u64)> = None;
    for &v in virtual_ids {
        let load = rates.bytes_in_window(&ConnKey::Virtual(v), at);
        if best.is_none_or(|(_, b)| load < b) {
            best = Some((v, load));
        }
    }
    best.map(|(v, _)| v)
}

/// Picks the virtual connection whose rate is furthest from the real
/// connection's rate. Ties go to the earliest entry of `virtual_ids`.
pub fn select_virtual_split(
    real: ConnId,
    rates: &RateTracker<ConnKey>,
    virtual_ids: &[VirtualId],
    at: Duration,
) -> Option<VirtualId> {
    // Every rate shares the same window, so comparing byte counts is exact
    // and avoids float ties going astray.
    let real_load = rates.bytes_in_window(&ConnKey::Real(real), at);
    let mut best: Option<(VirtualId, u64)> = None;
    for &v in virtual_ids {
        let load = rates.bytes_in_window(&ConnKey::Virtual(v), at);
        let score = real_load.abs_diff(load);
        if best.is_none_or(|(_, b)| score > b) {
            best = Some((v, score));
        }
    }
    best.map(|(v, _)| v)
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MappingError {
    #[error("real connection {0} is already registered")]
    Duplicate(ConnId),
    #[error("real connection {0} is quarantined")]
    Quarantined(ConnId),
    #[error("real connection {0} is not registered")]
    Unknown(ConnId),
    #[error("no free real connection id")]
    Exhausted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    ActivateVirtual,
    DeactivateVirtual(VirtualId),
}

/// Live binding state shared by the selectors and the rebalancer.
#[derive(Debug, Clone)]
pub struct MappingTable {
    real_ids: BTreeSet<ConnId>,
    virtual_ids: Vec<VirtualId>,
    mode: Mode,
    next_seq: BTreeMap<ConnId, u16>,
    quarantine: BTreeMap<ConnId, Duration>,
}

impl Default for MappingTable {
    fn default() -> Self {
        Self::new()
    }
}

impl MappingTable {
    pub fn new() -> Self {
        MappingTable {
            real_ids: BTreeSet::new(),
            virtual_ids: Vec::new(),
            mode: Mode::Split,
            next_seq: BTreeMap::new(),
            quarantine: BTreeMap::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn n_real(&self) -> usize {
        self.real_ids.len()
    }

    pub fn real_ids(&self) -> impl Iterator<Item = ConnId> + '_ {
        self.real_ids.iter().copied()
    }

    pub fn contains_real(&self, id: ConnId) -> bool {
        self.real_ids.contains(&id)
    }

    pub fn virtual_ids(&self) -> &[VirtualId] {
        &self.virtual_ids
    }

    pub fn is_active(&self, v: VirtualId) -> bool {
        self.virtual_ids.contains(&v)
    }

    pub fn is_quarantined(&self, id: ConnId, at: Duration) -> bool {
        self.quarantine.get(&id).is_some_and(|&until| at < until)
    }

    pub fn register_real(&mut self, id: ConnId, at: Duration) -> Result<(), MappingError> {
        if self.real_ids.contains(&id) {
            return Err(MappingError::Duplicate(id));
        }
        if self.is_quarantined(id, at) {
            return Err(MappingError::Quarantined(id));
        }
        self.quarantine.remove(&id);
        self.real_ids.insert(id);
        self.next_seq.insert(id, 0);
        Ok(())
    }

    pub fn unregister_real(&mut self, id: ConnId, at: Duration) -> Result<(), MappingError> {
        if !self.real_ids.remove(&id) {
            return Err(MappingError::Unknown(id));
        }
        self.next_seq.remove(&id);
        self.quarantine.insert(id, at + QUARANTINE);
        let expired: Vec<ConnId> = self
            .quarantine
            .iter()
            .filter(|&(_, &until)| until <= at)
            .map(|(&id, _)| id)
            .collect();
        for id in expired {
            self.quarantine.remove(&id);
        }
        Ok(())
    }

    /// Returns the sequence number for the next unit of `id` and advances it.
    pub fn take_seq(&mut self, id: ConnId) -> Result<u16, MappingError> {
        let seq = self
            .next_seq
            .get_mut(&id)
            .ok_or(MappingError::Unknown(id))?;
        let current = *seq;
        *seq = seq.wrapping_add(1);
        Ok(current)
    }

    pub fn peek_seq(&self, id: ConnId) -> Option<u16> {
        self.next_seq.get(&id).copied()
    }

    pub fn activate(&mut self, v: VirtualId) {
        if !self.virtual_ids.contains(&v) {
            self.virtual_ids.push(v);
        }
    }

    pub fn deactivate(&mut self, v: VirtualId) {
        self.virtual_ids.retain(|&x| x != v);
    }

    pub fn apply_deactivations(&mut self, actions: &[Action]) {
        for action in actions {
            if let Action::DeactivateVirtual(v) = action {
                self.deactivate(*v);
            }
        }
    }
}

/// Updates the table mode and returns the activations or deactivations that
/// bring the active virtual set to its target size.
///
/// The caller applies the actions: each `ActivateVirtual` is satisfied by
/// [`MappingTable::activate`] with a connection of its choosing, and each
/// `DeactivateVirtual` by [`MappingTable::deactivate`]. The least-loaded
/// connections are retired first so the fewest bytes are left in flight.
pub fn rebalance(
    table: &mut MappingTable,
    rates: &RateTracker<ConnKey>,
    config: &ObfuscationConfig,
    at: Duration,
) -> Vec<Action> {
    let n = table.n_real();
    let mode = select_mode(n, config);
    table.mode = mode;
    let target = target_virtual_count(n, mode, config);
    let current = table.virtual_ids.len();
    if current < target {
        return vec![Action::ActivateVirtual; target - current];
    }
    let mut by_load: Vec<(u64, usize, VirtualId)> = table
        .virtual_ids
        .iter()
        .enumerate()
        .map(|(pos, &v)| (rates.bytes_in_window(&ConnKey::Virtual(v), at), pos, v))
        .collect();
    // Lightest first; among equals, the most recently activated.
    by_load.sort_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)));
    by_load
        .into_iter()
        .take(current - target)
        .map(|(_, _, v)| Action::DeactivateVirtual(v))
        .collect()
}

/// How real connections are assigned to virtual ones.
#[derive(Debug, Clone, PartialEq)]
pub enum Strategy {
    /// Dynamic shuffling and splitting.
    Obfuscate(ObfuscationConfig),
    /// One dedicated virtual connection per real connection; the
    /// unobfuscated baseline.
    Direct,
}

/// Mapping table, rate tracker and strategy behind one owner.
#[derive(Debug)]
pub struct MappingEngine {
    strategy: Strategy,
    table: MappingTable,
    rates: RateTracker<ConnKey>,
    pinned: BTreeMap<ConnId, VirtualId>,
    awaiting_pin: VecDeque<ConnId>,
    last_remap: Option<Duration>,
}

impl MappingEngine {
    pub fn new(strategy: Strategy) -> Self {
        let window = match &strategy {
            Strategy::Obfuscate(cfg) => cfg.rate_window,
            Strategy::Direct => DEFAULT_RATE_WINDOW,
        };
        MappingEngine {
            strategy,
            table: MappingTable::new(),
            rates: RateTracker::new(window),
            pinned: BTreeMap::new(),
            awaiting_pin: VecDeque::new(),
            last_remap: None,
        }
    }

    pub fn strategy(&self) -> &Strategy {
        &self.strategy
    }

    pub fn table(&self) -> &MappingTable {
        &self.table
    }

    pub fn rates(&self) -> &RateTracker<ConnKey> {
        &self.rates
    }

    pub fn mode(&self) -> Mode {
        self.table.mode
    }

    pub fn record_real(&mut self, id: ConnId, bytes: u64, at: Duration) {
        self.rates.record(ConnKey::Real(id), bytes, at);
    }

    pub fn record_virtual(&mut self, v: VirtualId, bytes: u64, at: Duration) {
        self.rates.record(ConnKey::Virtual(v), bytes, at);
    }

    /// Registers a real connection and returns the resulting rebalance.
    pub fn register(&mut self, id: ConnId, at: Duration) -> Result<Vec<Action>, MappingError> {
        self.table.register_real(id, at)?;
        match self.strategy {
            Strategy::Direct => {
                self.awaiting_pin.push_back(id);
                Ok(vec![Action::ActivateVirtual])
            }
            Strategy::Obfuscate(_) => Ok(self.remap(at)),
        }
    }

    /// Registers a real connection bound to an already-open virtual
    /// connection. Used by the receiving side of the direct baseline.
    pub fn register_pinned(
        &mut self,
        id: ConnId,
        v: VirtualId,
        at: Duration,
    ) -> Result<(), MappingError> {
        self.table.register_real(id, at)?;
        self.pinned.insert(id, v);
        self.table.activate(v);
        Ok(())
    }

    pub fn unregister(&mut self, id: ConnId, at: Duration) -> Result<Vec<Action>, MappingError> {
        self.table.unregister_real(id, at)?;
        self.rates.forget(&ConnKey::Real(id));
        self.awaiting_pin.retain(|&x| x != id);
        match self.strategy {
            Strategy::Direct => match self.pinned.remove(&id) {
                Some(v) => {
                    self.table.deactivate(v);
                    Ok(vec![Action::DeactivateVirtual(v)])
                }
                None => Ok(Vec::new()),
            },
            Strategy::Obfuscate(_) => Ok(self.remap(at)),
        }
    }

    /// Re-evaluates the mapping if the remap interval has elapsed.
    pub fn tick(&mut self, at: Duration) -> Vec<Action> {
        let Strategy::Obfuscate(cfg) = &self.strategy else {
            return Vec::new();
        };
        match self.last_remap {
            Some(last) if at < last + cfg.remap_interval => Vec::new(),
            _ => self.remap(at),
        }
    }

    /// Runs a rebalance now. Deactivations are applied before returning.
    pub fn remap(&mut self, at: Duration) -> Vec<Action> {
        let Strategy::Obfuscate(cfg) = &self.strategy else {
            return Vec::new();
        };
        self.last_remap = Some(at);
        let actions = rebalance(&mut self.table, &self.rates, cfg, at);
        self.table.apply_deactivations(&actions);
        actions
    }

    /// Adds `v` to the active set, satisfying one `ActivateVirtual`.
    pub fn activate(&mut self, v: VirtualId) {
        if let Strategy::Direct = self.strategy {
            if let Some(id) = self.awaiting_pin.pop_front() {
                self.pinned.insert(id, v);
            }
        }
        self.table.activate(v);
    }

    /// Removes `v` from every selection set, e.g. after a transport failure.
    pub fn remove_virtual(&mut self, v: VirtualId) {
        self.table.deactivate(v);
        self.rates.forget(&ConnKey::Virtual(v));
        let orphaned: Vec<ConnId> = self
            .pinned
            .iter()
            .filter(|&(_, &pv)| pv == v)
            .map(|(&id, _)| id)
            .collect();
        for id in orphaned {
            self.pinned.remove(&id);
        }
    }

    pub fn take_seq(&mut self, id: ConnId) -> Result<u16, MappingError> {
        self.table.take_seq(id)
    }

    /// Chooses the virtual connection for the next unit of `id`.
    pub fn select(&self, id: ConnId, at: Duration) -> Option<VirtualId> {
        self.select_among(id, self.table.virtual_ids(), at)
    }

    /// Like [`select`](Self::select) but restricted to `candidates`.
    pub fn select_among(
        &self,
        id: ConnId,
        candidates: &[VirtualId],
        at: Duration,
    ) -> Option<VirtualId> {
        match self.strategy {
            Strategy::Direct => self
                .pinned
                .get(&id)
                .copied()
                .filter(|v| candidates.contains(v)),
            Strategy::Obfuscate(_) => match self.table.mode {
                Mode::Shuffle => select_virtual_shuffle(&self.rates, candidates, at),
                Mode::Split => select_virtual_split(id, &self.rates, candidates, at),
            },
        }
    }

    /// The least-loaded active virtual connection, used for control frames.
    pub fn least_loaded(&self, id: ConnId, at: Duration) -> Option<VirtualId> {
        match self.strategy {
            Strategy::Direct => self.pinned.get(&id).copied(),
            Strategy::Obfuscate(_) => {
                select_virtual_shuffle(&self.rates, self.table.virtual_ids(), at)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_cfg() -> ObfuscationConfig {
        ObfuscationConfig::default()
    }

    fn ms(v: u64) -> Duration {
        Duration::from_millis(v)
    }

    #[test]
    fn mode_boundary() {
        let cfg = default_cfg();
        assert_eq!(select_mode(5, &cfg), Mode::Shuffle);
        assert_eq!(select_mode(3, &cfg), Mode::Split);
        assert_eq!(select_mode(4, &cfg), Mode::Split);
        assert_eq!(select_mode(0, &cfg), Mode::Split);
    }

    #[test]
    fn target_counts() {
        let cfg = default_cfg();
        assert_eq!(target_virtual_count(50, Mode::Shuffle, &cfg), 5);
        assert_eq!(target_virtual_count(5, Mode::Shuffle, &cfg), 3);
        assert_eq!(target_virtual_count(1, Mode::Split, &cfg), 3);
        assert_eq!(target_virtual_count(3, Mode::Split, &cfg), 6);
        assert_eq!(target_virtual_count(0, Mode::Split, &cfg), 3);
    }

    #[test]
    fn fractional_beta_rounds_up() {
        let cfg = ObfuscationConfig {
            beta: 2.5,
            m_min: 1,
            ..default_cfg()
        };
        assert_eq!(target_virtual_count(3, Mode::Split, &cfg), 8);
    }

    #[test]
    fn shuffle_cap_keeps_fewer_virtual() {
        let cfg = ObfuscationConfig {
            alpha: 0.9,
            m_min: 1,
            shuffle_threshold: 1,
            ..default_cfg()
        };
        assert_eq!(target_virtual_count(2, Mode::Shuffle, &cfg), 1);
        assert_eq!(target_virtual_count(10, Mode::Shuffle, &cfg), 9);
    }

    #[test]
    fn invalid_configs() {
        let bad = |f: fn(&mut ObfuscationConfig)| {
            let mut c = default_cfg();
            f(&mut c);
            c.validate().unwrap_err()
        };
        assert_eq!(bad(|c| c.alpha = 1.5), ConfigError::Alpha(1.5));
        assert_eq!(bad(|c| c.alpha = 0.0), ConfigError::Alpha(0.0));
        assert_eq!(bad(|c| c.beta = 1.0), ConfigError::Beta(1.0));
        assert_eq!(
            bad(|c| c.shuffle_threshold = 0),
            ConfigError::ShuffleThreshold
        );
        assert_eq!(bad(|c| c.m_min = 0), ConfigError::MMin);
        assert!(default_cfg().validate().is_ok());
    }

    fn rates_with(entries: &[(ConnKey, u64)]) -> RateTracker<ConnKey> {
        let mut r = RateTracker::default();
        for &(k, b) in entries {
            r.record(k, b, ms(0));
        }
        r
    }

    #[test]
    fn shuffle_selection() {
        let v = [VirtualId(1), VirtualId(2), VirtualId(3)];
        let r = rates_with(&[
            (ConnKey::Virtual(v[0]), 100),
            (ConnKey::Virtual(v[1]), 50),
            (ConnKey::Virtual(v[2]), 70),
        ]);
        assert_eq!(select_virtual_shuffle(&r, &v, ms(1)), Some(v[1]));

        let r = rates_with(&[(ConnKey::Virtual(v[0]), 50), (ConnKey::Virtual(v[1]), 50)]);
        assert_eq!(select_virtual_shuffle(&r, &v[..2], ms(1)), Some(v[0]));

        let r = RateTracker::default();
        assert_eq!(select_virtual_shuffle(&r, &v, ms(1)), Some(v[0]));
        assert_eq!(select_virtual_shuffle(&r, &[], ms(1)), None);
    }

    #[test]
    fn split_selection() {
        let v = [VirtualId(1), VirtualId(2)];
        let r = rates_with(&[
            (ConnKey::Real(9), 100),
            (ConnKey::Virtual(v[0]), 90),
            (ConnKey::Virtual(v[1]), 10),
        ]);
        assert_eq!(select_virtual_split(9, &r, &v, ms(1)), Some(v[1]));

        let r = RateTracker::default();
        assert_eq!(select_virtual_split(9, &r, &v, ms(1)), Some(v[0]));

        let r = rates_with(&[
            (ConnKey::Real(9), 50),
            (ConnKey::Virtual(v[0]), 100),
            (ConnKey::Virtual(v[1]), 0),
        ]);
        assert_eq!(select_virtual_split(9, &r, &v, ms(1)), Some(v[0]));
    }

    fn apply(table: &mut MappingTable, actions: &[Action], next: &mut u32) {
        for a in actions {
            match a {
                Action::ActivateVirtual => {
                    table.activate(VirtualId(*next));
                    *next += 1;
                }
                Action::DeactivateVirtual(v) => table.deactivate(*v),
            }
        }
    }

    #[test]
    fn rebalance_examples() {
        let cfg = default_cfg();
        let rates = RateTracker::default();
        let mut table = MappingTable::new();
        let mut next = 0;
        for id in 0..5 {
            table.register_real(id, ms(0)).unwrap();
        }
        let actions = rebalance(&mut table, &rates, &cfg, ms(0));
        apply(&mut table, &actions, &mut next);
        assert_eq!(table.mode(), Mode::Shuffle);
        assert_eq!(table.virtual_ids().len(), 3);

        // 5 -> 3: shuffle to split, 3 -> 6 virtual.
        table.unregister_real(3, ms(1)).unwrap();
        table.unregister_real(4, ms(1)).unwrap();
        let actions = rebalance(&mut table, &rates, &cfg, ms(1));
        assert_eq!(actions, vec![Action::ActivateVirtual; 3]);
        apply(&mut table, &actions, &mut next);
        assert_eq!(table.mode(), Mode::Split);

        // Fixed point.
        assert!(rebalance(&mut table, &rates, &cfg, ms(1)).is_empty());

        // 3 -> 1 in split mode: M goes 6 -> 3.
        table.unregister_real(1, ms(2)).unwrap();
        table.unregister_real(2, ms(2)).unwrap();
        let actions = rebalance(&mut table, &rates, &cfg, ms(2));
        assert_eq!(actions.len(), 3);
        apply(&mut table, &actions, &mut next);
        assert_eq!(table.virtual_ids().len(), 3);
    }

    #[test]
    fn split_at_minimum_is_fixed_point() {
        let cfg = default_cfg();
        let rates = RateTracker::default();
        let mut table = MappingTable::new();
        let mut next = 0;
        table.register_real(0, ms(0)).unwrap();
        let actions = rebalance(&mut table, &rates, &cfg, ms(0));
        apply(&mut table, &actions, &mut next);
        assert_eq!(table.virtual_ids().len(), 3);
        table.register_real(1, ms(0)).unwrap();
        table.unregister_real(1, ms(0)).unwrap();
        assert!(rebalance(&mut table, &rates, &cfg, ms(0)).is_empty());
    }

    #[test]
    fn deactivation_prefers_idle_then_newest() {
        let cfg = default_cfg();
        let mut rates = RateTracker::default();
        let mut table = MappingTable::new();
        for i in 0..6 {
            table.activate(VirtualId(i));
        }
        rates.record(ConnKey::Virtual(VirtualId(0)), 10, ms(0));
        rates.record(ConnKey::Virtual(VirtualId(5)), 10, ms(0));
        table.register_real(1, ms(0)).unwrap();
        let actions = rebalance(&mut table, &rates, &cfg, ms(0));
        assert_eq!(
            actions,
            vec![
                Action::DeactivateVirtual(VirtualId(4)),
                Action::DeactivateVirtual(VirtualId(3)),
                Action::DeactivateVirtual(VirtualId(2)),
            ]
        );
    }

    #[test]
    fn registration_errors_and_quarantine() {
        let mut table = MappingTable::new();
        table.register_real(7, ms(0)).unwrap();
        assert_eq!(
            table.register_real(7, ms(0)),
            Err(MappingError::Duplicate(7))
        );
        assert_eq!(
            table.unregister_real(8, ms(0)),
            Err(MappingError::Unknown(8))
        );
        table.unregister_real(7, ms(100)).unwrap();
        assert_eq!(
            table.register_real(7, ms(5099)),
            Err(MappingError::Quarantined(7))
        );
        table.register_real(7, ms(5100)).unwrap();
    }

    #[test]
    fn sequence_numbers_wrap() {
        let mut table = MappingTable::new();
        table.register_real(1, ms(0)).unwrap();
        for expected in 0..=u16::MAX {
            assert_eq!(table.take_seq(1).unwrap(), expected);
        }
        assert_eq!(table.take_seq(1).unwrap(), 0);
        assert_eq!(table.take_seq(2), Err(MappingError::Unknown(2)));
    }

    #[test]
    fn engine_tick_respects_cadence() {
        let mut engine = MappingEngine::new(Strategy::Obfuscate(default_cfg()));
        let first = engine.tick(ms(0));
        assert_eq!(first.len(), 3);
        for (i, _) in first.iter().enumerate() {
            engine.activate(VirtualId(i as u32));
        }
        assert!(engine.tick(ms(500)).is_empty());
        assert!(engine.tick(ms(1000)).is_empty());
    }

    #[test]
    fn direct_strategy_pins() {
        let mut engine = MappingEngine::new(Strategy::Direct);
        assert_eq!(
            engine.register(4, ms(0)).unwrap(),
            vec![Action::ActivateVirtual]
        );
        engine.activate(VirtualId(11));
        assert_eq!(
            engine.register(5, ms(0)).unwrap(),
            vec![Action::ActivateVirtual]
        );
        engine.activate(VirtualId(12));
        assert_eq!(engine.select(4, ms(0)), Some(VirtualId(11)));
        assert_eq!(engine.select(5, ms(0)), Some(VirtualId(12)));
        assert_eq!(
            engine.unregister(4, ms(1)).unwrap(),
            vec![Action::DeactivateVirtual(VirtualId(11))]
        );
        assert_eq!(engine.select(4, ms(1)), None);
    }

    #[test]
    fn shuffle_balances_uniform_load() {
        use rand::{Rng, SeedableRng};
        let cfg = default_cfg();
        let mut engine = MappingEngine::new(Strategy::Obfuscate(cfg.clone()));
        let mut next = 0u32;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for id in 0..20u16 {
            for a in engine.register(id, ms(0)).unwrap() {
                if a == Action::ActivateVirtual {
                    engine.activate(VirtualId(next));
                    next += 1;
                }
            }
        }
        assert_eq!(engine.mode(), Mode::Shuffle);
        let unit = 1200u64;
        let end = cfg.rate_window * 10;
        let mut t = Duration::ZERO;
        while t < end {
            let id = rng.random_range(0..20u16);
            engine.record_real(id, unit, t);
            let v = engine.select(id, t).unwrap();
            engine.record_virtual(v, unit, t);
            t += Duration::from_micros(500);
        }
        let loads: Vec<f64> = engine
            .table()
            .virtual_ids()
            .iter()
            .map(|v| engine.rates().bps(&ConnKey::Virtual(*v), t))
            .collect();
        let max = loads.iter().cloned().fold(f64::MIN, f64::max);
        let min = loads.iter().cloned().fold(f64::MAX, f64::min);
        assert!(min > 0.0 && max / min < 1.5, "loads {loads:?}");
    }
}
