//! Transport-agnostic proxy state machine.
//!
//! An [`Endpoint`] is driven by events (a real connection opened, bytes read,
//! a virtual connection delivered data, a timer tick) and answers with
//! [`Output`]s that the surrounding runtime carries out. The same state
//! machine backs the TCP proxies and the deterministic simulator.
//!
//! Both sides relay in both directions: the ingress proxy allocates real
//! connection IDs and opens virtual connections, the egress proxy mirrors the
//! IDs it learns from Create frames and sends its replies over whichever
//! virtual connections it has accepted.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::time::Duration;

use thiserror::Error;
use tracing::{debug, warn};

use crate::mapping::{Action, MappingEngine, MappingError, Strategy, VirtualId};
use crate::proxy::reorder::ReorderBuffer;
use crate::wire::{
    decode_frames, encode_frame, CommandType, ConnId, Frame, FrameDecoder, WireError,
    MAX_FRAME_PAYLOAD,
};

/// Idle time after which a virtual connection receives a KeepAlive.
pub const KEEPALIVE: Duration = Duration::from_millis(15_000);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Ingress,
    Egress,
}

#[derive(Debug, Error)]
pub enum ProxyError {
    #[error("real connection {0} is not open")]
    UnknownReal(ConnId),
    #[error("no virtual connection available for real connection {0}")]
    NoVirtual(ConnId),
    #[error("real connection id space exhausted")]
    IdsExhausted,
    #[error("virtual connection {virt} is not open")]
    UnknownVirtual { virt: VirtualId },
    #[error("protocol error on {virt}: {source}")]
    Protocol {
        virt: VirtualId,
        #[source]
        source: WireError,
    },
    #[error("unexpected {cmd} frame on {virt}")]
    Unexpected { virt: VirtualId, cmd: CommandType },
    #[error("operation not valid on the {0:?} side")]
    WrongRole(Role),
    #[error(transparent)]
    Mapping(#[from] MappingError),
}

/// Work for the runtime hosting an [`Endpoint`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Output {
    /// Write one encoded frame to `virt`. The bytes must not be interleaved
    /// with any other write on that connection.
    Send {
        virt: VirtualId,
        cmd: CommandType,
        bytes: Vec<u8>,
    },
    /// Establish a new virtual connection to the peer proxy.
    OpenVirtual(VirtualId),
    /// Tear down a virtual connection after a protocol error.
    ResetVirtual(VirtualId),
    /// Half-close a virtual connection that will carry no more frames. Only
    /// the 1:1 relay retires connections this way; reading continues until
    /// the peer closes too.
    CloseVirtual(VirtualId),
    /// Open the local side of a real connection (egress: dial the service).
    OpenReal(ConnId),
    /// Write in-order application bytes to a real connection.
    Deliver { real: ConnId, bytes: Vec<u8> },
    /// Signal end-of-stream to the local application (write half-close).
    CloseReal(ConnId),
    /// Abort a real connection.
    ResetReal(ConnId),
}

#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct EndpointStats {
    pub frames_sent: BTreeMap<CommandType, u64>,
    pub wire_bytes_sent: u64,
    pub payload_bytes_sent: u64,
    pub payload_bytes_delivered: u64,
}

impl EndpointStats {
    pub fn total_frames(&self) -> u64 {
        self.frames_sent.values().sum()
    }
}

#[derive(Debug)]
struct VirtualState {
    decoder: FrameDecoder,
    last_sent: Duration,
    last_received: Duration,
    inbound_reals: BTreeSet<ConnId>,
    closing: bool,
}

impl VirtualState {
    fn new(now: Duration) -> Self {
        VirtualState {
            decoder: FrameDecoder::new(),
            last_sent: now,
            last_received: now,
            inbound_reals: BTreeSet::new(),
            closing: false,
        }
    }
}

#[derive(Debug, Default)]
struct RealState {
    reorder: ReorderBuffer,
    /// The local application side exists (egress: Create received).
    opened: bool,
    /// Payloads that became deliverable before the Create arrived.
    held: Vec<Vec<u8>>,
    /// We sent Remove.
    local_closed: bool,
    /// The peer's stream is fully delivered and half-closed locally.
    remote_closed: bool,
    registered: bool,
}

#[derive(Debug)]
pub struct Endpoint {
    role: Role,
    engine: MappingEngine,
    virtuals: BTreeMap<VirtualId, VirtualState>,
    next_virtual: u32,
    reals: BTreeMap<ConnId, RealState>,
    next_real: ConnId,
    unsatisfied_activations: usize,
    outputs: VecDeque<Output>,
    stats: EndpointStats,
}

impl Endpoint {
    pub fn new(role: Role, strategy: Strategy, now: Duration) -> Self {
        let mut ep = Endpoint {
            role,
            engine: MappingEngine::new(strategy),
            virtuals: BTreeMap::new(),
            next_virtual: 0,
            reals: BTreeMap::new(),
            next_real: 0,
            unsatisfied_activations: 0,
            outputs: VecDeque::new(),
            stats: EndpointStats::default(),
        };
        let actions = ep.engine.remap(now);
        ep.apply(actions, now);
        ep
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn engine(&self) -> &MappingEngine {
        &self.engine
    }

    pub fn stats(&self) -> &EndpointStats {
        &self.stats
    }

    pub fn open_virtuals(&self) -> impl Iterator<Item = VirtualId> + '_ {
        self.virtuals.keys().copied()
    }

    pub fn open_reals(&self) -> impl Iterator<Item = ConnId> + '_ {
        self.reals.keys().copied()
    }

    pub fn last_received(&self, virt: VirtualId) -> Option<Duration> {
        self.virtuals.get(&virt).map(|v| v.last_received)
    }

    pub fn drain_outputs(&mut self) -> std::collections::vec_deque::Drain<'_, Output> {
        self.outputs.drain(..)
    }

    pub fn poll_output(&mut self) -> Option<Output> {
        self.outputs.pop_front()
    }

    /// A new real connection arrived at the ingress proxy.
    pub fn open_real(&mut self, now: Duration) -> Result<ConnId, ProxyError> {
        if self.role != Role::Ingress {
            return Err(ProxyError::WrongRole(self.role));
        }
        let id = self.allocate_id(now)?;
        let actions = self.engine.register(id, now)?;
        self.reals.insert(
            id,
            RealState {
                opened: true,
                registered: true,
                ..Default::default()
            },
        );
        self.apply(actions, now);
        let Some(virt) = self.engine.least_loaded(id, now) else {
            self.reset_real(id, now);
            return Err(ProxyError::NoVirtual(id));
        };
        self.send(virt, Frame::create(id), now);
        Ok(id)
    }

    fn allocate_id(&mut self, now: Duration) -> Result<ConnId, ProxyError> {
        for _ in 0..=u16::MAX as u32 {
            let id = self.next_real;
            self.next_real = self.next_real.wrapping_add(1);
            if !self.reals.contains_key(&id) && !self.engine.table().is_quarantined(id, now) {
                return Ok(id);
            }
        }
        Err(ProxyError::IdsExhausted)
    }

    /// Bytes read from the local side of real connection `id`.
    pub fn real_data(&mut self, id: ConnId, data: &[u8], now: Duration) -> Result<(), ProxyError> {
        match self.reals.get(&id) {
            Some(r) if r.registered && !r.local_closed => {}
            _ => return Err(ProxyError::UnknownReal(id)),
        }
        for chunk in data.chunks(MAX_FRAME_PAYLOAD) {
            self.engine.record_real(id, chunk.len() as u64, now);
            let Some(virt) = self.engine.select(id, now) else {
                self.reset_real(id, now);
                return Err(ProxyError::NoVirtual(id));
            };
            let seq = self.engine.take_seq(id)?;
            let frame = Frame::relay(id, seq, chunk.to_vec()).expect("chunk fits a frame");
            self.stats.payload_bytes_sent += chunk.len() as u64;
            self.send(virt, frame, now);
        }
        Ok(())
    }

    /// The local side of real connection `id` reached end-of-stream.
    pub fn real_closed(&mut self, id: ConnId, now: Duration) -> Result<(), ProxyError> {
        let Some(real) = self.reals.get_mut(&id) else {
            return Err(ProxyError::UnknownReal(id));
        };
        if real.local_closed {
            return Ok(());
        }
        real.local_closed = true;
        self.send_remove(id, now);
        self.maybe_teardown(id, now);
        Ok(())
    }

    /// The local side of real connection `id` failed.
    pub fn real_failed(&mut self, id: ConnId, now: Duration) {
        if self.reals.contains_key(&id) {
            self.reset_real(id, now);
        }
    }

    /// Opens idle virtual connections until at least `size` exist. Only the
    /// obfuscating ingress side keeps a pool.
    pub fn ensure_pool(&mut self, size: usize, now: Duration) {
        if self.role != Role::Ingress || matches!(self.engine.strategy(), Strategy::Direct) {
            return;
        }
        while self.virtuals.len() < size {
            let v = self.fresh_virtual(now);
            self.outputs.push_back(Output::OpenVirtual(v));
        }
    }

    /// The egress proxy accepted a new virtual connection from its peer.
    pub fn accept_virtual(&mut self, now: Duration) -> VirtualId {
        let virt = self.fresh_virtual(now);
        if self.unsatisfied_activations > 0 && !matches!(self.engine.strategy(), Strategy::Direct) {
            self.unsatisfied_activations -= 1;
            self.engine.activate(virt);
        }
        virt
    }

    /// Bytes read from virtual connection `virt`.
    pub fn virtual_data(
        &mut self,
        virt: VirtualId,
        bytes: &[u8],
        now: Duration,
    ) -> Result<(), ProxyError> {
        let Some(state) = self.virtuals.get_mut(&virt) else {
            return Err(ProxyError::UnknownVirtual { virt });
        };
        state.last_received = now;
        let frames = match state.decoder.push(bytes) {
            Ok(frames) => frames,
            Err(source) => {
                warn!(%virt, %source, "tearing down virtual connection");
                self.teardown_virtual(virt, now);
                return Err(ProxyError::Protocol { virt, source });
            }
        };
        for frame in frames {
            if let Err(err) = self.handle_frame(virt, frame, now) {
                self.teardown_virtual(virt, now);
                return Err(err);
            }
        }
        Ok(())
    }

    /// The transport under `virt` failed. `unsent` holds the frames the
    /// runtime accepted but could not write; each is re-sent once on another
    /// active connection.
    pub fn virtual_failed(&mut self, virt: VirtualId, unsent: Vec<Vec<u8>>, now: Duration) {
        if self.virtuals.remove(&virt).is_none() {
            return;
        }
        self.engine.remove_virtual(virt);
        let mut frames = Vec::new();
        for bytes in unsent {
            match decode_frames(&bytes) {
                Ok((decoded, _)) => frames.extend(decoded),
                Err(err) => debug!(%virt, %err, "dropping undecodable unsent bytes"),
            }
        }
        let actions = self.engine.remap(now);
        self.apply(actions, now);
        for frame in frames {
            let id = frame.conn_id();
            match frame.cmd() {
                CommandType::KeepAlive => {}
                CommandType::Relay => match self.engine.select(id, now) {
                    Some(alt) => self.send(alt, frame, now),
                    None => self.real_failed(id, now),
                },
                CommandType::Create | CommandType::Remove => {
                    match self.engine.least_loaded(id, now) {
                        Some(alt) => self.send(alt, frame, now),
                        None => self.real_failed(id, now),
                    }
                }
            }
        }
    }

    /// Periodic maintenance: remap cadence, keep-alives and stalled
    /// reassembly. Never emits Relay frames.
    pub fn tick(&mut self, now: Duration) {
        let actions = self.engine.tick(now);
        self.apply(actions, now);

        let idle: Vec<VirtualId> = self
            .virtuals
            .iter()
            .filter(|(_, v)| !v.closing && now >= v.last_sent + KEEPALIVE)
            .map(|(&id, _)| id)
            .collect();
        for virt in idle {
            self.send(virt, Frame::keep_alive(), now);
        }

        let stalled: Vec<ConnId> = self
            .reals
            .iter()
            .filter(|(_, r)| r.reorder.is_stalled(now))
            .map(|(&id, _)| id)
            .collect();
        for id in stalled {
            warn!(real = id, "reassembly stalled, resetting");
            self.reset_real(id, now);
        }
    }

    fn handle_frame(
        &mut self,
        virt: VirtualId,
        frame: Frame,
        now: Duration,
    ) -> Result<(), ProxyError> {
        let id = frame.conn_id();
        match frame.cmd() {
            CommandType::KeepAlive => Ok(()),
            CommandType::Create => {
                if self.role != Role::Egress {
                    return Err(ProxyError::Unexpected {
                        virt,
                        cmd: CommandType::Create,
                    });
                }
                let real = self.reals.entry(id).or_default();
                if real.opened {
                    return Err(ProxyError::Unexpected {
                        virt,
                        cmd: CommandType::Create,
                    });
                }
                let registered = match self.engine.strategy() {
                    Strategy::Direct => self
                        .engine
                        .register_pinned(id, virt, now)
                        .map(|_| Vec::new()),
                    Strategy::Obfuscate(_) => self.engine.register(id, now),
                };
                let actions = match registered {
                    Ok(actions) => actions,
                    Err(err) => {
                        warn!(real = id, %err, "rejecting create");
                        self.reals.remove(&id);
                        return Ok(());
                    }
                };
                let real = self.reals.get_mut(&id).expect("inserted above");
                real.opened = true;
                real.registered = true;
                let held = std::mem::take(&mut real.held);
                self.outputs.push_back(Output::OpenReal(id));
                for bytes in held {
                    self.deliver(id, bytes);
                }
                self.apply(actions, now);
                self.check_remote_end(id, now);
                Ok(())
            }
            CommandType::Relay => {
                let Some(real) = self.inbound_state(id, now) else {
                    return Ok(());
                };
                let seq = frame.seq();
                match real.reorder.push(seq, frame.into_payload(), now) {
                    Ok(ready) => {
                        if let Some(v) = self.virtuals.get_mut(&virt) {
                            v.inbound_reals.insert(id);
                        }
                        for bytes in ready {
                            self.deliver(id, bytes);
                        }
                        self.check_remote_end(id, now);
                    }
                    Err(err) => {
                        warn!(real = id, %err, "resetting real connection");
                        self.reset_real(id, now);
                    }
                }
                Ok(())
            }
            CommandType::Remove => {
                let Some(real) = self.inbound_state(id, now) else {
                    return Ok(());
                };
                real.reorder.set_end(frame.seq());
                real.reorder.note_waiting(now);
                self.check_remote_end(id, now);
                Ok(())
            }
        }
    }

    /// State for an inbound frame on `id`, created lazily on the egress side
    /// when Relay frames overtake their Create.
    fn inbound_state(&mut self, id: ConnId, now: Duration) -> Option<&mut RealState> {
        if !self.reals.contains_key(&id) {
            if self.role == Role::Ingress || self.engine.table().is_quarantined(id, now) {
                return None;
            }
            self.reals.insert(id, RealState::default());
        }
        self.reals.get_mut(&id)
    }

    fn deliver(&mut self, id: ConnId, bytes: Vec<u8>) {
        let Some(real) = self.reals.get_mut(&id) else {
            return;
        };
        if real.remote_closed {
            return;
        }
        if real.opened {
            self.stats.payload_bytes_delivered += bytes.len() as u64;
            self.outputs.push_back(Output::Deliver { real: id, bytes });
        } else {
            real.held.push(bytes);
        }
    }

    fn check_remote_end(&mut self, id: ConnId, now: Duration) {
        let Some(real) = self.reals.get_mut(&id) else {
            return;
        };
        if real.opened && !real.remote_closed && real.reorder.is_complete() {
            real.remote_closed = true;
            self.outputs.push_back(Output::CloseReal(id));
            self.maybe_teardown(id, now);
        }
    }

    fn maybe_teardown(&mut self, id: ConnId, now: Duration) {
        let done = self
            .reals
            .get(&id)
            .is_some_and(|r| r.local_closed && r.remote_closed);
        if done {
            self.forget_real(id, now);
        }
    }

    fn forget_real(&mut self, id: ConnId, now: Duration) {
        if let Some(real) = self.reals.remove(&id) {
            if real.registered {
                match self.engine.unregister(id, now) {
                    Ok(actions) => self.apply(actions, now),
                    Err(err) => debug!(real = id, %err, "unregister failed"),
                }
            }
        }
    }

    fn reset_real(&mut self, id: ConnId, now: Duration) {
        let Some(real) = self.reals.get(&id) else {
            return;
        };
        let (opened, local_closed, registered) = (real.opened, real.local_closed, real.registered);
        if registered && !local_closed {
            self.send_remove(id, now);
        }
        if opened {
            self.outputs.push_back(Output::ResetReal(id));
        }
        self.forget_real(id, now);
    }

    fn send_remove(&mut self, id: ConnId, now: Duration) {
        let end = self.engine.table().peek_seq(id).unwrap_or(0);
        if let Some(virt) = self.engine.least_loaded(id, now) {
            self.send(virt, Frame::remove(id, end), now);
        }
    }

    fn teardown_virtual(&mut self, virt: VirtualId, now: Duration) {
        let Some(state) = self.virtuals.remove(&virt) else {
            return;
        };
        self.engine.remove_virtual(virt);
        self.outputs.push_back(Output::ResetVirtual(virt));
        for id in state.inbound_reals {
            self.reset_real(id, now);
        }
        let actions = self.engine.remap(now);
        self.apply(actions, now);
    }

    fn fresh_virtual(&mut self, now: Duration) -> VirtualId {
        let virt = VirtualId(self.next_virtual);
        self.next_virtual += 1;
        self.virtuals.insert(virt, VirtualState::new(now));
        virt
    }

    fn apply(&mut self, actions: Vec<Action>, now: Duration) {
        if actions.is_empty() {
            return;
        }
        let direct = matches!(self.engine.strategy(), Strategy::Direct);
        if direct {
            for action in &actions {
                if let Action::DeactivateVirtual(v) = *action {
                    if let Some(state) = self.virtuals.get_mut(&v) {
                        state.closing = true;
                        self.outputs.push_back(Output::CloseVirtual(v));
                    }
                }
            }
        }
        let wanted = actions
            .iter()
            .filter(|a| **a == Action::ActivateVirtual)
            .count();
        self.unsatisfied_activations = 0;
        if wanted == 0 {
            return;
        }
        let mut idle: Vec<VirtualId> = if direct {
            Vec::new()
        } else {
            self.virtuals
                .keys()
                .copied()
                .filter(|v| !self.engine.table().is_active(*v))
                .collect()
        };
        idle.reverse();
        let mut unsatisfied = 0;
        for _ in 0..wanted {
            if let Some(v) = idle.pop() {
                self.engine.activate(v);
            } else if self.role == Role::Ingress {
                let v = self.fresh_virtual(now);
                self.outputs.push_back(Output::OpenVirtual(v));
                self.engine.activate(v);
            } else {
                unsatisfied += 1;
            }
        }
        self.unsatisfied_activations = unsatisfied;
    }

    fn send(&mut self, virt: VirtualId, frame: Frame, now: Duration) {
        let cmd = frame.cmd();
        let bytes = encode_frame(&frame).expect("frames built here are valid");
        self.engine.record_virtual(virt, bytes.len() as u64, now);
        if let Some(v) = self.virtuals.get_mut(&virt) {
            v.last_sent = now;
        }
        *self.stats.frames_sent.entry(cmd).or_default() += 1;
        self.stats.wire_bytes_sent += bytes.len() as u64;
        self.outputs.push_back(Output::Send { virt, cmd, bytes });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mapping::{Mode, ObfuscationConfig};

    const T0: Duration = Duration::ZERO;

    fn obfuscate() -> Strategy {
        Strategy::Obfuscate(ObfuscationConfig::default())
    }

    fn sends(outputs: &[Output]) -> Vec<(VirtualId, CommandType, Vec<u8>)> {
        outputs
            .iter()
            .filter_map(|o| match o {
                Output::Send { virt, cmd, bytes } => Some((*virt, *cmd, bytes.clone())),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn ingress_opens_minimum_virtuals() {
        let mut ep = Endpoint::new(Role::Ingress, obfuscate(), T0);
        let out: Vec<Output> = ep.drain_outputs().collect();
        assert_eq!(
            out,
            vec![
                Output::OpenVirtual(VirtualId(0)),
                Output::OpenVirtual(VirtualId(1)),
                Output::OpenVirtual(VirtualId(2)),
            ]
        );
    }

    #[test]
    fn create_precedes_relay() {
        let mut ep = Endpoint::new(Role::Ingress, obfuscate(), T0);
        ep.drain_outputs().for_each(drop);
        let id = ep.open_real(T0).unwrap();
        ep.real_data(id, b"hello", T0).unwrap();
        let out: Vec<Output> = ep.drain_outputs().collect();
        let s = sends(&out);
        assert_eq!(s[0].1, CommandType::Create);
        assert_eq!(s[1].1, CommandType::Relay);
    }

    #[test]
    fn large_write_is_chunked() {
        let mut ep = Endpoint::new(Role::Ingress, obfuscate(), T0);
        let id = ep.open_real(T0).unwrap();
        ep.drain_outputs().for_each(drop);
        ep.real_data(id, &vec![7u8; 40_000], T0).unwrap();
        let out: Vec<Output> = ep.drain_outputs().collect();
        let relays: Vec<Frame> = sends(&out)
            .into_iter()
            .map(|(_, _, b)| decode_frames(&b).unwrap().0.remove(0))
            .collect();
        let lens: Vec<usize> = relays.iter().map(|f| f.payload().len()).collect();
        assert_eq!(lens, vec![16384, 16384, 7232]);
        let seqs: Vec<u16> = relays.iter().map(|f| f.seq()).collect();
        assert_eq!(seqs, vec![0, 1, 2]);
    }

    #[test]
    fn split_mode_spreads_single_connection() {
        let mut ep = Endpoint::new(Role::Ingress, obfuscate(), T0);
        let id = ep.open_real(T0).unwrap();
        assert_eq!(ep.engine().mode(), Mode::Split);
        ep.drain_outputs().for_each(drop);
        let mut counts = BTreeMap::new();
        for i in 0..300u64 {
            let now = Duration::from_millis(10 * i);
            ep.real_data(id, &[0u8; 1000], now).unwrap();
            for (virt, _, _) in sends(&ep.drain_outputs().collect::<Vec<_>>()) {
                *counts.entry(virt).or_insert(0) += 1;
            }
        }
        assert_eq!(counts.len(), 3);
        assert!(counts.values().all(|&c| c >= 1), "{counts:?}");
    }

    #[test]
    fn shuffle_mode_mixes_connections() {
        let cfg = ObfuscationConfig {
            shuffle_threshold: 2,
            m_min: 2,
            ..ObfuscationConfig::default()
        };
        let mut ep = Endpoint::new(Role::Ingress, Strategy::Obfuscate(cfg), T0);
        let ids: Vec<ConnId> = (0..3).map(|_| ep.open_real(T0).unwrap()).collect();
        assert_eq!(ep.engine().mode(), Mode::Shuffle);
        assert_eq!(ep.engine().table().virtual_ids().len(), 2);
        ep.drain_outputs().for_each(drop);
        let mut carried: BTreeMap<VirtualId, BTreeSet<ConnId>> = BTreeMap::new();
        for round in 0..20u64 {
            for &id in &ids {
                ep.real_data(id, &[1u8; 500], Duration::from_millis(round))
                    .unwrap();
            }
        }
        for (virt, _, bytes) in sends(&ep.drain_outputs().collect::<Vec<_>>()) {
            let (frames, used) = decode_frames(&bytes).unwrap();
            assert_eq!((frames.len(), used), (1, bytes.len()));
            carried.entry(virt).or_default().insert(frames[0].conn_id());
        }
        assert_eq!(carried.len(), 2);
        assert!(carried.values().all(|ids| ids.len() > 1), "{carried:?}");
    }

    #[test]
    fn unknown_real_rejected() {
        let mut ep = Endpoint::new(Role::Ingress, obfuscate(), T0);
        assert!(matches!(
            ep.real_data(42, b"x", T0),
            Err(ProxyError::UnknownReal(42))
        ));
        assert!(matches!(
            Endpoint::new(Role::Egress, obfuscate(), T0).open_real(T0),
            Err(ProxyError::WrongRole(Role::Egress))
        ));
    }

    #[test]
    fn tick_sends_only_keepalives() {
        let mut ep = Endpoint::new(Role::Ingress, obfuscate(), T0);
        let id = ep.open_real(T0).unwrap();
        ep.real_data(id, b"abc", T0).unwrap();
        ep.drain_outputs().for_each(drop);
        ep.tick(Duration::from_millis(14_999));
        assert!(sends(&ep.drain_outputs().collect::<Vec<_>>()).is_empty());
        ep.tick(KEEPALIVE);
        let s = sends(&ep.drain_outputs().collect::<Vec<_>>());
        assert_eq!(s.len(), 3);
        assert!(s.iter().all(|(_, cmd, _)| *cmd == CommandType::KeepAlive));
    }

    #[test]
    fn corrupt_stream_resets_only_that_virtual() {
        let mut egress = Endpoint::new(Role::Egress, obfuscate(), T0);
        let a = egress.accept_virtual(T0);
        let b = egress.accept_virtual(T0);
        let mut create = encode_frame(&Frame::create(5)).unwrap();
        create.extend(encode_frame(&Frame::relay(5, 0, b"hi".to_vec()).unwrap()).unwrap());
        egress.virtual_data(a, &create, T0).unwrap();
        egress.drain_outputs().for_each(drop);

        let err = egress
            .virtual_data(b, &[0xde, 0xad, 0, 0, 0, 0, 0, 0], T0)
            .unwrap_err();
        assert!(matches!(err, ProxyError::Protocol { .. }));
        let out: Vec<Output> = egress.drain_outputs().collect();
        assert!(out.contains(&Output::ResetVirtual(b)));
        assert!(!out.contains(&Output::ResetReal(5)));
        assert_eq!(egress.open_virtuals().collect::<Vec<_>>(), vec![a]);
    }

    #[test]
    fn relay_before_create_is_held() {
        let mut egress = Endpoint::new(Role::Egress, obfuscate(), T0);
        let a = egress.accept_virtual(T0);
        let b = egress.accept_virtual(T0);
        let relay = encode_frame(&Frame::relay(9, 0, b"early".to_vec()).unwrap()).unwrap();
        egress.virtual_data(b, &relay, T0).unwrap();
        assert!(egress.drain_outputs().next().is_none());
        egress
            .virtual_data(a, &encode_frame(&Frame::create(9)).unwrap(), T0)
            .unwrap();
        let out: Vec<Output> = egress.drain_outputs().collect();
        assert_eq!(
            out,
            vec![
                Output::OpenReal(9),
                Output::Deliver {
                    real: 9,
                    bytes: b"early".to_vec()
                }
            ]
        );
    }

    #[test]
    fn remove_waits_for_missing_relays() {
        let mut egress = Endpoint::new(Role::Egress, obfuscate(), T0);
        let a = egress.accept_virtual(T0);
        let mut bytes = encode_frame(&Frame::create(1)).unwrap();
        bytes.extend(encode_frame(&Frame::remove(1, 2)).unwrap());
        bytes.extend(encode_frame(&Frame::relay(1, 1, b"b".to_vec()).unwrap()).unwrap());
        egress.virtual_data(a, &bytes, T0).unwrap();
        let out: Vec<Output> = egress.drain_outputs().collect();
        assert_eq!(out, vec![Output::OpenReal(1)]);
        let relay = encode_frame(&Frame::relay(1, 0, b"a".to_vec()).unwrap()).unwrap();
        egress.virtual_data(a, &relay, T0).unwrap();
        let out: Vec<Output> = egress.drain_outputs().collect();
        assert_eq!(
            out,
            vec![
                Output::Deliver {
                    real: 1,
                    bytes: b"a".to_vec()
                },
                Output::Deliver {
                    real: 1,
                    bytes: b"b".to_vec()
                },
                Output::CloseReal(1),
            ]
        );
    }

    #[test]
    fn stalled_reassembly_resets() {
        let mut egress = Endpoint::new(Role::Egress, obfuscate(), T0);
        let a = egress.accept_virtual(T0);
        let mut bytes = encode_frame(&Frame::create(3)).unwrap();
        bytes.extend(encode_frame(&Frame::relay(3, 1, b"late".to_vec()).unwrap()).unwrap());
        egress.virtual_data(a, &bytes, T0).unwrap();
        egress.drain_outputs().for_each(drop);
        egress.tick(Duration::from_millis(5000));
        let out: Vec<Output> = egress.drain_outputs().collect();
        assert!(out.contains(&Output::ResetReal(3)));
        let s = sends(&out);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].1, CommandType::Remove);
    }

    #[test]
    fn failed_virtual_reroutes_unsent_frames() {
        let mut ep = Endpoint::new(Role::Ingress, obfuscate(), T0);
        let id = ep.open_real(T0).unwrap();
        ep.drain_outputs().for_each(drop);
        ep.real_data(id, b"payload", T0).unwrap();
        let out: Vec<Output> = ep.drain_outputs().collect();
        let (virt, _, bytes) = sends(&out).remove(0);
        ep.virtual_failed(virt, vec![bytes.clone()], T0);
        let out: Vec<Output> = ep.drain_outputs().collect();
        assert!(out.contains(&Output::OpenVirtual(VirtualId(3))));
        let resent = sends(&out);
        assert_eq!(resent.len(), 1);
        assert_ne!(resent[0].0, virt);
        assert_eq!(resent[0].2, bytes);
    }

    #[test]
    fn ids_skip_quarantine() {
        let mut ep = Endpoint::new(Role::Ingress, Strategy::Direct, T0);
        let first = ep.open_real(T0).unwrap();
        ep.real_closed(first, T0).unwrap();
        ep.real_failed(first, T0);
        let second = ep.open_real(T0).unwrap();
        assert_ne!(first, second);
    }
}
