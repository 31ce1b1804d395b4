//! Deterministic discrete-event simulation of an ingress/egress proxy pair.
//!
//! Both proxies are the same [`Endpoint`] state machines the TCP runtime
//! uses. Virtual connections are simulated links with seeded per-frame
//! latency; each link is FIFO in each direction but links overtake one
//! another, so frames of one real connection really do arrive out of order.
//! Real connections replay a fixed schedule of client and service writes.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::harness::trace::{Direction, FlowEvent, FlowId, FlowTrace, PacketDir};
use crate::mapping::{Strategy, VirtualId};
use crate::proxy::{Endpoint, EndpointStats, Output, Role};
use crate::wire::{CommandType, ConnId, FrameHeader, FRAME_HEADER_LEN};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimOptions {
    /// Minimum one-way delay of every frame.
    pub latency: Duration,
    /// Extra per-frame delay drawn uniformly from `[0, jitter)`.
    pub jitter: Duration,
    pub tick: Duration,
    /// Idle virtual connections the ingress proxy opens up front.
    pub base_connections: usize,
    pub seed: u64,
    /// Keep every delivered byte for inspection.
    pub keep_payload: bool,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            latency: Duration::from_millis(1),
            jitter: Duration::from_millis(2),
            tick: Duration::from_millis(100),
            base_connections: 8,
            seed: 0,
            keep_payload: false,
        }
    }
}

/// One application write. Without explicit `data` the write is `len` zero
/// bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScriptedWrite {
    pub at: Duration,
    pub dir: PacketDir,
    pub len: u32,
    pub data: Option<Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScriptedFlow {
    pub id: FlowId,
    pub open_at: Duration,
    /// Both ends half-close here, or after their last write if later.
    pub close_at: Duration,
    pub writes: Vec<ScriptedWrite>,
}

impl ScriptedFlow {
    /// Replays a generated client-side schedule.
    pub fn from_trace(trace: &FlowTrace) -> Self {
        let us = Duration::from_micros;
        ScriptedFlow {
            id: trace.flow_id(),
            open_at: us(trace.start().unwrap_or(0)),
            close_at: us(trace.end().unwrap_or(0)),
            writes: trace
                .events()
                .iter()
                .map(|e| ScriptedWrite {
                    at: us(e.t_micros),
                    dir: e.dir,
                    len: e.bytes,
                    data: None,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct SimReport {
    /// Real connections as seen at the ingress proxy: client writes when
    /// made, service bytes when handed to the client.
    pub ingress: Vec<FlowTrace>,
    /// Every frame on each virtual connection, at send time; flow id is the
    /// virtual connection handle.
    pub egress: Vec<FlowTrace>,
    /// Arrival of application bytes at the far application: `to_service`
    /// at the service, `to_client` at the client.
    pub delivered: Vec<FlowTrace>,
    /// Per flow, in input order: bytes received by the service and by the
    /// client. Empty unless `keep_payload` is set.
    pub received: Vec<[Vec<u8>; 2]>,
    /// Per flow: the virtual connections that carried any of its frames.
    pub carriers: Vec<BTreeSet<u32>>,
    /// Flows whose both directions reached a clean end-of-stream.
    pub completed: Vec<bool>,
    pub ingress_stats: EndpointStats,
    pub egress_stats: EndpointStats,
    pub errors: Vec<String>,
    pub finished_at: Duration,
}

impl SimReport {
    pub fn all_completed(&self) -> bool {
        self.errors.is_empty() && self.completed.iter().all(|&c| c)
    }
}

// Flows still running this long after their schedule ends are abandoned.
const GRACE: Duration = Duration::from_secs(60);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Toward {
    Ingress,
    Egress,
}

#[derive(Debug)]
enum LinkItem {
    Connect,
    Data(Vec<u8>),
    Eof,
}

#[derive(Debug)]
enum Event {
    Open(usize),
    ClientWrite(usize, usize),
    ServiceWrite(usize, usize),
    CloseClient(usize),
    CloseService(usize),
    Link(u32, Toward, LinkItem),
    Tick,
}

#[derive(Debug, Default)]
struct FlowState {
    ingress_id: Option<ConnId>,
    egress_id: Option<ConnId>,
    deferred: Vec<usize>,
    service_close_due: bool,
    service_closed: bool,
    client_eof: bool,
    service_eof: bool,
    failed: bool,
}

#[derive(Debug, Default)]
struct Link {
    egress_side: Option<VirtualId>,
    last_delivery: [u64; 2],
}

struct Sim<'a> {
    flows: &'a [ScriptedFlow],
    opts: SimOptions,
    rng: ChaCha8Rng,
    queue: BinaryHeap<Reverse<(u64, u64, usize)>>,
    slots: Vec<Option<Event>>,
    free: Vec<usize>,
    seq: u64,
    ingress: Endpoint,
    egress: Endpoint,
    state: Vec<FlowState>,
    by_ingress_id: BTreeMap<ConnId, usize>,
    by_egress_id: BTreeMap<ConnId, usize>,
    links: BTreeMap<u32, Link>,
    egress_links: BTreeMap<VirtualId, u32>,
    zeros: Vec<u8>,
    ingress_traces: Vec<Vec<FlowEvent>>,
    delivered: Vec<Vec<FlowEvent>>,
    egress_traces: BTreeMap<u32, Vec<FlowEvent>>,
    received: Vec<[Vec<u8>; 2]>,
    carriers: Vec<BTreeSet<u32>>,
    errors: Vec<String>,
    schedule_end: u64,
    ticking: bool,
}

/// Runs `flows` through an ingress/egress pair using `strategy` on both
/// sides. Deterministic for fixed inputs.
pub fn simulate(strategy: Strategy, flows: &[ScriptedFlow], opts: &SimOptions) -> SimReport {
    let mut ingress = Endpoint::new(Role::Ingress, strategy.clone(), Duration::ZERO);
    ingress.ensure_pool(opts.base_connections, Duration::ZERO);
    let egress = Endpoint::new(Role::Egress, strategy, Duration::ZERO);
    let max_len = flows
        .iter()
        .flat_map(|f| f.writes.iter())
        .filter(|w| w.data.is_none())
        .map(|w| w.len as usize)
        .max()
        .unwrap_or(0);
    let schedule_end = flows
        .iter()
        .flat_map(|f| f.writes.iter().map(|w| w.at).chain([f.close_at, f.open_at]))
        .max()
        .unwrap_or_default();
    let sim = Sim {
        flows,
        opts: *opts,
        rng: ChaCha8Rng::seed_from_u64(opts.seed),
        queue: BinaryHeap::new(),
        slots: Vec::new(),
        free: Vec::new(),
        seq: 0,
        ingress,
        egress,
        state: flows.iter().map(|_| FlowState::default()).collect(),
        by_ingress_id: BTreeMap::new(),
        by_egress_id: BTreeMap::new(),
        links: BTreeMap::new(),
        egress_links: BTreeMap::new(),
        zeros: vec![0; max_len],
        ingress_traces: vec![Vec::new(); flows.len()],
        delivered: vec![Vec::new(); flows.len()],
        egress_traces: BTreeMap::new(),
        received: if opts.keep_payload {
            vec![[Vec::new(), Vec::new()]; flows.len()]
        } else {
            Vec::new()
        },
        carriers: vec![BTreeSet::new(); flows.len()],
        errors: Vec::new(),
        schedule_end: micros(schedule_end),
        ticking: true,
    };
    sim.run()
}

fn micros(d: Duration) -> u64 {
    d.as_micros() as u64
}

impl Sim<'_> {
    fn schedule(&mut self, at: u64, event: Event) {
        let slot = match self.free.pop() {
            Some(i) => {
                self.slots[i] = Some(event);
                i
            }
            None => {
                self.slots.push(Some(event));
                self.slots.len() - 1
            }
        };
        self.queue.push(Reverse((at, self.seq, slot)));
        self.seq += 1;
    }

    fn run(mut self) -> SimReport {
        for (i, flow) in self.flows.iter().enumerate() {
            self.schedule(micros(flow.open_at), Event::Open(i));
            for (w, write) in flow.writes.iter().enumerate() {
                let event = match write.dir {
                    PacketDir::ToService => Event::ClientWrite(i, w),
                    PacketDir::ToClient => Event::ServiceWrite(i, w),
                };
                self.schedule(micros(write.at), event);
            }
            let last_write = |dir| {
                flow.writes
                    .iter()
                    .filter(|w| w.dir == dir)
                    .map(|w| w.at)
                    .max()
                    .unwrap_or_default()
            };
            let client_close = flow.close_at.max(last_write(PacketDir::ToService));
            let service_close = flow.close_at.max(last_write(PacketDir::ToClient));
            self.schedule(micros(client_close), Event::CloseClient(i));
            self.schedule(micros(service_close), Event::CloseService(i));
        }
        self.schedule(0, Event::Tick);
        self.flush(0);

        let mut now = 0;
        while let Some(Reverse((at, _, slot))) = self.queue.pop() {
            now = at;
            let event = self.slots[slot].take().expect("each slot fires once");
            self.free.push(slot);
            self.handle(event, now);
            self.flush(now);
        }
        self.finish(now)
    }

    fn done(&self) -> bool {
        self.state
            .iter()
            .all(|s| s.failed || (s.client_eof && s.service_eof))
    }

    fn handle(&mut self, event: Event, now: u64) {
        let t = Duration::from_micros(now);
        match event {
            Event::Tick => {
                self.ingress.tick(t);
                self.egress.tick(t);
                let finished = now >= self.schedule_end && self.done();
                let abandoned = now >= self.schedule_end + micros(GRACE);
                if finished || abandoned {
                    self.ticking = false;
                } else {
                    let next = now + micros(self.opts.tick).max(1);
                    self.schedule(next, Event::Tick);
                }
            }
            Event::Open(i) => match self.ingress.open_real(t) {
                Ok(id) => {
                    self.state[i].ingress_id = Some(id);
                    self.by_ingress_id.insert(id, i);
                }
                Err(err) => self.fail(i, format!("open: {err}")),
            },
            Event::ClientWrite(i, w) => {
                let Some(id) = self.live_ingress(i) else {
                    return;
                };
                let write = &self.flows[i].writes[w];
                self.ingress_traces[i].push(FlowEvent {
                    t_micros: now,
                    bytes: write.len,
                    dir: PacketDir::ToService,
                });
                let data = match &write.data {
                    Some(d) => d.as_slice(),
                    None => &self.zeros[..write.len as usize],
                };
                if let Err(err) = self.ingress.real_data(id, data, t) {
                    self.fail(i, format!("client write: {err}"));
                }
            }
            Event::ServiceWrite(i, w) => match self.live_egress(i) {
                Some(id) => self.service_write(i, id, w, t),
                None => self.state[i].deferred.push(w),
            },
            Event::CloseClient(i) => {
                if let Some(id) = self.live_ingress(i) {
                    if let Err(err) = self.ingress.real_closed(id, t) {
                        self.fail(i, format!("client close: {err}"));
                    }
                }
            }
            Event::CloseService(i) => match self.live_egress(i) {
                Some(id) => self.service_close(i, id, t),
                None => self.state[i].service_close_due = true,
            },
            Event::Link(link, toward, item) => self.link_item(link, toward, item, t),
        }
    }

    fn live_ingress(&self, i: usize) -> Option<ConnId> {
        let s = &self.state[i];
        if s.failed {
            None
        } else {
            s.ingress_id
        }
    }

    fn live_egress(&self, i: usize) -> Option<ConnId> {
        let s = &self.state[i];
        if s.failed {
            None
        } else {
            s.egress_id
        }
    }

    fn service_write(&mut self, i: usize, id: ConnId, w: usize, t: Duration) {
        let write = &self.flows[i].writes[w];
        let data = match &write.data {
            Some(d) => d.as_slice(),
            None => &self.zeros[..write.len as usize],
        };
        if let Err(err) = self.egress.real_data(id, data, t) {
            self.fail(i, format!("service write: {err}"));
        }
    }

    fn service_close(&mut self, i: usize, id: ConnId, t: Duration) {
        if self.state[i].service_closed {
            return;
        }
        self.state[i].service_closed = true;
        if let Err(err) = self.egress.real_closed(id, t) {
            self.fail(i, format!("service close: {err}"));
        }
    }

    fn fail(&mut self, i: usize, message: String) {
        if !self.state[i].failed {
            self.state[i].failed = true;
            self.errors
                .push(format!("flow {}: {message}", self.flows[i].id));
        }
    }

    fn link_item(&mut self, link: u32, toward: Toward, item: LinkItem, t: Duration) {
        match toward {
            Toward::Egress => {
                if let LinkItem::Connect = item {
                    let v = self.egress.accept_virtual(t);
                    self.links.entry(link).or_default().egress_side = Some(v);
                    self.egress_links.insert(v, link);
                    return;
                }
                let Some(v) = self.links.get(&link).and_then(|l| l.egress_side) else {
                    return;
                };
                match item {
                    LinkItem::Data(bytes) => {
                        // Protocol errors are handled inside the endpoint.
                        let _ = self.egress.virtual_data(v, &bytes, t);
                    }
                    LinkItem::Eof => self.egress.virtual_failed(v, Vec::new(), t),
                    LinkItem::Connect => unreachable!(),
                }
            }
            Toward::Ingress => {
                let v = VirtualId(link);
                match item {
                    LinkItem::Data(bytes) => {
                        let _ = self.ingress.virtual_data(v, &bytes, t);
                    }
                    LinkItem::Eof => self.ingress.virtual_failed(v, Vec::new(), t),
                    LinkItem::Connect => unreachable!(),
                }
            }
        }
    }

    fn transmit(&mut self, link: u32, toward: Toward, item: LinkItem, now: u64) {
        let jitter = micros(self.opts.jitter);
        let delay = micros(self.opts.latency)
            + if jitter > 0 {
                self.rng.random_range(0..jitter)
            } else {
                0
            };
        let lane = match toward {
            Toward::Egress => 0,
            Toward::Ingress => 1,
        };
        let state = self.links.entry(link).or_default();
        let at = (now + delay).max(state.last_delivery[lane]);
        state.last_delivery[lane] = at;
        self.schedule(at, Event::Link(link, toward, item));
    }

    fn record_frame(&mut self, link: u32, dir: PacketDir, frame: &[u8], now: u64) {
        let header = FrameHeader::parse(
            frame[..FRAME_HEADER_LEN].try_into().expect("full header"),
            0,
        )
        .expect("endpoint emits valid frames");
        if header.cmd != CommandType::KeepAlive {
            let ids = match dir {
                PacketDir::ToService => &self.by_ingress_id,
                PacketDir::ToClient => &self.by_egress_id,
            };
            if let Some(&i) = ids.get(&header.operand1) {
                self.carriers[i].insert(link);
            }
        }
        let len = frame.len();
        self.egress_traces.entry(link).or_default().push(FlowEvent {
            t_micros: now,
            bytes: len as u32,
            dir,
        });
    }

    fn flush(&mut self, now: u64) {
        let t = Duration::from_micros(now);
        loop {
            let mut progressed = false;
            while let Some(out) = self.ingress.poll_output() {
                progressed = true;
                self.ingress_output(out, now);
            }
            while let Some(out) = self.egress.poll_output() {
                progressed = true;
                self.egress_output(out, t, now);
            }
            if !progressed {
                break;
            }
        }
    }

    fn ingress_output(&mut self, out: Output, now: u64) {
        match out {
            Output::Send { virt, bytes, .. } => {
                self.record_frame(virt.0, PacketDir::ToService, &bytes, now);
                self.transmit(virt.0, Toward::Egress, LinkItem::Data(bytes), now);
            }
            Output::OpenVirtual(virt) => {
                self.transmit(virt.0, Toward::Egress, LinkItem::Connect, now)
            }
            Output::ResetVirtual(virt) | Output::CloseVirtual(virt) => {
                self.transmit(virt.0, Toward::Egress, LinkItem::Eof, now)
            }
            Output::OpenReal(_) => {}
            Output::Deliver { real, bytes } => {
                let Some(&i) = self.by_ingress_id.get(&real) else {
                    return;
                };
                let event = FlowEvent {
                    t_micros: now,
                    bytes: bytes.len() as u32,
                    dir: PacketDir::ToClient,
                };
                self.ingress_traces[i].push(event);
                self.delivered[i].push(event);
                if self.opts.keep_payload {
                    self.received[i][1].extend_from_slice(&bytes);
                }
            }
            Output::CloseReal(real) => {
                if let Some(&i) = self.by_ingress_id.get(&real) {
                    self.state[i].client_eof = true;
                }
            }
            Output::ResetReal(real) => {
                if let Some(&i) = self.by_ingress_id.get(&real) {
                    self.fail(i, "reset at ingress".into());
                }
            }
        }
    }

    fn egress_output(&mut self, out: Output, t: Duration, now: u64) {
        match out {
            Output::Send { virt, bytes, .. } => {
                let Some(&link) = self.egress_links.get(&virt) else {
                    return;
                };
                self.record_frame(link, PacketDir::ToClient, &bytes, now);
                self.transmit(link, Toward::Ingress, LinkItem::Data(bytes), now);
            }
            Output::OpenVirtual(_) => {}
            Output::ResetVirtual(virt) | Output::CloseVirtual(virt) => {
                if let Some(&link) = self.egress_links.get(&virt) {
                    self.transmit(link, Toward::Ingress, LinkItem::Eof, now);
                }
            }
            Output::OpenReal(id) => {
                let Some(&i) = self.by_ingress_id.get(&id) else {
                    return;
                };
                self.state[i].egress_id = Some(id);
                self.by_egress_id.insert(id, i);
                for w in std::mem::take(&mut self.state[i].deferred) {
                    self.service_write(i, id, w, t);
                }
                if self.state[i].service_close_due {
                    self.service_close(i, id, t);
                }
            }
            Output::Deliver { real, bytes } => {
                let Some(&i) = self.by_egress_id.get(&real) else {
                    return;
                };
                self.delivered[i].push(FlowEvent {
                    t_micros: now,
                    bytes: bytes.len() as u32,
                    dir: PacketDir::ToService,
                });
                if self.opts.keep_payload {
                    self.received[i][0].extend_from_slice(&bytes);
                }
            }
            Output::CloseReal(real) => {
                if let Some(&i) = self.by_egress_id.get(&real) {
                    self.state[i].service_eof = true;
                }
            }
            Output::ResetReal(real) => {
                if let Some(&i) = self.by_egress_id.get(&real) {
                    self.fail(i, "reset at egress".into());
                }
            }
        }
    }

    fn finish(mut self, now: u64) -> SimReport {
        let to_trace = |id: FlowId, events: Vec<FlowEvent>, direction| {
            FlowTrace::from_events(id, direction, events).expect("simulation time is monotone")
        };
        for (i, s) in self.state.iter().enumerate() {
            if !s.failed && !(s.client_eof && s.service_eof) {
                self.errors
                    .push(format!("flow {}: did not complete", self.flows[i].id));
            }
        }
        let ids: Vec<FlowId> = self.flows.iter().map(|f| f.id).collect();
        SimReport {
            ingress: ids
                .iter()
                .zip(std::mem::take(&mut self.ingress_traces))
                .map(|(&id, ev)| to_trace(id, ev, Direction::Ingress))
                .collect(),
            delivered: ids
                .iter()
                .zip(std::mem::take(&mut self.delivered))
                .map(|(&id, ev)| to_trace(id, ev, Direction::Ingress))
                .collect(),
            egress: std::mem::take(&mut self.egress_traces)
                .into_iter()
                .filter(|(_, ev)| !ev.is_empty())
                .map(|(link, ev)| to_trace(link, ev, Direction::Egress))
                .collect(),
            completed: self
                .state
                .iter()
                .map(|s| !s.failed && s.client_eof && s.service_eof)
                .collect(),
            received: std::mem::take(&mut self.received),
            carriers: std::mem::take(&mut self.carriers),
            ingress_stats: self.ingress.stats().clone(),
            egress_stats: self.egress.stats().clone(),
            errors: std::mem::take(&mut self.errors),
            finished_at: Duration::from_micros(now),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mapping::ObfuscationConfig;

    fn ms(v: u64) -> Duration {
        Duration::from_millis(v)
    }

    fn flow(id: FlowId, open: u64, writes: &[(u64, PacketDir, &[u8])], close: u64) -> ScriptedFlow {
        ScriptedFlow {
            id,
            open_at: ms(open),
            close_at: ms(close),
            writes: writes
                .iter()
                .map(|&(at, dir, data)| ScriptedWrite {
                    at: ms(at),
                    dir,
                    len: data.len() as u32,
                    data: Some(data.to_vec()),
                })
                .collect(),
        }
    }

    fn opts() -> SimOptions {
        SimOptions {
            keep_payload: true,
            ..SimOptions::default()
        }
    }

    #[test]
    fn request_response_both_strategies() {
        let flows = vec![
            flow(
                0,
                0,
                &[
                    (0, PacketDir::ToService, b"GET /"),
                    (10, PacketDir::ToClient, b"200 OK"),
                ],
                20,
            ),
            flow(
                1,
                5,
                &[
                    (5, PacketDir::ToService, b"ping"),
                    (6, PacketDir::ToClient, b"pong"),
                ],
                30,
            ),
        ];
        for strategy in [
            Strategy::Direct,
            Strategy::Obfuscate(ObfuscationConfig::default()),
        ] {
            let report = simulate(strategy.clone(), &flows, &opts());
            assert!(report.all_completed(), "{strategy:?}: {:?}", report.errors);
            assert_eq!(report.received[0], [b"GET /".to_vec(), b"200 OK".to_vec()]);
            assert_eq!(report.received[1], [b"ping".to_vec(), b"pong".to_vec()]);
            assert_eq!(report.ingress.len(), 2);
            assert_eq!(report.ingress[0].total_bytes(), 11);
        }
    }

    #[test]
    fn service_write_waits_for_open() {
        // The reply is scheduled at the same instant the client connects.
        let flows = vec![flow(0, 0, &[(0, PacketDir::ToClient, b"banner")], 0)];
        let report = simulate(Strategy::Direct, &flows, &opts());
        assert!(report.all_completed(), "{:?}", report.errors);
        assert_eq!(report.received[0][1], b"banner");
        assert!(report.delivered[0].start().unwrap() >= 2_000);
    }

    #[test]
    fn direct_uses_one_link_per_flow() {
        let flows: Vec<ScriptedFlow> = (0..4)
            .map(|k| {
                flow(
                    k,
                    k as u64 * 10,
                    &[(k as u64 * 10, PacketDir::ToService, b"x")],
                    100,
                )
            })
            .collect();
        let report = simulate(Strategy::Direct, &flows, &opts());
        assert!(report.all_completed(), "{:?}", report.errors);
        assert_eq!(report.egress.len(), 4);
        for e in &report.egress {
            // Create, Relay and Remove from ingress, Remove from egress.
            assert_eq!(e.len(), 4, "{e:?}");
        }
    }

    #[test]
    fn deterministic() {
        let flows: Vec<ScriptedFlow> = (0..6)
            .map(|k| {
                flow(
                    k,
                    k as u64,
                    &[
                        (k as u64, PacketDir::ToService, b"abc"),
                        (k as u64 + 3, PacketDir::ToClient, &[7; 5000]),
                    ],
                    50,
                )
            })
            .collect();
        let strategy = Strategy::Obfuscate(ObfuscationConfig::default());
        let a = simulate(strategy.clone(), &flows, &opts());
        let b = simulate(strategy, &flows, &opts());
        assert_eq!(a.egress, b.egress);
        assert_eq!(a.ingress, b.ingress);
        assert!(a.all_completed(), "{:?}", a.errors);
    }
}
