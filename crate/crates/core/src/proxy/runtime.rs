//! Tokio host for [`Endpoint`]: real sockets or in-process loopback streams.
//!
//! One event-loop task owns the endpoint. Every socket gets a reader task
//! that forwards bytes to the loop and a writer task that owns the write
//! half, so each virtual connection has exactly one writer and frames are
//! never interleaved.

use std::collections::{BTreeMap, HashMap};
use std::future::Future;
use std::io;
use std::net::SocketAddr;
use std::pin::Pin;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt, ReadHalf, WriteHalf};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::mpsc::{self, UnboundedReceiver, UnboundedSender};
use tokio::task::JoinHandle;
use tracing::{debug, info, warn};

use crate::harness::trace::{Direction, FlowEvent, FlowTrace, PacketDir};
use crate::mapping::{Strategy, VirtualId};
use crate::proxy::endpoint::{Endpoint, Output, Role};
use crate::wire::ConnId;

const READ_BUF: usize = 64 * 1024;
const TICK: Duration = Duration::from_millis(100);
const LOOPBACK_BUF: usize = 256 * 1024;

/// A reliable, ordered, bidirectional byte stream.
pub trait Transport: AsyncRead + AsyncWrite + Unpin + Send + 'static {}
impl<T: AsyncRead + AsyncWrite + Unpin + Send + 'static> Transport for T {}

pub type BoxedTransport = Box<dyn Transport>;
pub type BoxFuture<'a, T> = Pin<Box<dyn Future<Output = T> + Send + 'a>>;

/// Opens outbound transports.
pub trait Dialer: Send + Sync + 'static {
    fn dial(&self) -> BoxFuture<'_, io::Result<BoxedTransport>>;
}

/// Yields inbound transports.
pub trait Acceptor: Send + 'static {
    fn accept(&mut self) -> BoxFuture<'_, io::Result<BoxedTransport>>;
}

pub struct TcpDialer(pub SocketAddr);

impl Dialer for TcpDialer {
    fn dial(&self) -> BoxFuture<'_, io::Result<BoxedTransport>> {
        Box::pin(async move {
            let stream = TcpStream::connect(self.0).await?;
            stream.set_nodelay(true)?;
            Ok(Box::new(stream) as BoxedTransport)
        })
    }
}

pub struct TcpAcceptor(pub TcpListener);

impl Acceptor for TcpAcceptor {
    fn accept(&mut self) -> BoxFuture<'_, io::Result<BoxedTransport>> {
        Box::pin(async move {
            let (stream, peer) = self.0.accept().await?;
            stream.set_nodelay(true)?;
            debug!(%peer, "accepted");
            Ok(Box::new(stream) as BoxedTransport)
        })
    }
}

/// Dialing side of an in-process loopback "network".
#[derive(Clone)]
pub struct LoopbackDialer {
    tx: UnboundedSender<BoxedTransport>,
}

/// Accepting side of an in-process loopback "network".
pub struct LoopbackAcceptor {
    rx: UnboundedReceiver<BoxedTransport>,
}

pub fn loopback() -> (LoopbackDialer, LoopbackAcceptor) {
    let (tx, rx) = mpsc::unbounded_channel();
    (LoopbackDialer { tx }, LoopbackAcceptor { rx })
}

impl LoopbackDialer {
    pub fn connect(&self) -> io::Result<BoxedTransport> {
        let (near, far) = tokio::io::duplex(LOOPBACK_BUF);
        self.tx
            .send(Box::new(far))
            .map_err(|_| io::Error::new(io::ErrorKind::ConnectionRefused, "loopback closed"))?;
        Ok(Box::new(near))
    }
}

impl Dialer for LoopbackDialer {
    fn dial(&self) -> BoxFuture<'_, io::Result<BoxedTransport>> {
        Box::pin(async move { self.connect() })
    }
}

impl Acceptor for LoopbackAcceptor {
    fn accept(&mut self) -> BoxFuture<'_, io::Result<BoxedTransport>> {
        Box::pin(async move {
            self.rx
                .recv()
                .await
                .ok_or_else(|| io::Error::new(io::ErrorKind::BrokenPipe, "loopback closed"))
        })
    }
}

type RecordedFlows = BTreeMap<(Direction, u32), Vec<FlowEvent>>;

/// Shared capture of the traffic a running proxy relays.
///
/// Real connections are recorded as `ingress` flows keyed by a per-process
/// connection counter; virtual connections as `egress` flows keyed by their
/// handle. Frames are recorded as written; inbound virtual bytes as read.
#[derive(Debug, Clone, Default)]
pub struct TraceRecorder {
    flows: Arc<Mutex<RecordedFlows>>,
}

impl TraceRecorder {
    pub fn new() -> Self {
        Self::default()
    }

    fn record(&self, direction: Direction, flow: u32, t: Duration, bytes: usize, dir: PacketDir) {
        if bytes == 0 {
            return;
        }
        let mut flows = self.flows.lock().expect("recorder lock");
        flows.entry((direction, flow)).or_default().push(FlowEvent {
            t_micros: t.as_micros() as u64,
            bytes: bytes as u32,
            dir,
        });
    }

    pub fn traces(&self) -> Vec<FlowTrace> {
        let flows = self.flows.lock().expect("recorder lock");
        flows
            .iter()
            .filter_map(|(&(direction, id), events)| {
                let mut events = events.clone();
                events.sort_by_key(|e| e.t_micros);
                FlowTrace::from_events(id, direction, events).ok()
            })
            .collect()
    }
}

enum Event {
    Accepted(BoxedTransport),
    RealData(ConnId, u64, Vec<u8>),
    RealEof(ConnId, u64),
    RealFailed(ConnId, u64),
    VirtualData(VirtualId, Vec<u8>),
    VirtualEof(VirtualId),
    VirtualFailed(VirtualId, Vec<Vec<u8>>),
}

enum RealCmd {
    Data(Vec<u8>),
    Shutdown,
}

struct RealLink {
    generation: u64,
    tx: UnboundedSender<RealCmd>,
    reader: Option<JoinHandle<()>>,
}

struct VirtualLink {
    // None once the write half is closed.
    tx: Option<UnboundedSender<Vec<u8>>>,
    reader: Option<JoinHandle<()>>,
}

struct Driver {
    endpoint: Endpoint,
    dialer: Arc<dyn Dialer>,
    events: UnboundedSender<Event>,
    reals: HashMap<ConnId, RealLink>,
    virtuals: HashMap<VirtualId, VirtualLink>,
    next_generation: u64,
    started: Instant,
    recorder: Option<TraceRecorder>,
}

/// Runs the ingress proxy: real connections arrive on `acceptor`, virtual
/// connections are dialed through `peer`. Returns only if accepting fails.
pub async fn serve_ingress(
    strategy: Strategy,
    acceptor: impl Acceptor,
    peer: Arc<dyn Dialer>,
    base_connections: usize,
    recorder: Option<TraceRecorder>,
) -> io::Result<()> {
    let started = Instant::now();
    let mut endpoint = Endpoint::new(Role::Ingress, strategy, Duration::ZERO);
    endpoint.ensure_pool(base_connections, Duration::ZERO);
    drive(endpoint, acceptor, peer, started, recorder).await
}

/// Runs the egress proxy: virtual connections arrive on `acceptor`, real
/// connections are dialed through `service`.
pub async fn serve_egress(
    strategy: Strategy,
    acceptor: impl Acceptor,
    service: Arc<dyn Dialer>,
    recorder: Option<TraceRecorder>,
) -> io::Result<()> {
    let started = Instant::now();
    let endpoint = Endpoint::new(Role::Egress, strategy, Duration::ZERO);
    drive(endpoint, acceptor, service, started, recorder).await
}

async fn drive(
    endpoint: Endpoint,
    mut acceptor: impl Acceptor,
    dialer: Arc<dyn Dialer>,
    started: Instant,
    recorder: Option<TraceRecorder>,
) -> io::Result<()> {
    let (events_tx, mut events) = mpsc::unbounded_channel();
    let accept_tx = events_tx.clone();
    let accept_task = tokio::spawn(async move {
        loop {
            match acceptor.accept().await {
                Ok(stream) => {
                    if accept_tx.send(Event::Accepted(stream)).is_err() {
                        return Ok(());
                    }
                }
                Err(err) => return Err(err),
            }
        }
    });

    let mut driver = Driver {
        endpoint,
        dialer,
        events: events_tx,
        reals: HashMap::new(),
        virtuals: HashMap::new(),
        next_generation: 0,
        started,
        recorder,
    };
    driver.dispatch();

    let mut ticker = tokio::time::interval(TICK);
    let mut accept_task = accept_task;
    loop {
        tokio::select! {
            Some(event) = events.recv() => driver.handle(event),
            _ = ticker.tick() => {
                let now = driver.now();
                driver.endpoint.tick(now);
            }
            res = &mut accept_task => {
                return match res {
                    Ok(r) => r,
                    Err(join) => Err(io::Error::other(join)),
                };
            }
        }
        driver.dispatch();
    }
}

impl Driver {
    fn now(&self) -> Duration {
        self.started.elapsed()
    }

    fn handle(&mut self, event: Event) {
        let now = self.now();
        match event {
            Event::Accepted(stream) => match self.endpoint.role() {
                Role::Ingress => match self.endpoint.open_real(now) {
                    Ok(id) => self.attach_real(id, stream),
                    Err(err) => warn!(%err, "refusing real connection"),
                },
                Role::Egress => {
                    let virt = self.endpoint.accept_virtual(now);
                    self.attach_virtual(virt, Some(stream));
                }
            },
            Event::RealData(id, generation, bytes) => {
                if self.is_current(id, generation) {
                    let dir = match self.endpoint.role() {
                        Role::Ingress => PacketDir::ToService,
                        Role::Egress => PacketDir::ToClient,
                    };
                    self.record_real(id, now, bytes.len(), dir);
                    if let Err(err) = self.endpoint.real_data(id, &bytes, now) {
                        debug!(real = id, %err, "dropping real data");
                    }
                }
            }
            Event::RealEof(id, generation) => {
                if self.is_current(id, generation) {
                    let _ = self.endpoint.real_closed(id, now);
                }
            }
            Event::RealFailed(id, generation) => {
                if self.is_current(id, generation) {
                    self.endpoint.real_failed(id, now);
                }
            }
            Event::VirtualData(virt, bytes) => {
                let dir = match self.endpoint.role() {
                    Role::Ingress => PacketDir::ToClient,
                    Role::Egress => PacketDir::ToService,
                };
                self.record_virtual(virt, now, bytes.len(), dir);
                if let Err(err) = self.endpoint.virtual_data(virt, &bytes, now) {
                    warn!(%err, "virtual connection error");
                }
            }
            Event::VirtualEof(virt) => {
                debug!(%virt, "virtual connection closed by peer");
                self.virtuals.remove(&virt);
                self.endpoint.virtual_failed(virt, Vec::new(), now);
            }
            Event::VirtualFailed(virt, unsent) => {
                warn!(%virt, unsent = unsent.len(), "virtual connection failed");
                if let Some(link) = self.virtuals.remove(&virt) {
                    if let Some(reader) = link.reader {
                        reader.abort();
                    }
                }
                self.endpoint.virtual_failed(virt, unsent, now);
            }
        }
    }

    fn is_current(&self, id: ConnId, generation: u64) -> bool {
        self.reals
            .get(&id)
            .is_some_and(|link| link.generation == generation)
    }

    fn record_real(&self, id: ConnId, now: Duration, bytes: usize, dir: PacketDir) {
        if let (Some(rec), Some(link)) = (&self.recorder, self.reals.get(&id)) {
            rec.record(Direction::Ingress, link.generation as u32, now, bytes, dir);
        }
    }

    fn record_virtual(&self, virt: VirtualId, now: Duration, bytes: usize, dir: PacketDir) {
        if let Some(rec) = &self.recorder {
            rec.record(Direction::Egress, virt.0, now, bytes, dir);
        }
    }

    fn dispatch(&mut self) {
        let now = self.now();
        let (send_dir, deliver_dir) = match self.endpoint.role() {
            Role::Ingress => (PacketDir::ToService, PacketDir::ToClient),
            Role::Egress => (PacketDir::ToClient, PacketDir::ToService),
        };
        while let Some(output) = self.endpoint.poll_output() {
            match output {
                Output::Send { virt, bytes, .. } => {
                    self.record_virtual(virt, now, bytes.len(), send_dir);
                    match self.virtuals.get(&virt).and_then(|l| l.tx.as_ref()) {
                        Some(tx) => {
                            let _ = tx.send(bytes);
                        }
                        None => debug!(%virt, "send on closed virtual connection"),
                    }
                }
                Output::CloseVirtual(virt) => {
                    if let Some(link) = self.virtuals.get_mut(&virt) {
                        link.tx = None;
                    }
                }
                Output::OpenVirtual(virt) => self.attach_virtual(virt, None),
                Output::ResetVirtual(virt) => {
                    if let Some(link) = self.virtuals.remove(&virt) {
                        if let Some(reader) = link.reader {
                            reader.abort();
                        }
                    }
                }
                Output::OpenReal(id) => self.dial_real(id),
                Output::Deliver { real, bytes } => {
                    self.record_real(real, now, bytes.len(), deliver_dir);
                    if let Some(link) = self.reals.get(&real) {
                        let _ = link.tx.send(RealCmd::Data(bytes));
                    }
                }
                Output::CloseReal(id) => {
                    if let Some(link) = self.reals.get(&id) {
                        let _ = link.tx.send(RealCmd::Shutdown);
                    }
                }
                Output::ResetReal(id) => {
                    if let Some(link) = self.reals.remove(&id) {
                        if let Some(reader) = link.reader {
                            reader.abort();
                        }
                    }
                }
            }
        }
        // Drop links the endpoint has finished with; queued writes still drain.
        let live: std::collections::HashSet<ConnId> = self.endpoint.open_reals().collect();
        self.reals.retain(|id, _| live.contains(id));
    }

    fn attach_real(&mut self, id: ConnId, stream: BoxedTransport) {
        let generation = self.bump_generation();
        let (tx, rx) = mpsc::unbounded_channel();
        let (read, write) = tokio::io::split(stream);
        let reader = tokio::spawn(real_reader(read, id, generation, self.events.clone()));
        tokio::spawn(real_writer(write, rx));
        self.reals.insert(
            id,
            RealLink {
                generation,
                tx,
                reader: Some(reader),
            },
        );
    }

    fn dial_real(&mut self, id: ConnId) {
        let generation = self.bump_generation();
        let (tx, rx) = mpsc::unbounded_channel();
        let events = self.events.clone();
        let dialer = self.dialer.clone();
        tokio::spawn(async move {
            match dialer.dial().await {
                Ok(stream) => {
                    let (read, write) = tokio::io::split(stream);
                    tokio::spawn(real_reader(read, id, generation, events));
                    real_writer(write, rx).await;
                }
                Err(err) => {
                    warn!(real = id, %err, "service dial failed");
                    let _ = events.send(Event::RealFailed(id, generation));
                }
            }
        });
        self.reals.insert(
            id,
            RealLink {
                generation,
                tx,
                reader: None,
            },
        );
    }

    fn bump_generation(&mut self) -> u64 {
        self.next_generation += 1;
        self.next_generation
    }

    fn attach_virtual(&mut self, virt: VirtualId, stream: Option<BoxedTransport>) {
        let (tx, rx) = mpsc::unbounded_channel();
        let events = self.events.clone();
        let reader = match stream {
            Some(stream) => {
                let (read, write) = tokio::io::split(stream);
                let reader = tokio::spawn(virtual_reader(read, virt, events.clone()));
                tokio::spawn(virtual_writer(write, rx, virt, events));
                Some(reader)
            }
            None => {
                let dialer = self.dialer.clone();
                tokio::spawn(async move {
                    match dialer.dial().await {
                        Ok(stream) => {
                            info!(%virt, "virtual connection established");
                            let (read, write) = tokio::io::split(stream);
                            tokio::spawn(virtual_reader(read, virt, events.clone()));
                            virtual_writer(write, rx, virt, events).await;
                        }
                        Err(err) => {
                            warn!(%virt, %err, "peer dial failed");
                            let mut rx = rx;
                            let unsent = drain_queue(&mut rx);
                            let _ = events.send(Event::VirtualFailed(virt, unsent));
                        }
                    }
                });
                None
            }
        };
        self.virtuals.insert(
            virt,
            VirtualLink {
                tx: Some(tx),
                reader,
            },
        );
    }
}

fn drain_queue(rx: &mut UnboundedReceiver<Vec<u8>>) -> Vec<Vec<u8>> {
    let mut out = Vec::new();
    while let Ok(buf) = rx.try_recv() {
        out.push(buf);
    }
    out
}

async fn real_reader(
    mut read: ReadHalf<BoxedTransport>,
    id: ConnId,
    generation: u64,
    events: UnboundedSender<Event>,
) {
    let mut buf = vec![0u8; READ_BUF];
    loop {
        match read.read(&mut buf).await {
            Ok(0) => {
                let _ = events.send(Event::RealEof(id, generation));
                return;
            }
            Ok(n) => {
                if events
                    .send(Event::RealData(id, generation, buf[..n].to_vec()))
                    .is_err()
                {
                    return;
                }
            }
            Err(_) => {
                let _ = events.send(Event::RealFailed(id, generation));
                return;
            }
        }
    }
}

async fn real_writer(mut write: WriteHalf<BoxedTransport>, mut rx: UnboundedReceiver<RealCmd>) {
    while let Some(cmd) = rx.recv().await {
        match cmd {
            RealCmd::Data(bytes) => {
                if write.write_all(&bytes).await.is_err() {
                    return;
                }
            }
            RealCmd::Shutdown => {
                let _ = write.shutdown().await;
            }
        }
    }
}

async fn virtual_reader(
    mut read: ReadHalf<BoxedTransport>,
    virt: VirtualId,
    events: UnboundedSender<Event>,
) {
    let mut buf = vec![0u8; READ_BUF];
    loop {
        match read.read(&mut buf).await {
            Ok(0) | Err(_) => {
                let _ = events.send(Event::VirtualEof(virt));
                return;
            }
            Ok(n) => {
                if events
                    .send(Event::VirtualData(virt, buf[..n].to_vec()))
                    .is_err()
                {
                    return;
                }
            }
        }
    }
}

async fn virtual_writer(
    mut write: WriteHalf<BoxedTransport>,
    mut rx: UnboundedReceiver<Vec<u8>>,
    virt: VirtualId,
    events: UnboundedSender<Event>,
) {
    while let Some(frame) = rx.recv().await {
        if let Err(err) = write.write_all(&frame).await {
            debug!(%virt, %err, "virtual write failed");
            let mut unsent = vec![frame];
            unsent.extend(drain_queue(&mut rx));
            let _ = events.send(Event::VirtualFailed(virt, unsent));
            return;
        }
    }
    let _ = write.shutdown().await;
}
