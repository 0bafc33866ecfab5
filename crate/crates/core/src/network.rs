//! One simulated trial: nodes, the shared medium and the event loop.
//!
//! [`Core`] owns the engine, the [`Medium`] and every node's MAC, routing
//! state and random streams, and executes the actions those state machines
//! emit. Scenario logic lives in an [`App`], which is driven by the
//! [`Network`] wrapper through timer ticks and delivery notices.

use std::collections::VecDeque;

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use thiserror::Error;

use crate::channel::{FadingModel, PathLossModel, Position};
use crate::engine::{Engine, EngineError, EventKind, NodeClock, NodeId, Purpose, RngStream, SimTime, StreamId, Target};
use crate::mac::{Mac, MacAction, MacConfig, MacError, SendOutcome};
use crate::radio::{AppPayload, Frame, FrameBody, MacDest, Medium, RadioError, RadioParams, ReceptionOutcome, TxId};
use crate::routing_ctp::{
    Ctp, CtpConfig, CtpError, DataDisposition, DataPacket, RouteUpdate, SinkTable, BEACON_PAYLOAD_LEN,
};

#[derive(Debug, Error)]
pub enum NetError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Radio(#[from] RadioError),
}

/// Why an application send did not enter a MAC queue.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SendError {
    #[error(transparent)]
    Mac(#[from] MacError),
    #[error(transparent)]
    Routing(#[from] CtpError),
    #[error("routing is disabled in this network")]
    NoRouting,
}

/// Token attached to frames the routing layer forwards on behalf of others.
pub const FORWARD_TOKEN: u64 = u64::MAX;

#[derive(Clone, Debug)]
pub struct NetConfig {
    pub radio: RadioParams<f64>,
    pub path_loss: PathLossModel<f64>,
    pub fading: FadingModel<f64>,
    pub mac: MacConfig,
    /// `None` runs without beacons or routing.
    pub ctp: Option<CtpConfig>,
    /// Clock drift is drawn uniformly from `±max_drift_ppm`.
    pub max_drift_ppm: f64,
    pub log_events: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NetEvent {
    TxEnd { tx: TxId },
    ArrivalEnd { tx: TxId },
    AckTimeout { gen: u64 },
    BackoffDone { gen: u64 },
    TrickleFire { gen: u64 },
    TrickleEnd { gen: u64 },
    App { tag: u64 },
}

/// Per-frame log entry.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRecord {
    pub time: f64,
    pub node: NodeId,
    pub origin: NodeId,
    pub dest: Option<NodeId>,
    pub seqno: u32,
    pub event: LogEvent,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum LogEvent {
    Tx,
    Rx,
    Ack,
    DropQueue,
    FailRetries,
    LostNoise,
    LostCollision,
    BelowSensitivity,
}

impl LogEvent {
    pub fn as_str(self) -> &'static str {
        match self {
            LogEvent::Tx => "tx",
            LogEvent::Rx => "rx",
            LogEvent::Ack => "ack",
            LogEvent::DropQueue => "drop-queue",
            LogEvent::FailRetries => "fail-retries",
            LogEvent::LostNoise => "lost-noise",
            LogEvent::LostCollision => "lost-collision",
            LogEvent::BelowSensitivity => "below-sensitivity",
        }
    }
}

/// Network-wide counters beyond what each MAC tracks.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NetStats {
    pub delivered: u64,
    pub lost_noise: u64,
    pub lost_collision: u64,
    pub below_sensitivity: u64,
    /// Transit packets refused because the forwarding queue was full.
    pub congestion_drops: u64,
    pub loop_drops: u64,
    pub no_route_drops: u64,
    pub misrouted_diffusion: u64,
    /// Packets reaching the sink whose hop trace was not loop free.
    pub trace_violations: u64,
    pub beacons_sent: u64,
}

/// Something the application should hear about.
#[derive(Clone, Debug, PartialEq)]
pub enum Notice {
    /// A plain application frame (no routing header) was received.
    AppFrame { node: NodeId, from: NodeId, payload: AppPayload },
    /// A diffusion packet addressed to `node` arrived.
    Diffusion { node: NodeId, packet: DataPacket },
    /// An application send finished at the MAC.
    SendDone { node: NodeId, token: u64, dest: MacDest, outcome: SendOutcome, attempts: u32 },
}

struct NodeState {
    mac: Mac,
    ctp: Option<Ctp>,
    rng_mac: RngStream,
    rng_fading: RngStream,
    rng_rx: RngStream,
    rng_trickle: RngStream,
    rng_app: RngStream,
    ack_gen: u64,
    backoff_gen: u64,
}

pub struct Core {
    engine: Engine<NetEvent>,
    medium: Medium,
    nodes: Vec<NodeState>,
    cfg: NetConfig,
    inbox: VecDeque<Notice>,
    stats: NetStats,
    log: Vec<LogRecord>,
    sink: SinkTable,
    unit: Uniform<f64>,
}

fn kind_of(ev: &NetEvent) -> EventKind {
    match ev {
        NetEvent::TxEnd { .. } => EventKind::TxComplete,
        NetEvent::ArrivalEnd { .. } => EventKind::FrameArrivalEnd,
        NetEvent::App { .. } => EventKind::AppTick,
        _ => EventKind::Timer,
    }
}

impl Core {
    pub fn new(cfg: NetConfig, positions: &[Position<f64>], master_seed: u64, trial: u32) -> Result<Self, NetError> {
        let medium = Medium::new(cfg.radio, positions, &cfg.path_loss, cfg.fading.sigma())?;
        let mut engine = Engine::new();
        let mut nodes = Vec::with_capacity(positions.len());
        for id in 0..positions.len() {
            let stream = |purpose| RngStream::new(master_seed, StreamId { trial, node: id as u32, purpose });
            let mut drift_rng = stream(Purpose::ClockDrift);
            let drift = if cfg.max_drift_ppm > 0.0 {
                drift_rng.random_range(-cfg.max_drift_ppm..=cfg.max_drift_ppm)
            } else {
                0.0
            };
            engine.register_node(NodeClock::new(drift, 0.0)?);
            nodes.push(NodeState {
                mac: Mac::new(id, cfg.mac),
                ctp: cfg.ctp.map(|c| Ctp::new(id, c)),
                rng_mac: stream(Purpose::MacBackoff),
                rng_fading: stream(Purpose::Fading),
                rng_rx: stream(Purpose::Reception),
                rng_trickle: stream(Purpose::Trickle),
                rng_app: stream(Purpose::Application),
                ack_gen: 0,
                backoff_gen: 0,
            });
        }
        Ok(Core {
            engine,
            medium,
            nodes,
            cfg,
            inbox: VecDeque::new(),
            stats: NetStats::default(),
            log: Vec::new(),
            sink: SinkTable::new(),
            unit: Uniform::new(0.0, 1.0).expect("unit interval"),
        })
    }

    pub fn now(&self) -> f64 {
        self.engine.now().as_secs()
    }

    pub fn local_now(&self, node: NodeId) -> f64 {
        self.engine.clock(node).map(|c| c.local_time(self.now())).unwrap_or(f64::NAN)
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn medium(&self) -> &Medium {
        &self.medium
    }

    pub fn mac(&self, node: NodeId) -> &Mac {
        &self.nodes[node].mac
    }

    pub fn ctp(&self, node: NodeId) -> Option<&Ctp> {
        self.nodes[node].ctp.as_ref()
    }

    pub fn stats(&self) -> &NetStats {
        &self.stats
    }

    pub fn sink_table(&self) -> &SinkTable {
        &self.sink
    }

    pub fn log(&self) -> &[LogRecord] {
        &self.log
    }

    pub fn events_dispatched(&self) -> u64 {
        self.engine.dispatched()
    }

    pub fn app_rng(&mut self, node: NodeId) -> &mut RngStream {
        &mut self.nodes[node].rng_app
    }

    /// Neighbors known to `node`'s routing layer.
    pub fn neighbors(&self, node: NodeId) -> Vec<NodeId> {
        self.nodes[node].ctp.as_ref().map(Ctp::neighbor_ids).unwrap_or_default()
    }

    fn schedule(&mut self, at: f64, node: NodeId, ev: NetEvent) {
        let at = at.max(self.now());
        self.engine
            .schedule(SimTime::from_secs(at), Target::Node(node), kind_of(&ev), ev)
            .expect("event time is finite and not in the past");
    }

    fn schedule_local(&mut self, node: NodeId, local_delay: f64, ev: NetEvent) {
        self.engine
            .schedule_local(node, local_delay.max(0.0), kind_of(&ev), ev)
            .expect("local delay is finite and non-negative");
    }

    /// Fires an application tick at global time `at`.
    pub fn schedule_app_at(&mut self, node: NodeId, at: f64, tag: u64) {
        self.schedule(at, node, NetEvent::App { tag });
    }

    /// Fires an application tick after `local_delay` seconds of `node`'s clock.
    pub fn schedule_app_in(&mut self, node: NodeId, local_delay: f64, tag: u64) {
        self.schedule_local(node, local_delay, NetEvent::App { tag });
    }

    fn record(&mut self, node: NodeId, frame: &Frame, event: LogEvent) {
        if self.cfg.log_events {
            self.log.push(LogRecord {
                time: self.now(),
                node,
                origin: frame.origin,
                dest: frame.mac_dest.node(),
                seqno: frame.seqno,
                event,
            });
        }
    }

    /// Queues an unacknowledged broadcast of a plain application frame.
    pub fn broadcast(&mut self, node: NodeId, payload: AppPayload, payload_len: usize) -> Result<u32, SendError> {
        let mut out = Vec::new();
        let now = self.now();
        let n = &mut self.nodes[node];
        let res = n.mac.send_broadcast(now, payload_len, FrameBody::App(payload), 0, &mut n.rng_mac, &mut out);
        self.after_send(node, res.map_err(SendError::from), out)
    }

    /// Queues a collection packet toward the sink.
    pub fn send_collection(&mut self, node: NodeId, app_len: usize) -> Result<u32, SendError> {
        self.send_routed(node, app_len, None, 0)
    }

    /// Queues a diffusion packet for direct neighbor `dest`.
    pub fn send_diffusion(&mut self, node: NodeId, dest: NodeId, app_len: usize, token: u64) -> Result<u32, SendError> {
        self.send_routed(node, app_len, Some(dest), token)
    }

    fn send_routed(
        &mut self,
        node: NodeId,
        app_len: usize,
        dest: Option<NodeId>,
        token: u64,
    ) -> Result<u32, SendError> {
        let now = self.now();
        let n = &mut self.nodes[node];
        let ctp = n.ctp.as_mut().ok_or(SendError::NoRouting)?;
        let (next_hop, packet) = ctp.originate(now, app_len, dest)?;
        let seq = packet.header.origin_seqno;
        let mut out = Vec::new();
        let len = packet.payload_len();
        let res = n
            .mac
            .send_unicast(now, next_hop, len, FrameBody::Data(packet), token, &mut n.rng_mac, &mut out)
            .map(|_| seq)
            .map_err(SendError::from);
        self.after_send(node, res, out)
    }

    fn after_send(&mut self, node: NodeId, res: Result<u32, SendError>, out: Vec<MacAction>) -> Result<u32, SendError> {
        if let Err(SendError::Mac(MacError::QueueFull)) = res {
            if self.cfg.log_events {
                let now = self.now();
                self.log.push(LogRecord {
                    time: now,
                    node,
                    origin: node,
                    dest: None,
                    seqno: 0,
                    event: LogEvent::DropQueue,
                });
            }
        }
        self.execute(node, out);
        res
    }

    fn execute(&mut self, node: NodeId, actions: Vec<MacAction>) {
        let mut work: VecDeque<MacAction> = actions.into();
        while let Some(action) = work.pop_front() {
            let mut more = Vec::new();
            match action {
                MacAction::Transmit(frame) => self.transmit(node, frame),
                MacAction::StartAckTimer(d) => {
                    self.nodes[node].ack_gen += 1;
                    let gen = self.nodes[node].ack_gen;
                    self.schedule_local(node, d, NetEvent::AckTimeout { gen });
                }
                MacAction::CancelAckTimer => self.nodes[node].ack_gen += 1,
                MacAction::StartBackoff(d) => {
                    self.nodes[node].backoff_gen += 1;
                    let gen = self.nodes[node].backoff_gen;
                    self.schedule_local(node, d, NetEvent::BackoffDone { gen });
                }
                MacAction::Deliver(frame) => self.deliver(node, frame, &mut more),
                MacAction::SendDone { token, dest, outcome, attempts } => {
                    if outcome == SendOutcome::Failed && self.cfg.log_events {
                        let now = self.now();
                        self.log.push(LogRecord {
                            time: now,
                            node,
                            origin: node,
                            dest: dest.node(),
                            seqno: 0,
                            event: LogEvent::FailRetries,
                        });
                    }
                    if let (MacDest::Unicast(nb), Some(ctp)) = (dest, self.nodes[node].ctp.as_mut()) {
                        let up = ctp.on_data_outcome(nb, outcome == SendOutcome::Sent, attempts);
                        self.apply_route_update(node, up);
                    }
                    if token != FORWARD_TOKEN {
                        self.inbox.push_back(Notice::SendDone { node, token, dest, outcome, attempts });
                    }
                }
                MacAction::Rejected(frame) => {
                    self.stats.congestion_drops += 1;
                    self.record(node, &frame, LogEvent::DropQueue);
                }
            }
            work.extend(more);
        }
    }

    fn transmit(&mut self, node: NodeId, frame: Frame) {
        let now = self.now();
        self.record(node, &frame, if frame.is_ack() { LogEvent::Ack } else { LogEvent::Tx });
        let fading = self.cfg.fading;
        let unit = &mut self.nodes[node].rng_fading;
        let start = self
            .medium
            .begin_transmission(now, node, frame, |_| fading.sample(unit))
            .expect("the MAC never overlaps its own transmissions");
        for &r in &start.receivers {
            self.medium.arrival_start(r);
            self.schedule(start.end, r, NetEvent::ArrivalEnd { tx: start.id });
        }
        self.schedule(start.end, node, NetEvent::TxEnd { tx: start.id });
    }

    fn deliver(&mut self, node: NodeId, frame: Frame, out: &mut Vec<MacAction>) {
        let from = frame.origin;
        match frame.body {
            FrameBody::Ack => {}
            FrameBody::App(payload) => self.inbox.push_back(Notice::AppFrame { node, from, payload }),
            FrameBody::Beacon(b) => {
                let now = self.now();
                if let Some(ctp) = self.nodes[node].ctp.as_mut() {
                    let up = ctp.on_beacon(now, from, &b);
                    self.apply_route_update(node, up);
                }
            }
            FrameBody::Data(packet) => self.route(node, packet, out),
        }
    }

    fn route(&mut self, node: NodeId, packet: DataPacket, out: &mut Vec<MacAction>) {
        let now = self.now();
        let n = &mut self.nodes[node];
        let Some(ctp) = n.ctp.as_mut() else { return };
        match ctp.on_data(packet) {
            DataDisposition::DeliverApp(packet) => self.inbox.push_back(Notice::Diffusion { node, packet }),
            DataDisposition::AtSink(packet) => {
                if !packet.trace_is_loop_free() {
                    self.stats.trace_violations += 1;
                }
                self.sink.record(&packet, now);
            }
            DataDisposition::Forward { next_hop, packet } => {
                let len = packet.payload_len();
                let res =
                    n.mac.send_unicast(now, next_hop, len, FrameBody::Data(packet), FORWARD_TOKEN, &mut n.rng_mac, out);
                if res.is_err() {
                    self.stats.congestion_drops += 1;
                }
            }
            DataDisposition::LoopDropped(packet) => {
                if packet.header.dest_neighbor.is_some() {
                    self.stats.misrouted_diffusion += 1;
                } else {
                    self.stats.loop_drops += 1;
                    if ctp.trickle.reset() {
                        self.restart_trickle(node);
                    }
                }
            }
            DataDisposition::NoRoute(_) => self.stats.no_route_drops += 1,
        }
    }

    fn apply_route_update(&mut self, node: NodeId, up: RouteUpdate) {
        if let Some((Some(old), Some(new))) = up.parent_change {
            self.nodes[node].mac.redirect(
                old,
                new,
                |f| matches!(&f.body, FrameBody::Data(p) if p.header.dest_neighbor.is_none()),
            );
        }
        if up.restart_trickle {
            self.restart_trickle(node);
        }
    }

    fn restart_trickle(&mut self, node: NodeId) {
        let n = &mut self.nodes[node];
        let Some(ctp) = n.ctp.as_mut() else { return };
        let fire = ctp.trickle.begin_interval(&mut n.rng_trickle);
        let gen = ctp.trickle.generation;
        let interval = ctp.trickle.interval;
        self.schedule_local(node, fire, NetEvent::TrickleFire { gen });
        self.schedule_local(node, interval, NetEvent::TrickleEnd { gen });
    }

    /// Starts Trickle timers on every routing node.
    pub fn start_routing(&mut self) {
        for node in 0..self.nodes.len() {
            self.restart_trickle(node);
        }
    }

    fn handle(&mut self, node: NodeId, ev: NetEvent) -> Option<u64> {
        let mut out = Vec::new();
        match ev {
            NetEvent::TxEnd { tx } => {
                self.medium.end_transmission(tx);
                let n = &mut self.nodes[node];
                n.mac.on_tx_complete(&mut n.rng_mac, &mut out);
                let now = self.now();
                self.medium.prune(now);
            }
            NetEvent::ArrivalEnd { tx } => {
                let u = self.unit.sample(&mut self.nodes[node].rng_rx);
                let (outcome, frame) = self.medium.decide(node, tx, u);
                let event = match outcome {
                    ReceptionOutcome::Delivered => {
                        self.stats.delivered += 1;
                        LogEvent::Rx
                    }
                    ReceptionOutcome::LostNoise => {
                        self.stats.lost_noise += 1;
                        LogEvent::LostNoise
                    }
                    ReceptionOutcome::LostCollision => {
                        self.stats.lost_collision += 1;
                        LogEvent::LostCollision
                    }
                    ReceptionOutcome::BelowSensitivity => {
                        self.stats.below_sensitivity += 1;
                        LogEvent::BelowSensitivity
                    }
                };
                let addressed =
                    matches!(frame.mac_dest, MacDest::Broadcast) || frame.mac_dest == MacDest::Unicast(node);
                if addressed {
                    self.record(node, &frame, event);
                }
                if outcome == ReceptionOutcome::Delivered {
                    let n = &mut self.nodes[node];
                    let room = n.mac.has_room();
                    let ctp = n.ctp.as_ref();
                    let accept = |f: &Frame| match (&f.body, ctp) {
                        (FrameBody::Data(p), Some(c)) => !c.needs_forwarding(p) || room,
                        _ => true,
                    };
                    n.mac.on_frame(frame, accept, &mut n.rng_mac, &mut out);
                }
            }
            NetEvent::AckTimeout { gen } => {
                let n = &mut self.nodes[node];
                if gen == n.ack_gen {
                    n.mac.on_ack_timeout(&mut n.rng_mac, &mut out);
                }
            }
            NetEvent::BackoffDone { gen } => {
                let n = &mut self.nodes[node];
                if gen == n.backoff_gen {
                    n.mac.on_backoff_done(&mut n.rng_mac, &mut out);
                }
            }
            NetEvent::TrickleFire { gen } => {
                let now = self.now();
                let n = &mut self.nodes[node];
                let ctp = n.ctp.as_mut()?;
                if gen != ctp.trickle.generation {
                    return None;
                }
                let up = ctp.evict_silent(now);
                if ctp.trickle.should_transmit() {
                    let beacon = ctp.make_beacon();
                    if n.mac
                        .send_control(BEACON_PAYLOAD_LEN, FrameBody::Beacon(beacon), &mut n.rng_mac, &mut out)
                        .is_ok()
                    {
                        self.stats.beacons_sent += 1;
                    }
                }
                self.execute(node, std::mem::take(&mut out));
                self.apply_route_update(node, up);
            }
            NetEvent::TrickleEnd { gen } => {
                let ctp = self.nodes[node].ctp.as_mut()?;
                if gen == ctp.trickle.generation {
                    ctp.trickle.expire();
                    self.restart_trickle(node);
                }
            }
            NetEvent::App { tag } => return Some(tag),
        }
        self.execute(node, out);
        None
    }

    /// `submitted = succeeded + dropped + failed + queued` at every MAC and
    /// no frame transmitted more than `1 + max_retries` times.
    pub fn mac_invariants_hold(&self) -> bool {
        let bound = 1 + self.cfg.mac.max_retries;
        self.nodes.iter().all(|n| n.mac.conservation_holds() && n.mac.stats().max_attempts <= bound)
    }
}

/// Scenario behaviour plugged into a [`Network`].
pub trait App {
    fn on_start(&mut self, _core: &mut Core) {}
    fn on_tick(&mut self, _core: &mut Core, _node: NodeId, _tag: u64) {}
    fn on_notice(&mut self, _core: &mut Core, _notice: Notice) {}
}

pub struct Network<A> {
    pub core: Core,
    pub app: A,
}

impl<A: App> Network<A> {
    pub fn new(
        cfg: NetConfig,
        positions: &[Position<f64>],
        master_seed: u64,
        trial: u32,
        app: A,
    ) -> Result<Self, NetError> {
        let core = Core::new(cfg, positions, master_seed, trial)?;
        Ok(Network { core, app })
    }

    /// Starts routing timers (if routing is enabled) and the application.
    pub fn start(&mut self) {
        if self.core.cfg.ctp.is_some() {
            self.core.start_routing();
        }
        self.app.on_start(&mut self.core);
        self.drain();
    }

    fn drain(&mut self) {
        while let Some(notice) = self.core.inbox.pop_front() {
            self.app.on_notice(&mut self.core, notice);
        }
    }

    /// Processes one event with time `<= t_end`. Returns false when none is left.
    pub fn step(&mut self, t_end: f64) -> bool {
        let Some(ev) = self.core.engine.pop_until(SimTime::from_secs(t_end)) else {
            return false;
        };
        let Target::Node(node) = ev.target else { return true };
        if let Some(tag) = self.core.handle(node, ev.payload) {
            self.app.on_tick(&mut self.core, node, tag);
        }
        self.drain();
        true
    }

    /// Runs every event up to and including `t_end`.
    pub fn run_until(&mut self, t_end: f64) {
        while self.step(t_end) {}
        self.core.engine.advance_to(SimTime::from_secs(t_end));
    }
}
