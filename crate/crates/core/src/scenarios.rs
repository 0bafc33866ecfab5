//! The four experiment drivers and their shared plumbing.
//!
//! A [`ScenarioParams`] holds every knob of one parameter point as typed
//! fields, settable by key for the command line. [`run_trial`] builds the
//! network, runs it and returns a [`TrialOutput`]; [`Summary`] aggregates
//! trials into the figures the command line writes.

use std::collections::BTreeSet;
use std::fmt;

use rand::Rng;
use thiserror::Error;

use crate::channel::{FadingModel, LinearPathLoss, PathLossModel, Position};
use crate::engine::NodeId;
use crate::mac::{MacConfig, ACK_WAIT_BITS};
use crate::network::{App, Core, LogRecord, NetConfig, NetError, Network, Notice, SendError};
use crate::radio::{AppPayload, Coding, RadioParams, Receiver};
use crate::routing_ctp::{CtpConfig, SINK};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("invalid value `{value}` for key `{key}`: {reason}")]
    InvalidValue { key: String, value: String, reason: String },
    #[error(transparent)]
    Net(#[from] NetError),
}

fn invalid(key: &str, value: &str, reason: &str) -> ScenarioError {
    ScenarioError::InvalidValue { key: key.into(), value: value.into(), reason: reason.into() }
}

// ---------------------------------------------------------------- geometry

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GridLayout {
    /// Node k at `(dx·(k mod cols), dy·⌊k/cols⌋)`; the outer nodes sit on the field edges.
    CornerAligned,
    /// Node k at the centre of cell `(k mod cols, ⌊k/cols⌋)` of a field split
    /// into `cols × rows` equal cells of size `dx × dy`.
    CellCentered,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
    pub dx: f64,
    pub dy: f64,
    pub layout: GridLayout,
}

impl GridSpec {
    /// 3 × 7 nodes spanning a 42 × 18 m field edge to edge.
    pub fn corner_aligned() -> Self {
        GridSpec { rows: 3, cols: 7, dx: 7.0, dy: 9.0, layout: GridLayout::CornerAligned }
    }

    /// 3 × 7 nodes at the centres of 6 × 6 m cells of a 42 × 18 m field.
    pub fn cell_centered() -> Self {
        GridSpec { rows: 3, cols: 7, dx: 6.0, dy: 6.0, layout: GridLayout::CellCentered }
    }

    pub fn for_layout(layout: GridLayout) -> Self {
        match layout {
            GridLayout::CornerAligned => Self::corner_aligned(),
            GridLayout::CellCentered => Self::cell_centered(),
        }
    }

    pub fn node_count(&self) -> usize {
        self.rows * self.cols
    }
}

pub fn build_grid(spec: &GridSpec) -> Vec<Position<f64>> {
    let (ox, oy) = match spec.layout {
        GridLayout::CornerAligned => (0.0, 0.0),
        GridLayout::CellCentered => (spec.dx / 2.0, spec.dy / 2.0),
    };
    (0..spec.node_count())
        .map(|k| {
            let (c, r) = ((k % spec.cols) as f64, (k / spec.cols) as f64);
            Position::new(ox + spec.dx * c, oy + spec.dy * r)
        })
        .collect()
}

/// Two nodes `distance` metres apart; node 0 transmits.
pub fn build_p2p(distance: f64) -> Vec<Position<f64>> {
    assert!(distance > 0.0, "p2p distance must be positive");
    vec![Position::new(0.0, 0.0), Position::new(distance, 0.0)]
}

// --------------------------------------------------------- broadcast slots

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BroadcastSchedule {
    pub p_packets: u32,
    pub t_p: f64,
    pub n_nodes: u32,
    pub delta: f64,
    /// Include the `N` factor in the slot spacing.
    pub n_factor: bool,
}

impl BroadcastSchedule {
    pub fn reference(delta: f64) -> Self {
        BroadcastSchedule { p_packets: 100, t_p: 0.15, n_nodes: 21, delta, n_factor: true }
    }

    /// Start time of node `i` with δ = 1.
    pub fn synchronous_start(&self, i: usize) -> f64 {
        let n = if self.n_factor { self.n_nodes as f64 } else { 1.0 };
        self.p_packets as f64 * self.t_p * n * i as f64
    }
}

/// `δ·P·T_p·N·i` seconds.
pub fn broadcast_start_time(i: usize, sched: &BroadcastSchedule) -> f64 {
    assert!((0.0..=1.0).contains(&sched.delta), "delta must lie in [0, 1]");
    sched.delta * sched.synchronous_start(i)
}

// -------------------------------------------------------------- parameters

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ScenarioKind {
    P2p,
    RoutingGrid,
    DiffusionUnicast,
    DiffusionBroadcast,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 4] = [
        ScenarioKind::P2p,
        ScenarioKind::RoutingGrid,
        ScenarioKind::DiffusionUnicast,
        ScenarioKind::DiffusionBroadcast,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::P2p => "p2p",
            ScenarioKind::RoutingGrid => "routing-grid",
            ScenarioKind::DiffusionUnicast => "diffusion-unicast",
            ScenarioKind::DiffusionBroadcast => "diffusion-broadcast",
        }
    }

    pub fn from_name(name: &str) -> Result<Self, ScenarioError> {
        Self::ALL.into_iter().find(|k| k.name() == name).ok_or_else(|| ScenarioError::UnknownScenario(name.to_string()))
    }

    /// Keys understood by this scenario, in display order.
    pub fn keys(self) -> Vec<&'static str> {
        let mut keys = COMMON_KEYS.to_vec();
        keys.extend_from_slice(match self {
            ScenarioKind::P2p => &["distance", "frames", "period"][..],
            ScenarioKind::RoutingGrid => {
                &["layout", "period", "warmup", "packets_per_node", "drain", "parent_hysteresis"][..]
            }
            ScenarioKind::DiffusionUnicast => {
                &["layout", "unicast_period", "contention_period", "iterations", "discovery", "parent_hysteresis"][..]
            }
            ScenarioKind::DiffusionBroadcast => &["layout", "delta", "p_packets", "t_p", "slot_n_factor", "timing"][..],
        });
        keys
    }

    /// Parameter columns always present in the summary, in order.
    pub fn columns(self) -> &'static [&'static str] {
        match self {
            ScenarioKind::P2p => &["tx_power", "receiver", "coding", "distance"],
            ScenarioKind::RoutingGrid => &["period"],
            ScenarioKind::DiffusionUnicast => &["unicast_period", "contention_period"],
            ScenarioKind::DiffusionBroadcast => &["delta"],
        }
    }

    /// Sweep run when nothing overrides it: `(key, value list)`.
    pub fn default_sweep(self) -> &'static [(&'static str, &'static str)] {
        match self {
            ScenarioKind::P2p => &[("tx_power", "10,20,30"), ("distance", "4:10:0.25")],
            ScenarioKind::RoutingGrid => &[("period", "5,10,15,20,25,30,40")],
            ScenarioKind::DiffusionUnicast => &[("unicast_period", "5,10,20,40"), ("contention_period", "100")],
            ScenarioKind::DiffusionBroadcast => &[("delta", "0:1:0.1")],
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

const COMMON_KEYS: [&str; 15] = [
    "tx_power",
    "receiver",
    "coding",
    "l_d0",
    "path_slope",
    "d0",
    "fading_sigma",
    "drift_ppm",
    "max_retries",
    "queue_capacity",
    "ack_wait_bits",
    "initial_backoff",
    "post_send_gap",
    "payload",
    "noise_floor",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BroadcastTiming {
    /// `t_i = P·T_p·N·i`, ignoring δ.
    Synchronous,
    /// `t_i = δ·P·T_p·N·i`.
    Asynchronous,
}

/// Every knob of one parameter point.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioParams {
    pub kind: ScenarioKind,
    pub tx_power: f64,
    pub receiver: Receiver,
    pub coding: Coding,
    pub l_d0: f64,
    pub path_slope: f64,
    pub d0: f64,
    pub fading_sigma: f64,
    pub noise_floor: f64,
    pub drift_ppm: f64,
    pub max_retries: u32,
    pub queue_capacity: usize,
    pub ack_wait_bits: f64,
    pub initial_backoff: f64,
    pub post_send_gap: f64,
    pub payload: usize,
    pub layout: GridLayout,
    pub distance: f64,
    pub frames: u32,
    pub period: f64,
    pub warmup: f64,
    pub packets_per_node: u32,
    pub drain: f64,
    pub unicast_period: f64,
    pub contention_period: f64,
    pub iterations: u32,
    pub parent_hysteresis: f64,
    pub discovery: f64,
    pub delta: f64,
    pub p_packets: u32,
    pub t_p: f64,
    pub slot_n_factor: bool,
    pub timing: BroadcastTiming,
}

fn parse_f64(key: &str, value: &str) -> Result<f64, ScenarioError> {
    value
        .trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| invalid(key, value, "expected a finite number"))
}

fn parse_u32(key: &str, value: &str) -> Result<u32, ScenarioError> {
    value.trim().parse::<u32>().map_err(|_| invalid(key, value, "expected a non-negative integer"))
}

fn positive(key: &str, value: &str, v: f64) -> Result<f64, ScenarioError> {
    if v > 0.0 {
        Ok(v)
    } else {
        Err(invalid(key, value, "must be positive"))
    }
}

fn non_negative(key: &str, value: &str, v: f64) -> Result<f64, ScenarioError> {
    if v >= 0.0 {
        Ok(v)
    } else {
        Err(invalid(key, value, "must not be negative"))
    }
}

impl ScenarioParams {
    pub fn preset(kind: ScenarioKind) -> Self {
        let tdma = matches!(kind, ScenarioKind::P2p | ScenarioKind::DiffusionBroadcast);
        ScenarioParams {
            kind,
            tx_power: 30.0,
            receiver: Receiver::Coherent,
            coding: Coding::Conv312,
            l_d0: 47.40,
            path_slope: 10.45,
            d0: 2.0,
            fading_sigma: 0.56f64.sqrt(),
            noise_floor: -108.0,
            drift_ppm: 40.0,
            max_retries: 4,
            queue_capacity: 16,
            ack_wait_bits: ACK_WAIT_BITS,
            initial_backoff: if tdma { 0.0 } else { 0.5 },
            post_send_gap: 0.0,
            payload: if kind == ScenarioKind::P2p { 30 } else { 15 },
            layout: GridLayout::CellCentered,
            distance: 4.0,
            frames: 1000,
            period: if kind == ScenarioKind::P2p { 1.0 } else { 25.0 },
            warmup: 500.0,
            packets_per_node: 20,
            drain: 120.0,
            unicast_period: 5.0,
            contention_period: 100.0,
            iterations: 10,
            parent_hysteresis: CtpConfig::default().parent_switch_hysteresis,
            discovery: 60.0,
            delta: 1.0,
            p_packets: 100,
            t_p: 0.15,
            slot_n_factor: true,
            timing: BroadcastTiming::Asynchronous,
        }
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ScenarioError> {
        if !self.kind.keys().contains(&key) {
            return Err(ScenarioError::UnknownKey(key.to_string()));
        }
        let v = value.trim();
        match key {
            "tx_power" => {
                let p = parse_f64(key, v)?;
                if p > crate::radio::DEFAULT_MAX_TX_POWER_DBM {
                    return Err(invalid(key, v, "exceeds the 30 dBm maximum"));
                }
                self.tx_power = p;
            }
            "receiver" => {
                self.receiver = match v {
                    "coherent" => Receiver::Coherent,
                    "noncoherent" => Receiver::Noncoherent,
                    _ => return Err(invalid(key, v, "expected coherent or noncoherent")),
                }
            }
            "coding" => {
                self.coding = match v {
                    "none" => Coding::None,
                    "conv" => Coding::Conv312,
                    _ => return Err(invalid(key, v, "expected none or conv")),
                }
            }
            "l_d0" => self.l_d0 = parse_f64(key, v)?,
            "path_slope" => self.path_slope = positive(key, v, parse_f64(key, v)?)?,
            "d0" => self.d0 = positive(key, v, parse_f64(key, v)?)?,
            "fading_sigma" => self.fading_sigma = non_negative(key, v, parse_f64(key, v)?)?,
            "noise_floor" => self.noise_floor = parse_f64(key, v)?,
            "drift_ppm" => {
                let d = non_negative(key, v, parse_f64(key, v)?)?;
                if d > crate::engine::MAX_DRIFT_PPM {
                    return Err(invalid(key, v, "drift bound exceeded"));
                }
                self.drift_ppm = d;
            }
            "max_retries" => self.max_retries = parse_u32(key, v)?,
            "queue_capacity" => {
                let q = parse_u32(key, v)?;
                if q == 0 {
                    return Err(invalid(key, v, "must be at least 1"));
                }
                self.queue_capacity = q as usize;
            }
            "ack_wait_bits" => self.ack_wait_bits = positive(key, v, parse_f64(key, v)?)?,
            "initial_backoff" => self.initial_backoff = non_negative(key, v, parse_f64(key, v)?)?,
            "post_send_gap" => self.post_send_gap = non_negative(key, v, parse_f64(key, v)?)?,
            "payload" => self.payload = parse_u32(key, v)? as usize,
            "layout" => {
                self.layout = match v {
                    "corner" => GridLayout::CornerAligned,
                    "cell" => GridLayout::CellCentered,
                    _ => return Err(invalid(key, v, "expected corner or cell")),
                }
            }
            "distance" => self.distance = positive(key, v, parse_f64(key, v)?)?,
            "frames" => self.frames = parse_u32(key, v)?,
            "period" => self.period = positive(key, v, parse_f64(key, v)?)?,
            "warmup" => self.warmup = non_negative(key, v, parse_f64(key, v)?)?,
            "parent_hysteresis" => self.parent_hysteresis = non_negative(key, v, parse_f64(key, v)?)?,
            "packets_per_node" => self.packets_per_node = parse_u32(key, v)?,
            "drain" => self.drain = non_negative(key, v, parse_f64(key, v)?)?,
            "unicast_period" => self.unicast_period = positive(key, v, parse_f64(key, v)?)?,
            "contention_period" => self.contention_period = positive(key, v, parse_f64(key, v)?)?,
            "iterations" => self.iterations = parse_u32(key, v)?,
            "discovery" => self.discovery = non_negative(key, v, parse_f64(key, v)?)?,
            "delta" => {
                let d = parse_f64(key, v)?;
                if !(0.0..=1.0).contains(&d) {
                    return Err(invalid(key, v, "must lie in [0, 1]"));
                }
                self.delta = d;
            }
            "p_packets" => self.p_packets = parse_u32(key, v)?,
            "t_p" => self.t_p = positive(key, v, parse_f64(key, v)?)?,
            "slot_n_factor" => self.slot_n_factor = v.parse().map_err(|_| invalid(key, v, "expected true or false"))?,
            "timing" => {
                self.timing = match v {
                    "sync" => BroadcastTiming::Synchronous,
                    "async" => BroadcastTiming::Asynchronous,
                    _ => return Err(invalid(key, v, "expected sync or async")),
                }
            }
            _ => unreachable!("key list and setter out of step: {key}"),
        }
        Ok(())
    }

    /// Textual value of `key`, in the form [`set`](Self::set) accepts.
    pub fn get(&self, key: &str) -> Option<String> {
        if !self.kind.keys().contains(&key) {
            return None;
        }
        Some(match key {
            "tx_power" => self.tx_power.to_string(),
            "receiver" => match self.receiver {
                Receiver::Coherent => "coherent".into(),
                Receiver::Noncoherent => "noncoherent".into(),
            },
            "coding" => match self.coding {
                Coding::None => "none".into(),
                Coding::Conv312 => "conv".into(),
            },
            "l_d0" => self.l_d0.to_string(),
            "path_slope" => self.path_slope.to_string(),
            "d0" => self.d0.to_string(),
            "fading_sigma" => self.fading_sigma.to_string(),
            "noise_floor" => self.noise_floor.to_string(),
            "drift_ppm" => self.drift_ppm.to_string(),
            "max_retries" => self.max_retries.to_string(),
            "queue_capacity" => self.queue_capacity.to_string(),
            "ack_wait_bits" => self.ack_wait_bits.to_string(),
            "initial_backoff" => self.initial_backoff.to_string(),
            "post_send_gap" => self.post_send_gap.to_string(),
            "payload" => self.payload.to_string(),
            "layout" => match self.layout {
                GridLayout::CornerAligned => "corner".into(),
                GridLayout::CellCentered => "cell".into(),
            },
            "distance" => self.distance.to_string(),
            "frames" => self.frames.to_string(),
            "period" => self.period.to_string(),
            "warmup" => self.warmup.to_string(),
            "parent_hysteresis" => self.parent_hysteresis.to_string(),
            "packets_per_node" => self.packets_per_node.to_string(),
            "drain" => self.drain.to_string(),
            "unicast_period" => self.unicast_period.to_string(),
            "contention_period" => self.contention_period.to_string(),
            "iterations" => self.iterations.to_string(),
            "discovery" => self.discovery.to_string(),
            "delta" => self.delta.to_string(),
            "p_packets" => self.p_packets.to_string(),
            "t_p" => self.t_p.to_string(),
            "slot_n_factor" => self.slot_n_factor.to_string(),
            "timing" => match self.timing {
                BroadcastTiming::Synchronous => "sync".into(),
                BroadcastTiming::Asynchronous => "async".into(),
            },
            _ => return None,
        })
    }

    pub fn radio(&self) -> Result<RadioParams<f64>, ScenarioError> {
        let mut r = RadioParams::reference(self.tx_power, self.receiver, self.coding)
            .map_err(|e| invalid("tx_power", &self.tx_power.to_string(), &e.to_string()))?;
        r.noise_floor = self.noise_floor;
        Ok(r)
    }

    pub fn net_config(&self, log_events: bool) -> Result<NetConfig, ScenarioError> {
        let radio = self.radio()?;
        let path_loss = LinearPathLoss::new(self.l_d0, self.path_slope, self.d0)
            .map_err(|e| invalid("path_slope", &self.path_slope.to_string(), &e.to_string()))?;
        let fading = if self.fading_sigma > 0.0 {
            FadingModel::Gaussian { sigma: self.fading_sigma }
        } else {
            FadingModel::None
        };
        let mac = MacConfig {
            ack_wait: self.ack_wait_bits / radio.data_rate,
            max_retries: self.max_retries,
            queue_capacity: self.queue_capacity,
            initial_backoff_max: self.initial_backoff,
            post_send_gap: self.post_send_gap,
            ..MacConfig::for_data_rate(radio.data_rate)
        };
        let routing = matches!(self.kind, ScenarioKind::RoutingGrid | ScenarioKind::DiffusionUnicast);
        Ok(NetConfig {
            radio,
            path_loss: PathLossModel::Linear(path_loss),
            fading,
            mac,
            ctp: routing
                .then(|| CtpConfig { parent_switch_hysteresis: self.parent_hysteresis, ..CtpConfig::default() }),
            max_drift_ppm: self.drift_ppm,
            log_events,
        })
    }

    pub fn broadcast_schedule(&self) -> BroadcastSchedule {
        BroadcastSchedule {
            p_packets: self.p_packets,
            t_p: self.t_p,
            n_nodes: GridSpec::for_layout(self.layout).node_count() as u32,
            delta: self.delta,
            n_factor: self.slot_n_factor,
        }
    }

    pub fn positions(&self) -> Vec<Position<f64>> {
        match self.kind {
            ScenarioKind::P2p => build_p2p(self.distance),
            _ => build_grid(&GridSpec::for_layout(self.layout)),
        }
    }
}

// ----------------------------------------------------------------- metrics

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DropCounts {
    pub queue_full: u64,
    pub failed_retries: u64,
    pub congestion: u64,
    pub routing_loop: u64,
    pub no_route: u64,
    pub lost_noise: u64,
    pub lost_collision: u64,
    pub below_sensitivity: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrialMetrics {
    /// Unique packets (or receptions, for broadcast) that should have arrived.
    pub sent: u64,
    pub delivered: u64,
    pub duplicates: u64,
    pub drops: DropCounts,
    pub latencies: Vec<f64>,
    pub events: u64,
    /// MAC conservation and retry bounds held and every sink trace was loop free.
    pub invariants_ok: bool,
}

impl TrialMetrics {
    pub fn success_rate(&self) -> f64 {
        if self.sent == 0 {
            0.0
        } else {
            self.delivered as f64 / self.sent as f64
        }
    }
}

/// One sink arrival, as written to the sink delivery log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SinkRow {
    pub arrival: f64,
    pub origin: NodeId,
    pub seqno: u32,
    pub latency: f64,
    pub hop_count: usize,
}

#[derive(Clone, Debug, Default)]
pub struct TrialOutput {
    pub metrics: TrialMetrics,
    pub log: Vec<LogRecord>,
    pub sink: Vec<SinkRow>,
}

fn collect_metrics(core: &Core, metrics: &mut TrialMetrics) {
    let s = core.stats();
    let d = &mut metrics.drops;
    for n in 0..core.node_count() {
        let m = core.mac(n).stats();
        d.queue_full += m.dropped_queue_full;
        d.failed_retries += m.failed_retries;
    }
    d.congestion = s.congestion_drops;
    d.routing_loop = s.loop_drops;
    d.no_route += s.no_route_drops;
    d.lost_noise = s.lost_noise;
    d.lost_collision = s.lost_collision;
    d.below_sensitivity = s.below_sensitivity;
    metrics.events = core.events_dispatched();
    metrics.invariants_ok = core.mac_invariants_hold() && s.trace_violations == 0;
}

// -------------------------------------------------------------- scenarios

struct P2pApp {
    frames: u32,
    period: f64,
    payload: usize,
    sent: u32,
    received: BTreeSet<u32>,
    duplicates: u64,
    latencies: Vec<f64>,
}

impl App for P2pApp {
    fn on_start(&mut self, core: &mut Core) {
        if self.frames > 0 {
            core.schedule_app_at(0, 0.0, 0);
        }
    }

    fn on_tick(&mut self, core: &mut Core, node: NodeId, _tag: u64) {
        let payload = AppPayload { origin: node, seq: self.sent, created_at: core.now() };
        let _ = core.broadcast(node, payload, self.payload);
        self.sent += 1;
        if self.sent < self.frames {
            core.schedule_app_in(node, self.period, 0);
        }
    }

    fn on_notice(&mut self, core: &mut Core, notice: Notice) {
        if let Notice::AppFrame { payload, .. } = notice {
            if self.received.insert(payload.seq) {
                self.latencies.push(core.now() - payload.created_at);
            } else {
                self.duplicates += 1;
            }
        }
    }
}

struct RoutingApp {
    warmup: f64,
    period: f64,
    packets: u32,
    payload: usize,
    sent: Vec<u32>,
    no_route: u64,
}

impl App for RoutingApp {
    fn on_start(&mut self, core: &mut Core) {
        for node in 0..core.node_count() {
            if node != SINK && self.packets > 0 {
                let phase = core.app_rng(node).random::<f64>() * self.period;
                core.schedule_app_in(node, self.warmup + phase, 0);
            }
        }
    }

    fn on_tick(&mut self, core: &mut Core, node: NodeId, _tag: u64) {
        self.sent[node] += 1;
        if let Err(SendError::Routing(_)) = core.send_collection(node, self.payload) {
            self.no_route += 1;
        }
        if self.sent[node] < self.packets {
            core.schedule_app_in(node, self.period, 0);
        }
    }
}

struct UnicastApp {
    discovery: f64,
    unicast_period: f64,
    contention_period: f64,
    iterations: u32,
    payload: usize,
    targets: Vec<Vec<NodeId>>,
    expected: u64,
    received: BTreeSet<(NodeId, u32)>,
    duplicates: u64,
    latencies: Vec<f64>,
}

impl UnicastApp {
    fn tag(iteration: u32, index: usize) -> u64 {
        ((iteration as u64) << 32) | index as u64
    }
}

impl App for UnicastApp {
    fn on_start(&mut self, core: &mut Core) {
        for node in 0..core.node_count() {
            if self.iterations > 0 {
                let phase = core.app_rng(node).random::<f64>() * self.unicast_period;
                core.schedule_app_in(node, self.discovery + phase, Self::tag(0, 0));
            }
        }
    }

    fn on_tick(&mut self, core: &mut Core, node: NodeId, tag: u64) {
        let (iteration, index) = ((tag >> 32) as u32, (tag & 0xffff_ffff) as usize);
        if index == 0 {
            self.targets[node] = core.neighbors(node);
        }
        let Some(&dest) = self.targets[node].get(index) else {
            if iteration + 1 < self.iterations {
                core.schedule_app_in(node, self.contention_period, Self::tag(iteration + 1, 0));
            }
            return;
        };
        self.expected += 1;
        let _ = core.send_diffusion(node, dest, self.payload, tag);
        if index + 1 < self.targets[node].len() {
            core.schedule_app_in(node, self.unicast_period, Self::tag(iteration, index + 1));
        } else if iteration + 1 < self.iterations {
            core.schedule_app_in(node, self.contention_period, Self::tag(iteration + 1, 0));
        }
    }

    fn on_notice(&mut self, core: &mut Core, notice: Notice) {
        if let Notice::Diffusion { node, packet } = notice {
            debug_assert_eq!(packet.header.dest_neighbor, Some(node));
            if self.received.insert((packet.header.origin, packet.header.origin_seqno)) {
                self.latencies.push(core.now() - packet.created_at);
            } else {
                self.duplicates += 1;
            }
        }
    }
}

struct BroadcastApp {
    starts: Vec<f64>,
    frames: u32,
    t_p: f64,
    payload: usize,
    sent: Vec<u32>,
    received: BTreeSet<(NodeId, NodeId, u32)>,
    duplicates: u64,
    latencies: Vec<f64>,
}

impl App for BroadcastApp {
    fn on_start(&mut self, core: &mut Core) {
        if self.frames == 0 {
            return;
        }
        for (node, &start) in self.starts.iter().enumerate() {
            core.schedule_app_at(node, start, 0);
        }
    }

    fn on_tick(&mut self, core: &mut Core, node: NodeId, _tag: u64) {
        let payload = AppPayload { origin: node, seq: self.sent[node], created_at: core.now() };
        let _ = core.broadcast(node, payload, self.payload);
        self.sent[node] += 1;
        if self.sent[node] < self.frames {
            core.schedule_app_in(node, self.t_p, 0);
        }
    }

    fn on_notice(&mut self, core: &mut Core, notice: Notice) {
        if let Notice::AppFrame { node, from, payload } = notice {
            if !core.medium().in_range(from, node) {
                return;
            }
            if self.received.insert((from, node, payload.seq)) {
                self.latencies.push(core.now() - payload.created_at);
            } else {
                self.duplicates += 1;
            }
        }
    }
}

fn finish<A: App>(net: Network<A>, log_events: bool, mut metrics: TrialMetrics) -> TrialOutput {
    collect_metrics(&net.core, &mut metrics);
    let sink = net
        .core
        .sink_table()
        .iter()
        .map(|(&(origin, seqno), r)| SinkRow {
            arrival: r.arrival,
            origin,
            seqno,
            latency: r.latency,
            hop_count: r.hop_count,
        })
        .collect();
    let log = if log_events { net.core.log().to_vec() } else { Vec::new() };
    TrialOutput { metrics, log, sink }
}

/// Runs one trial of `params`. Trials with the same `(master_seed, trial)`
/// share their random streams across parameter points.
pub fn run_trial(
    params: &ScenarioParams,
    master_seed: u64,
    trial: u32,
    log_events: bool,
) -> Result<TrialOutput, ScenarioError> {
    let cfg = params.net_config(log_events)?;
    let positions = params.positions();
    match params.kind {
        ScenarioKind::P2p => {
            let app = P2pApp {
                frames: params.frames,
                period: params.period,
                payload: params.payload,
                sent: 0,
                received: BTreeSet::new(),
                duplicates: 0,
                latencies: Vec::new(),
            };
            let mut net = Network::new(cfg, &positions, master_seed, trial, app)?;
            net.start();
            net.run_until(params.frames as f64 * params.period * 1.01 + 5.0);
            let metrics = TrialMetrics {
                sent: net.app.sent as u64,
                delivered: net.app.received.len() as u64,
                duplicates: net.app.duplicates,
                latencies: std::mem::take(&mut net.app.latencies),
                ..Default::default()
            };
            Ok(finish(net, log_events, metrics))
        }
        ScenarioKind::RoutingGrid => Ok(run_routing(params, cfg, &positions, master_seed, trial, log_events)?),
        ScenarioKind::DiffusionUnicast => {
            let app = UnicastApp {
                discovery: params.discovery,
                unicast_period: params.unicast_period,
                contention_period: params.contention_period,
                iterations: params.iterations,
                payload: params.payload,
                targets: vec![Vec::new(); positions.len()],
                expected: 0,
                received: BTreeSet::new(),
                duplicates: 0,
                latencies: Vec::new(),
            };
            let mut net = Network::new(cfg, &positions, master_seed, trial, app)?;
            net.start();
            let n = positions.len();
            let max_degree =
                (0..n).map(|i| (0..n).filter(|&j| net.core.medium().in_range(i, j)).count()).max().unwrap_or(0);
            let train = (max_degree + 1) as f64 * params.unicast_period + params.contention_period;
            let end = params.discovery + params.unicast_period + params.iterations as f64 * train;
            net.run_until(end * 1.01 + 30.0);
            let metrics = TrialMetrics {
                sent: net.app.expected,
                delivered: net.app.received.len() as u64,
                duplicates: net.app.duplicates,
                latencies: std::mem::take(&mut net.app.latencies),
                ..Default::default()
            };
            Ok(finish(net, log_events, metrics))
        }
        ScenarioKind::DiffusionBroadcast => {
            let sched = params.broadcast_schedule();
            let starts: Vec<f64> = (0..positions.len())
                .map(|i| match params.timing {
                    BroadcastTiming::Synchronous => sched.synchronous_start(i),
                    BroadcastTiming::Asynchronous => broadcast_start_time(i, &sched),
                })
                .collect();
            let last = starts.iter().copied().fold(0.0, f64::max);
            let app = BroadcastApp {
                starts,
                frames: params.p_packets,
                t_p: params.t_p,
                payload: params.payload,
                sent: vec![0; positions.len()],
                received: BTreeSet::new(),
                duplicates: 0,
                latencies: Vec::new(),
            };
            let mut net = Network::new(cfg, &positions, master_seed, trial, app)?;
            net.start();
            net.run_until(last + params.p_packets as f64 * params.t_p * 1.01 + 5.0);
            let n = positions.len();
            let mut expected = 0u64;
            for i in 0..n {
                let in_range = (0..n).filter(|&j| net.core.medium().in_range(i, j)).count() as u64;
                expected += in_range * net.app.sent[i] as u64;
            }
            let metrics = TrialMetrics {
                sent: expected,
                delivered: net.app.received.len() as u64,
                duplicates: net.app.duplicates,
                latencies: std::mem::take(&mut net.app.latencies),
                ..Default::default()
            };
            Ok(finish(net, log_events, metrics))
        }
    }
}

fn run_routing(
    params: &ScenarioParams,
    cfg: NetConfig,
    positions: &[Position<f64>],
    master_seed: u64,
    trial: u32,
    log_events: bool,
) -> Result<TrialOutput, ScenarioError> {
    let app = RoutingApp {
        warmup: params.warmup,
        period: params.period,
        packets: params.packets_per_node,
        payload: params.payload,
        sent: vec![0; positions.len()],
        no_route: 0,
    };
    let mut net = Network::new(cfg, positions, master_seed, trial, app)?;
    net.start();
    let end = params.warmup + params.period * (params.packets_per_node as f64 + 1.0);
    net.run_until(end * 1.01 + params.drain);
    let table = net.core.sink_table();
    let metrics = TrialMetrics {
        sent: net.app.sent.iter().map(|&s| s as u64).sum(),
        delivered: table.len() as u64,
        duplicates: table.duplicates(),
        latencies: table.iter().map(|(_, r)| r.latency).collect(),
        drops: DropCounts { no_route: net.app.no_route, ..Default::default() },
        ..Default::default()
    };
    Ok(finish(net, log_events, metrics))
}

// ------------------------------------------------------------- aggregation

/// Quantile by linear interpolation between order statistics. `q ∈ [0, 1]`.
/// Returns NaN for an empty sample.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Mean and standard error (sample standard deviation over √n).
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Fixed-width histogram starting at 0: `(lo, hi, count)` per bin up to the
/// last non-empty one.
pub fn histogram(samples: &[f64], bin_width: f64) -> Vec<(f64, f64, u64)> {
    assert!(bin_width > 0.0, "bin width must be positive");
    let mut counts: Vec<u64> = Vec::new();
    for &s in samples.iter().filter(|s| s.is_finite()) {
        let b = (s.max(0.0) / bin_width).floor() as usize;
        if counts.len() <= b {
            counts.resize(b + 1, 0);
        }
        counts[b] += 1;
    }
    counts.into_iter().enumerate().map(|(i, c)| (i as f64 * bin_width, (i + 1) as f64 * bin_width, c)).collect()
}

/// Aggregate over the trials of one parameter point.
#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub trials: usize,
    pub mean_success: f64,
    pub stderr_success: f64,
    pub latency_p50: f64,
    pub latency_p95: f64,
    pub latency_p99: f64,
    pub sent: u64,
    pub delivered: u64,
    pub latencies: Vec<f64>,
}

impl Summary {
    pub fn from_trials(trials: &[TrialMetrics]) -> Self {
        let rates: Vec<f64> = trials.iter().map(TrialMetrics::success_rate).collect();
        let (mean_success, stderr_success) = mean_stderr(&rates);
        let mut latencies: Vec<f64> = trials.iter().flat_map(|t| t.latencies.iter().copied()).collect();
        latencies.sort_by(f64::total_cmp);
        Summary {
            trials: trials.len(),
            mean_success,
            stderr_success,
            latency_p50: quantile(&latencies, 0.50),
            latency_p95: quantile(&latencies, 0.95),
            latency_p99: quantile(&latencies, 0.99),
            sent: trials.iter().map(|t| t.sent).sum(),
            delivered: trials.iter().map(|t| t.delivered).sum(),
            latencies,
        }
    }
}
