//! A reduced Collection Tree Protocol.
//!
//! Each node keeps a neighbor table fed by beacons (control plane) and by ACK
//! outcomes of its own data frames (data plane), picks the neighbor that
//! minimises `advertised path ETX + link ETX` as parent, and times its beacons
//! with Trickle. Data frames carry a [`RoutingHeader`]; when `dest_neighbor`
//! is set the frame is one-hop diffusion traffic and is handed to the
//! application instead of being forwarded.
//!
//! [`Ctp`] performs no I/O: the network driver feeds it events and carries out
//! the returned decisions.

use std::collections::BTreeMap;

use rand::Rng;
use thiserror::Error;

use crate::engine::NodeId;

/// Node id of the collection sink.
pub const SINK: NodeId = 0;
/// Routing header bytes on every data frame.
pub const ROUTING_HEADER_LEN: usize = 10;
/// Beacon payload bytes (seq, parent, path ETX).
pub const BEACON_PAYLOAD_LEN: usize = 6;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CtpError {
    #[error("node {0} has no route to the sink")]
    NoRoute(NodeId),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CtpConfig {
    /// EWMA retain factor for both link-quality planes.
    pub alpha: f64,
    /// Floor on combined link quality.
    pub epsilon: f64,
    pub i_min: f64,
    pub i_max: f64,
    pub redundancy_k: u32,
    /// ETX change that counts as a topology inconsistency.
    pub etx_change_threshold: f64,
    /// A new parent must beat the current one by this much.
    pub parent_switch_hysteresis: f64,
    /// Neighbors silent for longer than this are evicted.
    pub silence_timeout: f64,
}

impl Default for CtpConfig {
    fn default() -> Self {
        CtpConfig {
            alpha: 0.9,
            epsilon: 0.01,
            i_min: 1.0,
            i_max: 512.0,
            redundancy_k: 2,
            etx_change_threshold: 1.5,
            parent_switch_hysteresis: 1.5,
            silence_timeout: 4.0 * 512.0,
        }
    }
}

/// Beacon contents. `path_etx` is infinite while the sender has no route.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Beacon {
    pub seq: u32,
    pub parent: Option<NodeId>,
    pub path_etx: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoutingHeader {
    pub origin: NodeId,
    pub origin_seqno: u32,
    /// Path ETX of the node that last transmitted the packet.
    pub path_etx: f64,
    /// Node that last transmitted the packet.
    pub hop_parent: NodeId,
    pub dest_neighbor: Option<NodeId>,
}

/// Routed packet. `trace` lists `(node, path_etx)` for every node that sent
/// it; it is simulation metadata and not counted in the frame length.
#[derive(Clone, Debug, PartialEq)]
pub struct DataPacket {
    pub header: RoutingHeader,
    pub created_at: f64,
    pub app_len: usize,
    pub trace: Vec<(NodeId, f64)>,
}

impl DataPacket {
    pub fn hop_count(&self) -> usize {
        self.trace.len()
    }

    /// Frame payload length: routing header plus application bytes.
    pub fn payload_len(&self) -> usize {
        ROUTING_HEADER_LEN + self.app_len
    }

    /// Distinct nodes with strictly decreasing path ETX.
    pub fn trace_is_loop_free(&self) -> bool {
        let mut seen = std::collections::BTreeSet::new();
        self.trace.iter().all(|(n, _)| seen.insert(*n)) && self.trace.windows(2).all(|w| w[1].1 < w[0].1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeighborEntry {
    pub addr: NodeId,
    pub beacon_quality: f64,
    pub data_quality: Option<f64>,
    pub link_etx: f64,
    pub advertised_path_etx: f64,
    pub advertised_parent: Option<NodeId>,
    pub last_heard: f64,
    /// Position in the order neighbors were first heard; breaks cost ties.
    pub rank: u64,
    last_seq: u32,
}

impl NeighborEntry {
    fn combined_quality(&self) -> f64 {
        match self.data_quality {
            Some(dq) => 0.5 * self.beacon_quality + 0.5 * dq,
            None => self.beacon_quality,
        }
    }

    fn recompute(&mut self, epsilon: f64) {
        self.link_etx = 1.0 / self.combined_quality().max(epsilon);
    }

    pub fn route_cost(&self) -> f64 {
        self.advertised_path_etx + self.link_etx
    }
}

/// Chooses the parent minimising `advertised_path_etx + link_etx` among
/// neighbors that are not our children and advertise less than `own_path_etx`.
/// Ties go to the neighbor heard first.
pub fn select_parent<'a>(
    me: NodeId,
    own_path_etx: f64,
    neighbors: impl IntoIterator<Item = &'a NeighborEntry>,
) -> Option<(NodeId, f64)> {
    neighbors
        .into_iter()
        .filter(|n| n.advertised_parent != Some(me))
        .filter(|n| n.advertised_path_etx.is_finite() && n.advertised_path_etx < own_path_etx)
        .map(|n| (n.addr, n.route_cost(), n.rank))
        .fold(None, |best: Option<(NodeId, f64, u64)>, cand| match best {
            Some(b) if b.1 < cand.1 || (b.1 == cand.1 && b.2 <= cand.2) => Some(b),
            _ => Some(cand),
        })
        .map(|(id, cost, _)| (id, cost))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrickleState {
    pub i_min: f64,
    pub i_max: f64,
    pub interval: f64,
    /// Offset of the fire point from the start of the current interval.
    pub fire_point: f64,
    pub consistent_count: u32,
    pub redundancy_k: u32,
    /// Bumped on every new interval so stale timers can be ignored.
    pub generation: u64,
}

/// Draws the fire point of an interval of length `state.interval` and returns
/// it together with the length of the following interval.
pub fn trickle_next<R: Rng + ?Sized>(state: &TrickleState, rng: &mut R) -> (f64, f64) {
    let half = state.interval / 2.0;
    let fire = half + rng.random::<f64>() * half;
    (fire, (2.0 * state.interval).min(state.i_max))
}

impl TrickleState {
    pub fn new(i_min: f64, i_max: f64, redundancy_k: u32) -> Self {
        assert!(i_min > 0.0 && i_min <= i_max, "trickle bounds must satisfy 0 < i_min <= i_max");
        TrickleState {
            i_min,
            i_max,
            interval: i_min,
            fire_point: i_min,
            consistent_count: 0,
            redundancy_k,
            generation: 0,
        }
    }

    /// Begins a fresh interval of the current length. Returns the fire offset.
    pub fn begin_interval<R: Rng + ?Sized>(&mut self, rng: &mut R) -> f64 {
        let (fire, _) = trickle_next(self, rng);
        self.fire_point = fire;
        self.consistent_count = 0;
        self.generation += 1;
        fire
    }

    /// End of the current interval: double it, capped at `i_max`.
    pub fn expire(&mut self) {
        self.interval = (2.0 * self.interval).min(self.i_max);
    }

    pub fn hear_consistent(&mut self) {
        self.consistent_count += 1;
    }

    pub fn should_transmit(&self) -> bool {
        self.consistent_count < self.redundancy_k
    }

    /// Shrinks the interval to `i_min`. Returns false when it already was
    /// `i_min`, in which case the running interval continues.
    pub fn reset(&mut self) -> bool {
        if self.interval > self.i_min {
            self.interval = self.i_min;
            true
        } else {
            false
        }
    }
}

/// What a control-plane or data-plane update changed.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RouteUpdate {
    /// The Trickle interval was shrunk and a new interval must be started.
    pub restart_trickle: bool,
    /// `(old, new)` parent when the parent changed.
    pub parent_change: Option<(Option<NodeId>, Option<NodeId>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataDisposition {
    /// Diffusion packet addressed to this node.
    DeliverApp(DataPacket),
    /// Collection packet arriving at the sink.
    AtSink(DataPacket),
    Forward {
        next_hop: NodeId,
        packet: DataPacket,
    },
    /// Path ETX did not decrease or the node is already in the trace.
    LoopDropped(DataPacket),
    NoRoute(DataPacket),
}

/// Per-node routing state.
pub struct Ctp {
    id: NodeId,
    cfg: CtpConfig,
    neighbors: BTreeMap<NodeId, NeighborEntry>,
    parent: Option<NodeId>,
    path_etx: f64,
    etx_at_last_beacon: f64,
    pub trickle: TrickleState,
    beacon_seq: u32,
    origin_seq: u32,
    heard: u64,
}

impl Ctp {
    pub fn new(id: NodeId, cfg: CtpConfig) -> Self {
        let path_etx = if id == SINK { 0.0 } else { f64::INFINITY };
        Ctp {
            id,
            cfg,
            neighbors: BTreeMap::new(),
            parent: None,
            path_etx,
            etx_at_last_beacon: path_etx,
            trickle: TrickleState::new(cfg.i_min, cfg.i_max, cfg.redundancy_k),
            beacon_seq: 0,
            origin_seq: 0,
            heard: 0,
        }
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn config(&self) -> &CtpConfig {
        &self.cfg
    }

    pub fn is_sink(&self) -> bool {
        self.id == SINK
    }

    pub fn parent(&self) -> Option<NodeId> {
        self.parent
    }

    pub fn path_etx(&self) -> f64 {
        self.path_etx
    }

    pub fn neighbor(&self, addr: NodeId) -> Option<&NeighborEntry> {
        self.neighbors.get(&addr)
    }

    pub fn neighbors(&self) -> impl Iterator<Item = &NeighborEntry> {
        self.neighbors.values()
    }

    pub fn neighbor_ids(&self) -> Vec<NodeId> {
        self.neighbors.keys().copied().collect()
    }

    /// Builds the next beacon and remembers the ETX it advertises.
    pub fn make_beacon(&mut self) -> Beacon {
        let b = Beacon { seq: self.beacon_seq, parent: self.parent, path_etx: self.path_etx };
        self.beacon_seq = self.beacon_seq.wrapping_add(1);
        self.etx_at_last_beacon = self.path_etx;
        b
    }

    pub fn on_beacon(&mut self, now: f64, from: NodeId, beacon: &Beacon) -> RouteUpdate {
        let alpha = self.cfg.alpha;
        let mut inconsistent = false;
        match self.neighbors.get_mut(&from) {
            Some(entry) => {
                let missed = beacon.seq.wrapping_sub(entry.last_seq).saturating_sub(1).min(32);
                for _ in 0..missed {
                    entry.beacon_quality *= alpha;
                }
                entry.beacon_quality = alpha * entry.beacon_quality + (1.0 - alpha);
                let jump = (beacon.path_etx - entry.advertised_path_etx).abs();
                let was_finite = entry.advertised_path_etx.is_finite();
                if self.parent == Some(from) && (jump > self.cfg.etx_change_threshold || !jump.is_finite()) {
                    inconsistent = true;
                }
                if self.parent == Some(from) && beacon.parent == Some(self.id) {
                    inconsistent = true;
                }
                if was_finite != beacon.path_etx.is_finite() {
                    inconsistent = true;
                }
                entry.advertised_path_etx = beacon.path_etx;
                entry.advertised_parent = beacon.parent;
                entry.last_seq = beacon.seq;
                entry.last_heard = now;
                entry.recompute(self.cfg.epsilon);
            }
            None => {
                if !beacon.path_etx.is_finite() && self.path_etx.is_finite() {
                    inconsistent = true;
                }
                let mut entry = NeighborEntry {
                    addr: from,
                    beacon_quality: 1.0,
                    data_quality: None,
                    link_etx: 1.0,
                    advertised_path_etx: beacon.path_etx,
                    advertised_parent: beacon.parent,
                    last_heard: now,
                    rank: self.heard,
                    last_seq: beacon.seq,
                };
                self.heard += 1;
                entry.recompute(self.cfg.epsilon);
                self.neighbors.insert(from, entry);
            }
        }
        let mut update = self.update_route();
        if inconsistent {
            update.restart_trickle |= self.trickle.reset();
        } else if update.parent_change.is_none() {
            self.trickle.hear_consistent();
        }
        update
    }

    /// Feeds the outcome of one data frame sent to `neighbor`.
    pub fn on_data_outcome(&mut self, neighbor: NodeId, acked: bool, attempts: u32) -> RouteUpdate {
        let alpha = self.cfg.alpha;
        let eps = self.cfg.epsilon;
        if let Some(entry) = self.neighbors.get_mut(&neighbor) {
            let sample = if acked { 1.0 / attempts.max(1) as f64 } else { 0.0 };
            entry.data_quality = Some(match entry.data_quality {
                Some(q) => alpha * q + (1.0 - alpha) * sample,
                None => sample,
            });
            entry.recompute(eps);
        }
        self.update_route()
    }

    /// Drops neighbors not heard from within the silence timeout.
    pub fn evict_silent(&mut self, now: f64) -> RouteUpdate {
        let timeout = self.cfg.silence_timeout;
        let before = self.neighbors.len();
        self.neighbors.retain(|_, e| now - e.last_heard <= timeout);
        if self.neighbors.len() == before {
            return RouteUpdate::default();
        }
        self.update_route()
    }

    /// Re-evaluates the parent. Sinks never have one.
    pub fn update_route(&mut self) -> RouteUpdate {
        let mut update = RouteUpdate::default();
        if self.is_sink() {
            return update;
        }
        let old = self.parent;
        let current_cost = old
            .and_then(|p| self.neighbors.get(&p))
            .filter(|e| e.advertised_parent != Some(self.id) && e.advertised_path_etx.is_finite())
            .map(NeighborEntry::route_cost)
            .unwrap_or(f64::INFINITY);
        let best = select_parent(self.id, current_cost, self.neighbors.values());
        let (parent, cost) = match best {
            Some((b, c)) if current_cost.is_infinite() || c + self.cfg.parent_switch_hysteresis < current_cost => {
                (Some(b), c)
            }
            _ if current_cost.is_finite() => (old, current_cost),
            _ => (None, f64::INFINITY),
        };
        self.parent = parent;
        self.path_etx = cost;
        if parent != old {
            update.parent_change = Some((old, parent));
            update.restart_trickle |= self.trickle.reset();
        }
        let drift = (self.path_etx - self.etx_at_last_beacon).abs();
        if drift > self.cfg.etx_change_threshold || (drift.is_nan() && parent != old) {
            update.restart_trickle |= self.trickle.reset();
        }
        update
    }

    /// Creates a packet originated here. Collection packets go to the parent,
    /// diffusion packets straight to `dest_neighbor`.
    pub fn originate(
        &mut self,
        now: f64,
        app_len: usize,
        dest_neighbor: Option<NodeId>,
    ) -> Result<(NodeId, DataPacket), CtpError> {
        let next_hop = match dest_neighbor {
            Some(n) => n,
            None => self.parent.ok_or(CtpError::NoRoute(self.id))?,
        };
        let seq = self.origin_seq;
        self.origin_seq = self.origin_seq.wrapping_add(1);
        let packet = DataPacket {
            header: RoutingHeader {
                origin: self.id,
                origin_seqno: seq,
                path_etx: self.path_etx,
                hop_parent: self.id,
                dest_neighbor,
            },
            created_at: now,
            app_len,
            trace: vec![(self.id, self.path_etx)],
        };
        Ok((next_hop, packet))
    }

    /// Whether accepting `packet` would require a forwarding-queue slot.
    pub fn needs_forwarding(&self, packet: &DataPacket) -> bool {
        packet.header.dest_neighbor.is_none() && !self.is_sink()
    }

    pub fn on_data(&mut self, mut packet: DataPacket) -> DataDisposition {
        if let Some(dest) = packet.header.dest_neighbor {
            return if dest == self.id {
                DataDisposition::DeliverApp(packet)
            } else {
                DataDisposition::LoopDropped(packet)
            };
        }
        if self.is_sink() {
            packet.trace.push((self.id, 0.0));
            return DataDisposition::AtSink(packet);
        }
        let revisit = packet.trace.iter().any(|(n, _)| *n == self.id);
        if revisit || self.path_etx >= packet.header.path_etx {
            return DataDisposition::LoopDropped(packet);
        }
        let Some(next_hop) = self.parent else {
            return DataDisposition::NoRoute(packet);
        };
        packet.header.path_etx = self.path_etx;
        packet.header.hop_parent = self.id;
        packet.trace.push((self.id, self.path_etx));
        DataDisposition::Forward { next_hop, packet }
    }
}

/// First arrival at the sink of one collection packet.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SinkRecord {
    pub arrival: f64,
    pub latency: f64,
    pub hop_count: usize,
}

/// Sink-side duplicate filter and latency record, keyed by `(origin, seqno)`.
#[derive(Clone, Debug, Default)]
pub struct SinkTable {
    records: BTreeMap<(NodeId, u32), SinkRecord>,
    duplicates: u64,
}

impl SinkTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records a first arrival. Returns false (and counts a duplicate) when
    /// the key was already present.
    pub fn record(&mut self, packet: &DataPacket, arrival: f64) -> bool {
        let key = (packet.header.origin, packet.header.origin_seqno);
        if self.records.contains_key(&key) {
            self.duplicates += 1;
            return false;
        }
        self.records.insert(
            key,
            SinkRecord {
                arrival,
                latency: arrival - packet.created_at,
                hop_count: packet.hop_count().saturating_sub(1),
            },
        );
        true
    }

    pub fn get(&self, origin: NodeId, seqno: u32) -> Option<&SinkRecord> {
        self.records.get(&(origin, seqno))
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn duplicates(&self) -> u64 {
        self.duplicates
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(NodeId, u32), &SinkRecord)> {
        self.records.iter()
    }
}
