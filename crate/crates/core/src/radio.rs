//! Binary FSK physical layer.
//!
//! The bit error chain is `snr_db → fsk_ber → coded_ber → frame success`.
//! SNR treats interference as extra noise power, Eb/N0 is the SNR scaled by
//! `noise_bw / data_rate`, and the convolutional code is accounted for by the
//! union bound `B·[2√(p(1−p))]^d_free` instead of actual decoding.
//!
//! [`Medium`] holds the shared channel state of one trial: every transmission
//! in flight, the per-receiver powers drawn for it, and each node's
//! half-duplex radio mode.

use std::collections::VecDeque;

use thiserror::Error;

use crate::channel::{rx_power_dbm, ChannelError, PathLoss, PathLossModel, Position};
use crate::engine::NodeId;
use crate::num::{db_to_linear, linear_to_db, Real};
use crate::routing_ctp::{Beacon, DataPacket};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RadioError {
    #[error("node {0} is already transmitting")]
    Busy(NodeId),
    #[error("probability {0} outside [0, 1]")]
    Domain(f64),
    #[error("invalid radio parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Channel(#[from] ChannelError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Receiver {
    Noncoherent,
    Coherent,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Coding {
    None,
    /// Rate 1/3, memory 2 feedforward code `G(D) = [1+D, 1+D², 1+D+D²]`.
    Conv312,
}

impl Coding {
    pub fn spec(self) -> Option<CodeSpec> {
        match self {
            Coding::None => None,
            Coding::Conv312 => Some(CodeSpec::CONV_3_1_2),
        }
    }
}

/// Distance spectrum terms used by the coded BER bound.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CodeSpec {
    d_free: u32,
    b_dfree: u32,
}

impl CodeSpec {
    pub const CONV_3_1_2: CodeSpec = CodeSpec { d_free: 7, b_dfree: 1 };

    pub fn new(d_free: u32, b_dfree: u32) -> Result<Self, RadioError> {
        if d_free == 0 || b_dfree == 0 {
            return Err(RadioError::InvalidParameter(format!("d_free = {d_free}, b_dfree = {b_dfree}")));
        }
        Ok(CodeSpec { d_free, b_dfree })
    }

    pub fn d_free(&self) -> u32 {
        self.d_free
    }

    pub fn b_dfree(&self) -> u32 {
        self.b_dfree
    }
}

/// Default transmit power ceiling in dBm.
pub const DEFAULT_MAX_TX_POWER_DBM: f64 = 30.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RadioParams<T> {
    /// bit/s
    pub data_rate: T,
    pub bits_per_symbol: u32,
    /// Hz
    pub signal_bw: T,
    /// Hz
    pub noise_bw: T,
    /// dBm
    pub noise_floor: T,
    /// dBm
    pub sensitivity: T,
    /// dBm
    pub tx_power: T,
    /// dBm
    pub max_tx_power: T,
    pub receiver: Receiver,
    pub coding: Coding,
}

impl<T: Real> RadioParams<T> {
    /// 3 kbps binary FSK, 12 kHz bandwidths, −108 dBm floor, −101 dBm sensitivity.
    pub fn reference(tx_power: T, receiver: Receiver, coding: Coding) -> Result<Self, RadioError> {
        RadioParams {
            data_rate: T::lit(3000.0),
            bits_per_symbol: 1,
            signal_bw: T::lit(12_000.0),
            noise_bw: T::lit(12_000.0),
            noise_floor: T::lit(-108.0),
            sensitivity: T::lit(-101.0),
            tx_power,
            max_tx_power: T::lit(DEFAULT_MAX_TX_POWER_DBM),
            receiver,
            coding,
        }
        .validated()
    }

    pub fn validated(self) -> Result<Self, RadioError> {
        let bad = |what: String| Err(RadioError::InvalidParameter(what));
        if !(self.data_rate > T::zero()) {
            return bad(format!("data_rate = {}", self.data_rate));
        }
        if !(self.noise_bw > T::zero()) {
            return bad(format!("noise_bw = {}", self.noise_bw));
        }
        if self.bits_per_symbol == 0 {
            return bad("bits_per_symbol = 0".into());
        }
        if !(self.sensitivity >= self.noise_floor) {
            return bad(format!("sensitivity {} below noise floor {}", self.sensitivity, self.noise_floor));
        }
        if !(self.tx_power <= self.max_tx_power) {
            return bad(format!("tx_power {} dBm exceeds the {} dBm ceiling", self.tx_power, self.max_tx_power));
        }
        Ok(self)
    }

    /// Eb/N0 (linear) for a given SNR in dB.
    pub fn eb_n0(&self, snr_db: T) -> T {
        db_to_linear(snr_db) * (self.noise_bw / self.data_rate)
    }
}

/// Signal to noise-plus-interference ratio in dB.
pub fn snr_db<T: Real>(rx_dbm: T, noise_floor_dbm: T, interference_mw: T) -> T {
    rx_dbm - linear_to_db(db_to_linear(noise_floor_dbm) + interference_mw)
}

/// Gaussian tail probability `Q(x) = ½·erfc(x/√2)`.
pub fn q_function<T: Real>(x: T) -> T {
    T::lit(0.5 * libm::erfc(x.to_f64_lossy() / std::f64::consts::SQRT_2))
}

/// Uncoded binary FSK bit error probability, clamped to `[0, ½]`.
pub fn fsk_ber<T: Real>(snr_db: T, params: &RadioParams<T>) -> T {
    let half = T::lit(0.5);
    let ebn0 = params.eb_n0(snr_db);
    let p = match params.receiver {
        Receiver::Noncoherent => half * (-ebn0 / T::lit(2.0)).exp(),
        Receiver::Coherent => q_function(ebn0.sqrt()),
    };
    if p.is_nan() {
        half
    } else {
        p.max(T::zero()).min(half)
    }
}

/// Decoded bit error bound `min(p, B·[2√(p(1−p))]^d_free)`.
pub fn coded_ber<T: Real>(p: T, code: &CodeSpec) -> Result<T, RadioError> {
    if !(p >= T::zero() && p <= T::one()) {
        return Err(RadioError::Domain(p.to_f64_lossy()));
    }
    let base = T::lit(2.0) * (p * (T::one() - p)).sqrt();
    let bound = T::from_u32(code.b_dfree).unwrap() * base.powi(code.d_free as i32);
    Ok(bound.min(p))
}

/// Bit error probability after the configured receiver and decoder.
pub fn link_ber<T: Real>(snr_db: T, params: &RadioParams<T>) -> T {
    let p = fsk_ber(snr_db, params);
    match params.coding.spec() {
        // p is clamped to [0, ½] by fsk_ber, so the bound cannot fail.
        Some(code) => coded_ber(p, &code).unwrap_or(p),
        None => p,
    }
}

/// `(1 − ber)^bits` under independent bit errors.
pub fn frame_success_probability<T: Real>(ber: T, total_bits: u32) -> T {
    if ber >= T::one() {
        return T::zero();
    }
    let bits = T::from_u32(total_bits).unwrap();
    (bits * (-ber).ln_1p()).exp()
}

/// MAC destination.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MacDest {
    Unicast(NodeId),
    Broadcast,
}

impl MacDest {
    pub fn node(self) -> Option<NodeId> {
        match self {
            MacDest::Unicast(n) => Some(n),
            MacDest::Broadcast => None,
        }
    }
}

/// Application payload descriptor carried inside frames.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AppPayload {
    pub origin: NodeId,
    pub seq: u32,
    /// Global time at which the application created the packet.
    pub created_at: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum FrameBody {
    Ack,
    /// Plain application frame with no routing header.
    App(AppPayload),
    Beacon(Beacon),
    Data(DataPacket),
}

/// The on-air unit.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    /// MAC-level sender.
    pub origin: NodeId,
    pub mac_dest: MacDest,
    pub seqno: u32,
    pub payload_len: usize,
    pub header_len: usize,
    pub body: FrameBody,
}

impl Frame {
    pub fn total_bits(&self) -> u32 {
        8 * (self.payload_len + self.header_len) as u32
    }

    pub fn airtime(&self, data_rate: f64) -> f64 {
        self.total_bits() as f64 / data_rate
    }

    pub fn is_ack(&self) -> bool {
        matches!(self.body, FrameBody::Ack)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ReceptionOutcome {
    Delivered,
    LostNoise,
    LostCollision,
    BelowSensitivity,
}

/// Another signal overlapping the frame being received.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Interferer {
    pub start: f64,
    pub end: f64,
    pub power_mw: f64,
}

/// Largest summed interference power over any instant of `[start, end)`.
///
/// The total is piecewise constant and only rises at interferer start times,
/// so evaluating at `start` and at every start inside the window suffices.
pub fn worst_interference_mw(start: f64, end: f64, interferers: &[Interferer]) -> f64 {
    let active_at =
        |t: f64| -> f64 { interferers.iter().filter(|i| i.start <= t && t < i.end).map(|i| i.power_mw).sum() };
    let mut worst = active_at(start);
    for i in interferers {
        if i.start > start && i.start < end {
            worst = worst.max(active_at(i.start));
        }
    }
    worst
}

/// Everything the reception decision needs about one frame at one receiver.
#[derive(Clone, Copy, Debug)]
pub struct ReceptionInput<'a> {
    pub start: f64,
    pub end: f64,
    pub rx_dbm: f64,
    pub bits: u32,
    /// The receiver transmitted at some point during `[start, end)`.
    pub receiver_transmitted: bool,
    pub interferers: &'a [Interferer],
}

/// Decides a frame's fate given a uniform draw `u ∈ [0, 1)`.
///
/// Returns the outcome and the success probability used (0 when the frame
/// never reached the bit-error stage).
pub fn decide_reception(input: &ReceptionInput<'_>, params: &RadioParams<f64>, u: f64) -> (ReceptionOutcome, f64) {
    if input.rx_dbm < params.sensitivity {
        return (ReceptionOutcome::BelowSensitivity, 0.0);
    }
    if input.receiver_transmitted {
        return (ReceptionOutcome::LostCollision, 0.0);
    }
    let interference = worst_interference_mw(input.start, input.end, input.interferers);
    let snr = snr_db(input.rx_dbm, params.noise_floor, interference);
    let p_ok = frame_success_probability(link_ber(snr, params), input.bits);
    if u < p_ok {
        (ReceptionOutcome::Delivered, p_ok)
    } else if interference >= db_to_linear(params.noise_floor) {
        (ReceptionOutcome::LostCollision, p_ok)
    } else {
        (ReceptionOutcome::LostNoise, p_ok)
    }
}

/// Half-duplex radio mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RadioMode {
    Idle,
    Transmitting(TxId),
    /// Number of frames currently arriving.
    Receiving(u32),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RadioState {
    pub mode: RadioMode,
    arrivals: u32,
}

impl RadioState {
    fn idle() -> Self {
        RadioState { mode: RadioMode::Idle, arrivals: 0 }
    }

    fn refresh(&mut self) {
        if !matches!(self.mode, RadioMode::Transmitting(_)) {
            self.mode = if self.arrivals > 0 { RadioMode::Receiving(self.arrivals) } else { RadioMode::Idle };
        }
    }

    pub fn is_transmitting(&self) -> bool {
        matches!(self.mode, RadioMode::Transmitting(_))
    }
}

/// Identifier of one transmission on the medium.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TxId(pub u64);

#[derive(Clone, Debug)]
pub struct Transmission {
    pub id: TxId,
    pub sender: NodeId,
    pub start: f64,
    pub end: f64,
    pub frame: Frame,
    /// Received power at every node (the sender's own slot is unused).
    pub rx_dbm: Vec<f64>,
}

/// Result of starting a transmission.
#[derive(Clone, Debug)]
pub struct TxStart {
    pub id: TxId,
    pub end: f64,
    /// Receivers that can plausibly decode the frame, in node order.
    pub receivers: Vec<NodeId>,
}

/// Fading samples further than this many standard deviations are treated as
/// impossible when deciding which receivers get arrival events.
const AUDIBILITY_SIGMAS: f64 = 6.0;

/// Shared radio channel of one trial.
pub struct Medium {
    params: RadioParams<f64>,
    mean_rx_dbm: Vec<Vec<f64>>,
    audible: Vec<Vec<NodeId>>,
    states: Vec<RadioState>,
    active: VecDeque<Transmission>,
    next_id: u64,
    max_airtime: f64,
}

impl Medium {
    pub fn new(
        params: RadioParams<f64>,
        positions: &[Position<f64>],
        path_loss: &PathLossModel<f64>,
        fading_sigma: f64,
    ) -> Result<Self, RadioError> {
        let params = params.validated()?;
        let n = positions.len();
        let mut mean_rx_dbm = vec![vec![f64::NEG_INFINITY; n]; n];
        let mut audible = vec![Vec::new(); n];
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let d = positions[i].distance_to(&positions[j]);
                let rx = rx_power_dbm(params.tx_power, path_loss.loss_db(d)?, 0.0);
                mean_rx_dbm[i][j] = rx;
                if rx + AUDIBILITY_SIGMAS * fading_sigma >= params.sensitivity {
                    audible[i].push(j);
                }
            }
        }
        Ok(Medium {
            params,
            mean_rx_dbm,
            audible,
            states: vec![RadioState::idle(); n],
            active: VecDeque::new(),
            next_id: 0,
            max_airtime: 0.0,
        })
    }

    pub fn params(&self) -> &RadioParams<f64> {
        &self.params
    }

    pub fn node_count(&self) -> usize {
        self.states.len()
    }

    /// Received power without fading.
    pub fn mean_rx_dbm(&self, from: NodeId, to: NodeId) -> f64 {
        self.mean_rx_dbm[from][to]
    }

    /// Pairs whose fading-free received power clears the sensitivity.
    pub fn in_range(&self, from: NodeId, to: NodeId) -> bool {
        from != to && self.mean_rx_dbm[from][to] >= self.params.sensitivity
    }

    pub fn state(&self, node: NodeId) -> &RadioState {
        &self.states[node]
    }

    pub fn is_transmitting(&self, node: NodeId) -> bool {
        self.states[node].is_transmitting()
    }

    /// Puts `frame` on the air from `sender`. `fading_db(receiver)` supplies the
    /// per-receiver fast-fading draw and is called once per other node, in
    /// node order.
    pub fn begin_transmission(
        &mut self,
        now: f64,
        sender: NodeId,
        frame: Frame,
        mut fading_db: impl FnMut(NodeId) -> f64,
    ) -> Result<TxStart, RadioError> {
        if self.states[sender].is_transmitting() {
            return Err(RadioError::Busy(sender));
        }
        let airtime = frame.airtime(self.params.data_rate);
        let id = TxId(self.next_id);
        self.next_id += 1;
        self.max_airtime = self.max_airtime.max(airtime);
        let n = self.states.len();
        let mut rx_dbm = vec![f64::NEG_INFINITY; n];
        for (j, slot) in rx_dbm.iter_mut().enumerate() {
            if j != sender {
                *slot = self.mean_rx_dbm[sender][j] + fading_db(j);
            }
        }
        self.states[sender].mode = RadioMode::Transmitting(id);
        let end = now + airtime;
        self.active.push_back(Transmission { id, sender, start: now, end, frame, rx_dbm });
        Ok(TxStart { id, end, receivers: self.audible[sender].clone() })
    }

    pub fn end_transmission(&mut self, id: TxId) {
        if let Some(tx) = self.get(id) {
            let sender = tx.sender;
            if self.states[sender].mode == RadioMode::Transmitting(id) {
                self.states[sender].mode = RadioMode::Idle;
                self.states[sender].refresh();
            }
        }
    }

    pub fn arrival_start(&mut self, receiver: NodeId) {
        let state = &mut self.states[receiver];
        state.arrivals += 1;
        state.refresh();
    }

    pub fn get(&self, id: TxId) -> Option<&Transmission> {
        let first = self.active.front()?.id.0;
        let idx = id.0.checked_sub(first)? as usize;
        self.active.get(idx).filter(|t| t.id == id)
    }

    /// Finishes the arrival of transmission `id` at `receiver` and decides it.
    pub fn decide(&mut self, receiver: NodeId, id: TxId, u: f64) -> (ReceptionOutcome, Frame) {
        {
            let state = &mut self.states[receiver];
            state.arrivals = state.arrivals.saturating_sub(1);
            state.refresh();
        }
        let tx = self.get(id).expect("transmission pruned before its arrivals completed");
        let (start, end) = (tx.start, tx.end);
        let overlaps = |o: &Transmission| o.start < end && start < o.end;
        let receiver_transmitted = self.active.iter().any(|o| o.sender == receiver && overlaps(o));
        let interferers: Vec<Interferer> = self
            .active
            .iter()
            .filter(|o| o.id != id && o.sender != receiver && overlaps(o))
            .map(|o| Interferer { start: o.start, end: o.end, power_mw: db_to_linear(o.rx_dbm[receiver]) })
            .collect();
        let input = ReceptionInput {
            start,
            end,
            rx_dbm: tx.rx_dbm[receiver],
            bits: tx.frame.total_bits(),
            receiver_transmitted,
            interferers: &interferers,
        };
        let (outcome, _) = decide_reception(&input, &self.params, u);
        (outcome, tx.frame.clone())
    }

    /// Forgets transmissions that can no longer overlap any future decision.
    pub fn prune(&mut self, now: f64) {
        let horizon = now - self.max_airtime - 1e-9;
        while self.active.front().is_some_and(|t| t.end < horizon) {
            self.active.pop_front();
        }
    }
}
