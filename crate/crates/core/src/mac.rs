//! Medium access without carrier sensing: acknowledged unicast with timeout
//! and bounded retries, unacknowledged broadcast, and a FIFO transmit queue.
//!
//! [`Mac`] is a pure state machine. Every entry point appends the side effects
//! it wants (transmit a frame, arm or cancel a timer, deliver upward, report a
//! send result) to an action list that the network driver executes.

use std::collections::{BTreeMap, VecDeque};

use rand::Rng;
use thiserror::Error;

use crate::engine::NodeId;
use crate::radio::{Frame, FrameBody, MacDest};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MacError {
    #[error("transmit queue full")]
    QueueFull,
    #[error("node {0} cannot send a unicast frame to itself")]
    SelfAddressed(NodeId),
}

/// ACK timeout expressed in bits on the air.
pub const ACK_WAIT_BITS: f64 = 5120.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MacConfig {
    /// Seconds to wait for an ACK after a unicast transmission ends.
    pub ack_wait: f64,
    pub max_retries: u32,
    pub queue_capacity: usize,
    /// Total ACK frame length in bytes.
    pub ack_len: usize,
    /// Header bytes added to every non-ACK frame.
    pub header_len: usize,
    /// Recently seen sequence numbers remembered per origin.
    pub dedup_window: usize,
    /// Retry backoff is uniform in `[0, ack_wait·retry_backoff_fraction]`.
    pub retry_backoff_fraction: f64,
    /// Data frames wait uniform `[0, initial_backoff_max]` before their first attempt.
    pub initial_backoff_max: f64,
    /// Extra wait before the first attempt of a frame that follows an
    /// acknowledged unicast, so the receiver can forward what it just got.
    pub post_send_gap: f64,
}

impl MacConfig {
    /// Defaults with the ACK wait scaled to `data_rate` (5120 bits).
    pub fn for_data_rate(data_rate: f64) -> Self {
        MacConfig {
            ack_wait: ACK_WAIT_BITS / data_rate,
            max_retries: 4,
            queue_capacity: 16,
            ack_len: 5,
            header_len: 9,
            dedup_window: 8,
            retry_backoff_fraction: 0.25,
            initial_backoff_max: 0.5,
            post_send_gap: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TxQueueEntry {
    pub frame: Frame,
    pub retries_used: u32,
    pub enqueue_time: f64,
    /// Upper-layer correlation token echoed in [`MacAction::SendDone`].
    pub token: u64,
    attempts: u32,
    ready: bool,
}

impl TxQueueEntry {
    pub fn attempts(&self) -> u32 {
        self.attempts
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SendOutcome {
    /// Unicast acknowledged, or broadcast put on the air.
    Sent,
    /// No ACK after `1 + max_retries` transmissions.
    Failed,
}

#[derive(Clone, Debug, PartialEq)]
pub enum MacAction {
    Transmit(Frame),
    StartAckTimer(f64),
    CancelAckTimer,
    StartBackoff(f64),
    Deliver(Frame),
    SendDone {
        token: u64,
        dest: MacDest,
        outcome: SendOutcome,
        attempts: u32,
    },
    /// A unicast frame addressed to us was refused by the upper layer; no ACK sent.
    Rejected(Frame),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MacStats {
    /// Data and broadcast send requests, including refused ones.
    pub submitted: u64,
    pub succeeded: u64,
    pub dropped_queue_full: u64,
    pub failed_retries: u64,
    pub data_transmissions: u64,
    pub ack_transmissions: u64,
    pub control_sent: u64,
    pub control_dropped: u64,
    pub delivered_up: u64,
    pub duplicates_suppressed: u64,
    /// Largest number of transmissions any single frame needed.
    pub max_attempts: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Phase {
    Idle,
    Backoff,
    TxData,
    AwaitAck { seqno: u32 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum InFlight {
    Ack,
    Control,
    Data,
}

pub struct Mac {
    id: NodeId,
    cfg: MacConfig,
    queue: VecDeque<TxQueueEntry>,
    acks: VecDeque<Frame>,
    control: Option<Frame>,
    phase: Phase,
    in_flight: Option<InFlight>,
    next_seqno: u32,
    after_ack: bool,
    seen: BTreeMap<NodeId, VecDeque<u32>>,
    stats: MacStats,
}

impl Mac {
    pub fn new(id: NodeId, cfg: MacConfig) -> Self {
        assert!(cfg.queue_capacity >= 1, "queue capacity must be at least one frame");
        Mac {
            id,
            cfg,
            queue: VecDeque::new(),
            acks: VecDeque::new(),
            control: None,
            phase: Phase::Idle,
            in_flight: None,
            next_seqno: 0,
            after_ack: false,
            seen: BTreeMap::new(),
            stats: MacStats::default(),
        }
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn config(&self) -> &MacConfig {
        &self.cfg
    }

    pub fn stats(&self) -> &MacStats {
        &self.stats
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    pub fn queue(&self) -> impl Iterator<Item = &TxQueueEntry> {
        self.queue.iter()
    }

    pub fn has_room(&self) -> bool {
        self.queue.len() < self.cfg.queue_capacity
    }

    /// Whether a transmission of ours is currently on the air.
    pub fn radio_busy(&self) -> bool {
        self.in_flight.is_some()
    }

    fn take_seqno(&mut self) -> u32 {
        let s = self.next_seqno;
        self.next_seqno = self.next_seqno.wrapping_add(1);
        s
    }

    fn make_frame(&mut self, dest: MacDest, payload_len: usize, body: FrameBody) -> Frame {
        Frame {
            origin: self.id,
            mac_dest: dest,
            seqno: self.take_seqno(),
            payload_len,
            header_len: self.cfg.header_len,
            body,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn enqueue<R: Rng + ?Sized>(
        &mut self,
        now: f64,
        dest: MacDest,
        payload_len: usize,
        body: FrameBody,
        token: u64,
        rng: &mut R,
        out: &mut Vec<MacAction>,
    ) -> Result<u32, MacError> {
        self.stats.submitted += 1;
        if !self.has_room() {
            self.stats.dropped_queue_full += 1;
            return Err(MacError::QueueFull);
        }
        let frame = self.make_frame(dest, payload_len, body);
        let seqno = frame.seqno;
        let ready = self.cfg.initial_backoff_max <= 0.0 && self.cfg.post_send_gap <= 0.0;
        self.queue.push_back(TxQueueEntry { frame, retries_used: 0, enqueue_time: now, token, attempts: 0, ready });
        self.try_start(rng, out);
        Ok(seqno)
    }

    /// Queues an acknowledged unicast. Returns the MAC sequence number.
    #[allow(clippy::too_many_arguments)]
    pub fn send_unicast<R: Rng + ?Sized>(
        &mut self,
        now: f64,
        dest: NodeId,
        payload_len: usize,
        body: FrameBody,
        token: u64,
        rng: &mut R,
        out: &mut Vec<MacAction>,
    ) -> Result<u32, MacError> {
        if dest == self.id {
            return Err(MacError::SelfAddressed(dest));
        }
        self.enqueue(now, MacDest::Unicast(dest), payload_len, body, token, rng, out)
    }

    /// Queues a single unacknowledged broadcast.
    pub fn send_broadcast<R: Rng + ?Sized>(
        &mut self,
        now: f64,
        payload_len: usize,
        body: FrameBody,
        token: u64,
        rng: &mut R,
        out: &mut Vec<MacAction>,
    ) -> Result<u32, MacError> {
        self.enqueue(now, MacDest::Broadcast, payload_len, body, token, rng, out)
    }

    /// Control-plane broadcast (routing beacons) through a one-slot queue that
    /// bypasses the data queue.
    pub fn send_control<R: Rng + ?Sized>(
        &mut self,
        payload_len: usize,
        body: FrameBody,
        rng: &mut R,
        out: &mut Vec<MacAction>,
    ) -> Result<(), MacError> {
        if self.control.is_some() {
            self.stats.control_dropped += 1;
            return Err(MacError::QueueFull);
        }
        let frame = self.make_frame(MacDest::Broadcast, payload_len, body);
        self.control = Some(frame);
        self.try_start(rng, out);
        Ok(())
    }

    fn try_start<R: Rng + ?Sized>(&mut self, rng: &mut R, out: &mut Vec<MacAction>) {
        if self.in_flight.is_some() {
            return;
        }
        if let Some(ack) = self.acks.pop_front() {
            self.in_flight = Some(InFlight::Ack);
            self.stats.ack_transmissions += 1;
            out.push(MacAction::Transmit(ack));
            return;
        }
        if self.phase != Phase::Idle {
            return;
        }
        if let Some(frame) = self.control.take() {
            self.in_flight = Some(InFlight::Control);
            out.push(MacAction::Transmit(frame));
            return;
        }
        let Some(head) = self.queue.front_mut() else {
            return;
        };
        if !head.ready {
            head.ready = true;
            let gap = if self.after_ack { self.cfg.post_send_gap } else { 0.0 };
            self.after_ack = false;
            let wait = gap + rng.random::<f64>() * self.cfg.initial_backoff_max;
            if wait > 0.0 {
                self.phase = Phase::Backoff;
                out.push(MacAction::StartBackoff(wait));
                return;
            }
        }
        head.attempts += 1;
        self.stats.max_attempts = self.stats.max_attempts.max(head.attempts);
        self.stats.data_transmissions += 1;
        self.phase = Phase::TxData;
        self.in_flight = Some(InFlight::Data);
        out.push(MacAction::Transmit(head.frame.clone()));
    }

    fn finish_head(&mut self, outcome: SendOutcome, out: &mut Vec<MacAction>) {
        let entry = self.queue.pop_front().expect("finishing an empty queue");
        self.after_ack = outcome == SendOutcome::Sent && entry.frame.mac_dest != MacDest::Broadcast;
        match outcome {
            SendOutcome::Sent => self.stats.succeeded += 1,
            SendOutcome::Failed => self.stats.failed_retries += 1,
        }
        self.phase = Phase::Idle;
        out.push(MacAction::SendDone {
            token: entry.token,
            dest: entry.frame.mac_dest,
            outcome,
            attempts: entry.attempts,
        });
    }

    pub fn on_tx_complete<R: Rng + ?Sized>(&mut self, rng: &mut R, out: &mut Vec<MacAction>) {
        match self.in_flight.take() {
            Some(InFlight::Ack) | None => {}
            Some(InFlight::Control) => self.stats.control_sent += 1,
            Some(InFlight::Data) => {
                let head = self.queue.front().expect("data in flight without a queued frame");
                match head.frame.mac_dest {
                    MacDest::Broadcast => self.finish_head(SendOutcome::Sent, out),
                    MacDest::Unicast(_) => {
                        self.phase = Phase::AwaitAck { seqno: head.frame.seqno };
                        out.push(MacAction::StartAckTimer(self.cfg.ack_wait));
                    }
                }
            }
        }
        self.try_start(rng, out);
    }

    pub fn on_ack_timeout<R: Rng + ?Sized>(&mut self, rng: &mut R, out: &mut Vec<MacAction>) {
        if !matches!(self.phase, Phase::AwaitAck { .. }) {
            return;
        }
        let max_retries = self.cfg.max_retries;
        let head = self.queue.front_mut().expect("awaiting an ACK with an empty queue");
        if head.retries_used < max_retries {
            head.retries_used += 1;
            self.phase = Phase::Backoff;
            let wait = rng.random::<f64>() * self.cfg.ack_wait * self.cfg.retry_backoff_fraction;
            out.push(MacAction::StartBackoff(wait));
        } else {
            self.finish_head(SendOutcome::Failed, out);
            self.try_start(rng, out);
        }
    }

    pub fn on_backoff_done<R: Rng + ?Sized>(&mut self, rng: &mut R, out: &mut Vec<MacAction>) {
        if self.phase == Phase::Backoff {
            self.phase = Phase::Idle;
            self.try_start(rng, out);
        }
    }

    fn is_duplicate(&self, origin: NodeId, seqno: u32) -> bool {
        self.seen.get(&origin).is_some_and(|w| w.contains(&seqno))
    }

    fn remember(&mut self, origin: NodeId, seqno: u32) {
        let window = self.seen.entry(origin).or_default();
        window.push_back(seqno);
        while window.len() > self.cfg.dedup_window {
            window.pop_front();
        }
    }

    fn queue_ack(&mut self, data: &Frame) {
        self.acks.push_back(Frame {
            origin: self.id,
            mac_dest: MacDest::Unicast(data.origin),
            seqno: data.seqno,
            payload_len: 0,
            header_len: self.cfg.ack_len,
            body: FrameBody::Ack,
        });
    }

    /// Handles a frame that passed the reception decision. `accept` is asked
    /// before a new unicast frame is acknowledged; refusing it suppresses the ACK.
    pub fn on_frame<R: Rng + ?Sized>(
        &mut self,
        frame: Frame,
        accept: impl FnOnce(&Frame) -> bool,
        rng: &mut R,
        out: &mut Vec<MacAction>,
    ) {
        if frame.is_ack() {
            if frame.mac_dest != MacDest::Unicast(self.id) {
                return;
            }
            if let (Phase::AwaitAck { seqno }, Some(head)) = (self.phase, self.queue.front()) {
                if seqno == frame.seqno && head.frame.mac_dest == MacDest::Unicast(frame.origin) {
                    out.push(MacAction::CancelAckTimer);
                    self.finish_head(SendOutcome::Sent, out);
                    self.try_start(rng, out);
                }
            }
            return;
        }
        match frame.mac_dest {
            MacDest::Broadcast => {
                self.stats.delivered_up += 1;
                out.push(MacAction::Deliver(frame));
            }
            MacDest::Unicast(dest) if dest == self.id => {
                if self.is_duplicate(frame.origin, frame.seqno) {
                    self.stats.duplicates_suppressed += 1;
                    self.queue_ack(&frame);
                    self.try_start(rng, out);
                } else if accept(&frame) {
                    self.remember(frame.origin, frame.seqno);
                    self.queue_ack(&frame);
                    self.stats.delivered_up += 1;
                    out.push(MacAction::Deliver(frame));
                    self.try_start(rng, out);
                } else {
                    out.push(MacAction::Rejected(frame));
                }
            }
            MacDest::Unicast(_) => {}
        }
    }

    /// Re-addresses queued unicast frames bound for `from` that have not been
    /// transmitted yet, letting `update` rewrite each one.
    pub fn redirect(&mut self, from: NodeId, to: NodeId, mut update: impl FnMut(&mut Frame) -> bool) {
        for entry in self.queue.iter_mut().filter(|e| e.attempts == 0) {
            if entry.frame.mac_dest == MacDest::Unicast(from) && update(&mut entry.frame) {
                entry.frame.mac_dest = MacDest::Unicast(to);
            }
        }
    }

    /// `submitted == succeeded + dropped + failed + queued` must always hold.
    pub fn conservation_holds(&self) -> bool {
        let s = &self.stats;
        s.submitted == s.succeeded + s.dropped_queue_full + s.failed_retries + self.queue.len() as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{Purpose, RngStream, StreamId};
    use crate::radio::AppPayload;

    fn rng() -> RngStream {
        RngStream::new(5, StreamId { trial: 0, node: 0, purpose: Purpose::MacBackoff })
    }

    fn cfg() -> MacConfig {
        MacConfig { initial_backoff_max: 0.0, post_send_gap: 0.0, ..MacConfig::for_data_rate(3000.0) }
    }

    fn body(origin: NodeId, seq: u32) -> FrameBody {
        FrameBody::App(AppPayload { origin, seq, created_at: 0.0 })
    }

    fn transmitted(out: &[MacAction]) -> Vec<Frame> {
        out.iter()
            .filter_map(|a| match a {
                MacAction::Transmit(f) => Some(f.clone()),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn default_ack_wait_is_5120_bits() {
        let c = MacConfig::for_data_rate(3000.0);
        assert!((c.ack_wait - 1.706_666_666).abs() < 1e-6);
        assert_eq!((c.max_retries, c.queue_capacity, c.ack_len), (4, 16, 5));
    }

    #[test]
    fn perfect_channel_unicast_exchange() {
        let mut r = rng();
        let mut a = Mac::new(0, cfg());
        let mut b = Mac::new(1, cfg());
        let mut out = Vec::new();
        a.send_unicast(0.0, 1, 10, body(0, 0), 77, &mut r, &mut out).unwrap();
        let data = transmitted(&out).pop().unwrap();
        assert_eq!(data.mac_dest, MacDest::Unicast(1));
        out.clear();
        a.on_tx_complete(&mut r, &mut out);
        assert_eq!(out, vec![MacAction::StartAckTimer(a.config().ack_wait)]);

        let mut bout = Vec::new();
        b.on_frame(data, |_| true, &mut r, &mut bout);
        assert!(matches!(bout[0], MacAction::Deliver(_)));
        let ack = transmitted(&bout).pop().unwrap();
        assert!(ack.is_ack());
        assert_eq!(ack.header_len, 5);

        out.clear();
        a.on_frame(ack, |_| true, &mut r, &mut out);
        assert_eq!(out[0], MacAction::CancelAckTimer);
        assert_eq!(
            out[1],
            MacAction::SendDone { token: 77, dest: MacDest::Unicast(1), outcome: SendOutcome::Sent, attempts: 1 }
        );
        assert_eq!(a.stats().data_transmissions, 1);
        assert_eq!(b.stats().ack_transmissions, 1);
        assert!(a.conservation_holds());
    }

    #[test]
    fn deaf_receiver_exhausts_retries() {
        let mut r = rng();
        let mut a = Mac::new(0, cfg());
        let mut out = Vec::new();
        a.send_unicast(0.0, 1, 10, body(0, 0), 1, &mut r, &mut out).unwrap();
        let mut done = None;
        for _ in 0..20 {
            out.clear();
            a.on_tx_complete(&mut r, &mut out);
            out.clear();
            a.on_ack_timeout(&mut r, &mut out);
            if let Some(MacAction::SendDone { outcome, attempts, .. }) = out.first() {
                done = Some((*outcome, *attempts));
                break;
            }
            assert!(matches!(out[0], MacAction::StartBackoff(w) if (0.0..=a.config().ack_wait / 4.0).contains(&w)));
            out.clear();
            a.on_backoff_done(&mut r, &mut out);
        }
        assert_eq!(done, Some((SendOutcome::Failed, 5)));
        assert_eq!(a.stats().data_transmissions, 5);
        assert_eq!(a.stats().failed_retries, 1);
        assert!(a.conservation_holds());
    }

    #[test]
    fn queue_capacity_one_rejects_second_send() {
        // t=0 first send goes on air; t=0.2 it is awaiting its ACK and the
        // single slot is still occupied, so the second send is refused.
        let mut r = rng();
        let mut a = Mac::new(0, MacConfig { queue_capacity: 1, ..cfg() });
        let mut out = Vec::new();
        a.send_unicast(0.0, 1, 10, body(0, 0), 1, &mut r, &mut out).unwrap();
        a.on_tx_complete(&mut r, &mut out);
        assert_eq!(a.send_unicast(0.2, 1, 10, body(0, 1), 2, &mut r, &mut out), Err(MacError::QueueFull));
        assert_eq!(a.stats().dropped_queue_full, 1);
        assert!(a.conservation_holds());
    }

    #[test]
    fn self_addressed_unicast_rejected() {
        let mut r = rng();
        let mut a = Mac::new(3, cfg());
        assert_eq!(a.send_unicast(0.0, 3, 1, body(3, 0), 0, &mut r, &mut Vec::new()), Err(MacError::SelfAddressed(3)));
    }

    #[test]
    fn broadcast_completes_without_ack() {
        let mut r = rng();
        let mut a = Mac::new(0, cfg());
        let mut out = Vec::new();
        a.send_broadcast(0.0, 15, body(0, 0), 9, &mut r, &mut out).unwrap();
        assert_eq!(transmitted(&out)[0].mac_dest, MacDest::Broadcast);
        out.clear();
        a.on_tx_complete(&mut r, &mut out);
        assert!(matches!(out[0], MacAction::SendDone { outcome: SendOutcome::Sent, attempts: 1, .. }));
        assert!(!out.iter().any(|a| matches!(a, MacAction::StartAckTimer(_))));
    }

    #[test]
    fn duplicates_are_acked_but_not_redelivered() {
        let mut r = rng();
        let mut b = Mac::new(1, cfg());
        let frame = Frame {
            origin: 0,
            mac_dest: MacDest::Unicast(1),
            seqno: 4,
            payload_len: 10,
            header_len: 9,
            body: body(0, 0),
        };
        let mut out = Vec::new();
        b.on_frame(frame.clone(), |_| true, &mut r, &mut out);
        b.on_tx_complete(&mut r, &mut out);
        out.clear();
        b.on_frame(frame, |_| panic!("duplicate offered upward"), &mut r, &mut out);
        assert!(!out.iter().any(|a| matches!(a, MacAction::Deliver(_))));
        assert!(transmitted(&out)[0].is_ack());
        assert_eq!(b.stats().delivered_up, 1);
        assert_eq!(b.stats().duplicates_suppressed, 1);
    }

    #[test]
    fn broadcast_delivered_without_ack_and_foreign_unicast_ignored() {
        let mut r = rng();
        let mut b = Mac::new(1, cfg());
        let mut out = Vec::new();
        let bcast = Frame {
            origin: 0,
            mac_dest: MacDest::Broadcast,
            seqno: 0,
            payload_len: 10,
            header_len: 9,
            body: body(0, 0),
        };
        b.on_frame(bcast.clone(), |_| true, &mut r, &mut out);
        assert_eq!(out, vec![MacAction::Deliver(bcast.clone())]);
        out.clear();
        let foreign = Frame { mac_dest: MacDest::Unicast(2), ..bcast };
        b.on_frame(foreign, |_| true, &mut r, &mut out);
        assert!(out.is_empty());
    }

    #[test]
    fn refused_frames_are_not_acknowledged() {
        let mut r = rng();
        let mut b = Mac::new(1, cfg());
        let frame = Frame {
            origin: 0,
            mac_dest: MacDest::Unicast(1),
            seqno: 0,
            payload_len: 10,
            header_len: 9,
            body: body(0, 0),
        };
        let mut out = Vec::new();
        b.on_frame(frame.clone(), |_| false, &mut r, &mut out);
        assert_eq!(out, vec![MacAction::Rejected(frame.clone())]);
        // Refusal is not remembered: a retry may be accepted later.
        out.clear();
        b.on_frame(frame, |_| true, &mut r, &mut out);
        assert!(matches!(out[0], MacAction::Deliver(_)));
    }

    #[test]
    fn acks_jump_ahead_of_data() {
        let mut r = rng();
        let mut b = Mac::new(1, cfg());
        let mut out = Vec::new();
        b.send_unicast(0.0, 2, 10, body(1, 0), 0, &mut r, &mut out).unwrap();
        b.send_unicast(0.0, 2, 10, body(1, 1), 1, &mut r, &mut out).unwrap();
        b.on_tx_complete(&mut r, &mut out);
        out.clear();
        let incoming = Frame {
            origin: 0,
            mac_dest: MacDest::Unicast(1),
            seqno: 0,
            payload_len: 10,
            header_len: 9,
            body: body(0, 0),
        };
        b.on_frame(incoming, |_| true, &mut r, &mut out);
        let sent = transmitted(&out);
        assert_eq!(sent.len(), 1);
        assert!(sent[0].is_ack());
    }

    #[test]
    fn initial_backoff_precedes_first_attempt() {
        let mut r = rng();
        let mut a = Mac::new(0, MacConfig::for_data_rate(3000.0));
        let mut out = Vec::new();
        a.send_broadcast(0.0, 10, body(0, 0), 0, &mut r, &mut out).unwrap();
        assert!(matches!(out[..], [MacAction::StartBackoff(w)] if (0.0..=0.5).contains(&w)));
        out.clear();
        a.on_backoff_done(&mut r, &mut out);
        assert_eq!(transmitted(&out).len(), 1);
    }

    #[test]
    fn frame_after_acked_unicast_waits_for_the_gap() {
        let mut r = rng();
        let c = MacConfig { initial_backoff_max: 0.0, post_send_gap: 0.2, ..MacConfig::for_data_rate(3000.0) };
        let mut a = Mac::new(0, c);
        let mut out = Vec::new();
        a.send_unicast(0.0, 1, 10, body(0, 0), 0, &mut r, &mut out).unwrap();
        a.send_unicast(0.0, 1, 10, body(0, 1), 1, &mut r, &mut out).unwrap();
        let first = transmitted(&out).pop().unwrap();
        out.clear();
        a.on_tx_complete(&mut r, &mut out);
        out.clear();
        let ack = Frame {
            origin: 1,
            mac_dest: MacDest::Unicast(0),
            seqno: first.seqno,
            payload_len: 0,
            header_len: 5,
            body: FrameBody::Ack,
        };
        a.on_frame(ack, |_| true, &mut r, &mut out);
        assert_eq!(out.last(), Some(&MacAction::StartBackoff(0.2)));
    }

    #[test]
    fn stale_ack_is_ignored() {
        let mut r = rng();
        let mut a = Mac::new(0, cfg());
        let mut out = Vec::new();
        a.send_unicast(0.0, 1, 10, body(0, 0), 0, &mut r, &mut out).unwrap();
        a.on_tx_complete(&mut r, &mut out);
        out.clear();
        let wrong = Frame {
            origin: 2,
            mac_dest: MacDest::Unicast(0),
            seqno: 0,
            payload_len: 0,
            header_len: 5,
            body: FrameBody::Ack,
        };
        a.on_frame(wrong, |_| true, &mut r, &mut out);
        assert!(out.is_empty());
    }

    #[test]
    fn redirect_rewrites_untransmitted_frames_only() {
        let mut r = rng();
        let mut a = Mac::new(0, cfg());
        let mut out = Vec::new();
        a.send_unicast(0.0, 1, 10, body(0, 0), 0, &mut r, &mut out).unwrap();
        a.send_unicast(0.0, 1, 10, body(0, 1), 1, &mut r, &mut out).unwrap();
        a.redirect(1, 2, |_| true);
        let dests: Vec<MacDest> = a.queue().map(|e| e.frame.mac_dest).collect();
        assert_eq!(dests, vec![MacDest::Unicast(1), MacDest::Unicast(2)]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        #[derive(Clone, Debug)]
        enum Step {
            Send(bool),
            TxComplete,
            Timeout,
            Backoff,
            Ack,
            Incoming(u32),
        }

        fn step() -> impl Strategy<Value = Step> {
            prop_oneof![
                any::<bool>().prop_map(Step::Send),
                Just(Step::TxComplete),
                Just(Step::Timeout),
                Just(Step::Backoff),
                Just(Step::Ack),
                (0u32..20).prop_map(Step::Incoming),
            ]
        }

        proptest! {
            #[test]
            fn conservation_and_retry_bound(steps in proptest::collection::vec(step(), 1..300)) {
                let mut r = rng();
                let c = MacConfig { queue_capacity: 3, max_retries: 2, ..MacConfig::for_data_rate(3000.0) };
                let mut mac = Mac::new(0, c);
                let mut out = Vec::new();
                for s in steps {
                    out.clear();
                    match s {
                        Step::Send(true) => { let _ = mac.send_unicast(0.0, 1, 10, body(0, 0), 0, &mut r, &mut out); }
                        Step::Send(false) => { let _ = mac.send_broadcast(0.0, 10, body(0, 0), 0, &mut r, &mut out); }
                        Step::TxComplete => if mac.radio_busy() { mac.on_tx_complete(&mut r, &mut out) },
                        Step::Timeout => mac.on_ack_timeout(&mut r, &mut out),
                        Step::Backoff => mac.on_backoff_done(&mut r, &mut out),
                        Step::Ack => {
                            let head_seq = mac.queue().next().map(|h| h.frame.seqno);
                            if let Some(seqno) = head_seq {
                                let ack = Frame { origin: 1, mac_dest: MacDest::Unicast(0), seqno, payload_len: 0, header_len: 5, body: FrameBody::Ack };
                                mac.on_frame(ack, |_| true, &mut r, &mut out);
                            }
                        }
                        Step::Incoming(seq) => {
                            let f = Frame { origin: 2, mac_dest: MacDest::Unicast(0), seqno: seq, payload_len: 10, header_len: 9, body: body(2, seq) };
                            mac.on_frame(f, |_| true, &mut r, &mut out);
                        }
                    }
                    prop_assert!(mac.conservation_holds());
                    prop_assert!(mac.stats().max_attempts <= 1 + c.max_retries);
                }
            }
        }
    }
}
