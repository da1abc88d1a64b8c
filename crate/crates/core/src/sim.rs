//! Single-flow discrete-event simulation.
//!
//! Topology: sender -> qdisc -> bottleneck link -> receiver, with ACKs
//! returning over an uncongested path. The sender sits directly at the
//! bottleneck, so a packet reaches the qdisc at its send time. The whole
//! round-trip propagation delay is applied between the end of serialization
//! and the ACK reaching the sender.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;

use rand::SeedableRng;
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{EwmaBank, FeatureVector, WarmupRule};
use crate::mlp::Mlp;
use crate::qdisc::{EnqueueResult, QdiscKind, QueueState};
use crate::time::SimTime;
use crate::transport::{BicParams, Cca, Packet, Receiver, SenderState, PACKET_SIZE};

/// Upper clamp for controller-chosen caps.
pub const MAX_LFQ_CAP: u32 = 1000;
pub const DEFAULT_SAMPLE_INTERVAL: u32 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub bandwidth_mbps: f64,
    /// Round-trip propagation delay.
    pub delay_ms: f64,
    pub duration_s: f64,
    pub cca: Cca,
    pub seed: u64,
    pub alpha: f64,
    pub sample_interval: u32,
}

impl FlowConfig {
    pub fn new(bandwidth_mbps: f64, delay_ms: f64, duration_s: f64, cca: Cca, seed: u64) -> Self {
        FlowConfig {
            bandwidth_mbps,
            delay_ms,
            duration_s,
            cca,
            seed,
            alpha: 0.0,
            sample_interval: DEFAULT_SAMPLE_INTERVAL,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.bandwidth_mbps) {
            return Err(Error::InvalidConfig(format!(
                "bandwidth must be positive, got {}",
                self.bandwidth_mbps
            )));
        }
        if !positive(self.delay_ms) {
            return Err(Error::InvalidConfig(format!(
                "delay must be positive, got {}",
                self.delay_ms
            )));
        }
        if !positive(self.duration_s) {
            return Err(Error::InvalidConfig(format!(
                "duration must be positive, got {}",
                self.duration_s
            )));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "alpha must be non-negative, got {}",
                self.alpha
            )));
        }
        if self.sample_interval == 0 {
            return Err(Error::InvalidConfig("sample interval must be at least 1".into()));
        }
        Ok(())
    }

    /// Bandwidth-delay product in packets.
    pub fn bdp_packets(&self) -> f64 {
        self.bandwidth_mbps * 1e6 * self.delay_ms * 1e-3 / (8.0 * PACKET_SIZE as f64)
    }

    /// Serialization time of one packet on the bottleneck.
    pub fn service_time(&self) -> SimTime {
        let us = (PACKET_SIZE as f64 * 8.0) / self.bandwidth_mbps;
        SimTime::from_micros((us.round() as u64).max(1))
    }

    pub fn delay(&self) -> SimTime {
        SimTime::from_millis_f64(self.delay_ms)
    }

    pub fn duration(&self) -> SimTime {
        SimTime::from_secs_f64(self.duration_s)
    }
}

/// Something that maps features to a (real-valued) cap.
pub trait CapPolicy: Sync {
    fn predict(&self, features: &FeatureVector) -> Result<f64>;
}

impl CapPolicy for Mlp {
    fn predict(&self, features: &FeatureVector) -> Result<f64> {
        self.forward(features.as_slice())
    }
}

/// Policy for simulations that never consult a controller.
pub struct NoPolicy;

impl CapPolicy for NoPolicy {
    fn predict(&self, _: &FeatureVector) -> Result<f64> {
        Err(Error::InvalidConfig(
            "controller consulted but no weights were supplied".into(),
        ))
    }
}

/// Rounds a controller output to a valid cap.
pub fn cap_from_output(y: f64) -> u32 {
    if y.is_nan() {
        return 1;
    }
    y.round().clamp(1.0, MAX_LFQ_CAP as f64) as u32
}

#[derive(Debug, Clone, PartialEq)]
pub enum EventKind {
    FlowStart,
    PacketArrival(Packet),
    TransmitComplete,
    AckDelivery { ack: u64, echo: SimTime },
    RetransmitTimer,
    InferenceDue,
    FlowEnd,
}

#[derive(Debug, Clone)]
pub struct Event {
    pub fire_at: SimTime,
    pub seq: u64,
    pub kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.fire_at == other.fire_at && self.seq == other.seq
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    // Reversed so that the max-heap pops the earliest event first.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.fire_at, other.seq).cmp(&(self.fire_at, self.seq))
    }
}

/// Time-ordered event queue with insertion-order tiebreak.
#[derive(Debug, Clone, Default)]
pub struct EventQueue {
    heap: BinaryHeap<Event>,
    next_seq: u64,
}

impl EventQueue {
    pub fn push(&mut self, fire_at: SimTime, kind: EventKind) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Event { fire_at, seq, kind });
    }

    pub fn peek_time(&self) -> Option<SimTime> {
        self.heap.peek().map(|e| e.fire_at)
    }

    pub fn pop(&mut self) -> Option<Event> {
        self.heap.pop()
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn clear(&mut self) {
        self.heap.clear();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceEvent {
    Enqueue,
    Dequeue,
    Drop,
    CapChange,
    Inference,
}

impl fmt::Display for TraceEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TraceEvent::Enqueue => "enqueue",
            TraceEvent::Dequeue => "dequeue",
            TraceEvent::Drop => "drop",
            TraceEvent::CapChange => "cap_change",
            TraceEvent::Inference => "inference",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub time: SimTime,
    pub event: TraceEvent,
    pub queue_len: usize,
    pub cap: Option<u32>,
    pub cwnd: f64,
    pub delivered_bytes: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct SimOptions {
    pub warmup: WarmupRule,
    pub bic: BicParams,
    pub trace: bool,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            warmup: WarmupRule::Linear,
            bic: BicParams::default(),
            trace: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowId(usize);

#[derive(Debug, Clone)]
struct Meter {
    start: SimTime,
    last: SimTime,
    queue_area: f64,
    cap_area: f64,
    capped_time: f64,
    max_queue: usize,
    min_queue: usize,
    delivered_start: u64,
    drops_start: u64,
}

/// Measurements over `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowStats {
    pub start: SimTime,
    pub end: SimTime,
    pub throughput_mbps: f64,
    /// Time-weighted mean queue length in packets.
    pub avg_queue: f64,
    pub max_queue: usize,
    pub min_queue: usize,
    /// Time-weighted mean cap; `None` if the queue was never capped.
    pub mean_cap: Option<f64>,
    pub drops: u64,
    pub delivered_bytes: u64,
}

impl WindowStats {
    pub fn duration_s(&self) -> f64 {
        (self.end.saturating_sub(self.start)).as_secs_f64()
    }

    pub fn utilization(&self, bandwidth_mbps: f64) -> f64 {
        self.throughput_mbps / bandwidth_mbps
    }
}

/// Packet accounting for conservation checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PacketCounts {
    pub sent: u64,
    pub transmitted: u64,
    pub dropped: u64,
    pub queued: u64,
    pub on_link: u64,
    pub pending_arrival: u64,
}

impl PacketCounts {
    pub fn conserved(&self) -> bool {
        self.sent == self.transmitted + self.dropped + self.queued + self.on_link + self.pending_arrival
    }
}

/// The complete simulated world. Cloning it forks the simulation.
#[derive(Debug, Clone)]
pub struct SimState {
    pub config: FlowConfig,
    pub qdisc: QdiscKind,
    clock: SimTime,
    events: EventQueue,
    pub rng: Pcg64,
    pub sender: SenderState,
    pub queue: QueueState,
    pub receiver: Receiver,
    pub bank: EwmaBank,
    link: Option<Packet>,
    service: SimTime,
    delay: SimTime,
    end: SimTime,
    arrivals: u64,
    pending_arrivals: u64,
    transmitted: u64,
    delivered_bytes: u64,
    inferences: u64,
    controller_active: bool,
    timer_armed: bool,
    finished: bool,
    meters: Vec<Meter>,
    trace: Option<Vec<TraceRow>>,
}

impl SimState {
    pub fn new(config: FlowConfig, qdisc: QdiscKind, options: SimOptions) -> Result<Self> {
        config.validate()?;
        let controller_active = qdisc == QdiscKind::LfqDynamic;
        let queue = QueueState::new(qdisc);
        let mut state = SimState {
            config,
            qdisc,
            clock: SimTime::ZERO,
            events: EventQueue::default(),
            rng: Pcg64::seed_from_u64(config.seed),
            sender: SenderState::new(config.cca, options.bic),
            receiver: Receiver::default(),
            bank: EwmaBank::new(SimTime::ZERO, options.warmup),
            link: None,
            service: config.service_time(),
            delay: config.delay(),
            end: config.duration(),
            arrivals: 0,
            pending_arrivals: 0,
            transmitted: 0,
            delivered_bytes: 0,
            inferences: 0,
            controller_active,
            timer_armed: false,
            finished: false,
            meters: Vec::new(),
            trace: options.trace.then(Vec::new),
            queue,
        };
        state.open_window();
        if controller_active {
            state.schedule(SimTime::ZERO, EventKind::InferenceDue);
        }
        state.schedule(SimTime::ZERO, EventKind::FlowStart);
        let end = state.end;
        state.schedule(end, EventKind::FlowEnd);
        Ok(state)
    }

    pub fn clock(&self) -> SimTime {
        self.clock
    }

    pub fn end_time(&self) -> SimTime {
        self.end
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    pub fn pending_events(&self) -> usize {
        self.events.len()
    }

    pub fn next_event_time(&self) -> Option<SimTime> {
        self.events.peek_time()
    }

    pub fn inferences(&self) -> u64 {
        self.inferences
    }

    pub fn arrivals(&self) -> u64 {
        self.arrivals
    }

    pub fn delivered_bytes(&self) -> u64 {
        self.delivered_bytes
    }

    pub fn controller_active(&self) -> bool {
        self.controller_active
    }

    pub fn trace(&self) -> Option<&[TraceRow]> {
        self.trace.as_deref()
    }

    pub fn take_trace(&mut self) -> Option<Vec<TraceRow>> {
        self.trace.take()
    }

    pub fn counts(&self) -> PacketCounts {
        PacketCounts {
            sent: self.sender.stats.sent,
            transmitted: self.transmitted,
            dropped: self.queue.drops,
            queued: self.queue.len() as u64,
            on_link: self.link.is_some() as u64,
            pending_arrival: self.pending_arrivals,
        }
    }

    /// Two independent copies of this state.
    pub fn fork(&self) -> (SimState, SimState) {
        (self.clone(), self.clone())
    }

    /// Adds an event. Scheduling in the past is a contract violation.
    pub fn schedule(&mut self, fire_at: SimTime, kind: EventKind) {
        assert!(
            fire_at >= self.clock,
            "event scheduled at {fire_at} before the clock {}",
            self.clock
        );
        self.events.push(fire_at, kind);
    }

    /// Fixes the cap for the rest of the flow and stops consulting the
    /// controller.
    pub fn freeze_cap(&mut self, cap: u32) {
        self.controller_active = false;
        self.apply_cap(cap.max(1));
    }

    /// Starts a new measurement window at the current clock.
    pub fn open_window(&mut self) -> WindowId {
        let len = self.queue.len();
        self.meters.push(Meter {
            start: self.clock,
            last: self.clock,
            queue_area: 0.0,
            cap_area: 0.0,
            capped_time: 0.0,
            max_queue: len,
            min_queue: len,
            delivered_start: self.delivered_bytes,
            drops_start: self.queue.drops,
        });
        WindowId(self.meters.len() - 1)
    }

    /// The window covering the whole flow so far.
    pub fn whole_flow(&self) -> WindowId {
        WindowId(0)
    }

    /// Measurements of a window up to the current clock.
    pub fn window_stats(&self, id: WindowId) -> WindowStats {
        let m = &self.meters[id.0];
        let tail = (self.clock.saturating_sub(m.last)).as_micros() as f64;
        let len = self.queue.len() as f64;
        let queue_area = m.queue_area + len * tail;
        let (cap_area, capped_time) = match self.queue.cap() {
            Some(c) => (m.cap_area + c as f64 * tail, m.capped_time + tail),
            None => (m.cap_area, m.capped_time),
        };
        let span = (self.clock.saturating_sub(m.start)).as_micros() as f64;
        let delivered = self.delivered_bytes - m.delivered_start;
        let (throughput_mbps, avg_queue) = if span > 0.0 {
            (delivered as f64 * 8.0 / span, queue_area / span)
        } else {
            (0.0, len)
        };
        let mean_cap = if capped_time > 0.0 {
            Some(cap_area / capped_time)
        } else {
            self.queue.cap().map(|c| c as f64)
        };
        WindowStats {
            start: m.start,
            end: self.clock,
            throughput_mbps,
            avg_queue,
            max_queue: m.max_queue,
            min_queue: m.min_queue,
            mean_cap,
            drops: self.queue.drops - m.drops_start,
            delivered_bytes: delivered,
        }
    }

    /// Processes every event with `fire_at <= t_stop`, then advances the
    /// clock to `t_stop`.
    pub fn run_until(&mut self, t_stop: SimTime, policy: &dyn CapPolicy) -> Result<()> {
        assert!(t_stop >= self.clock, "run_until into the past");
        while let Some(t) = self.events.peek_time() {
            if t > t_stop {
                break;
            }
            let ev = self.events.pop().expect("peeked");
            self.advance(ev.fire_at);
            self.handle(ev.kind, policy)?;
        }
        self.advance(t_stop);
        Ok(())
    }

    pub fn run_to_end(&mut self, policy: &dyn CapPolicy) -> Result<()> {
        let end = self.end;
        if self.clock < end {
            self.run_until(end, policy)?;
        } else {
            self.run_until(self.clock, policy)?;
        }
        Ok(())
    }

    /// Moves the clock forward, integrating queue length and cap.
    fn advance(&mut self, t: SimTime) {
        debug_assert!(t >= self.clock);
        let len = self.queue.len() as f64;
        let cap = self.queue.cap();
        for m in &mut self.meters {
            let dt = (t.saturating_sub(m.last)).as_micros() as f64;
            m.queue_area += len * dt;
            if let Some(c) = cap {
                m.cap_area += c as f64 * dt;
                m.capped_time += dt;
            }
            m.last = t;
        }
        self.clock = t;
    }

    fn observe_queue(&mut self) {
        let len = self.queue.len();
        for m in &mut self.meters {
            m.max_queue = m.max_queue.max(len);
            m.min_queue = m.min_queue.min(len);
        }
    }

    fn record(&mut self, event: TraceEvent) {
        if let Some(trace) = self.trace.as_mut() {
            trace.push(TraceRow {
                time: self.clock,
                event,
                queue_len: self.queue.len(),
                cap: self.queue.cap(),
                cwnd: self.sender.cwnd,
                delivered_bytes: self.delivered_bytes,
            });
        }
    }

    fn apply_cap(&mut self, cap: u32) {
        if self.queue.cap() != Some(cap) {
            self.queue.set_cap(cap);
            self.record(TraceEvent::CapChange);
        }
    }

    fn handle(&mut self, kind: EventKind, policy: &dyn CapPolicy) -> Result<()> {
        if self.finished {
            return Ok(());
        }
        match kind {
            EventKind::FlowStart => {
                let mut out = Vec::new();
                self.sender.start(self.clock, &mut out);
                self.emit(out);
            }
            EventKind::PacketArrival(p) => self.on_arrival(p, policy)?,
            EventKind::TransmitComplete => self.on_transmit_complete(),
            EventKind::AckDelivery { ack, echo } => {
                let mut out = Vec::new();
                self.sender.on_ack(ack, echo, self.clock, &mut out);
                self.emit(out);
            }
            EventKind::RetransmitTimer => self.on_timer(),
            EventKind::InferenceDue => self.infer(policy)?,
            EventKind::FlowEnd => {
                self.finished = true;
                self.events.clear();
            }
        }
        Ok(())
    }

    fn emit(&mut self, packets: Vec<Packet>) {
        let now = self.clock;
        for p in packets {
            self.pending_arrivals += 1;
            self.schedule(now, EventKind::PacketArrival(p));
        }
        self.arm_timer();
    }

    fn arm_timer(&mut self) {
        if !self.timer_armed && self.sender.in_flight() > 0 {
            let at = (self.sender.last_progress() + self.sender.rto()).max(self.clock);
            self.timer_armed = true;
            self.schedule(at, EventKind::RetransmitTimer);
        }
    }

    fn on_timer(&mut self) {
        self.timer_armed = false;
        if self.sender.in_flight() == 0 {
            return;
        }
        let deadline = self.sender.last_progress() + self.sender.rto();
        if self.clock >= deadline {
            let mut out = Vec::new();
            self.sender.on_timeout(self.clock, &mut out);
            self.emit(out);
        } else {
            self.arm_timer();
        }
    }

    fn on_arrival(&mut self, packet: Packet, policy: &dyn CapPolicy) -> Result<()> {
        let now = self.clock;
        self.pending_arrivals -= 1;
        self.arrivals += 1;
        let cap = self.queue.cap().map_or(0.0, |c| c as f64);
        match self.queue.enqueue(packet, now) {
            EnqueueResult::Accepted => {
                self.observe_queue();
                self.record(TraceEvent::Enqueue);
                self.start_link();
            }
            EnqueueResult::Dropped => {
                self.bank.update_on_drop(now);
                self.record(TraceEvent::Drop);
            }
        }
        self.bank.update_on_enqueue(now, self.queue.len(), cap);
        if self.controller_active && self.arrivals.is_multiple_of(self.config.sample_interval as u64) {
            self.infer(policy)?;
        }
        Ok(())
    }

    fn start_link(&mut self) {
        if self.link.is_some() || self.queue.is_empty() {
            return;
        }
        let now = self.clock;
        let mut dropped = Vec::new();
        let next = self.queue.dequeue(now, &mut dropped);
        for _ in &dropped {
            self.bank.update_on_drop(now);
            self.record(TraceEvent::Drop);
        }
        self.observe_queue();
        if let Some(p) = next {
            self.link = Some(p);
            self.bank.update_on_dequeue(now);
            self.record(TraceEvent::Dequeue);
            self.schedule(now + self.service, EventKind::TransmitComplete);
        }
    }

    fn on_transmit_complete(&mut self) {
        let p = self.link.take().expect("transmit complete with idle link");
        self.transmitted += 1;
        self.delivered_bytes += p.size as u64;
        let ack = self.receiver.on_packet(p.seq, p.sent_at);
        let at = self.clock + self.delay;
        self.schedule(
            at,
            EventKind::AckDelivery {
                ack: ack.ack,
                echo: ack.echo,
            },
        );
        self.start_link();
    }

    fn infer(&mut self, policy: &dyn CapPolicy) -> Result<()> {
        if !self.controller_active {
            return Ok(());
        }
        let y = policy.predict(&self.bank.snapshot())?;
        self.inferences += 1;
        self.record(TraceEvent::Inference);
        self.apply_cap(cap_from_output(y));
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Fixed(f64);

    impl CapPolicy for Fixed {
        fn predict(&self, _: &FeatureVector) -> Result<f64> {
            Ok(self.0)
        }
    }

    fn cfg() -> FlowConfig {
        FlowConfig::new(15.0, 15.0, 2.0, Cca::NewReno, 1)
    }

    #[test]
    fn event_queue_orders_by_time_then_insertion() {
        let mut q = EventQueue::default();
        q.push(SimTime::from_millis(2), EventKind::FlowEnd);
        q.push(SimTime::from_millis(1), EventKind::TransmitComplete);
        q.push(SimTime::from_millis(1), EventKind::InferenceDue);
        assert_eq!(q.pop().unwrap().kind, EventKind::TransmitComplete);
        assert_eq!(q.pop().unwrap().kind, EventKind::InferenceDue);
        assert_eq!(q.pop().unwrap().kind, EventKind::FlowEnd);
        assert!(q.pop().is_none());
    }

    #[test]
    fn bdp_and_service_time() {
        let c = cfg();
        assert!((c.bdp_packets() - 18.75).abs() < 1e-12);
        assert_eq!(c.service_time(), SimTime::from_micros(800));
    }

    #[test]
    fn invalid_configs() {
        let mut c = cfg();
        c.bandwidth_mbps = 0.0;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.sample_interval = 0;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.alpha = -1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn cap_rounding_and_clamp() {
        assert_eq!(cap_from_output(0.2), 1);
        assert_eq!(cap_from_output(-5.0), 1);
        assert_eq!(cap_from_output(34.5), 35);
        assert_eq!(cap_from_output(1e9), MAX_LFQ_CAP);
    }

    #[test]
    fn empty_run_advances_clock() {
        let mut s = SimState::new(cfg(), QdiscKind::Fifo(100), SimOptions::default()).unwrap();
        s.run_until(SimTime::from_millis(0), &NoPolicy).unwrap();
        assert_eq!(s.clock(), SimTime::ZERO);
        s.run_to_end(&NoPolicy).unwrap();
        assert_eq!(s.clock(), s.end_time());
        assert!(s.is_finished());
        assert_eq!(s.pending_events(), 0);
    }

    #[test]
    #[should_panic]
    fn scheduling_in_the_past_panics() {
        let mut s = SimState::new(cfg(), QdiscKind::Fifo(100), SimOptions::default()).unwrap();
        s.run_until(SimTime::from_millis(10), &NoPolicy).unwrap();
        s.schedule(SimTime::from_millis(5), EventKind::InferenceDue);
    }

    #[test]
    fn fifo_flow_fills_link() {
        let mut s = SimState::new(cfg(), QdiscKind::Fifo(100), SimOptions::default()).unwrap();
        s.run_to_end(&NoPolicy).unwrap();
        let w = s.window_stats(s.whole_flow());
        assert!(w.throughput_mbps > 12.0 && w.throughput_mbps <= 15.0, "{w:?}");
        assert!(w.max_queue <= 100);
        assert!(s.counts().conserved());
    }

    #[test]
    fn lfq_consults_policy() {
        let mut s = SimState::new(cfg(), QdiscKind::LfqDynamic, SimOptions::default()).unwrap();
        s.run_to_end(&Fixed(20.0)).unwrap();
        assert_eq!(s.queue.cap(), Some(20));
        assert!(s.inferences() > 100);
        assert!(s.window_stats(s.whole_flow()).max_queue <= 20);
    }

    #[test]
    fn frozen_cap_ignores_policy() {
        let mut s = SimState::new(cfg(), QdiscKind::LfqDynamic, SimOptions::default()).unwrap();
        s.freeze_cap(7);
        s.run_to_end(&NoPolicy).unwrap();
        assert_eq!(s.queue.cap(), Some(7));
        assert_eq!(s.inferences(), 0);
    }

    #[test]
    fn fork_children_match_parent() {
        let opts = SimOptions {
            trace: true,
            ..SimOptions::default()
        };
        let mut s = SimState::new(cfg(), QdiscKind::LfqDynamic, opts).unwrap();
        s.run_until(SimTime::from_millis(500), &Fixed(15.0)).unwrap();
        let (mut a, mut b) = s.fork();
        a.run_to_end(&Fixed(15.0)).unwrap();
        b.run_to_end(&Fixed(15.0)).unwrap();
        assert_eq!(a.trace(), b.trace());
        assert_eq!(a.window_stats(a.whole_flow()), b.window_stats(b.whole_flow()));
    }

    #[test]
    fn window_measures_only_its_span() {
        let mut s = SimState::new(cfg(), QdiscKind::Fifo(100), SimOptions::default()).unwrap();
        s.run_until(SimTime::from_secs_f64(1.0), &NoPolicy).unwrap();
        let w = s.open_window();
        s.run_to_end(&NoPolicy).unwrap();
        let stats = s.window_stats(w);
        assert_eq!(stats.start, SimTime::from_secs_f64(1.0));
        assert!((stats.duration_s() - 1.0).abs() < 1e-9);
        assert!(stats.delivered_bytes < s.delivered_bytes());
    }
}
