//! Packet-level TCP sender (New Reno or BIC window growth) and a cumulative-ACK
//! receiver.
//!
//! Windows are counted in packets. Loss is detected by three duplicate ACKs and
//! repaired with New Reno fast recovery: one retransmission per partial ACK and
//! window inflation by one packet per duplicate ACK while recovering. The
//! first two duplicate ACKs each release one new packet (limited transmit),
//! so a loss in a window of three or four packets still reaches the
//! fast-retransmit threshold. A retransmission timer covers the rare case where every outstanding packet is
//! lost (for example a dropped retransmission).

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::time::SimTime;

/// Fixed wire size of every data packet.
pub const PACKET_SIZE: u32 = 1500;
pub const INITIAL_CWND: f64 = 10.0;
pub const RENO_BETA: f64 = 0.5;

const DUP_ACK_THRESHOLD: u32 = 3;
const INITIAL_RTO: SimTime = SimTime::from_millis(1_000);
const MIN_RTO: SimTime = SimTime::from_millis(200);
const MAX_RTO: SimTime = SimTime::from_millis(60_000);
const MAX_BACKOFF: u32 = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Cca {
    NewReno,
    Bic,
}

impl Cca {
    pub const ALL: [Cca; 2] = [Cca::NewReno, Cca::Bic];
}

impl fmt::Display for Cca {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Cca::NewReno => "newreno",
            Cca::Bic => "bic",
        })
    }
}

impl FromStr for Cca {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace(['-', '_', ' '], "").as_str() {
            "newreno" | "reno" => Ok(Cca::NewReno),
            "bic" => Ok(Cca::Bic),
            other => Err(format!("unknown congestion control `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Packet {
    pub seq: u64,
    pub flow: u32,
    pub size: u32,
    /// When the sender emitted this copy; echoed back by the receiver.
    pub sent_at: SimTime,
    /// Set by the queue on admission.
    pub enqueue_time: SimTime,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    SlowStart,
    CongestionAvoidance,
    FastRecovery,
}

/// BIC tuning. `s_min`/`s_max` bound the per-RTT window increment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BicParams {
    pub beta: f64,
    pub s_max: f64,
    pub s_min: f64,
}

impl Default for BicParams {
    fn default() -> Self {
        BicParams {
            beta: 0.7,
            s_max: 32.0,
            s_min: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BicState {
    pub w_max: f64,
    pub w_min: f64,
    round_base: f64,
    round_target: f64,
    /// Last sequence number belonging to the current growth round.
    round_end: Option<u64>,
}

impl Default for BicState {
    fn default() -> Self {
        BicState {
            w_max: f64::INFINITY,
            w_min: 1.0,
            round_base: INITIAL_CWND,
            round_target: INITIAL_CWND,
            round_end: None,
        }
    }
}

/// Window after one round of BIC congestion avoidance starting at `cwnd`.
///
/// Below `w_max` this is a binary search step to the midpoint of
/// `[cwnd, w_max]`; above it the probe distance doubles each round. Both are
/// clamped to `[s_min, s_max]` packets per round.
pub fn bic_round_target(cwnd: f64, w_max: f64, params: &BicParams) -> f64 {
    let increment = if cwnd < w_max {
        (w_max - cwnd) / 2.0
    } else {
        cwnd - w_max
    };
    cwnd + increment.clamp(params.s_min, params.s_max)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SenderStats {
    pub sent: u64,
    pub retransmitted: u64,
    pub fast_retransmits: u64,
    pub timeouts: u64,
}

#[derive(Debug, Clone)]
pub struct SenderState {
    pub cca: Cca,
    pub bic_params: BicParams,
    pub cwnd: f64,
    pub ssthresh: f64,
    pub phase: Phase,
    pub bic: BicState,
    /// Next new sequence number to transmit (sequence numbers start at 1).
    pub next_seq: u64,
    /// Highest cumulatively acknowledged sequence number.
    pub high_ack: u64,
    pub dup_acks: u32,
    pub stats: SenderStats,
    highest_sent: u64,
    recover: Option<u64>,
    /// Extra window granted by duplicate ACKs during fast recovery.
    inflation: f64,
    srtt_us: Option<f64>,
    rttvar_us: f64,
    backoff: u32,
    last_progress: SimTime,
}

impl SenderState {
    pub fn new(cca: Cca, bic_params: BicParams) -> Self {
        SenderState {
            cca,
            bic_params,
            cwnd: INITIAL_CWND,
            ssthresh: f64::INFINITY,
            phase: Phase::SlowStart,
            bic: BicState::default(),
            next_seq: 1,
            high_ack: 0,
            dup_acks: 0,
            stats: SenderStats::default(),
            highest_sent: 0,
            recover: None,
            inflation: 0.0,
            srtt_us: None,
            rttvar_us: 0.0,
            backoff: 0,
            last_progress: SimTime::ZERO,
        }
    }

    /// Packets sent but not yet cumulatively acknowledged.
    pub fn in_flight(&self) -> u64 {
        (self.next_seq - 1).saturating_sub(self.high_ack)
    }

    pub fn last_progress(&self) -> SimTime {
        self.last_progress
    }

    pub fn srtt(&self) -> Option<SimTime> {
        self.srtt_us.map(|us| SimTime::from_micros(us.round() as u64))
    }

    pub fn rto(&self) -> SimTime {
        let base = match self.srtt_us {
            None => INITIAL_RTO,
            Some(srtt) => {
                let us = (srtt + 4.0 * self.rttvar_us).max(2.0 * srtt);
                SimTime::from_micros(us.round() as u64).max(MIN_RTO)
            }
        };
        SimTime::from_micros(base.as_micros() << self.backoff).min(MAX_RTO)
    }

    /// Emits the initial window.
    pub fn start(&mut self, now: SimTime, out: &mut Vec<Packet>) {
        self.last_progress = now;
        self.fill_window(now, out);
    }

    /// Processes a cumulative ACK for `acked_seq`, pushing any packets that
    /// become sendable onto `out`.
    pub fn on_ack(&mut self, acked_seq: u64, echo: SimTime, now: SimTime, out: &mut Vec<Packet>) {
        if acked_seq < self.high_ack {
            return;
        }
        if acked_seq > self.high_ack {
            let newly_acked = acked_seq - self.high_ack;
            self.high_ack = acked_seq;
            if self.next_seq <= acked_seq {
                self.next_seq = acked_seq + 1;
            }
            self.rtt_sample(now.saturating_sub(echo));
            self.backoff = 0;
            self.last_progress = now;

            if self.phase == Phase::FastRecovery {
                if self.recover.is_some_and(|r| acked_seq >= r) {
                    self.inflation = 0.0;
                    self.dup_acks = 0;
                    self.phase = self.growth_phase();
                } else {
                    // Partial ACK: the next hole is lost too.
                    self.inflation = (self.inflation - newly_acked as f64 + 1.0).max(0.0);
                    self.transmit(acked_seq + 1, now, out);
                }
            } else {
                self.dup_acks = 0;
                self.inflation = 0.0;
                for _ in 0..newly_acked {
                    self.grow();
                }
            }
        } else if self.in_flight() > 0 {
            self.dup_acks += 1;
            if self.phase == Phase::FastRecovery {
                self.inflation += 1.0;
            } else if self.dup_acks == DUP_ACK_THRESHOLD && self.recover.is_none_or(|r| acked_seq >= r) {
                self.on_loss_detected();
                self.stats.fast_retransmits += 1;
                self.recover = Some(self.next_seq - 1);
                self.inflation = DUP_ACK_THRESHOLD as f64;
                self.transmit(acked_seq + 1, now, out);
            } else if self.dup_acks < DUP_ACK_THRESHOLD {
                self.inflation = self.dup_acks as f64;
            }
        }
        self.fill_window(now, out);
    }

    /// Multiplicative decrease on a triple duplicate ACK; enters fast recovery.
    pub fn on_loss_detected(&mut self) {
        self.reduce_window();
        self.phase = Phase::FastRecovery;
    }

    /// Retransmission timeout: collapse to one packet and go back to the first
    /// unacknowledged sequence number.
    pub fn on_timeout(&mut self, now: SimTime, out: &mut Vec<Packet>) {
        self.stats.timeouts += 1;
        self.reduce_window();
        self.cwnd = 1.0;
        self.phase = self.growth_phase();
        self.inflation = 0.0;
        self.dup_acks = 0;
        self.recover = Some(self.next_seq - 1);
        self.next_seq = self.high_ack + 1;
        self.backoff = (self.backoff + 1).min(MAX_BACKOFF);
        self.last_progress = now;
        self.fill_window(now, out);
    }

    fn reduce_window(&mut self) {
        match self.cca {
            Cca::NewReno => {
                self.ssthresh = (self.cwnd * RENO_BETA).max(1.0);
                self.cwnd = self.ssthresh;
            }
            Cca::Bic => {
                self.bic.w_max = self.cwnd;
                self.cwnd = (self.cwnd * self.bic_params.beta).max(1.0);
                self.bic.w_min = self.cwnd;
                self.ssthresh = self.cwnd;
            }
        }
        self.bic.round_end = None;
    }

    fn growth_phase(&self) -> Phase {
        if self.cwnd < self.ssthresh {
            Phase::SlowStart
        } else {
            Phase::CongestionAvoidance
        }
    }

    /// Window growth for one newly acknowledged packet.
    fn grow(&mut self) {
        if self.cwnd < self.ssthresh {
            self.phase = Phase::SlowStart;
            self.cwnd += 1.0;
            if self.cwnd >= self.ssthresh {
                self.phase = Phase::CongestionAvoidance;
            }
            return;
        }
        self.phase = Phase::CongestionAvoidance;
        match self.cca {
            Cca::NewReno => self.cwnd += 1.0 / self.cwnd,
            Cca::Bic => {
                let round_over = self.bic.round_end.is_none_or(|end| self.high_ack > end);
                if round_over {
                    self.bic.w_min = self.cwnd;
                    self.bic.round_base = self.cwnd;
                    self.bic.round_target = bic_round_target(self.cwnd, self.bic.w_max, &self.bic_params);
                    self.bic.round_end = Some(self.next_seq - 1);
                }
                let step = (self.bic.round_target - self.bic.round_base) / self.bic.round_base;
                self.cwnd = (self.cwnd + step).min(self.bic.round_target);
            }
        }
    }

    fn fill_window(&mut self, now: SimTime, out: &mut Vec<Packet>) {
        let window = self.cwnd + self.inflation;
        while (self.in_flight() as f64) < window {
            let seq = self.next_seq;
            self.next_seq += 1;
            self.transmit(seq, now, out);
        }
    }

    fn transmit(&mut self, seq: u64, now: SimTime, out: &mut Vec<Packet>) {
        if seq <= self.highest_sent {
            self.stats.retransmitted += 1;
        } else {
            self.highest_sent = seq;
        }
        self.stats.sent += 1;
        out.push(Packet {
            seq,
            flow: 0,
            size: PACKET_SIZE,
            sent_at: now,
            enqueue_time: now,
        });
    }

    fn rtt_sample(&mut self, rtt: SimTime) {
        let r = rtt.as_micros() as f64;
        match self.srtt_us {
            None => {
                self.srtt_us = Some(r);
                self.rttvar_us = r / 2.0;
            }
            Some(srtt) => {
                self.rttvar_us = 0.75 * self.rttvar_us + 0.25 * (srtt - r).abs();
                self.srtt_us = Some(0.875 * srtt + 0.125 * r);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ack {
    /// Highest in-order sequence number received.
    pub ack: u64,
    /// `sent_at` of the packet that triggered this ACK.
    pub echo: SimTime,
    pub duplicate: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Receiver {
    high: u64,
    pending: BTreeSet<u64>,
    pub received: u64,
    pub duplicates: u64,
}

impl Receiver {
    pub fn highest_in_order(&self) -> u64 {
        self.high
    }

    /// Accepts a data packet and produces the cumulative ACK for it.
    pub fn on_packet(&mut self, seq: u64, sent_at: SimTime) -> Ack {
        self.received += 1;
        let before = self.high;
        if seq == self.high + 1 {
            self.high = seq;
            while self.pending.remove(&(self.high + 1)) {
                self.high += 1;
            }
        } else if seq > self.high + 1 {
            if !self.pending.insert(seq) {
                self.duplicates += 1;
            }
        } else {
            self.duplicates += 1;
        }
        Ack {
            ack: self.high,
            echo: sent_at,
            duplicate: self.high == before,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ca_sender(cca: Cca, cwnd: f64) -> SenderState {
        let mut s = SenderState::new(cca, BicParams::default());
        s.cwnd = cwnd;
        s.ssthresh = cwnd;
        s.phase = Phase::CongestionAvoidance;
        s
    }

    /// Puts `window` packets in flight starting after `high_ack` without
    /// going through the send path.
    fn with_flight(mut s: SenderState, high_ack: u64, window: u64) -> SenderState {
        s.high_ack = high_ack;
        s.next_seq = high_ack + window + 1;
        s.highest_sent = s.next_seq - 1;
        s
    }

    #[test]
    fn reno_slow_start_adds_one_per_ack() {
        let mut s = SenderState::new(Cca::NewReno, BicParams::default());
        let mut out = Vec::new();
        s.start(SimTime::ZERO, &mut out);
        assert_eq!(out.len(), 10);
        out.clear();
        s.on_ack(1, SimTime::ZERO, SimTime::from_millis(10), &mut out);
        assert_eq!(s.cwnd, 11.0);
        // One slot freed plus one from growth.
        assert_eq!(out.len(), 2);
        assert_eq!(s.phase, Phase::SlowStart);
    }

    #[test]
    fn reno_congestion_avoidance_adds_about_one_per_rtt() {
        let mut s = with_flight(ca_sender(Cca::NewReno, 10.0), 0, 10);
        let mut out = Vec::new();
        for ack in 1..=10 {
            s.on_ack(ack, SimTime::ZERO, SimTime::from_millis(10), &mut out);
        }
        assert!((s.cwnd - 11.0).abs() < 0.1, "cwnd {}", s.cwnd);
    }

    #[test]
    fn reno_halves_on_loss() {
        let mut s = ca_sender(Cca::NewReno, 40.0);
        s.on_loss_detected();
        assert_eq!(s.cwnd, 20.0);
        assert_eq!(s.ssthresh, 20.0);
        assert_eq!(s.phase, Phase::FastRecovery);
    }

    #[test]
    fn bic_keeps_seventy_percent_on_loss() {
        let mut s = ca_sender(Cca::Bic, 40.0);
        s.on_loss_detected();
        assert!((s.cwnd - 28.0).abs() < 1e-12);
        assert_eq!(s.bic.w_max, 40.0);
        assert_eq!(s.bic.w_min, s.cwnd);
    }

    #[test]
    fn decrease_is_clamped_at_one_packet() {
        let mut s = ca_sender(Cca::NewReno, 1.6);
        s.on_loss_detected();
        assert_eq!(s.cwnd, 1.0);
        let mut b = ca_sender(Cca::Bic, 1.2);
        b.on_loss_detected();
        assert_eq!(b.cwnd, 1.0);
    }

    #[test]
    fn bic_binary_search_round() {
        // Loss at w_max = 40 leaves cwnd = w_min = 28; one round later the
        // window sits at min(w_min + s_max, (w_min + w_max) / 2) = 34.
        let mut s = ca_sender(Cca::Bic, 40.0);
        s.on_loss_detected();
        s.cwnd = 28.0;
        s.phase = Phase::CongestionAvoidance;
        let mut s = with_flight(s, 100, 28);
        let mut out = Vec::new();
        for ack in 101..=128 {
            s.on_ack(ack, SimTime::ZERO, SimTime::from_millis(10), &mut out);
        }
        assert!((s.cwnd - 34.0).abs() < 1e-9, "cwnd {}", s.cwnd);
    }

    #[test]
    fn bic_target_is_clamped() {
        let p = BicParams::default();
        assert_eq!(bic_round_target(10.0, 200.0, &p), 42.0);
        assert_eq!(bic_round_target(39.5, 40.0, &p), 40.5);
        // Probing above w_max starts slow and accelerates.
        assert_eq!(bic_round_target(40.0, 40.0, &p), 41.0);
        assert_eq!(bic_round_target(48.0, 40.0, &p), 56.0);
        assert_eq!(bic_round_target(100.0, 40.0, &p), 132.0);
    }

    #[test]
    fn triple_dup_ack_triggers_fast_retransmit() {
        let mut s = with_flight(ca_sender(Cca::NewReno, 10.0), 5, 10);
        let mut out = Vec::new();
        let next = s.next_seq;
        for k in 0..2 {
            s.on_ack(5, SimTime::ZERO, SimTime::from_millis(10), &mut out);
            // Limited transmit: one new packet per early duplicate.
            assert_eq!(out.len(), k + 1);
            assert_eq!(out[k].seq, next + k as u64);
        }
        out.clear();
        s.on_ack(5, SimTime::ZERO, SimTime::from_millis(10), &mut out);
        assert_eq!(s.phase, Phase::FastRecovery);
        assert_eq!(s.cwnd, 5.0);
        assert_eq!(out[0].seq, 6);
        assert_eq!(s.stats.retransmitted, 1);
    }

    #[test]
    fn partial_ack_retransmits_next_hole_and_full_ack_exits() {
        let mut s = with_flight(ca_sender(Cca::NewReno, 10.0), 5, 10);
        let mut out = Vec::new();
        for _ in 0..3 {
            s.on_ack(5, SimTime::ZERO, SimTime::from_millis(10), &mut out);
        }
        let recover = s.next_seq - 1;
        out.clear();
        s.on_ack(8, SimTime::ZERO, SimTime::from_millis(20), &mut out);
        assert_eq!(s.phase, Phase::FastRecovery);
        assert_eq!(out[0].seq, 9);
        s.on_ack(recover, SimTime::ZERO, SimTime::from_millis(30), &mut out);
        assert_eq!(s.phase, Phase::CongestionAvoidance);
        assert_eq!(s.cwnd, 5.0);
    }

    #[test]
    fn timeout_goes_back_to_first_hole() {
        let mut s = with_flight(ca_sender(Cca::NewReno, 10.0), 5, 10);
        let mut out = Vec::new();
        s.on_timeout(SimTime::from_secs_f64(1.0), &mut out);
        assert_eq!(s.cwnd, 1.0);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].seq, 6);
        assert_eq!(s.stats.timeouts, 1);
        assert!(s.rto() >= SimTime::from_millis(400));
    }

    #[test]
    fn receiver_acks_cumulatively() {
        let mut r = Receiver::default();
        let acks: Vec<u64> = [1, 2, 3]
            .iter()
            .map(|&seq| r.on_packet(seq, SimTime::ZERO).ack)
            .collect();
        assert_eq!(acks, [1, 2, 3]);

        let mut r = Receiver::default();
        let a = r.on_packet(1, SimTime::ZERO);
        let b = r.on_packet(3, SimTime::ZERO);
        assert_eq!((a.ack, a.duplicate), (1, false));
        assert_eq!((b.ack, b.duplicate), (1, true));

        let mut r = Receiver::default();
        let acks: Vec<Ack> = [1, 3, 4, 5]
            .iter()
            .map(|&seq| r.on_packet(seq, SimTime::ZERO))
            .collect();
        assert_eq!(acks.iter().filter(|a| a.duplicate && a.ack == 1).count(), 3);
        assert_eq!(r.on_packet(2, SimTime::ZERO).ack, 5);
    }

    #[test]
    fn cca_parses_common_spellings() {
        assert_eq!("NewReno".parse::<Cca>().unwrap(), Cca::NewReno);
        assert_eq!("new-reno".parse::<Cca>().unwrap(), Cca::NewReno);
        assert_eq!("BIC".parse::<Cca>().unwrap(), Cca::Bic);
        assert!("cubic".parse::<Cca>().is_err());
    }
}
