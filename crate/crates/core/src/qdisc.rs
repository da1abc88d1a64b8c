//! Per-flow queue at the bottleneck: tail drop against a (possibly changing)
//! packet cap, or CoDel on an unbounded queue.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::time::SimTime;
use crate::transport::Packet;

/// CoDel sojourn target.
pub const CODEL_TARGET: SimTime = SimTime::from_millis(5);
/// CoDel observation interval.
pub const CODEL_INTERVAL: SimTime = SimTime::from_millis(100);

/// Which discipline manages the flow's queue.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QdiscKind {
    /// Tail drop with a cap chosen by a controller at run time.
    LfqDynamic,
    /// Tail drop with a fixed cap in packets.
    Fifo(u32),
    /// CoDel (5 ms target, 100 ms interval) without a packet limit.
    FqCodel,
}

impl fmt::Display for QdiscKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            QdiscKind::LfqDynamic => f.write_str("lfq"),
            QdiscKind::Fifo(cap) => write!(f, "fifo:{cap}"),
            QdiscKind::FqCodel => f.write_str("fq-codel"),
        }
    }
}

impl FromStr for QdiscKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.trim().to_ascii_lowercase();
        match lower.as_str() {
            "lfq" => return Ok(QdiscKind::LfqDynamic),
            "fq-codel" | "fq_codel" | "fqcodel" | "codel" => return Ok(QdiscKind::FqCodel),
            _ => {}
        }
        let cap = lower
            .strip_prefix("fifo:")
            .or_else(|| lower.strip_prefix("fq-"))
            .ok_or_else(|| format!("unknown qdisc `{s}` (expected lfq, fifo:<cap> or fq-codel)"))?;
        match cap.parse::<u32>() {
            Ok(cap) if cap >= 1 => Ok(QdiscKind::Fifo(cap)),
            _ => Err(format!("invalid fifo cap in `{s}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnqueueResult {
    Accepted,
    Dropped,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CodelState {
    pub first_above_time: Option<SimTime>,
    pub drop_next: SimTime,
    pub drop_count: u32,
    pub last_count: u32,
    pub dropping: bool,
}

#[derive(Debug, Clone)]
pub struct QueueState {
    packets: VecDeque<Packet>,
    /// `None` means unbounded.
    cap: Option<u32>,
    codel: Option<CodelState>,
    pub drops: u64,
    pub tail_drops: u64,
    pub codel_drops: u64,
    pub last_drop_time: Option<SimTime>,
}

impl QueueState {
    pub fn new(kind: QdiscKind) -> Self {
        let (cap, codel) = match kind {
            QdiscKind::LfqDynamic => (Some(1), None),
            QdiscKind::Fifo(cap) => (Some(cap.max(1)), None),
            QdiscKind::FqCodel => (None, Some(CodelState::default())),
        };
        QueueState {
            packets: VecDeque::new(),
            cap,
            codel,
            drops: 0,
            tail_drops: 0,
            codel_drops: 0,
            last_drop_time: None,
        }
    }

    pub fn len(&self) -> usize {
        self.packets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.packets.is_empty()
    }

    pub fn cap(&self) -> Option<u32> {
        self.cap
    }

    pub fn codel_state(&self) -> Option<&CodelState> {
        self.codel.as_ref()
    }

    /// Tail drop against the current cap.
    pub fn enqueue(&mut self, mut packet: Packet, now: SimTime) -> EnqueueResult {
        if self.cap.is_some_and(|cap| self.packets.len() >= cap as usize) {
            self.drops += 1;
            self.tail_drops += 1;
            self.last_drop_time = Some(now);
            return EnqueueResult::Dropped;
        }
        packet.enqueue_time = now;
        self.packets.push_back(packet);
        EnqueueResult::Accepted
    }

    /// Changes the cap for future enqueues. Packets already queued stay.
    pub fn set_cap(&mut self, new_cap: u32) {
        debug_assert!(new_cap >= 1);
        self.cap = Some(new_cap.max(1));
    }

    /// Removes the next packet to put on the link. In CoDel mode the control
    /// law may drop packets from the head first; those are appended to
    /// `dropped`.
    pub fn dequeue(&mut self, now: SimTime, dropped: &mut Vec<Packet>) -> Option<Packet> {
        if self.codel.is_some() {
            self.dequeue_codel(now, dropped)
        } else {
            self.packets.pop_front()
        }
    }

    fn record_codel_drop(&mut self, packet: Packet, now: SimTime, dropped: &mut Vec<Packet>) {
        self.drops += 1;
        self.codel_drops += 1;
        self.last_drop_time = Some(now);
        dropped.push(packet);
    }

    /// Pops the head and reports whether its sojourn has been above target for
    /// a full interval.
    fn codel_pop(&mut self, now: SimTime) -> (Option<Packet>, bool) {
        let Some(packet) = self.packets.pop_front() else {
            if let Some(c) = self.codel.as_mut() {
                c.first_above_time = None;
            }
            return (None, false);
        };
        let remaining = self.packets.len();
        let codel = self.codel.as_mut().expect("codel mode");
        let sojourn = now.saturating_sub(packet.enqueue_time);
        let mut ok_to_drop = false;
        if sojourn < CODEL_TARGET || remaining < 2 {
            codel.first_above_time = None;
        } else {
            match codel.first_above_time {
                None => codel.first_above_time = Some(now + CODEL_INTERVAL),
                Some(t) if now >= t => ok_to_drop = true,
                Some(_) => {}
            }
        }
        (Some(packet), ok_to_drop)
    }

    fn dequeue_codel(&mut self, now: SimTime, dropped: &mut Vec<Packet>) -> Option<Packet> {
        let (mut packet, mut ok_to_drop) = self.codel_pop(now);
        if packet.is_none() {
            self.codel.as_mut().unwrap().dropping = false;
            return None;
        }
        let dropping = self.codel.as_ref().unwrap().dropping;
        if dropping {
            if !ok_to_drop {
                self.codel.as_mut().unwrap().dropping = false;
            }
            loop {
                let c = self.codel.as_ref().unwrap();
                if !(c.dropping && now >= c.drop_next) {
                    break;
                }
                let Some(p) = packet.take() else { break };
                self.record_codel_drop(p, now, dropped);
                self.codel.as_mut().unwrap().drop_count += 1;
                (packet, ok_to_drop) = self.codel_pop(now);
                let c = self.codel.as_mut().unwrap();
                if !ok_to_drop {
                    c.dropping = false;
                } else {
                    c.drop_next = control_law(c.drop_next, c.drop_count);
                }
            }
        } else if ok_to_drop {
            let p = packet.take().unwrap();
            self.record_codel_drop(p, now, dropped);
            (packet, _) = self.codel_pop(now);
            let c = self.codel.as_mut().unwrap();
            c.dropping = true;
            let delta = c.drop_count.saturating_sub(c.last_count);
            let recently = now.saturating_sub(c.drop_next) < SimTime::from_micros(16 * CODEL_INTERVAL.as_micros());
            c.drop_count = if delta > 1 && recently { delta } else { 1 };
            c.drop_next = control_law(now, c.drop_count);
            c.last_count = c.drop_count;
        }
        packet
    }
}

/// Next drop time under CoDel's inverse square root schedule.
pub fn control_law(t: SimTime, count: u32) -> SimTime {
    let step = CODEL_INTERVAL.as_micros() as f64 / (count.max(1) as f64).sqrt();
    t + SimTime::from_micros(step.round() as u64)
}
