//! Streaming controller inputs.
//!
//! Six base signals are each smoothed by ten exponentially weighted moving
//! averages with weights `2^-k`, `k = 4..=13`:
//!
//! | block | signal                      | unit        | sampled on |
//! |-------|-----------------------------|-------------|------------|
//! | 0     | queue length                | 10 packets  | arrival    |
//! | 1     | queue length std. deviation | 10 packets  | arrival    |
//! | 2     | queue cap                   | 10 packets  | arrival    |
//! | 3     | arrival rate                | packets/ms  | arrival    |
//! | 4     | departure rate              | packets/ms  | departure  |
//! | 5     | time since last drop        | seconds     | arrival    |
//!
//! The bank keeps zero-initialised recurrences `m <- (1 - w) m + w x`.
//! Snapshots divide out the start-up bias `1 - (1 - w)^n`, so a signal that has
//! been constant at `c` reads `c` for every weight. Rates are the inverse of the
//! smoothed interarrival (interdeparture) time and stay zero until the weight's
//! warm-up threshold is met.
//!
//! Packet counts are reported in units of [`PACKET_UNIT`] packets. With raw
//! counts the cap feeds back into its own input at full scale and offline
//! training diverges once caps reach a few hundred.

use serde::{Deserialize, Serialize};

use crate::time::SimTime;

pub const NUM_SIGNALS: usize = 6;
pub const NUM_WEIGHTS: usize = 10;
pub const NUM_FEATURES: usize = NUM_SIGNALS * NUM_WEIGHTS;
/// Exponent of the fastest average (`w = 2^-4`).
pub const MIN_EXPONENT: u32 = 4;
/// Bumped whenever the ordering or units of the feature vector change.
pub const FEATURE_VERSION: u32 = 2;
/// Packets per unit of the queue, deviation and cap signals.
pub const PACKET_UNIT: f64 = 10.0;

pub const SIGNAL_NAMES: [&str; NUM_SIGNALS] = [
    "queue_size",
    "queue_size_std",
    "max_buffer_size",
    "rate_in",
    "rate_out",
    "time_since_last_loss",
];

/// Smoothing weight of the `i`-th average (`i = 0` is `2^-4`).
pub fn weight(i: usize) -> f64 {
    (-((MIN_EXPONENT as i32) + i as i32) as f64).exp2()
}

/// How many samples a rate average needs before it is reported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum WarmupRule {
    /// Weight `2^-n` needs `n` samples.
    #[default]
    Linear,
    /// Weight `2^-n` needs `2^n` samples.
    Exponential,
}

impl WarmupRule {
    pub fn threshold(self, i: usize) -> u64 {
        let n = MIN_EXPONENT as u64 + i as u64;
        match self {
            WarmupRule::Linear => n,
            WarmupRule::Exponential => 1 << n,
        }
    }
}

/// Ten EWMAs of one signal, sharing a sample count.
#[derive(Debug, Clone, PartialEq)]
pub struct EwmaSet {
    pub mean: [f64; NUM_WEIGHTS],
    /// `(1 - w)^n` for each weight; the start-up bias is `1 - decay`.
    decay: [f64; NUM_WEIGHTS],
    pub samples: u64,
}

impl Default for EwmaSet {
    fn default() -> Self {
        EwmaSet {
            mean: [0.0; NUM_WEIGHTS],
            decay: [1.0; NUM_WEIGHTS],
            samples: 0,
        }
    }
}

impl EwmaSet {
    pub fn update(&mut self, x: f64) {
        for i in 0..NUM_WEIGHTS {
            let w = weight(i);
            self.mean[i] += w * (x - self.mean[i]);
            self.decay[i] *= 1.0 - w;
        }
        self.samples += 1;
    }

    /// Bias-corrected mean; zero before the first sample.
    pub fn corrected(&self, i: usize) -> f64 {
        let norm = 1.0 - self.decay[i];
        if norm > 0.0 {
            self.mean[i] / norm
        } else {
            0.0
        }
    }
}

/// EWMAs of a signal together with its exponentially weighted variance.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EwmaVarSet {
    pub ewma: EwmaSet,
    pub var: [f64; NUM_WEIGHTS],
}

impl EwmaVarSet {
    pub fn update(&mut self, x: f64) {
        for i in 0..NUM_WEIGHTS {
            let w = weight(i);
            // Deviation from the corrected mean seen so far (none before the
            // first sample).
            let diff = if self.ewma.samples == 0 {
                0.0
            } else {
                x - self.ewma.corrected(i)
            };
            self.var[i] = (1.0 - w) * (self.var[i] + w * diff * diff);
        }
        self.ewma.update(x);
    }

    pub fn corrected_std(&self, i: usize) -> f64 {
        let norm = 1.0 - self.ewma.decay[i];
        if norm > 0.0 {
            (self.var[i] / norm).max(0.0).sqrt()
        } else {
            0.0
        }
    }
}

/// The 60 controller inputs, ordered signal-major with weights ascending in
/// exponent (`2^-4` first).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureVector(pub [f64; NUM_FEATURES]);

impl Default for FeatureVector {
    fn default() -> Self {
        FeatureVector([0.0; NUM_FEATURES])
    }
}

impl FeatureVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn get(&self, signal: usize, i: usize) -> f64 {
        self.0[signal * NUM_WEIGHTS + i]
    }

    /// CSV header names, e.g. `rate_in_k7`.
    pub fn column_names() -> Vec<String> {
        SIGNAL_NAMES
            .iter()
            .flat_map(|name| (0..NUM_WEIGHTS).map(move |i| format!("{name}_k{}", MIN_EXPONENT as usize + i)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EwmaBank {
    queue: EwmaVarSet,
    cap: EwmaSet,
    interarrival_ms: EwmaSet,
    interdeparture_ms: EwmaSet,
    since_loss_s: EwmaSet,
    last_arrival: Option<SimTime>,
    last_departure: Option<SimTime>,
    last_drop: SimTime,
    warmup: WarmupRule,
}

impl EwmaBank {
    /// A fresh bank; the flow start counts as the last drop.
    pub fn new(flow_start: SimTime, warmup: WarmupRule) -> Self {
        EwmaBank {
            queue: EwmaVarSet::default(),
            cap: EwmaSet::default(),
            interarrival_ms: EwmaSet::default(),
            interdeparture_ms: EwmaSet::default(),
            since_loss_s: EwmaSet::default(),
            last_arrival: None,
            last_departure: None,
            last_drop: flow_start,
            warmup,
        }
    }

    /// A packet arrived at the queue; `queue_len` is the length after the
    /// admission decision and `cap` the cap it was checked against.
    pub fn update_on_enqueue(&mut self, now: SimTime, queue_len: usize, cap: f64) {
        self.queue.update(queue_len as f64);
        self.cap.update(cap);
        self.since_loss_s.update((now - self.last_drop).as_secs_f64());
        if let Some(prev) = self.last_arrival {
            self.interarrival_ms.update((now - prev).as_millis_f64());
        }
        self.last_arrival = Some(now);
    }

    pub fn update_on_dequeue(&mut self, now: SimTime) {
        if let Some(prev) = self.last_departure {
            self.interdeparture_ms.update((now - prev).as_millis_f64());
        }
        self.last_departure = Some(now);
    }

    pub fn update_on_drop(&mut self, now: SimTime) {
        self.last_drop = now;
    }

    pub fn arrivals_sampled(&self) -> u64 {
        self.queue.ewma.samples
    }

    fn rate(&self, set: &EwmaSet, i: usize) -> f64 {
        if set.samples < self.warmup.threshold(i) {
            return 0.0;
        }
        let mean = set.corrected(i);
        if mean > 0.0 {
            1.0 / mean
        } else {
            0.0
        }
    }

    pub fn snapshot(&self) -> FeatureVector {
        let mut out = [0.0; NUM_FEATURES];
        for i in 0..NUM_WEIGHTS {
            out[i] = self.queue.ewma.corrected(i) / PACKET_UNIT;
            out[NUM_WEIGHTS + i] = self.queue.corrected_std(i) / PACKET_UNIT;
            out[2 * NUM_WEIGHTS + i] = self.cap.corrected(i) / PACKET_UNIT;
            out[3 * NUM_WEIGHTS + i] = self.rate(&self.interarrival_ms, i);
            out[4 * NUM_WEIGHTS + i] = self.rate(&self.interdeparture_ms, i);
            out[5 * NUM_WEIGHTS + i] = self.since_loss_s.corrected(i);
        }
        FeatureVector(out)
    }
}
