//! Evaluation drivers: single runs, parameter sweeps, qdisc comparisons and
//! the brute-force cap oracle.

pub mod trace;

use std::ops::RangeInclusive;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qdisc::QdiscKind;
use crate::sim::{CapPolicy, FlowConfig, SimOptions, SimState, TraceRow, WindowStats};
use crate::time::SimTime;
use crate::trainer::{EpisodeOutcome, RewardParams};
use crate::transport::Cca;

pub const DEFAULT_EVAL_DURATION_S: f64 = 5.0;

/// Pearson correlation; `None` when either series is constant or too short.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len();
    if n < 2 || n != ys.len() {
        return None;
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// A complete run of one flow.
#[derive(Debug, Clone)]
pub struct FlowRun {
    pub config: FlowConfig,
    pub qdisc: QdiscKind,
    pub whole: WindowStats,
    pub second_half: WindowStats,
    pub outcome: EpisodeOutcome,
    pub trace: Option<Vec<TraceRow>>,
    pub inferences: u64,
}

impl FlowRun {
    /// Time-weighted mean cap over the second half of the flow.
    pub fn settled_cap(&self) -> Option<f64> {
        self.second_half.mean_cap
    }
}

pub fn run_flow(config: &FlowConfig, qdisc: QdiscKind, policy: &dyn CapPolicy, options: SimOptions) -> Result<FlowRun> {
    let mut state = SimState::new(*config, qdisc, options)?;
    let half = SimTime::from_micros(state.end_time().as_micros() / 2);
    state.run_until(half, policy)?;
    let second = state.open_window();
    state.run_to_end(policy)?;
    let whole = state.window_stats(state.whole_flow());
    let second_half = state.window_stats(second);
    Ok(FlowRun {
        config: *config,
        qdisc,
        outcome: EpisodeOutcome::from_window(&whole, RewardParams { alpha: config.alpha }),
        whole,
        second_half,
        inferences: state.inferences(),
        trace: state.take_trace(),
    })
}

fn with_pool<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if workers <= 1 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    Ok(pool.install(f))
}

/// Runs every configuration, preserving input order in the output.
pub fn run_many(
    configs: &[FlowConfig],
    qdisc: QdiscKind,
    policy: &dyn CapPolicy,
    options: SimOptions,
    workers: usize,
) -> Result<Vec<FlowRun>> {
    with_pool(workers, || {
        configs
            .par_iter()
            .map(|c| run_flow(c, qdisc, policy, options))
            .collect::<Result<Vec<_>>>()
    })?
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Bandwidth,
    Delay,
}

impl std::str::FromStr for Axis {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "bandwidth" | "bw" => Ok(Axis::Bandwidth),
            "delay" | "rtt" => Ok(Axis::Delay),
            other => Err(format!("unknown sweep axis `{other}`")),
        }
    }
}

impl std::fmt::Display for Axis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Axis::Bandwidth => "bandwidth",
            Axis::Delay => "delay",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub vary: Axis,
    pub points: usize,
    pub range: (f64, f64),
    /// Value of the axis that is not varied.
    pub fixed: f64,
    pub ccas: Vec<Cca>,
    pub qdisc: QdiscKind,
    pub duration_s: f64,
    pub alpha: f64,
    pub seed: u64,
    pub sample_interval: u32,
}

impl SweepSpec {
    pub fn new(vary: Axis, points: usize, qdisc: QdiscKind) -> Self {
        SweepSpec {
            vary,
            points,
            range: (5.0, 25.0),
            fixed: 15.0,
            ccas: Cca::ALL.to_vec(),
            qdisc,
            duration_s: DEFAULT_EVAL_DURATION_S,
            alpha: 0.0,
            seed: 0,
            sample_interval: crate::sim::DEFAULT_SAMPLE_INTERVAL,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.points < 2 {
            return Err(Error::InvalidConfig("a sweep needs at least 2 points".into()));
        }
        let (lo, hi) = self.range;
        if !(lo > 0.0 && hi > lo) {
            return Err(Error::InvalidConfig(format!("bad sweep range {lo}..{hi}")));
        }
        if self.ccas.is_empty() {
            return Err(Error::InvalidConfig("no congestion controls selected".into()));
        }
        Ok(())
    }

    pub fn values(&self) -> Vec<f64> {
        let (lo, hi) = self.range;
        (0..self.points)
            .map(|i| lo + (hi - lo) * i as f64 / (self.points - 1) as f64)
            .collect()
    }

    /// Grid in output order: all points for the first CCA, then the next.
    pub fn configs(&self) -> Vec<FlowConfig> {
        let mut out = Vec::new();
        for &cca in &self.ccas {
            for v in self.values() {
                let (bw, delay) = match self.vary {
                    Axis::Bandwidth => (v, self.fixed),
                    Axis::Delay => (self.fixed, v),
                };
                let index = out.len() as u64;
                out.push(FlowConfig {
                    alpha: self.alpha,
                    sample_interval: self.sample_interval,
                    ..FlowConfig::new(bw, delay, self.duration_s, cca, self.seed.wrapping_add(index))
                });
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub index: usize,
    pub cca: Cca,
    pub bandwidth_mbps: f64,
    pub delay_ms: f64,
    pub duration_s: f64,
    pub throughput_mbps: f64,
    pub avg_queue: f64,
    pub max_queue: usize,
    pub drops: u64,
    pub reward: f64,
    pub mean_cap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepAggregate {
    /// `newreno`, `bic` or `all`.
    pub cca: String,
    pub experiments: usize,
    pub avg_throughput_mbps: f64,
    pub avg_queue: f64,
    pub avg_max_queue: f64,
    pub max_queue: usize,
    pub avg_cap: Option<f64>,
    /// Correlation between the varied parameter and the settled cap.
    pub correlation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub vary: Axis,
    pub qdisc: QdiscKind,
    pub rows: Vec<SweepRow>,
    pub aggregates: Vec<SweepAggregate>,
}

impl SweepResult {
    pub fn aggregate(&self, cca: &str) -> Option<&SweepAggregate> {
        self.aggregates.iter().find(|a| a.cca == cca)
    }
}

fn aggregate(label: String, rows: &[&SweepRow], vary: Axis) -> SweepAggregate {
    let n = rows.len().max(1) as f64;
    let caps: Vec<f64> = rows.iter().filter_map(|r| r.mean_cap).collect();
    let correlation = if caps.len() == rows.len() {
        let xs: Vec<f64> = rows
            .iter()
            .map(|r| match vary {
                Axis::Bandwidth => r.bandwidth_mbps,
                Axis::Delay => r.delay_ms,
            })
            .collect();
        pearson(&xs, &caps)
    } else {
        None
    };
    SweepAggregate {
        cca: label,
        experiments: rows.len(),
        avg_throughput_mbps: rows.iter().map(|r| r.throughput_mbps).sum::<f64>() / n,
        avg_queue: rows.iter().map(|r| r.avg_queue).sum::<f64>() / n,
        avg_max_queue: rows.iter().map(|r| r.max_queue as f64).sum::<f64>() / n,
        max_queue: rows.iter().map(|r| r.max_queue).max().unwrap_or(0),
        avg_cap: (!caps.is_empty()).then(|| caps.iter().sum::<f64>() / caps.len() as f64),
        correlation,
    }
}

pub fn run_sweep(spec: &SweepSpec, policy: &dyn CapPolicy, workers: usize) -> Result<SweepResult> {
    spec.validate()?;
    let configs = spec.configs();
    let runs = run_many(&configs, spec.qdisc, policy, SimOptions::default(), workers)?;
    let rows: Vec<SweepRow> = runs
        .iter()
        .enumerate()
        .map(|(index, r)| SweepRow {
            index,
            cca: r.config.cca,
            bandwidth_mbps: r.config.bandwidth_mbps,
            delay_ms: r.config.delay_ms,
            duration_s: r.config.duration_s,
            throughput_mbps: r.whole.throughput_mbps,
            avg_queue: r.whole.avg_queue,
            max_queue: r.whole.max_queue,
            drops: r.whole.drops,
            reward: r.outcome.reward,
            mean_cap: r.settled_cap(),
        })
        .collect();
    let mut aggregates = Vec::new();
    for &cca in &spec.ccas {
        let subset: Vec<&SweepRow> = rows.iter().filter(|r| r.cca == cca).collect();
        aggregates.push(aggregate(cca.to_string(), &subset, spec.vary));
    }
    let all: Vec<&SweepRow> = rows.iter().collect();
    aggregates.push(aggregate("all".into(), &all, spec.vary));
    Ok(SweepResult {
        vary: spec.vary,
        qdisc: spec.qdisc,
        rows,
        aggregates,
    })
}

/// Flat CSV record holding either an experiment row or an aggregate row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SweepCsvRecord {
    kind: String,
    index: Option<usize>,
    cca: String,
    bandwidth_mbps: Option<f64>,
    delay_ms: Option<f64>,
    duration_s: Option<f64>,
    experiments: Option<usize>,
    throughput_mbps: f64,
    avg_queue: f64,
    max_queue: f64,
    max_queue_peak: Option<usize>,
    drops: Option<u64>,
    reward: Option<f64>,
    mean_cap: Option<f64>,
    correlation: Option<f64>,
}

pub fn write_sweep_csv(path: &Path, result: &SweepResult) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in &result.rows {
        w.serialize(SweepCsvRecord {
            kind: "experiment".into(),
            index: Some(r.index),
            cca: r.cca.to_string(),
            bandwidth_mbps: Some(r.bandwidth_mbps),
            delay_ms: Some(r.delay_ms),
            duration_s: Some(r.duration_s),
            experiments: None,
            throughput_mbps: r.throughput_mbps,
            avg_queue: r.avg_queue,
            max_queue: r.max_queue as f64,
            max_queue_peak: None,
            drops: Some(r.drops),
            reward: Some(r.reward),
            mean_cap: r.mean_cap,
            correlation: None,
        })?;
    }
    for a in &result.aggregates {
        w.serialize(SweepCsvRecord {
            kind: "aggregate".into(),
            index: None,
            cca: a.cca.clone(),
            bandwidth_mbps: None,
            delay_ms: None,
            duration_s: None,
            experiments: Some(a.experiments),
            throughput_mbps: a.avg_throughput_mbps,
            avg_queue: a.avg_queue,
            max_queue: a.avg_max_queue,
            max_queue_peak: Some(a.max_queue),
            drops: None,
            reward: None,
            mean_cap: a.avg_cap,
            correlation: a.correlation,
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Parses a file written by [`write_sweep_csv`].
pub fn read_sweep_csv(path: &Path) -> Result<(Vec<SweepRow>, Vec<SweepAggregate>)> {
    let mut r = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    let mut aggs = Vec::new();
    for rec in r.deserialize::<SweepCsvRecord>() {
        let rec = rec?;
        let missing = |what: &str| Error::Format(format!("sweep row missing {what}"));
        match rec.kind.as_str() {
            "experiment" => rows.push(SweepRow {
                index: rec.index.ok_or_else(|| missing("index"))?,
                cca: rec.cca.parse().map_err(Error::Format)?,
                bandwidth_mbps: rec.bandwidth_mbps.ok_or_else(|| missing("bandwidth"))?,
                delay_ms: rec.delay_ms.ok_or_else(|| missing("delay"))?,
                duration_s: rec.duration_s.ok_or_else(|| missing("duration"))?,
                throughput_mbps: rec.throughput_mbps,
                avg_queue: rec.avg_queue,
                max_queue: rec.max_queue as usize,
                drops: rec.drops.ok_or_else(|| missing("drops"))?,
                reward: rec.reward.ok_or_else(|| missing("reward"))?,
                mean_cap: rec.mean_cap,
            }),
            "aggregate" => aggs.push(SweepAggregate {
                cca: rec.cca,
                experiments: rec.experiments.ok_or_else(|| missing("experiments"))?,
                avg_throughput_mbps: rec.throughput_mbps,
                avg_queue: rec.avg_queue,
                avg_max_queue: rec.max_queue,
                max_queue: rec.max_queue_peak.ok_or_else(|| missing("max_queue_peak"))?,
                avg_cap: rec.mean_cap,
                correlation: rec.correlation,
            }),
            other => return Err(Error::Format(format!("unknown sweep row kind `{other}`"))),
        }
    }
    Ok((rows, aggs))
}

/// Every (bandwidth, delay, cca) combination.
pub fn grid(bandwidths: &[f64], delays: &[f64], ccas: &[Cca], duration_s: f64, alpha: f64) -> Vec<FlowConfig> {
    let mut out = Vec::new();
    for &cca in ccas {
        for &bw in bandwidths {
            for &d in delays {
                let seed = out.len() as u64;
                out.push(FlowConfig {
                    alpha,
                    ..FlowConfig::new(bw, d, duration_s, cca, seed)
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub qdisc: String,
    pub experiments: usize,
    pub avg_throughput_mbps: f64,
    /// Mean over flows of each flow's peak queue.
    pub avg_max_queue: f64,
    pub avg_queue: f64,
    pub max_queue: usize,
}

/// A queue manager under comparison.
pub struct Contender<'a> {
    pub label: String,
    pub qdisc: QdiscKind,
    pub policy: &'a dyn CapPolicy,
}

pub fn compare(contenders: &[Contender<'_>], configs: &[FlowConfig], workers: usize) -> Result<Vec<CompareRow>> {
    let mut out = Vec::new();
    for c in contenders {
        let runs = run_many(configs, c.qdisc, c.policy, SimOptions::default(), workers)?;
        let n = runs.len().max(1) as f64;
        out.push(CompareRow {
            qdisc: c.label.clone(),
            experiments: runs.len(),
            avg_throughput_mbps: runs.iter().map(|r| r.whole.throughput_mbps).sum::<f64>() / n,
            avg_max_queue: runs.iter().map(|r| r.whole.max_queue as f64).sum::<f64>() / n,
            avg_queue: runs.iter().map(|r| r.whole.avg_queue).sum::<f64>() / n,
            max_queue: runs.iter().map(|r| r.whole.max_queue).max().unwrap_or(0),
        });
    }
    Ok(out)
}

pub fn write_compare_csv(path: &Path, rows: &[CompareRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_compare_csv(path: &Path) -> Result<Vec<CompareRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Which part of the flow the oracle scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleWindow {
    WholeFlow,
    SecondHalf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OraclePoint {
    pub cap: u32,
    pub throughput_mbps: f64,
    pub avg_queue: f64,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    pub best_cap: u32,
    pub best_reward: f64,
    pub curve: Vec<OraclePoint>,
}

/// Simulates the flow once per fixed cap and returns the reward-maximising
/// cap; ties go to the smaller cap.
pub fn oracle_optimal_cap(
    config: &FlowConfig,
    params: RewardParams,
    caps: RangeInclusive<u32>,
    window: OracleWindow,
    workers: usize,
) -> Result<OracleResult> {
    let (lo, hi) = (*caps.start(), *caps.end());
    if lo == 0 || hi < lo {
        return Err(Error::InvalidConfig(format!("bad cap range {lo}..={hi}")));
    }
    let caps: Vec<u32> = (lo..=hi).collect();
    let curve = with_pool(workers, || {
        caps.par_iter()
            .map(|&cap| {
                let run = run_flow(
                    config,
                    QdiscKind::Fifo(cap),
                    &crate::sim::NoPolicy,
                    SimOptions::default(),
                )?;
                let w = match window {
                    OracleWindow::WholeFlow => run.whole,
                    OracleWindow::SecondHalf => run.second_half,
                };
                Ok(OraclePoint {
                    cap,
                    throughput_mbps: w.throughput_mbps,
                    avg_queue: w.avg_queue,
                    reward: crate::trainer::compute_reward(w.throughput_mbps, w.avg_queue, params),
                })
            })
            .collect::<Result<Vec<_>>>()
    })??;
    let mut best = &curve[0];
    for p in &curve[1..] {
        if p.reward > best.reward {
            best = p;
        }
    }
    Ok(OracleResult {
        best_cap: best.cap,
        best_reward: best.reward,
        curve,
    })
}

pub fn write_oracle_csv(path: &Path, result: &OracleResult) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for p in &result.curve {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_oracle_csv(path: &Path) -> Result<Vec<OraclePoint>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}
