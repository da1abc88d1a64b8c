//! Offline fork A/B training and online actor-critic training.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_pcg::Pcg64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureVector, WarmupRule};
use crate::mlp::{Loss, Mlp, TrainStep, WeightsMeta, LEARNING_RATE, LFQ_ARCH};
use crate::qdisc::QdiscKind;
use crate::sim::{cap_from_output, CapPolicy, FlowConfig, SimOptions, SimState, WindowStats};
use crate::time::SimTime;
use crate::transport::Cca;

pub const OFFLINE_BATCH: usize = 20;
pub const ONLINE_BATCH: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardParams {
    pub alpha: f64,
}

/// `throughput - alpha * queue`, throughput in Mbit/s and queue in packets.
pub fn compute_reward(throughput_mbps: f64, avg_queue: f64, params: RewardParams) -> f64 {
    throughput_mbps - params.alpha * avg_queue
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub throughput_mbps: f64,
    pub avg_queue: f64,
    pub max_queue: usize,
    pub reward: f64,
    pub drops: u64,
}

impl EpisodeOutcome {
    pub fn from_window(w: &WindowStats, params: RewardParams) -> Self {
        EpisodeOutcome {
            throughput_mbps: w.throughput_mbps,
            avg_queue: w.avg_queue,
            max_queue: w.max_queue,
            reward: compute_reward(w.throughput_mbps, w.avg_queue, params),
            drops: w.drops,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Mode {
    Offline,
    Online,
}

impl Mode {
    pub fn default_batch(self) -> usize {
        match self {
            Mode::Offline => OFFLINE_BATCH,
            Mode::Online => ONLINE_BATCH,
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Offline => "offline",
            Mode::Online => "online",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "offline" => Ok(Mode::Offline),
            "online" => Ok(Mode::Online),
            other => Err(format!("unknown training mode `{other}`")),
        }
    }
}

/// Ranges flows are drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowRanges {
    pub bandwidth_mbps: (f64, f64),
    pub delay_ms: (f64, f64),
    pub duration_s: (f64, f64),
}

impl Default for FlowRanges {
    fn default() -> Self {
        FlowRanges {
            bandwidth_mbps: (5.0, 25.0),
            delay_ms: (5.0, 25.0),
            duration_s: (3.75, 6.25),
        }
    }
}

fn uniform(rng: &mut Pcg64, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Independent uniform draws; fair coin for the congestion control.
pub fn draw_flow_configs(
    n: usize,
    rng: &mut Pcg64,
    ranges: &FlowRanges,
    alpha: f64,
    sample_interval: u32,
) -> Vec<FlowConfig> {
    (0..n)
        .map(|_| {
            let bandwidth = uniform(rng, ranges.bandwidth_mbps);
            let delay = uniform(rng, ranges.delay_ms);
            let duration = uniform(rng, ranges.duration_s);
            let cca = if rng.random::<bool>() { Cca::NewReno } else { Cca::Bic };
            let seed = rng.random::<u64>();
            FlowConfig {
                alpha,
                sample_interval,
                ..FlowConfig::new(bandwidth, delay, duration, cca, seed)
            }
        })
        .collect()
}

/// The decision point of one training flow.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentRecord {
    pub t_exp: SimTime,
    pub features: FeatureVector,
    pub actor_output: f64,
    pub base_cap: u32,
    pub direction: Option<i32>,
    pub critic_prediction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OfflineFlowResult {
    pub record: ExperimentRecord,
    pub plus: (u32, EpisodeOutcome),
    pub minus: (u32, EpisodeOutcome),
    pub target: f64,
    pub simulations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OnlineFlowResult {
    pub record: ExperimentRecord,
    pub chosen_cap: u32,
    pub outcome: EpisodeOutcome,
    pub actor_target: f64,
    pub simulations: usize,
}

/// Runs the flow under the actor up to a uniformly drawn decision time.
fn run_to_decision(config: &FlowConfig, actor: &Mlp, options: SimOptions) -> Result<(SimState, ExperimentRecord)> {
    let mut state = SimState::new(*config, QdiscKind::LfqDynamic, options)?;
    let half = state.end_time().as_micros() / 2;
    let t_exp = SimTime::from_micros(state.rng.random_range(0..=half));
    state.run_until(t_exp, actor)?;
    let features = state.bank.snapshot();
    let actor_output = actor.predict(&features)?;
    let record = ExperimentRecord {
        t_exp,
        features,
        actor_output,
        base_cap: cap_from_output(actor_output),
        direction: None,
        critic_prediction: None,
    };
    Ok((state, record))
}

fn finish_frozen(mut state: SimState, cap: u32, params: RewardParams) -> Result<(SimState, EpisodeOutcome)> {
    state.freeze_cap(cap);
    let w = state.open_window();
    state.run_to_end(&crate::sim::NoPolicy)?;
    let outcome = EpisodeOutcome::from_window(&state.window_stats(w), params);
    Ok((state, outcome))
}

/// Offline experiment: fork at the decision time and compare `base + 1`
/// against `base - 1` (floored at 1).
pub fn run_offline_flow(config: &FlowConfig, actor: &Mlp, options: SimOptions) -> Result<OfflineFlowResult> {
    let params = RewardParams { alpha: config.alpha };
    let (state, record) = run_to_decision(config, actor, options)?;
    let plus_cap = record.base_cap + 1;
    let minus_cap = record.base_cap.saturating_sub(1).max(1);
    let (a, b) = state.fork();
    let (_, plus) = finish_frozen(a, plus_cap, params)?;
    let (_, minus) = finish_frozen(b, minus_cap, params)?;
    let target = if plus.reward > minus.reward {
        plus_cap
    } else {
        minus_cap
    };
    Ok(OfflineFlowResult {
        record,
        plus: (plus_cap, plus),
        minus: (minus_cap, minus),
        target: target as f64,
        simulations: 2,
    })
}

/// Online experiment: one continuation in a random direction, judged
/// against the critic's expectation.
pub fn run_online_flow(
    config: &FlowConfig,
    actor: &Mlp,
    critic: &Mlp,
    options: SimOptions,
) -> Result<OnlineFlowResult> {
    let params = RewardParams { alpha: config.alpha };
    let (mut state, mut record) = run_to_decision(config, actor, options)?;
    let direction: i32 = if state.rng.random::<bool>() { 1 } else { -1 };
    let prediction = critic.forward(record.features.as_slice())?;
    let shifted = |d: i32| (record.base_cap as i64 + d as i64).max(1) as u32;
    let chosen = shifted(direction);
    let opposite = shifted(-direction);
    record.direction = Some(direction);
    record.critic_prediction = Some(prediction);
    let (_, outcome) = finish_frozen(state, chosen, params)?;
    let actor_target = online_actor_target(chosen, opposite, outcome.reward, prediction);
    Ok(OnlineFlowResult {
        record,
        chosen_cap: chosen,
        outcome,
        actor_target: actor_target as f64,
        simulations: 1,
    })
}

/// The chosen cap if it did at least as well as expected, else the other one.
pub fn online_actor_target(chosen: u32, opposite: u32, reward: f64, prediction: f64) -> u32 {
    if reward >= prediction {
        chosen
    } else {
        opposite
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchStats {
    pub batch: usize,
    pub flows_seen: u64,
    pub mean_actor_output: f64,
    pub mean_reward: f64,
    pub actor_loss: f64,
    pub critic_loss: Option<f64>,
    pub simulations: u64,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn run_parallel<T: Send>(
    pool: Option<&rayon::ThreadPool>,
    configs: &[FlowConfig],
    f: impl Fn(&FlowConfig) -> Result<T> + Sync + Send,
) -> Result<Vec<T>> {
    let work = || configs.par_iter().map(&f).collect::<Result<Vec<T>>>();
    match pool {
        Some(p) => p.install(work),
        None => work(),
    }
}

fn diverged(batch: usize) -> impl Fn(Error) -> Error {
    move |e| Error::TrainingDiverged {
        batch,
        source: Box::new(e),
    }
}

/// One offline batch followed by a single MAE step on the actor. Any failed
/// simulation voids the batch before the update.
pub fn run_offline_batch(
    configs: &[FlowConfig],
    actor: &mut Mlp,
    options: SimOptions,
    pool: Option<&rayon::ThreadPool>,
    batch: usize,
) -> Result<(BatchStats, Vec<OfflineFlowResult>)> {
    let frozen: &Mlp = actor;
    let results = run_parallel(pool, configs, |c| run_offline_flow(c, frozen, options))?;
    let step = TrainStep {
        inputs: results.iter().map(|r| r.record.features.0.to_vec()).collect(),
        targets: results.iter().map(|r| r.target).collect(),
        loss: Loss::Mae,
        learning_rate: LEARNING_RATE,
    };
    let actor_loss = actor.backward_and_step(&step).map_err(diverged(batch))?;
    let stats = BatchStats {
        batch,
        flows_seen: 0,
        mean_actor_output: mean(results.iter().map(|r| r.record.actor_output)),
        mean_reward: mean(results.iter().map(|r| {
            if r.target as u32 == r.plus.0 {
                r.plus.1.reward
            } else {
                r.minus.1.reward
            }
        })),
        actor_loss,
        critic_loss: None,
        simulations: results.iter().map(|r| r.simulations as u64).sum(),
    };
    Ok((stats, results))
}

/// One online batch: an MAE step on the actor and an MSE step on the critic.
pub fn run_online_batch(
    configs: &[FlowConfig],
    actor: &mut Mlp,
    critic: &mut Mlp,
    options: SimOptions,
    pool: Option<&rayon::ThreadPool>,
    batch: usize,
) -> Result<(BatchStats, Vec<OnlineFlowResult>)> {
    let (a, c): (&Mlp, &Mlp) = (actor, critic);
    let results = run_parallel(pool, configs, |cfg| run_online_flow(cfg, a, c, options))?;
    let inputs: Vec<Vec<f64>> = results.iter().map(|r| r.record.features.0.to_vec()).collect();
    let actor_step = TrainStep {
        inputs: inputs.clone(),
        targets: results.iter().map(|r| r.actor_target).collect(),
        loss: Loss::Mae,
        learning_rate: LEARNING_RATE,
    };
    let critic_step = TrainStep {
        inputs,
        targets: results.iter().map(|r| r.outcome.reward).collect(),
        loss: Loss::Mse,
        learning_rate: LEARNING_RATE,
    };
    // Both gradients are taken before either network changes.
    let (actor_loss, actor_grads) = actor.gradient(&actor_step).map_err(diverged(batch))?;
    let (critic_loss, critic_grads) = critic.gradient(&critic_step).map_err(diverged(batch))?;
    let mut new_actor = actor.clone();
    let mut new_critic = critic.clone();
    new_actor.apply(&actor_grads, LEARNING_RATE);
    new_critic.apply(&critic_grads, LEARNING_RATE);
    for net in [&new_actor, &new_critic] {
        let finite = net
            .layers()
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|p| p.is_finite()));
        if !finite {
            return Err(diverged(batch)(Error::NonFinite { what: "parameter" }));
        }
    }
    *actor = new_actor;
    *critic = new_critic;
    let stats = BatchStats {
        batch,
        flows_seen: 0,
        mean_actor_output: mean(results.iter().map(|r| r.record.actor_output)),
        mean_reward: mean(results.iter().map(|r| r.outcome.reward)),
        actor_loss,
        critic_loss: Some(critic_loss),
        simulations: results.iter().map(|r| r.simulations as u64).sum(),
    };
    Ok((stats, results))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub mode: Mode,
    pub alpha: f64,
    pub flows: u64,
    pub seed: u64,
    pub batch: usize,
    pub sample_interval: u32,
    pub workers: usize,
    pub checkpoint_every: Option<usize>,
    pub ranges: FlowRanges,
    pub warmup: WarmupRule,
}

impl TrainerConfig {
    pub fn new(mode: Mode, alpha: f64, flows: u64, seed: u64) -> Self {
        TrainerConfig {
            mode,
            alpha,
            flows,
            seed,
            batch: mode.default_batch(),
            sample_interval: crate::sim::DEFAULT_SAMPLE_INTERVAL,
            workers: 1,
            checkpoint_every: None,
            ranges: FlowRanges::default(),
            warmup: WarmupRule::Linear,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.flows == 0 {
            return Err(Error::NothingToTrain);
        }
        if self.batch == 0 {
            return Err(Error::InvalidConfig("batch size must be at least 1".into()));
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
        let r = &self.ranges;
        for (name, (lo, hi)) in [
            ("bandwidth", r.bandwidth_mbps),
            ("delay", r.delay_ms),
            ("duration", r.duration_s),
        ] {
            if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
                return Err(Error::InvalidConfig(format!("bad {name} range {lo}..{hi}")));
            }
        }
        Ok(())
    }

    pub fn num_batches(&self) -> usize {
        self.flows.div_ceil(self.batch as u64) as usize
    }
}

/// Drives training batch by batch.
pub struct Trainer {
    pub config: TrainerConfig,
    pub actor: Mlp,
    pub critic: Option<Mlp>,
    rng: Pcg64,
    pool: Option<rayon::ThreadPool>,
    batch_index: usize,
    flows_seen: u64,
    pub log: Vec<BatchStats>,
}

impl Trainer {
    pub fn new(config: TrainerConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Pcg64::seed_from_u64(config.seed);
        let actor = Mlp::lfq(rng.random());
        let critic_seed: u64 = rng.random();
        let critic = (config.mode == Mode::Online).then(|| Mlp::lfq(critic_seed));
        let pool = if config.workers > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(config.workers)
                    .build()
                    .map_err(|e| Error::InvalidConfig(e.to_string()))?,
            )
        } else {
            None
        };
        Ok(Trainer {
            config,
            actor,
            critic,
            rng,
            pool,
            batch_index: 0,
            flows_seen: 0,
            log: Vec::new(),
        })
    }

    /// Continues from existing weights.
    pub fn with_weights(mut self, actor: Mlp, critic: Option<Mlp>) -> Result<Self> {
        actor.check_sizes(&LFQ_ARCH)?;
        self.actor = actor;
        if let Some(c) = critic {
            c.check_sizes(&LFQ_ARCH)?;
            self.critic = Some(c);
        }
        Ok(self)
    }

    pub fn is_done(&self) -> bool {
        self.flows_seen >= self.config.flows
    }

    pub fn batches_done(&self) -> usize {
        self.batch_index
    }

    fn sim_options(&self) -> SimOptions {
        SimOptions {
            warmup: self.config.warmup,
            ..SimOptions::default()
        }
    }

    /// Runs the next batch (the last one may be short).
    pub fn step(&mut self) -> Result<BatchStats> {
        let remaining = self.config.flows - self.flows_seen;
        let n = remaining.min(self.config.batch as u64) as usize;
        let configs = draw_flow_configs(
            n,
            &mut self.rng,
            &self.config.ranges,
            self.config.alpha,
            self.config.sample_interval,
        );
        let options = self.sim_options();
        let batch = self.batch_index;
        let mut stats = match self.config.mode {
            Mode::Offline => run_offline_batch(&configs, &mut self.actor, options, self.pool.as_ref(), batch)?.0,
            Mode::Online => {
                let critic = self.critic.as_mut().expect("online trainer has a critic");
                run_online_batch(&configs, &mut self.actor, critic, options, self.pool.as_ref(), batch)?.0
            }
        };
        self.batch_index += 1;
        self.flows_seen += n as u64;
        stats.flows_seen = self.flows_seen;
        self.log.push(stats.clone());
        Ok(stats)
    }

    /// Trains to completion, writing outputs into `out_dir` when given.
    pub fn run(&mut self, out_dir: Option<&Path>, mut on_batch: impl FnMut(&BatchStats)) -> Result<()> {
        if let Some(dir) = out_dir {
            fs::create_dir_all(dir)?;
        }
        while !self.is_done() {
            let stats = self.step()?;
            on_batch(&stats);
            if let (Some(dir), Some(every)) = (out_dir, self.config.checkpoint_every) {
                if every > 0 && self.batch_index.is_multiple_of(every) {
                    self.save_checkpoint(dir)?;
                }
            }
        }
        if let Some(dir) = out_dir {
            self.save(dir)?;
        }
        Ok(())
    }

    fn meta(&self, role: &str) -> WeightsMeta {
        WeightsMeta::new(
            role,
            &self.config.mode.to_string(),
            self.config.seed,
            self.config.alpha,
            self.flows_seen,
            LFQ_ARCH.to_vec(),
        )
    }

    fn write_net(&self, net: &Mlp, path: &Path, role: &str) -> Result<()> {
        net.save(path)?;
        self.meta(role).write_for(path)
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        let ckpt = dir.join("checkpoints");
        fs::create_dir_all(&ckpt)?;
        let b = self.batch_index;
        self.write_net(&self.actor, &ckpt.join(format!("actor-{b:06}.lfqw")), "actor")?;
        if let Some(c) = &self.critic {
            self.write_net(c, &ckpt.join(format!("critic-{b:06}.lfqw")), "critic")?;
        }
        Ok(())
    }

    /// Writes final weights, sidecars and the training log.
    pub fn save(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        let actor_path = actor_path(dir);
        self.write_net(&self.actor, &actor_path, "actor")?;
        written.push(actor_path);
        if let Some(c) = &self.critic {
            let p = critic_path(dir);
            self.write_net(c, &p, "critic")?;
            written.push(p);
        }
        let log = dir.join("train_log.csv");
        write_log(&log, &self.log)?;
        written.push(log);
        Ok(written)
    }
}

pub fn actor_path(dir: &Path) -> PathBuf {
    dir.join("actor.lfqw")
}

pub fn critic_path(dir: &Path) -> PathBuf {
    dir.join("critic.lfqw")
}

pub fn write_log(path: &Path, rows: &[BatchStats]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_log(path: &Path) -> Result<Vec<BatchStats>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}
