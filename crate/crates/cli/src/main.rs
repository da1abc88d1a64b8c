//! `lfq`: train controllers and evaluate queue disciplines on the simulated
//! bottleneck.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};

use config::FileConfig;
use lfq::eval::trace::{render_svg, write_trace_csv, TraceRecord};
use lfq::eval::{
    compare, grid, oracle_optimal_cap, run_flow, run_sweep, write_compare_csv, write_oracle_csv, write_sweep_csv, Axis,
    Contender, OracleWindow, SweepSpec, DEFAULT_EVAL_DURATION_S,
};
use lfq::features::FEATURE_VERSION;
use lfq::mlp::{WeightsMeta, LFQ_ARCH};
use lfq::sim::DEFAULT_SAMPLE_INTERVAL;
use lfq::trainer::{Mode, RewardParams, Trainer, TrainerConfig};
use lfq::{CapPolicy, Cca, FlowConfig, Mlp, NoPolicy, QdiscKind, SimOptions};

#[derive(Debug, Parser)]
#[command(
    name = "lfq",
    version,
    about = "Learned per-flow buffer sizing on a simulated bottleneck"
)]
struct Cli {
    /// TOML file supplying defaults for the shared flags; flags win.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train an actor (offline) or actor and critic (online).
    Train(TrainArgs),
    /// Sweep bandwidth or delay and correlate the settled cap with it.
    Sweep(SweepArgs),
    /// Run one flow and export its event trace.
    Trace(TraceArgs),
    /// Compare queue disciplines over a bandwidth/delay grid.
    Compare(CompareArgs),
    /// Brute-force the best fixed cap for one flow.
    Oracle(OracleArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Train(_) => "train",
            Command::Sweep(_) => "sweep",
            Command::Trace(_) => "trace",
            Command::Compare(_) => "compare",
            Command::Oracle(_) => "oracle",
        }
    }

    fn shared(&self) -> &Shared {
        match self {
            Command::Train(a) => &a.shared,
            Command::Sweep(a) => &a.shared,
            Command::Trace(a) => &a.shared,
            Command::Compare(a) => &a.shared,
            Command::Oracle(a) => &a.shared,
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
struct Shared {
    #[arg(long)]
    seed: Option<u64>,
    /// Queue penalty in the reward `throughput - alpha * avg_queue`.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    flows: Option<u64>,
    #[arg(long)]
    batch: Option<usize>,
    /// Packet arrivals between controller inferences.
    #[arg(long)]
    sample_interval: Option<u32>,
    /// lfq, fifo:<cap> (alias fq-<cap>) or fq-codel; comma-separated for compare.
    #[arg(long, value_delimiter = ',')]
    qdisc: Vec<QdiscKind>,
    /// Actor weight file.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Output file, or directory for train.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    /// Write weight checkpoints every N batches.
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

/// Shared settings after merging flags over the config file.
#[derive(Debug, Clone)]
struct Settings {
    seed: u64,
    alpha: f64,
    flows: Option<u64>,
    batch: Option<usize>,
    sample_interval: u32,
    qdisc: Vec<QdiscKind>,
    weights: Option<PathBuf>,
    out: Option<PathBuf>,
    workers: usize,
    checkpoint_every: Option<usize>,
}

impl Settings {
    fn resolve(flags: &Shared, file: &FileConfig) -> anyhow::Result<Self> {
        let qdisc = if !flags.qdisc.is_empty() {
            flags.qdisc.clone()
        } else if let Some(list) = &file.qdisc {
            list.split(',')
                .map(|s| s.parse::<QdiscKind>().map_err(anyhow::Error::msg))
                .collect::<anyhow::Result<_>>()?
        } else {
            Vec::new()
        };
        let workers = flags
            .workers
            .or(file.workers)
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
        if workers == 0 {
            bail!("--workers must be at least 1");
        }
        let sample_interval = flags
            .sample_interval
            .or(file.sample_interval)
            .unwrap_or(DEFAULT_SAMPLE_INTERVAL);
        if sample_interval == 0 {
            bail!("--sample-interval must be at least 1");
        }
        Ok(Settings {
            seed: flags.seed.or(file.seed).unwrap_or(0),
            alpha: flags.alpha.or(file.alpha).unwrap_or(0.01),
            flows: flags.flows.or(file.flows),
            batch: flags.batch.or(file.batch),
            sample_interval,
            qdisc,
            weights: flags.weights.clone().or_else(|| file.weights.clone()),
            out: flags.out.clone().or_else(|| file.out.clone()),
            workers,
            checkpoint_every: flags.checkpoint_every.or(file.checkpoint_every),
        })
    }

    fn out_or(&self, default: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(default))
    }

    /// The single discipline for sweep and trace (default lfq).
    fn single_qdisc(&self) -> anyhow::Result<QdiscKind> {
        match self.qdisc.as_slice() {
            [] => Ok(QdiscKind::LfqDynamic),
            [q] => Ok(*q),
            _ => Err(usage("this command takes a single --qdisc")),
        }
    }
}

/// A flag combination that makes no sense; reported with usage text.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Rejects shared flags given on the command line that `cmd` ignores.
fn reject_flags(flags: &Shared, cmd: &str, names: &[&str]) -> anyhow::Result<()> {
    for &name in names {
        let given = match name {
            "flows" => flags.flows.is_some(),
            "batch" => flags.batch.is_some(),
            "checkpoint-every" => flags.checkpoint_every.is_some(),
            "qdisc" => !flags.qdisc.is_empty(),
            "weights" => flags.weights.is_some(),
            "sample-interval" => flags.sample_interval.is_some(),
            _ => unreachable!("unknown flag {name}"),
        };
        if given {
            return Err(usage(format!("--{name} cannot be used with `{cmd}`")));
        }
    }
    Ok(())
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long, default_value = "offline")]
    mode: Mode,
    /// Critic weights to continue online training from.
    #[arg(long)]
    critic_weights: Option<PathBuf>,
    #[command(flatten)]
    shared: Shared,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long)]
    vary: Axis,
    #[arg(long, default_value_t = 100)]
    points: usize,
    /// Lower end of the varied range (Mbit/s or ms).
    #[arg(long, default_value_t = 5.0)]
    from: f64,
    #[arg(long, default_value_t = 25.0)]
    to: f64,
    /// Value of the dimension that is held fixed.
    #[arg(long, default_value_t = 15.0)]
    fixed: f64,
    #[arg(long, value_delimiter = ',', default_values = ["newreno", "bic"])]
    cca: Vec<Cca>,
    /// Flow duration in seconds.
    #[arg(long, default_value_t = DEFAULT_EVAL_DURATION_S)]
    duration: f64,
    #[command(flatten)]
    shared: Shared,
}

#[derive(Debug, Args)]
struct FlowArgs {
    /// Bottleneck rate in Mbit/s.
    #[arg(long, default_value_t = 15.0)]
    bandwidth: f64,
    /// Round-trip propagation delay in ms.
    #[arg(long, default_value_t = 15.0)]
    delay: f64,
    #[arg(long, default_value = "newreno")]
    cca: Cca,
    /// Flow duration in seconds.
    #[arg(long, default_value_t = DEFAULT_EVAL_DURATION_S)]
    duration: f64,
}

impl FlowArgs {
    fn config(&self, s: &Settings) -> anyhow::Result<FlowConfig> {
        let c = FlowConfig {
            alpha: s.alpha,
            sample_interval: s.sample_interval,
            ..FlowConfig::new(self.bandwidth, self.delay, self.duration, self.cca, s.seed)
        };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Args)]
struct TraceArgs {
    #[command(flatten)]
    flow: FlowArgs,
    /// Also render queue length and cap against time as SVG.
    #[arg(long)]
    svg: Option<PathBuf>,
    #[command(flatten)]
    shared: Shared,
}

#[derive(Debug, Args)]
struct CompareArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [5.0, 15.0, 25.0])]
    bandwidths: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [5.0, 15.0, 25.0])]
    delays: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values = ["newreno", "bic"])]
    cca: Vec<Cca>,
    #[arg(long, default_value_t = DEFAULT_EVAL_DURATION_S)]
    duration: f64,
    #[command(flatten)]
    shared: Shared,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum WindowArg {
    WholeFlow,
    SecondHalf,
}

#[derive(Debug, Args)]
struct OracleArgs {
    #[command(flatten)]
    flow: FlowArgs,
    #[arg(long, default_value_t = 1)]
    min_cap: u32,
    /// Largest cap tried; defaults to four times the BDP.
    #[arg(long)]
    max_cap: Option<u32>,
    /// Part of the flow the reward is measured over.
    #[arg(long, value_enum, default_value_t = WindowArg::SecondHalf)]
    window: WindowArg,
    #[command(flatten)]
    shared: Shared,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            if let Some(u) = err.downcast_ref::<UsageError>() {
                let mut cmd = Cli::command();
                cmd.build();
                let sub = cmd.find_subcommand_mut(cli.command.name()).expect("subcommand exists");
                sub.error(ErrorKind::ArgumentConflict, &u.0).exit();
            }
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let file = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let settings = Settings::resolve(cli.command.shared(), &file)?;
    match &cli.command {
        Command::Train(a) => cmd_train(a, &settings),
        Command::Sweep(a) => cmd_sweep(a, &settings),
        Command::Trace(a) => cmd_trace(a, &settings),
        Command::Compare(a) => cmd_compare(a, &settings),
        Command::Oracle(a) => cmd_oracle(a, &settings),
    }
}

/// Loads actor weights, refusing files written for another feature layout.
fn load_actor(path: &Path) -> anyhow::Result<Mlp> {
    let net = Mlp::load_expecting(path, &LFQ_ARCH)?;
    if WeightsMeta::sidecar_path(path).exists() {
        let meta = WeightsMeta::read_for(path)?;
        if meta.feature_version != FEATURE_VERSION {
            bail!(
                "{} was trained on feature version {}, this build uses {}",
                path.display(),
                meta.feature_version,
                FEATURE_VERSION
            );
        }
    }
    Ok(net)
}

/// Weights needed to run `qdisc`; `None` for disciplines without a controller.
fn policy_for(qdisc: QdiscKind, s: &Settings) -> anyhow::Result<Option<Mlp>> {
    if qdisc != QdiscKind::LfqDynamic {
        return Ok(None);
    }
    match &s.weights {
        Some(p) => Ok(Some(load_actor(p)?)),
        None => Err(usage("--qdisc lfq needs --weights")),
    }
}

fn as_policy(net: &Option<Mlp>) -> &dyn CapPolicy {
    match net {
        Some(n) => n,
        None => &NoPolicy,
    }
}

fn cmd_train(a: &TrainArgs, s: &Settings) -> anyhow::Result<()> {
    if s.qdisc.iter().any(|q| *q != QdiscKind::LfqDynamic) {
        return Err(usage("training always controls an lfq queue; drop --qdisc"));
    }
    if a.critic_weights.is_some() && a.mode == Mode::Offline {
        return Err(usage("--critic-weights only applies to --mode online"));
    }
    let mut config = TrainerConfig::new(a.mode, s.alpha, s.flows.unwrap_or(2000), s.seed);
    if let Some(b) = s.batch {
        config.batch = b;
    }
    config.sample_interval = s.sample_interval;
    config.workers = s.workers;
    config.checkpoint_every = s.checkpoint_every;
    let mut trainer = Trainer::new(config)?;
    if s.weights.is_some() || a.critic_weights.is_some() {
        let actor = match &s.weights {
            Some(p) => load_actor(p)?,
            None => trainer.actor.clone(),
        };
        let critic = a.critic_weights.as_deref().map(load_actor).transpose()?;
        trainer = trainer.with_weights(actor, critic)?;
    }
    let out = s.out_or("lfq-train");
    let total = trainer.config.num_batches();
    trainer.run(Some(&out), |b| {
        if (b.batch + 1) % 10 == 0 || b.batch + 1 == total {
            eprintln!(
                "batch {}/{total} flows {} actor {:.3} reward {:.3} loss {:.4}{}",
                b.batch + 1,
                b.flows_seen,
                b.mean_actor_output,
                b.mean_reward,
                b.actor_loss,
                b.critic_loss.map(|l| format!(" critic {l:.4}")).unwrap_or_default()
            );
        }
    })?;
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_sweep(a: &SweepArgs, s: &Settings) -> anyhow::Result<()> {
    reject_flags(&a.shared, "sweep", &["flows", "batch", "checkpoint-every"])?;
    let qdisc = s.single_qdisc()?;
    let net = policy_for(qdisc, s)?;
    let spec = SweepSpec {
        range: (a.from, a.to),
        fixed: a.fixed,
        ccas: a.cca.clone(),
        duration_s: a.duration,
        alpha: s.alpha,
        seed: s.seed,
        sample_interval: s.sample_interval,
        ..SweepSpec::new(a.vary, a.points, qdisc)
    };
    let result = run_sweep(&spec, as_policy(&net), s.workers)?;
    let out = s.out_or("sweep.csv");
    write_sweep_csv(&out, &result).with_context(|| format!("cannot write {}", out.display()))?;
    for g in &result.aggregates {
        println!(
            "{:<8} n={:<4} thr {:.2} Mbit/s  avg queue {:.2}  avg max queue {:.1}  cap {}  corr {}",
            g.cca,
            g.experiments,
            g.avg_throughput_mbps,
            g.avg_queue,
            g.avg_max_queue,
            fmt_opt(g.avg_cap, 2),
            fmt_opt(g.correlation, 3)
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".to_owned(), |x| format!("{x:.digits$}"))
}

fn cmd_trace(a: &TraceArgs, s: &Settings) -> anyhow::Result<()> {
    reject_flags(&a.shared, "trace", &["flows", "batch", "checkpoint-every"])?;
    let qdisc = s.single_qdisc()?;
    let net = policy_for(qdisc, s)?;
    let config = a.flow.config(s)?;
    let options = SimOptions {
        trace: true,
        ..SimOptions::default()
    };
    let run = run_flow(&config, qdisc, as_policy(&net), options)?;
    let rows = run.trace.clone().unwrap_or_default();
    let out = s.out_or("trace.csv");
    write_trace_csv(&out, &rows).with_context(|| format!("cannot write {}", out.display()))?;
    if let Some(svg) = &a.svg {
        let records: Vec<TraceRecord> = rows.iter().map(TraceRecord::from).collect();
        let title = format!(
            "{} {} Mbit/s {} ms {}",
            config.cca, config.bandwidth_mbps, config.delay_ms, qdisc
        );
        std::fs::write(svg, render_svg(&records, &title)).with_context(|| format!("cannot write {}", svg.display()))?;
    }
    println!(
        "throughput {:.2} Mbit/s  avg queue {:.2}  max queue {}  settled cap {}",
        run.whole.throughput_mbps,
        run.whole.avg_queue,
        run.whole.max_queue,
        fmt_opt(run.settled_cap(), 2)
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_compare(a: &CompareArgs, s: &Settings) -> anyhow::Result<()> {
    reject_flags(&a.shared, "compare", &["flows", "batch", "checkpoint-every"])?;
    let mut kinds = s.qdisc.clone();
    if kinds.is_empty() {
        if s.weights.is_some() {
            kinds.push(QdiscKind::LfqDynamic);
        }
        kinds.extend([QdiscKind::Fifo(100), QdiscKind::Fifo(1000), QdiscKind::FqCodel]);
    }
    let nets = kinds
        .iter()
        .map(|&q| policy_for(q, s))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let contenders: Vec<Contender<'_>> = kinds
        .iter()
        .zip(&nets)
        .map(|(&qdisc, net)| Contender {
            label: qdisc.to_string(),
            qdisc,
            policy: as_policy(net),
        })
        .collect();
    let mut configs = grid(&a.bandwidths, &a.delays, &a.cca, a.duration, s.alpha);
    for c in &mut configs {
        c.seed = c.seed.wrapping_add(s.seed);
        c.sample_interval = s.sample_interval;
        c.validate()?;
    }
    let rows = compare(&contenders, &configs, s.workers)?;
    let out = s.out_or("compare.csv");
    write_compare_csv(&out, &rows).with_context(|| format!("cannot write {}", out.display()))?;
    println!("{:<10} {:>10} {:>10} {:>10}", "qdisc", "thr", "max queue", "avg queue");
    for r in &rows {
        println!(
            "{:<10} {:>10.2} {:>10.1} {:>10.2}",
            r.qdisc, r.avg_throughput_mbps, r.avg_max_queue, r.avg_queue
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_oracle(a: &OracleArgs, s: &Settings) -> anyhow::Result<()> {
    reject_flags(
        &a.shared,
        "oracle",
        &[
            "flows",
            "batch",
            "checkpoint-every",
            "qdisc",
            "weights",
            "sample-interval",
        ],
    )?;
    let config = a.flow.config(s)?;
    let max_cap = a
        .max_cap
        .unwrap_or_else(|| (4.0 * config.bdp_packets()).ceil().max(1.0) as u32);
    if a.min_cap == 0 || max_cap < a.min_cap {
        return Err(usage(format!("empty cap range {}..={max_cap}", a.min_cap)));
    }
    let window = match a.window {
        WindowArg::WholeFlow => OracleWindow::WholeFlow,
        WindowArg::SecondHalf => OracleWindow::SecondHalf,
    };
    let result = oracle_optimal_cap(
        &config,
        RewardParams { alpha: s.alpha },
        a.min_cap..=max_cap,
        window,
        s.workers,
    )?;
    let out = s.out_or("oracle.csv");
    write_oracle_csv(&out, &result).with_context(|| format!("cannot write {}", out.display()))?;
    println!(
        "best cap {} (reward {:.4}, BDP {:.2} packets)",
        result.best_cap,
        result.best_reward,
        config.bdp_packets()
    );
    println!("wrote {}", out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file() {
        let file = FileConfig::parse("seed = 3\nalpha = 2.0\nqdisc = \"fifo:100,fq-codel\"\n").unwrap();
        let flags = Shared {
            alpha: Some(0.5),
            ..Shared::default()
        };
        let s = Settings::resolve(&flags, &file).unwrap();
        assert_eq!(s.seed, 3);
        assert_eq!(s.alpha, 0.5);
        assert_eq!(s.qdisc, vec![QdiscKind::Fifo(100), QdiscKind::FqCodel]);
        assert_eq!(s.sample_interval, DEFAULT_SAMPLE_INTERVAL);
    }

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }
}
