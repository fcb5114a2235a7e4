//! `parastep`: train toy predictors, sample with any strategy locally or
//! over TCP, compare against the sequential baseline, print communication
//! tables and benchmark wall-clock speedup.

mod commands;
mod config;
mod error;
mod launch;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::CliConfig;
use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "parastep", version, about = "Step-parallel diffusion sampling on toy models")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

/// Overrides for keys of the same name in the config file.
#[derive(Debug, Args)]
struct GlobalArgs {
    /// Flat TOML file; flags given here take precedence over it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Weight file (default `<out-dir>/weights.pswt`).
    #[arg(long, global = true)]
    weights: Option<PathBuf>,
    /// sequential, direct_reuse, parastep, batchstep or dynamic.
    #[arg(long, global = true)]
    strategy: Option<String>,
    #[arg(short = 'p', long, global = true)]
    degree: Option<usize>,
    /// Cycle length for batchstep; longest cycle for dynamic.
    #[arg(short = 's', long, global = true)]
    cycle: Option<usize>,
    #[arg(long, global = true)]
    stride: Option<usize>,
    /// Warm-up step count.
    #[arg(long, global = true, conflicts_with = "warmup_ratio")]
    warmup: Option<usize>,
    /// Warm-up as a fraction of the steps, rounded.
    #[arg(long, global = true)]
    warmup_ratio: Option<f64>,
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// posterior or zero.
    #[arg(long, global = true)]
    sigma_mode: Option<String>,
    /// emulated, loopback or tcp.
    #[arg(long, global = true)]
    backend: Option<String>,
    /// Comma-separated host:port list, one per rank.
    #[arg(long, global = true, value_delimiter = ',')]
    hosts: Option<Vec<String>>,
    /// Extra forward passes per prediction.
    #[arg(long, global = true)]
    ballast: Option<u32>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a noise predictor and write PSWT weights plus a loss log.
    Train(TrainArgs),
    /// Sample with one strategy and write trajectory, samples and summary.
    Generate(GenerateArgs),
    /// Run strategies against the sequential reference over many seeds.
    Compare(CompareArgs),
    /// Print closed-form communication volumes.
    Commodel(CommodelArgs),
    /// Time sequential sampling against the distributed protocol.
    Bench(BenchArgs),
    #[command(hide = true)]
    Worker(WorkerArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// gauss8, swiss_roll or two_moons.
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long)]
    embed_dim: Option<usize>,
    /// tanh or silu.
    #[arg(long)]
    activation: Option<String>,
    #[arg(long)]
    log_interval: Option<usize>,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    /// Number of seeds sampled, starting at --seed.
    #[arg(long)]
    samples: Option<usize>,
    /// Explicit dynamic cycle lengths.
    #[arg(long, value_delimiter = ',')]
    cycles: Option<Vec<usize>>,
    /// Threshold for derived dynamic cycles.
    #[arg(long)]
    tau: Option<f64>,
}

#[derive(Debug, Args)]
struct CompareArgs {
    /// Strategy specs such as `parastep:2` or `direct_reuse:2`.
    specs: Vec<String>,
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
}

#[derive(Debug, Args)]
struct CommodelArgs {
    /// Layer counts.
    #[arg(long = "L", value_delimiter = ',')]
    layers: Option<Vec<u64>>,
    /// Per-layer feature sizes.
    #[arg(long = "M", value_delimiter = ',')]
    messages: Option<Vec<u64>>,
    /// Degrees of parallelism (default 1,2,4,8, or -p alone).
    #[arg(long, value_delimiter = ',')]
    degrees: Option<Vec<u64>>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long)]
    repetitions: Option<usize>,
    /// Forward-pass target used to calibrate the ballast when it is 0.
    #[arg(long)]
    ballast_ms: Option<f64>,
}

#[derive(Debug, Args)]
struct WorkerArgs {
    #[arg(long)]
    rank: usize,
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn apply_globals(cfg: &mut CliConfig, g: GlobalArgs) {
    set(&mut cfg.seed, g.seed);
    set(&mut cfg.out_dir, g.out_dir);
    if g.weights.is_some() {
        cfg.weights = g.weights;
    }
    set(&mut cfg.strategy, g.strategy);
    set(&mut cfg.degree, g.degree);
    set(&mut cfg.cycle, g.cycle);
    set(&mut cfg.stride, g.stride);
    if let Some(w) = g.warmup {
        cfg.warmup = Some(w);
    }
    if let Some(r) = g.warmup_ratio {
        cfg.warmup = None;
        cfg.warmup_ratio = r;
    }
    set(&mut cfg.steps, g.steps);
    set(&mut cfg.sigma_mode, g.sigma_mode);
    set(&mut cfg.backend, g.backend);
    set(&mut cfg.hosts, g.hosts);
    set(&mut cfg.ballast, g.ballast);
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.global.config {
        Some(path) => CliConfig::load(path)?,
        None => CliConfig::default(),
    };
    let degree_flag = cli.global.degree;
    apply_globals(&mut cfg, cli.global);
    match cli.command {
        Command::Train(a) => {
            set(&mut cfg.dataset, a.dataset);
            set(&mut cfg.iterations, a.iterations);
            set(&mut cfg.batch_size, a.batch_size);
            set(&mut cfg.learning_rate, a.learning_rate);
            set(&mut cfg.hidden, a.hidden);
            set(&mut cfg.embed_dim, a.embed_dim);
            set(&mut cfg.activation, a.activation);
            set(&mut cfg.log_interval, a.log_interval);
            commands::cmd_train(&cfg)
        }
        Command::Generate(a) => {
            set(&mut cfg.samples, a.samples);
            set(&mut cfg.cycles, a.cycles);
            set(&mut cfg.tau, a.tau);
            commands::cmd_generate(&mut cfg)
        }
        Command::Compare(a) => {
            set(&mut cfg.seeds, a.seeds);
            set(&mut cfg.tau, a.tau);
            commands::cmd_compare(&mut cfg, &a.specs)
        }
        Command::Commodel(a) => {
            set(&mut cfg.layers, a.layers);
            set(&mut cfg.messages, a.messages);
            match (a.degrees, degree_flag) {
                (Some(d), _) => cfg.degrees = d,
                (None, Some(p)) => cfg.degrees = vec![p as u64],
                (None, None) => {}
            }
            commands::cmd_commodel(&cfg)
        }
        Command::Bench(a) => {
            set(&mut cfg.repetitions, a.repetitions);
            set(&mut cfg.ballast_ms, a.ballast_ms);
            commands::cmd_bench(&mut cfg)
        }
        Command::Worker(a) => launch::cmd_worker(&cfg, a.rank).map_err(|e| match e {
            CliError::Runtime(m) => CliError::Runtime(format!("rank {}: {m}", a.rank)),
            other => other,
        }),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
