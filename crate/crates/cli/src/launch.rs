//! One OS process per rank over localhost TCP. The parent writes a worker
//! config, spawns `parastep worker` for each rank and collects the reports
//! the workers leave in a shared directory.

use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::Duration;

use parastep::engines::{trajectory_from_binary, trajectory_to_binary, Trajectory};
use parastep::predictor::{load_weights, Ballast, PredictorWeights};
use parastep::protocol::{resolve_hosts, run_worker, CommLedger, TcpEndpoint, Timing, WorkerConfig};

use crate::config::CliConfig;
use crate::error::CliError;
use crate::output;

pub struct ProcessRun {
    pub trajectory: Trajectory,
    pub ledger: CommLedger,
    /// Rank 0's split.
    pub timing: Timing,
}

fn report_path(dir: &Path, rank: usize, ext: &str) -> PathBuf {
    dir.join(format!("rank-{rank}.{ext}"))
}

/// Ports the OS hands out for `n` throwaway listeners on 127.0.0.1.
fn free_local_hosts(n: usize) -> Result<Vec<String>, CliError> {
    let listeners = (0..n)
        .map(|_| TcpListener::bind("127.0.0.1:0"))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::Runtime(format!("cannot reserve local ports: {e}")))?;
    listeners
        .iter()
        .map(|l| l.local_addr().map(|a| a.to_string()))
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Runtime(e.to_string()))
}

pub fn load_model(cfg: &CliConfig) -> Result<PredictorWeights, CliError> {
    let path = cfg.weights_path();
    load_weights(&path).map_err(|e| CliError::Config(format!("cannot load weights {}: {e}", path.display())))
}

pub fn run_processes(cfg: &CliConfig, seed: u64, warmup: usize, work_dir: &Path) -> Result<ProcessRun, CliError> {
    let p = cfg.degree;
    let hosts = if cfg.hosts.is_empty() {
        free_local_hosts(p)?
    } else if cfg.hosts.len() == p {
        cfg.hosts.clone()
    } else {
        return Err(CliError::Config(format!(
            "{} hosts given for degree {p}",
            cfg.hosts.len()
        )));
    };
    let weights = std::env::current_dir()
        .map_err(|e| CliError::Runtime(e.to_string()))?
        .join(cfg.weights_path());
    let worker_cfg = CliConfig {
        hosts,
        seed,
        warmup: Some(warmup),
        weights: Some(weights),
        out_dir: work_dir.to_path_buf(),
        backend: "tcp".into(),
        ..cfg.clone()
    };
    let cfg_path = work_dir.join("worker_config.toml");
    output::write(&cfg_path, worker_cfg.to_toml())?;

    let exe = std::env::current_exe().map_err(|e| CliError::Runtime(format!("cannot locate own binary: {e}")))?;
    let children = (0..p)
        .map(|rank| {
            Command::new(&exe)
                .arg("worker")
                .arg("--config")
                .arg(&cfg_path)
                .arg("--rank")
                .arg(rank.to_string())
                .stdin(Stdio::null())
                .stdout(Stdio::null())
                .stderr(Stdio::piped())
                .spawn()
                .map_err(|e| CliError::Runtime(format!("cannot spawn worker {rank}: {e}")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut failures = Vec::new();
    for (rank, child) in children.into_iter().enumerate() {
        let out = child
            .wait_with_output()
            .map_err(|e| CliError::Runtime(format!("worker {rank}: {e}")))?;
        if !out.status.success() {
            failures.push((rank, String::from_utf8_lossy(&out.stderr).trim().to_string()));
        }
    }
    if !failures.is_empty() {
        // Report the root cause, not the ranks that merely lost a peer.
        let idx = failures
            .iter()
            .position(|(_, m)| !m.contains("disconnected"))
            .unwrap_or(0);
        let (rank, msg) = &failures[idx];
        return Err(CliError::Runtime(format!("worker process {rank} failed: {msg}")));
    }

    let trajectory = trajectory_from_binary(&output::read(&report_path(work_dir, 0, "bin"))?)?;
    let mut ledger = CommLedger::new();
    for rank in 0..p {
        let text = String::from_utf8_lossy(&output::read(&report_path(work_dir, rank, "ledger.csv"))?).into_owned();
        ledger.merge(&CommLedger::from_csv(&text)?);
    }
    let timing = read_timing(&report_path(work_dir, 0, "timing"))?;
    Ok(ProcessRun {
        trajectory,
        ledger,
        timing,
    })
}

fn read_timing(path: &Path) -> Result<Timing, CliError> {
    let text = String::from_utf8_lossy(&output::read(path)?).into_owned();
    let ns: Vec<u64> = text
        .split_whitespace()
        .map(str::parse)
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    match ns[..] {
        [compute, comm, total] => Ok(Timing {
            compute: Duration::from_nanos(compute),
            comm: Duration::from_nanos(comm),
            total: Duration::from_nanos(total),
        }),
        _ => Err(CliError::Runtime(format!(
            "{}: expected three durations",
            path.display()
        ))),
    }
}

/// Body of the hidden `worker` subcommand.
pub fn cmd_worker(cfg: &CliConfig, rank: usize) -> Result<(), CliError> {
    if cfg.hosts.len() != cfg.degree {
        return Err(CliError::Config(format!(
            "{} hosts given for degree {}",
            cfg.hosts.len(),
            cfg.degree
        )));
    }
    let weights = load_model(cfg)?;
    let model = Ballast::new(&weights, cfg.ballast);
    let sampler = cfg.sampler()?;
    let timeout = cfg.recv_timeout()?;
    let addrs = resolve_hosts(&cfg.hosts).map_err(|e| CliError::Config(e.to_string()))?;
    let mut endpoint = TcpEndpoint::bind(rank, addrs, timeout)
        .map_err(|e| CliError::Runtime(format!("rank {rank} cannot listen on {}: {e}", cfg.hosts[rank])))?;
    let wc = WorkerConfig {
        recv_timeout: timeout,
        ..WorkerConfig::new(cfg.degree, cfg.resolved_warmup()?, cfg.seed)
    };
    let report = run_worker(&wc, &mut endpoint, &model, &sampler)?;
    let dir = &cfg.out_dir;
    output::write(&report_path(dir, rank, "bin"), trajectory_to_binary(&report.trajectory))?;
    output::write(&report_path(dir, rank, "ledger.csv"), report.ledger.to_csv())?;
    let t = report.timing;
    output::write(
        &report_path(dir, rank, "timing"),
        format!(
            "{} {} {}\n",
            t.compute.as_nanos(),
            t.comm.as_nanos(),
            t.total.as_nanos()
        ),
    )
}
