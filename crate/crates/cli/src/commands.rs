use std::fmt::Write as _;
use std::time::Duration;

use parastep::bench::{
    available_cores, calibrate_ballast, run_bench, run_bench_with, time_forward, BenchBackend, BenchConfig,
    BenchReport, ParallelSample,
};
use parastep::commodel::{comm_table, sweep, CommModelParams};
use parastep::engines::{
    adjacent_similarity, compare_trajectories, trajectory_to_binary, trajectory_to_text, Denoiser, Trajectory,
};
use parastep::par::{self, Execution};
use parastep::predictor::{save_weights, train, Ballast, NoisePredictor};
use parastep::protocol::{
    run_loopback, verify_ledger, CommLedger, CycleLayout, LedgerReport, ProtocolError, WorkerConfig,
};

use crate::config::{Backend, CliConfig, StrategySpec};
use crate::error::CliError;
use crate::launch::{load_model, run_processes};
use crate::output::{self, csv_floats};

pub fn cmd_train(cfg: &CliConfig) -> Result<(), CliError> {
    let tc = cfg.train_config()?;
    let sampler = cfg.sampler()?;
    let out = train(&tc, &sampler)?;
    let path = cfg.weights_path();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
    }
    save_weights(&out.weights, &path)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
    let mut log = String::from("iteration,loss\n");
    for (i, l) in &out.log {
        let _ = writeln!(log, "{i},{l}");
    }
    output::write(&cfg.out_dir.join("loss.csv"), log)?;
    cfg.write_echo()?;
    println!(
        "trained {} ({} parameters, {} iterations); final loss {}; weights {}",
        tc.dataset,
        out.weights.param_count(),
        tc.iterations,
        out.final_loss.map_or_else(|| "n/a".to_string(), |l| format!("{l:.6}")),
        path.display()
    );
    Ok(())
}

struct Generated {
    trajectory: Trajectory,
    ledger: Option<CommLedger>,
}

fn generate_one(
    cfg: &CliConfig,
    model: &dyn NoisePredictor,
    d: &Denoiser<'_>,
    spec: StrategySpec,
    seed: u64,
    warmup: usize,
) -> Result<Generated, CliError> {
    match cfg.backend()? {
        Backend::Emulated => Ok(Generated {
            trajectory: spec.run(cfg, d, seed, warmup)?,
            ledger: None,
        }),
        Backend::Loopback => {
            let wc = WorkerConfig {
                recv_timeout: cfg.recv_timeout()?,
                ..WorkerConfig::new(cfg.degree, warmup, seed)
            };
            let out = run_loopback(&wc, model, d.sampler())?;
            Ok(Generated {
                trajectory: out.reports.into_iter().next().expect("rank 0 report").trajectory,
                ledger: Some(out.ledger),
            })
        }
        Backend::Tcp => {
            let run = run_processes(cfg, seed, warmup, &cfg.out_dir.join("workers"))?;
            Ok(Generated {
                trajectory: run.trajectory,
                ledger: Some(run.ledger),
            })
        }
    }
}

fn ledger_summary(r: &LedgerReport) -> String {
    let avg = r
        .per_step_average
        .map_or_else(|| "n/a".to_string(), |a| format!("{}/{}", a.numer(), a.denom()));
    let model = format!("{}/{}", r.model_per_step.numer(), r.model_per_step.denom());
    format!(
        "noise_frames = {}\nbcast_frames = {}\npayload_bytes = {}\nfull_cycles = {}\nper_step_payload_bytes = {avg}\nmodel_per_step_bytes = {model}\n",
        r.noise_frames, r.bcast_frames, r.measured_payload, r.full_cycles
    )
}

pub fn cmd_generate(cfg: &mut CliConfig) -> Result<(), CliError> {
    let warmup = cfg.pin_warmup()?;
    let spec = cfg.strategy_spec()?;
    let backend = cfg.backend()?;
    if backend != Backend::Emulated && !matches!(spec, StrategySpec::ParaStep(_)) {
        return Err(CliError::Config(format!(
            "backend `{}` only runs the parastep strategy",
            cfg.backend
        )));
    }
    if cfg.samples == 0 {
        return Err(CliError::Config("samples must be >= 1".into()));
    }
    let weights = load_model(cfg)?;
    let model = Ballast::new(&weights, cfg.ballast);
    let sampler = cfg.sampler()?;
    let d = Denoiser::new(&model, &sampler);

    let mut samples = String::from("seed");
    for k in 0..model.data_dim() {
        let _ = write!(samples, ",x{k}");
    }
    samples.push('\n');
    let mut summary = format!(
        "strategy = {spec}\nbackend = {}\nsteps = {}\nwarmup = {warmup}\nsamples = {}\n",
        cfg.backend,
        sampler.steps(),
        cfg.samples
    );
    let mut calls = 0;
    for i in 0..cfg.samples as u64 {
        let seed = cfg.seed + i;
        let g = generate_one(cfg, &model, &d, spec, seed, warmup)?;
        let _ = writeln!(
            samples,
            "{seed},{}",
            csv_floats(g.trajectory.final_sample.iter().copied())
        );
        calls += g.trajectory.calls;
        if i == 0 {
            output::write(&cfg.out_dir.join("trajectory.txt"), trajectory_to_text(&g.trajectory))?;
            output::write(&cfg.out_dir.join("trajectory.bin"), trajectory_to_binary(&g.trajectory))?;
            let _ = writeln!(
                summary,
                "first_seed_calls = {}\nfirst_seed_fresh = {}",
                g.trajectory.calls,
                g.trajectory.fresh_count()
            );
            if let Some(ledger) = &g.ledger {
                output::write(&cfg.out_dir.join("ledger.csv"), ledger.to_csv())?;
                let layout = CycleLayout {
                    steps: sampler.steps(),
                    warmup,
                    degree: cfg.degree,
                    data_dim: model.data_dim(),
                };
                summary.push_str(&ledger_summary(&verify_ledger(ledger, &layout)?));
            }
        }
    }
    let _ = writeln!(summary, "total_calls = {calls}");
    output::write(&cfg.out_dir.join("samples.csv"), samples)?;
    output::write(&cfg.out_dir.join("summary.txt"), &summary)?;
    cfg.write_echo()?;
    print!("{summary}");
    Ok(())
}

struct SeedResult {
    /// Per strategy: deviation rows, adjacent series and final divergence.
    deviation: Vec<String>,
    adjacent: Vec<(Vec<f64>, Vec<f64>)>,
    finals: Vec<(f64, f64)>,
    calls: Vec<usize>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => v[n / 2],
        n => (v[n / 2 - 1] + v[n / 2]) / 2.0,
    }
}

pub fn cmd_compare(cfg: &mut CliConfig, specs: &[String]) -> Result<(), CliError> {
    if !specs.is_empty() {
        cfg.compare = specs.to_vec();
    }
    let specs = cfg
        .compare
        .iter()
        .map(|s| StrategySpec::parse(s))
        .collect::<Result<Vec<_>, _>>()?;
    if specs.len() < 2 {
        return Err(CliError::Config("compare needs at least two strategy specs".into()));
    }
    if cfg.seeds == 0 {
        return Err(CliError::Config("seeds must be >= 1".into()));
    }
    let warmup = cfg.pin_warmup()?;
    let weights = load_model(cfg)?;
    let sampler = cfg.sampler()?;
    let d = Denoiser::new(&weights, &sampler);
    let steps = sampler.steps();
    let cfg_ref = &*cfg;

    let results = par::try_map_range(Execution::Parallel, cfg.seeds, |i| -> Result<SeedResult, CliError> {
        let seed = cfg_ref.seed + i as u64;
        let reference = d.sequential(seed)?;
        let mut r = SeedResult {
            deviation: Vec::new(),
            adjacent: Vec::new(),
            finals: Vec::new(),
            calls: Vec::new(),
        };
        for &spec in &specs {
            let strategy = spec.resolve(cfg_ref, warmup, || Ok(reference.clone()))?;
            let traj = d.run(&parastep::engines::RunConfig {
                steps,
                warmup,
                strategy,
                seed,
            })?;
            if traj.data_dim() != reference.data_dim() {
                return Err(CliError::Config(format!(
                    "{spec} produced dimension {} against {}",
                    traj.data_dim(),
                    reference.data_dim()
                )));
            }
            let diff = compare_trajectories(&reference, &traj)?;
            let mut rows = String::new();
            for row in &diff.rows {
                let _ = writeln!(
                    rows,
                    "{spec},{seed},{},{},{},{},{}",
                    row.t, row.rel_mae_x, row.rel_mae_eps, row.mse_x, row.mse_eps
                );
            }
            r.deviation.push(rows);
            r.adjacent.push(adjacent_similarity(&traj)?);
            r.finals.push((diff.final_rel_mae, diff.final_mse));
            r.calls.push(traj.calls);
        }
        Ok(r)
    })?;

    let mut deviation = String::from("strategy,seed,step,rel_mae_x,rel_mae_eps,mse_x,mse_eps\n");
    let mut adjacent = String::from("strategy,seed,step,rel_mae_x,rel_mae_eps\n");
    let mut finals = String::from("strategy,seed,final_rel_mae,final_mse\n");
    for (k, spec) in specs.iter().enumerate() {
        for (i, r) in results.iter().enumerate() {
            let seed = cfg.seed + i as u64;
            deviation.push_str(&r.deviation[k]);
            let (ax, ae) = &r.adjacent[k];
            // Entry j compares the noise at step T - j - 1 with the one before it.
            for (j, (x, e)) in ax.iter().zip(ae).enumerate() {
                let _ = writeln!(adjacent, "{spec},{seed},{},{x},{e}", steps - j - 1);
            }
            let _ = writeln!(finals, "{spec},{seed},{},{}", r.finals[k].0, r.finals[k].1);
        }
    }

    // Reuse-then-predict against direct reuse, seed by seed.
    let predictor = specs.iter().position(|s| s.predicts());
    let direct = specs.iter().position(|s| matches!(s, StrategySpec::DirectReuse(_)));
    let win_rate = predictor.zip(direct).map(|(a, b)| {
        let wins = results.iter().filter(|r| r.finals[a].0 < r.finals[b].0).count();
        wins as f64 / results.len() as f64
    });

    let mut summary = String::from("strategy,seeds,mean_final_rel_mae,median_final_rel_mae,max_final_rel_mae,mean_calls,win_rate_over_direct_reuse\n");
    let mut text = String::new();
    for (k, spec) in specs.iter().enumerate() {
        let f: Vec<f64> = results.iter().map(|r| r.finals[k].0).collect();
        let calls = mean(&results.iter().map(|r| r.calls[k] as f64).collect::<Vec<_>>());
        let win = match win_rate {
            Some(w) if predictor == Some(k) => w.to_string(),
            _ => "n/a".into(),
        };
        let max = f.iter().copied().fold(0.0, f64::max);
        let _ = writeln!(
            summary,
            "{spec},{},{},{},{max},{calls},{win}",
            f.len(),
            mean(&f),
            median(&f)
        );
        let _ = writeln!(
            text,
            "{:<16} mean final rel-MAE {:.5}  median {:.5}  max {:.5}  calls {calls:.1}",
            spec.to_string(),
            mean(&f),
            median(&f),
            max
        );
    }
    match (win_rate, predictor, direct) {
        (Some(w), Some(a), Some(b)) => {
            let _ = writeln!(
                text,
                "win rate of {} over {}: {w:.3} across {} seeds",
                specs[a],
                specs[b],
                results.len()
            );
        }
        _ => text.push_str("win rate: n/a (needs a predicting strategy and direct_reuse)\n"),
    }

    let dir = &cfg.out_dir;
    output::write(&dir.join("deviation.csv"), deviation)?;
    output::write(&dir.join("adjacent.csv"), adjacent)?;
    output::write(&dir.join("finals.csv"), finals)?;
    output::write(&dir.join("compare_summary.csv"), summary)?;
    output::write(&dir.join("compare_summary.txt"), &text)?;
    cfg.write_echo()?;
    print!("{text}");
    Ok(())
}

pub fn cmd_commodel(cfg: &CliConfig) -> Result<(), CliError> {
    let params: Vec<CommModelParams> = sweep(&cfg.layers, &cfg.messages, &cfg.degrees);
    if params.is_empty() {
        return Err(CliError::Config(
            "layers, messages and degrees must each list at least one value".into(),
        ));
    }
    let table = comm_table(&params).map_err(CliError::Config)?;
    let mut text = table.to_text();
    text.push_str("\nVolumes per denoising step in units of M; M is taken as constant across layers.\n");
    output::write(&cfg.out_dir.join("commodel.csv"), table.to_csv())?;
    output::write(&cfg.out_dir.join("commodel.txt"), &text)?;
    cfg.write_echo()?;
    print!("{text}");
    Ok(())
}

fn bench_text(r: &BenchReport, backend: &str, forward: Duration, ballast: u32) -> String {
    let c = &r.config;
    let mut s = String::new();
    let _ = writeln!(s, "backend = {backend}");
    let _ = writeln!(
        s,
        "degree = {}\nwarmup = {}\nsteps = {}\nrepetitions = {}",
        c.degree, c.warmup, r.steps, c.repetitions
    );
    let _ = writeln!(
        s,
        "ballast = {ballast}\nforward_ms = {:.3}",
        forward.as_secs_f64() * 1e3
    );
    let _ = writeln!(s, "sequential_median_s = {:.6}", r.sequential_median.as_secs_f64());
    let _ = writeln!(s, "parastep_median_s = {:.6}", r.parallel_median.as_secs_f64());
    let _ = writeln!(s, "speedup = {:.3}\namdahl_bound = {:.3}", r.speedup, r.amdahl_bound);
    let _ = writeln!(s, "within_bound = {}", r.speedup <= r.amdahl_bound * 1.05);
    let _ = writeln!(
        s,
        "compute_share = {:.4}\ncomm_share = {:.4}\ncores = {}",
        r.compute_share, r.comm_share, r.cores
    );
    s
}

pub fn cmd_bench(cfg: &mut CliConfig) -> Result<(), CliError> {
    let warmup = cfg.pin_warmup()?;
    let backend = cfg.backend()?;
    let weights = load_model(cfg)?;
    let sampler = cfg.sampler()?;
    if cfg.ballast == 0 {
        let target = Duration::try_from_secs_f64(cfg.ballast_ms / 1e3)
            .map_err(|_| CliError::Config(format!("bad ballast_ms {}", cfg.ballast_ms)))?;
        cfg.ballast = calibrate_ballast(&weights, &sampler, target);
    }
    let model = Ballast::new(&weights, cfg.ballast);
    let forward = time_forward(&model, &sampler, 5);
    if forward.as_secs_f64() * 1e3 < cfg.ballast_ms {
        eprintln!(
            "warning: one forward pass takes {forward:?}, below the {} ms the comparison assumes",
            cfg.ballast_ms
        );
    }
    let cores = available_cores();
    if cores < cfg.degree {
        eprintln!(
            "warning: {cores} core(s) available for {} ranks; speedup will be limited",
            cfg.degree
        );
    }
    let bc = BenchConfig {
        warmup,
        degree: cfg.degree,
        seed: cfg.seed,
        repetitions: cfg.repetitions,
        backend: BenchBackend::Loopback,
    };
    let report = match backend {
        Backend::Emulated | Backend::Loopback => run_bench(&model, &sampler, &bc)?,
        Backend::Tcp => {
            let dir = cfg.out_dir.join("workers");
            let cfg_ref = &*cfg;
            let mut failure = None;
            let r = run_bench_with(&model, &sampler, &bc, || {
                match run_processes(cfg_ref, cfg_ref.seed, warmup, &dir) {
                    // Latency is rank 0's protocol time; process start-up is excluded.
                    Ok(run) => Ok(ParallelSample {
                        latency: run.timing.total,
                        timing: run.timing,
                    }),
                    Err(e) => {
                        failure = Some(e);
                        Err(ProtocolError::Abort {
                            rank: 0,
                            step: 0,
                            reason: "worker processes failed".into(),
                        })
                    }
                }
            });
            match (r, failure) {
                (_, Some(e)) => return Err(e),
                (r, None) => r?,
            }
        }
    };
    let name = if backend == Backend::Tcp { "tcp" } else { "loopback" };
    let mut text = bench_text(&report, name, forward, cfg.ballast);
    if cores < cfg.degree {
        let _ = writeln!(text, "warning = fewer cores than ranks");
    }
    let mut csv = String::from("variant,repetition,seconds\n");
    for (label, runs) in [("sequential", &report.sequential), ("parastep", &report.parallel)] {
        for (i, t) in runs.iter().enumerate() {
            let _ = writeln!(csv, "{label},{i},{}", t.as_secs_f64());
        }
    }
    output::write(&cfg.out_dir.join("bench.txt"), &text)?;
    output::write(&cfg.out_dir.join("bench.csv"), csv)?;
    cfg.write_echo()?;
    print!("{text}");
    Ok(())
}
