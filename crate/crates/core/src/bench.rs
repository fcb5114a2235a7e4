//! Wall-clock comparison of sequential sampling against the distributed
//! protocol on one machine.

use std::hint::black_box;
use std::time::{Duration, Instant};

use crate::commodel::amdahl_speedup;
use crate::engines::Denoiser;
use crate::predictor::NoisePredictor;
use crate::protocol::{run_loopback, run_tcp_threads, ProtocolError, ProtocolOutcome, Timing, WorkerConfig};
use crate::schedule::Sampler;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchBackend {
    Loopback,
    TcpThreads,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchConfig {
    pub warmup: usize,
    pub degree: usize,
    pub seed: u64,
    /// Timed repetitions per variant, after one discarded warm run of each.
    pub repetitions: usize,
    pub backend: BenchBackend,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub steps: usize,
    pub sequential: Vec<Duration>,
    pub parallel: Vec<Duration>,
    pub sequential_median: Duration,
    pub parallel_median: Duration,
    pub speedup: f64,
    pub amdahl_bound: f64,
    /// Rank 0's time in predictor calls over its run time, median run.
    pub compute_share: f64,
    /// Rank 0's time inside send/receive, including time blocked on peers.
    pub comm_share: f64,
    pub cores: usize,
}

pub fn available_cores() -> usize {
    std::thread::available_parallelism().map_or(1, usize::from)
}

pub fn median(xs: &[Duration]) -> Duration {
    let mut v = xs.to_vec();
    v.sort();
    match v.len() {
        0 => Duration::ZERO,
        n if n % 2 == 1 => v[n / 2],
        n => (v[n / 2 - 1] + v[n / 2]) / 2,
    }
}

/// Mean wall-clock time of one `predict` call at step `T`.
pub fn time_forward(model: &dyn NoisePredictor, sampler: &Sampler, calls: usize) -> Duration {
    let x = sampler.initial_sample(0, model.data_dim());
    let t = sampler.step(sampler.steps()).expect("T is a valid step");
    let start = Instant::now();
    for _ in 0..calls.max(1) {
        black_box(model.predict(black_box(&x), t).ok());
    }
    start.elapsed() / calls.max(1) as u32
}

/// Ballast repeat count that brings one forward pass to at least `target`.
pub fn calibrate_ballast(model: &dyn NoisePredictor, sampler: &Sampler, target: Duration) -> u32 {
    let one = time_forward(model, sampler, 200).max(Duration::from_nanos(1));
    (target.as_secs_f64() / one.as_secs_f64()).ceil().max(1.0) as u32
}

fn run_parallel(
    cfg: &BenchConfig,
    model: &dyn NoisePredictor,
    sampler: &Sampler,
) -> Result<ProtocolOutcome, ProtocolError> {
    let w = WorkerConfig::new(cfg.degree, cfg.warmup, cfg.seed);
    match cfg.backend {
        BenchBackend::Loopback => run_loopback(&w, model, sampler),
        BenchBackend::TcpThreads => run_tcp_threads(&w, model, sampler),
    }
}

/// One timed protocol run: its latency and rank 0's time split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParallelSample {
    pub latency: Duration,
    pub timing: Timing,
}

pub fn run_bench(
    model: &dyn NoisePredictor,
    sampler: &Sampler,
    cfg: &BenchConfig,
) -> Result<BenchReport, ProtocolError> {
    run_bench_with(model, sampler, cfg, || {
        let start = Instant::now();
        let out = run_parallel(cfg, model, sampler)?;
        Ok(ParallelSample {
            latency: start.elapsed(),
            timing: out.root().timing,
        })
    })
}

/// [`run_bench`] with the protocol run supplied by the caller, for
/// launchers that live outside this process.
pub fn run_bench_with<F>(
    model: &dyn NoisePredictor,
    sampler: &Sampler,
    cfg: &BenchConfig,
    mut parallel_run: F,
) -> Result<BenchReport, ProtocolError>
where
    F: FnMut() -> Result<ParallelSample, ProtocolError>,
{
    if cfg.repetitions == 0 {
        return Err(ProtocolError::Config("at least one repetition is required".into()));
    }
    let steps = sampler.steps();
    let d = Denoiser::new(model, sampler);
    let timed_seq = || -> Result<Duration, ProtocolError> {
        let start = Instant::now();
        black_box(
            d.sequential(cfg.seed)
                .map_err(|e| ProtocolError::Config(e.to_string()))?,
        );
        Ok(start.elapsed())
    };
    timed_seq()?;
    parallel_run()?;
    // Alternating the variants spreads clock and load drift over both.
    let mut sequential = Vec::with_capacity(cfg.repetitions);
    let mut parallel = Vec::with_capacity(cfg.repetitions);
    let mut shares = Vec::with_capacity(cfg.repetitions);
    for _ in 0..cfg.repetitions {
        sequential.push(timed_seq()?);
        let ParallelSample { latency, timing: t } = parallel_run()?;
        let total = t.total.as_secs_f64().max(f64::MIN_POSITIVE);
        parallel.push(latency);
        shares.push((latency, t.compute.as_secs_f64() / total, t.comm.as_secs_f64() / total));
    }
    let sequential_median = median(&sequential);
    let parallel_median = median(&parallel);
    shares.sort_by_key(|s| s.0);
    let (_, compute_share, comm_share) = shares[shares.len() / 2];
    Ok(BenchReport {
        config: *cfg,
        steps,
        speedup: sequential_median.as_secs_f64() / parallel_median.as_secs_f64(),
        amdahl_bound: amdahl_speedup(cfg.warmup as f64 / steps as f64, cfg.degree),
        sequential,
        parallel,
        sequential_median,
        parallel_median,
        compute_share,
        comm_share,
        cores: available_cores(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn medians() {
        let ms = |v: &[u64]| v.iter().map(|&x| Duration::from_millis(x)).collect::<Vec<_>>();
        assert_eq!(median(&ms(&[5, 1, 3])), Duration::from_millis(3));
        assert_eq!(median(&ms(&[4, 1, 3, 2])), Duration::from_micros(2500));
        assert_eq!(median(&[]), Duration::ZERO);
    }
}
