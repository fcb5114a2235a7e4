//! Single-process sampling strategies.
//!
//! * sequential: one fresh prediction per step.
//! * direct reuse: fresh prediction every `stride` steps, the last one reused in between.
//! * reuse-then-predict ([`Denoiser::parastep`]): the round-based multi-rank
//!   protocol emulated with virtual ranks in one process.
//! * batch-step: the same semantics with each cycle's predictions evaluated
//!   in one batched call.
//! * dynamic: reuse-then-predict with a per-cycle length schedule.
//!
//! All strategies share the first `warmup` steps with the sequential run and
//! derive `x_T` and per-step sampling noise from the seed.

mod diagnostics;
mod format;
mod reuse_predict;

pub use diagnostics::{adjacent_similarity, compare_trajectories, generate_threshold_schedule, DiffReport, DiffRow};
pub use format::{trajectory_from_binary, trajectory_from_text, trajectory_to_binary, trajectory_to_text};
pub use reuse_predict::{BatchStepRun, Cycle, ParaStepRun, VirtualWorkerState};

use thiserror::Error;

use crate::numerics::{NumericsError, Vector};
use crate::predictor::{NoisePredictor, PredictorError};
use crate::schedule::{Sampler, ScheduleError, StepIndex};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid run configuration: {0}")]
    Config(String),
    #[error("trajectory format error at {location}: {reason}")]
    Format { location: String, reason: String },
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

fn config_err<T>(msg: impl Into<String>) -> Result<T, EngineError> {
    Err(EngineError::Config(msg.into()))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Strategy {
    Sequential,
    DirectReuse { stride: usize },
    ParaStep { degree: usize },
    BatchStep { cycle: usize },
    Dynamic { cycles: Vec<usize> },
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Sequential => "sequential",
            Strategy::DirectReuse { .. } => "direct_reuse",
            Strategy::ParaStep { .. } => "parastep",
            Strategy::BatchStep { .. } => "batchstep",
            Strategy::Dynamic { .. } => "dynamic",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunConfig {
    pub steps: usize,
    pub warmup: usize,
    pub strategy: Strategy,
    pub seed: u64,
}

/// `round(m · T)`.
pub fn warmup_from_ratio(ratio: f64, steps: usize) -> Result<usize, EngineError> {
    if !(0.0..=1.0).contains(&ratio) {
        return config_err(format!("warm-up ratio {ratio} outside [0, 1]"));
    }
    Ok((ratio * steps as f64).round() as usize)
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        if self.steps == 0 {
            return config_err("at least one step is required");
        }
        if self.warmup > self.steps {
            return config_err(format!("warm-up {} exceeds total steps {}", self.warmup, self.steps));
        }
        let remaining = self.steps - self.warmup;
        match &self.strategy {
            Strategy::Sequential => {}
            Strategy::DirectReuse { stride } if *stride == 0 => return config_err("stride must be >= 1"),
            Strategy::DirectReuse { .. } => {}
            Strategy::ParaStep { degree: d } | Strategy::BatchStep { cycle: d } => {
                if *d == 0 {
                    return config_err("degree of parallelism must be >= 1");
                }
                if *d > 1 && self.warmup == 0 && remaining > 0 {
                    return config_err(format!(
                        "degree {d} needs at least one warm-up step to populate the noise cache"
                    ));
                }
            }
            Strategy::Dynamic { cycles } => {
                if cycles.contains(&0) {
                    return config_err("cycle lengths must be >= 1");
                }
                let sum: usize = cycles.iter().sum();
                if sum != remaining {
                    return config_err(format!("cycle lengths sum to {sum}, expected T - warmup = {remaining}"));
                }
                if self.warmup == 0 && cycles.iter().any(|c| *c > 1) {
                    return config_err("cycles longer than 1 need at least one warm-up step");
                }
            }
        }
        Ok(())
    }
}

/// Where the noise applied at a step came from, from the point of view of
/// the rank that recorded it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NoiseSource {
    /// This rank ran the predictor.
    Fresh,
    /// This rank reused its cached noise.
    Cached,
    /// Received from the round's master rank.
    Remote,
}

impl NoiseSource {
    pub fn as_str(self) -> &'static str {
        match self {
            NoiseSource::Fresh => "fresh",
            NoiseSource::Cached => "cached",
            NoiseSource::Remote => "remote",
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            NoiseSource::Fresh => 0,
            NoiseSource::Cached => 1,
            NoiseSource::Remote => 2,
        }
    }

    pub(crate) fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(NoiseSource::Fresh),
            1 => Some(NoiseSource::Cached),
            2 => Some(NoiseSource::Remote),
            _ => None,
        }
    }
}

impl std::str::FromStr for NoiseSource {
    type Err = EngineError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fresh" => Ok(NoiseSource::Fresh),
            "cached" => Ok(NoiseSource::Cached),
            "remote" => Ok(NoiseSource::Remote),
            other => Err(EngineError::Format {
                location: "record".into(),
                reason: format!("unknown noise source `{other}`"),
            }),
        }
    }
}

/// Step `t`: the input state `x_t` and the noise the scheduler consumed.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: usize,
    pub x: Vector,
    pub eps: Vector,
    pub source: NoiseSource,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// One record per step, in denoising order `T, ..., 1`.
    pub records: Vec<StepRecord>,
    pub final_sample: Vector,
    /// Predictor calls made by the recording rank.
    pub calls: usize,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.records.len()
    }

    pub fn data_dim(&self) -> usize {
        self.final_sample.len()
    }

    pub fn fresh_count(&self) -> usize {
        self.records.iter().filter(|r| r.source == NoiseSource::Fresh).count()
    }

    /// Bitwise equality of every state, noise, flag and the call count.
    pub fn bits_eq(&self, other: &Trajectory) -> bool {
        self.calls == other.calls
            && self.final_sample.bits_eq(&other.final_sample)
            && self.records.len() == other.records.len()
            && self
                .records
                .iter()
                .zip(&other.records)
                .all(|(a, b)| a.t == b.t && a.source == b.source && a.x.bits_eq(&b.x) && a.eps.bits_eq(&b.eps))
    }

    /// Index of the first record whose state or noise differs bitwise.
    pub fn first_divergence(&self, other: &Trajectory) -> Option<usize> {
        self.records
            .iter()
            .zip(&other.records)
            .position(|(a, b)| !(a.x.bits_eq(&b.x) && a.eps.bits_eq(&b.eps)))
    }
}

/// Runs sampling strategies for one predictor/scheduler pair.
pub struct Denoiser<'a> {
    model: &'a dyn NoisePredictor,
    sampler: &'a Sampler,
}

impl<'a> Denoiser<'a> {
    pub fn new(model: &'a dyn NoisePredictor, sampler: &'a Sampler) -> Self {
        Self { model, sampler }
    }

    pub fn model(&self) -> &'a dyn NoisePredictor {
        self.model
    }

    pub fn sampler(&self) -> &'a Sampler {
        self.sampler
    }

    pub fn steps(&self) -> usize {
        self.sampler.steps()
    }

    fn initial(&self, seed: u64) -> Vector {
        self.sampler.initial_sample(seed, self.model.data_dim())
    }

    pub(crate) fn update(&self, x: &Vector, t: StepIndex, eps: &Vector, seed: u64) -> Result<Vector, EngineError> {
        Ok(self.sampler.update(x, t, eps, seed)?)
    }

    fn check_warmup(&self, warmup: usize) -> Result<(), EngineError> {
        if warmup > self.steps() {
            return config_err(format!("warm-up {warmup} exceeds {} steps", self.steps()));
        }
        Ok(())
    }

    /// Dispatches on `cfg.strategy`.
    pub fn run(&self, cfg: &RunConfig) -> Result<Trajectory, EngineError> {
        cfg.validate()?;
        if cfg.steps != self.steps() {
            return config_err(format!(
                "config has {} steps, scheduler has {}",
                cfg.steps,
                self.steps()
            ));
        }
        match &cfg.strategy {
            Strategy::Sequential => self.sequential(cfg.seed),
            Strategy::DirectReuse { stride } => self.direct_reuse(cfg.seed, cfg.warmup, *stride),
            Strategy::ParaStep { degree } => Ok(self.parastep(cfg.seed, cfg.warmup, *degree)?.trajectory),
            Strategy::BatchStep { cycle } => Ok(self.batchstep(cfg.seed, cfg.warmup, *cycle)?.trajectory),
            Strategy::Dynamic { cycles } => self.dynamic(cfg.seed, cfg.warmup, cycles),
        }
    }

    pub fn sequential(&self, seed: u64) -> Result<Trajectory, EngineError> {
        let mut x = self.initial(seed);
        let mut records = Vec::with_capacity(self.steps());
        for t in StepIndex::descending(self.steps()) {
            let eps = self.model.predict(&x, t)?;
            let next = self.update(&x, t, &eps, seed)?;
            records.push(StepRecord {
                t: t.t(),
                x,
                eps,
                source: NoiseSource::Fresh,
            });
            x = next;
        }
        Ok(Trajectory {
            calls: records.len(),
            records,
            final_sample: x,
        })
    }

    /// Sequential during warm-up, then a fresh prediction whenever
    /// `(steps since warm-up) mod stride == 0`.
    pub fn direct_reuse(&self, seed: u64, warmup: usize, stride: usize) -> Result<Trajectory, EngineError> {
        self.check_warmup(warmup)?;
        if stride == 0 {
            return config_err("stride must be >= 1");
        }
        let mut x = self.initial(seed);
        let mut records = Vec::with_capacity(self.steps());
        let mut last: Option<Vector> = None;
        let mut calls = 0;
        for (i, t) in StepIndex::descending(self.steps()).enumerate() {
            let fresh = i < warmup || (i - warmup) % stride == 0;
            let (eps, source) = match (&last, fresh) {
                (Some(cached), false) => (cached.clone(), NoiseSource::Cached),
                _ => {
                    calls += 1;
                    (self.model.predict(&x, t)?, NoiseSource::Fresh)
                }
            };
            let next = self.update(&x, t, &eps, seed)?;
            last = Some(eps.clone());
            records.push(StepRecord {
                t: t.t(),
                x,
                eps,
                source,
            });
            x = next;
        }
        Ok(Trajectory {
            records,
            final_sample: x,
            calls,
        })
    }

    /// Reuse-then-predict with `degree` virtual ranks, replicating the
    /// round-based protocol step for step.
    pub fn parastep(&self, seed: u64, warmup: usize, degree: usize) -> Result<ParaStepRun, EngineError> {
        self.check_warmup(warmup)?;
        let plan = Cycle::fixed_plan(self.steps() - warmup, degree)?;
        self.reuse_then_predict(seed, warmup, &plan, degree)
    }

    /// Reuse-then-predict with one cycle per entry of `cycles`, resynchronising
    /// at the end of every cycle.
    pub fn dynamic(&self, seed: u64, warmup: usize, cycles: &[usize]) -> Result<Trajectory, EngineError> {
        self.check_warmup(warmup)?;
        let remaining = self.steps() - warmup;
        if cycles.contains(&0) || cycles.iter().sum::<usize>() != remaining {
            return config_err(format!(
                "cycle schedule {cycles:?} must hold positive lengths summing to {remaining}"
            ));
        }
        let plan: Vec<Cycle> = cycles.iter().map(|&len| Cycle { len, resync: true }).collect();
        let width = cycles.iter().copied().max().unwrap_or(1);
        Ok(self.reuse_then_predict(seed, warmup, &plan, width)?.trajectory)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratio_helper_rounds() {
        assert_eq!(warmup_from_ratio(0.3, 50).unwrap(), 15);
        assert_eq!(warmup_from_ratio(0.25, 10).unwrap(), 3);
        assert_eq!(warmup_from_ratio(0.0, 10).unwrap(), 0);
        assert!(warmup_from_ratio(1.5, 10).is_err());
    }

    #[test]
    fn config_validation() {
        let base = RunConfig {
            steps: 20,
            warmup: 0,
            strategy: Strategy::ParaStep { degree: 4 },
            seed: 1,
        };
        assert!(base.validate().is_err());
        let ok = RunConfig {
            warmup: 2,
            ..base.clone()
        };
        assert!(ok.validate().is_ok());
        let p1 = RunConfig {
            strategy: Strategy::ParaStep { degree: 1 },
            ..base.clone()
        };
        assert!(p1.validate().is_ok());
        let dyn_bad = RunConfig {
            warmup: 2,
            strategy: Strategy::Dynamic { cycles: vec![3, 3, 3] },
            ..base.clone()
        };
        assert!(dyn_bad.validate().is_err());
        let dyn_ok = RunConfig {
            warmup: 2,
            strategy: Strategy::Dynamic { cycles: vec![6, 6, 6] },
            ..base.clone()
        };
        assert!(dyn_ok.validate().is_ok());
        let too_long = RunConfig { warmup: 21, ..base };
        assert!(too_long.validate().is_err());
    }
}
