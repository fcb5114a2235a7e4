//! Flat TOML run configuration. Precedence is built-in defaults, then the
//! `--config` file, then command-line flags.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Duration;

use parastep::engines::{generate_threshold_schedule, warmup_from_ratio, Denoiser, Strategy, Trajectory};
use parastep::predictor::{Activation, Dataset, TrainConfig};
use parastep::schedule::{NoiseSchedule, Sampler, SigmaMode};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const EFFECTIVE_CONFIG: &str = "effective_config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Defaults to `<out_dir>/weights.pswt`.
    pub weights: Option<PathBuf>,

    pub dataset: String,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub activation: String,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub log_interval: usize,

    /// `ddpm` or `flow`.
    pub sampler: String,
    pub steps: usize,
    pub sigma_mode: String,
    /// Both unset means the DDPM ramp rescaled to `steps`.
    pub beta_start: Option<f64>,
    pub beta_end: Option<f64>,

    pub strategy: String,
    pub degree: usize,
    pub cycle: usize,
    pub stride: usize,
    /// Warm-up step count; takes precedence over `warmup_ratio`.
    pub warmup: Option<usize>,
    pub warmup_ratio: f64,
    /// Explicit cycle lengths for `dynamic`; empty means derive them from
    /// the sequential run with `tau`, capped at `cycle`.
    pub cycles: Vec<usize>,
    pub tau: f64,
    pub samples: usize,

    /// `emulated`, `loopback` or `tcp`.
    pub backend: String,
    pub hosts: Vec<String>,
    pub recv_timeout_secs: f64,
    /// Extra forward passes per prediction, to make the toy model slow.
    pub ballast: u32,
    /// Bench only: with `ballast = 0`, calibrate it to this forward time.
    pub ballast_ms: f64,
    pub repetitions: usize,

    pub compare: Vec<String>,
    pub seeds: usize,

    pub layers: Vec<u64>,
    pub messages: Vec<u64>,
    pub degrees: Vec<u64>,
}

impl Default for CliConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            seed: 0,
            out_dir: PathBuf::from("out"),
            weights: None,
            dataset: t.dataset.name().to_string(),
            hidden: t.hidden,
            embed_dim: t.embed_dim,
            activation: t.activation.to_string(),
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            iterations: t.iterations,
            log_interval: t.log_interval,
            sampler: "ddpm".into(),
            steps: 50,
            sigma_mode: SigmaMode::Posterior.to_string(),
            beta_start: None,
            beta_end: None,
            strategy: "sequential".into(),
            degree: 2,
            cycle: 2,
            stride: 2,
            warmup: None,
            warmup_ratio: 0.2,
            cycles: Vec::new(),
            tau: 0.5,
            samples: 1,
            backend: "emulated".into(),
            hosts: Vec::new(),
            recv_timeout_secs: 30.0,
            ballast: 0,
            ballast_ms: 5.0,
            repetitions: 5,
            compare: Vec::new(),
            seeds: 50,
            layers: vec![8, 16, 32],
            messages: vec![1],
            degrees: parastep::commodel::DEFAULT_DEGREES.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backend {
    Emulated,
    Loopback,
    Tcp,
}

/// One strategy as named on the command line, e.g. `parastep:4`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StrategySpec {
    Sequential,
    DirectReuse(usize),
    ParaStep(usize),
    BatchStep(usize),
    /// Threshold-derived cycles capped at this length.
    Dynamic(usize),
}

impl StrategySpec {
    pub fn parse(s: &str) -> Result<Self, CliError> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let n = |default: usize| -> Result<usize, CliError> {
            match arg {
                None => Ok(default),
                Some(a) => a
                    .parse()
                    .map_err(|_| CliError::Config(format!("bad number `{a}` in strategy `{s}`"))),
            }
        };
        Ok(match name {
            "sequential" if arg.is_none() => StrategySpec::Sequential,
            "direct_reuse" => StrategySpec::DirectReuse(n(2)?),
            "parastep" => StrategySpec::ParaStep(n(2)?),
            "batchstep" => StrategySpec::BatchStep(n(2)?),
            "dynamic" => StrategySpec::Dynamic(n(4)?),
            _ => {
                return Err(CliError::Config(format!(
                    "unknown strategy `{s}` (expected sequential, direct_reuse[:k], parastep[:p], batchstep[:s], dynamic[:max])"
                )))
            }
        })
    }

    /// Whether the strategy predicts skipped noise rather than copying it.
    pub fn predicts(self) -> bool {
        matches!(
            self,
            StrategySpec::ParaStep(_) | StrategySpec::BatchStep(_) | StrategySpec::Dynamic(_)
        )
    }

    /// Concrete engine strategy for one seed. `dynamic` without explicit
    /// cycles needs the sequential reference for that seed.
    pub fn resolve(
        self,
        cfg: &CliConfig,
        warmup: usize,
        reference: impl FnOnce() -> Result<Trajectory, CliError>,
    ) -> Result<Strategy, CliError> {
        Ok(match self {
            StrategySpec::Sequential => Strategy::Sequential,
            StrategySpec::DirectReuse(stride) => Strategy::DirectReuse { stride },
            StrategySpec::ParaStep(degree) => Strategy::ParaStep { degree },
            StrategySpec::BatchStep(cycle) => Strategy::BatchStep { cycle },
            StrategySpec::Dynamic(_) if !cfg.cycles.is_empty() => Strategy::Dynamic {
                cycles: cfg.cycles.clone(),
            },
            StrategySpec::Dynamic(max_len) => {
                let r = reference()?;
                Strategy::Dynamic {
                    cycles: generate_threshold_schedule(&r, warmup, cfg.tau, max_len)?,
                }
            }
        })
    }

    pub fn run(self, cfg: &CliConfig, d: &Denoiser<'_>, seed: u64, warmup: usize) -> Result<Trajectory, CliError> {
        let strategy = self.resolve(cfg, warmup, || Ok(d.sequential(seed)?))?;
        let run = parastep::engines::RunConfig {
            steps: d.steps(),
            warmup,
            strategy,
            seed,
        };
        Ok(d.run(&run)?)
    }
}

impl fmt::Display for StrategySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StrategySpec::Sequential => f.write_str("sequential"),
            StrategySpec::DirectReuse(k) => write!(f, "direct_reuse:{k}"),
            StrategySpec::ParaStep(p) => write!(f, "parastep:{p}"),
            StrategySpec::BatchStep(s) => write!(f, "batchstep:{s}"),
            StrategySpec::Dynamic(m) => write!(f, "dynamic:{m}"),
        }
    }
}

fn parse_field<T: std::str::FromStr>(field: &str, value: &str) -> Result<T, CliError>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e: T::Err| CliError::Config(format!("{field}: {e}")))
}

impl CliConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config always serializes")
    }

    /// Writes the echo that reproduces this run.
    pub fn write_echo(&self) -> Result<(), CliError> {
        crate::output::write(&self.out_dir.join(EFFECTIVE_CONFIG), self.to_toml())
    }

    pub fn weights_path(&self) -> PathBuf {
        self.weights
            .clone()
            .unwrap_or_else(|| self.out_dir.join("weights.pswt"))
    }

    pub fn sampler(&self) -> Result<Sampler, CliError> {
        match self.sampler.as_str() {
            "flow" => Ok(Sampler::Flow { steps: self.steps }),
            "ddpm" => {
                let mode: SigmaMode = parse_field("sigma_mode", &self.sigma_mode)?;
                let sched = match (self.beta_start, self.beta_end) {
                    (None, None) => NoiseSchedule::ddpm_default(self.steps, mode)?,
                    (Some(a), Some(b)) => NoiseSchedule::linear(self.steps, a, b, mode)?,
                    _ => return Err(CliError::Config("set both beta_start and beta_end, or neither".into())),
                };
                Ok(Sampler::Ddpm(sched))
            }
            other => Err(CliError::Config(format!(
                "unknown sampler `{other}` (expected ddpm|flow)"
            ))),
        }
    }

    pub fn resolved_warmup(&self) -> Result<usize, CliError> {
        match self.warmup {
            Some(w) => Ok(w),
            None => Ok(warmup_from_ratio(self.warmup_ratio, self.steps)?),
        }
    }

    /// Fixes the warm-up as a count so the echo does not depend on rounding.
    pub fn pin_warmup(&mut self) -> Result<usize, CliError> {
        let w = self.resolved_warmup()?;
        self.warmup = Some(w);
        Ok(w)
    }

    pub fn strategy_spec(&self) -> Result<StrategySpec, CliError> {
        Ok(match self.strategy.as_str() {
            "sequential" => StrategySpec::Sequential,
            "direct_reuse" => StrategySpec::DirectReuse(self.stride),
            "parastep" => StrategySpec::ParaStep(self.degree),
            "batchstep" => StrategySpec::BatchStep(self.cycle),
            "dynamic" => StrategySpec::Dynamic(self.cycle),
            other => {
                return Err(CliError::Config(format!(
                    "unknown strategy `{other}` (expected sequential|direct_reuse|parastep|batchstep|dynamic)"
                )))
            }
        })
    }

    pub fn backend(&self) -> Result<Backend, CliError> {
        match self.backend.as_str() {
            "emulated" => Ok(Backend::Emulated),
            "loopback" => Ok(Backend::Loopback),
            "tcp" => Ok(Backend::Tcp),
            other => Err(CliError::Config(format!(
                "unknown backend `{other}` (expected emulated|loopback|tcp)"
            ))),
        }
    }

    pub fn recv_timeout(&self) -> Result<Duration, CliError> {
        Duration::try_from_secs_f64(self.recv_timeout_secs)
            .ok()
            .filter(|d| !d.is_zero())
            .ok_or_else(|| {
                CliError::Config(format!(
                    "recv_timeout_secs must be positive, got {}",
                    self.recv_timeout_secs
                ))
            })
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let dataset: Dataset = parse_field("dataset", &self.dataset)?;
        let activation: Activation = parse_field("activation", &self.activation)?;
        let cfg = TrainConfig {
            dataset,
            hidden: self.hidden.clone(),
            embed_dim: self.embed_dim,
            activation,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            iterations: self.iterations,
            seed: self.seed,
            log_interval: self.log_interval,
            ..TrainConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trips() {
        let mut c = CliConfig {
            strategy: "parastep".into(),
            hosts: vec!["127.0.0.1:7000".into(), "127.0.0.1:7001".into()],
            beta_start: Some(1e-3),
            beta_end: Some(0.3),
            ..CliConfig::default()
        };
        c.pin_warmup().unwrap();
        let back: CliConfig = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.warmup, Some(10));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<CliConfig>("degre = 4\n").is_err());
        let c: CliConfig = toml::from_str("degree = 4\nstrategy = \"parastep\"\n").unwrap();
        assert_eq!(c.strategy_spec().unwrap(), StrategySpec::ParaStep(4));
    }

    #[test]
    fn strategy_specs_parse_and_print() {
        for s in ["sequential", "direct_reuse:3", "parastep:4", "batchstep:2", "dynamic:5"] {
            assert_eq!(StrategySpec::parse(s).unwrap().to_string(), s);
        }
        assert_eq!(StrategySpec::parse("parastep").unwrap(), StrategySpec::ParaStep(2));
        assert!(StrategySpec::parse("parastep:x").is_err());
        assert!(StrategySpec::parse("sequential:2").is_err());
        assert!(StrategySpec::parse("ring").is_err());
    }

    #[test]
    fn sampler_and_warmup_resolution() {
        let c = CliConfig::default();
        assert_eq!(c.resolved_warmup().unwrap(), 10);
        assert_eq!(
            CliConfig {
                warmup: Some(3),
                ..c.clone()
            }
            .resolved_warmup()
            .unwrap(),
            3
        );
        assert!(CliConfig {
            warmup_ratio: 1.5,
            ..c.clone()
        }
        .resolved_warmup()
        .is_err());
        assert!(matches!(
            CliConfig {
                sampler: "flow".into(),
                ..c.clone()
            }
            .sampler()
            .unwrap(),
            Sampler::Flow { steps: 50 }
        ));
        assert!(CliConfig {
            beta_start: Some(0.1),
            ..c.clone()
        }
        .sampler()
        .is_err());
        assert!(CliConfig {
            sigma_mode: "learned".into(),
            ..c
        }
        .sampler()
        .is_err());
    }
}
