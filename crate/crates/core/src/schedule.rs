//! Noise schedules and the closed-form scheduler updates consuming predicted noise.
//!
//! Steps are 1-based: denoising visits `t = T, T-1, ..., 1` and step `t`
//! maps `x_t` to `x_{t-1}`.

use thiserror::Error;

use crate::numerics::{NumericsError, RngStream, StreamPurpose, Vector};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScheduleError {
    #[error("invalid schedule parameter: {0}")]
    InvalidParameter(String),
    #[error("step {t} outside [1, {total}]")]
    StepOutOfRange { t: usize, total: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// A denoising step `t` in `[1, total]`.
///
/// Carries the total step count because the predictor conditions on `t / T`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StepIndex {
    t: usize,
    total: usize,
}

impl StepIndex {
    pub fn new(t: usize, total: usize) -> Result<Self, ScheduleError> {
        if t == 0 || t > total {
            return Err(ScheduleError::StepOutOfRange { t, total });
        }
        Ok(Self { t, total })
    }

    pub fn t(self) -> usize {
        self.t
    }

    pub fn total(self) -> usize {
        self.total
    }

    /// The next step in denoising order, `None` after `t = 1`.
    pub fn next(self) -> Option<StepIndex> {
        (self.t > 1).then(|| StepIndex {
            t: self.t - 1,
            total: self.total,
        })
    }

    /// Denoising order `T, T-1, ..., 1`.
    pub fn descending(total: usize) -> impl Iterator<Item = StepIndex> {
        (1..=total).rev().map(move |t| StepIndex { t, total })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SigmaMode {
    /// `σ_t² = β_t (1 − ᾱ_{t−1}) / (1 − ᾱ_t)`.
    Posterior,
    /// Deterministic sampling.
    Zero,
}

impl std::str::FromStr for SigmaMode {
    type Err = ScheduleError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "posterior" => Ok(SigmaMode::Posterior),
            "zero" => Ok(SigmaMode::Zero),
            other => Err(ScheduleError::InvalidParameter(format!(
                "unknown sigma mode `{other}` (expected posterior|zero)"
            ))),
        }
    }
}

impl std::fmt::Display for SigmaMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SigmaMode::Posterior => "posterior",
            SigmaMode::Zero => "zero",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
    sigma_mode: SigmaMode,
}

impl NoiseSchedule {
    /// Builds the derived arrays from `β_1..β_T`.
    pub fn from_betas(beta: Vec<f64>, sigma_mode: SigmaMode) -> Result<Self, ScheduleError> {
        if beta.is_empty() {
            return Err(ScheduleError::InvalidParameter("empty beta schedule".into()));
        }
        if let Some(b) = beta.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(ScheduleError::InvalidParameter(format!("beta {b} not in (0, 1)")));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let sigma = match sigma_mode {
            SigmaMode::Zero => vec![0.0; beta.len()],
            SigmaMode::Posterior => (0..beta.len())
                .map(|i| {
                    let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
                    (beta[i] * (1.0 - prev) / (1.0 - alpha_bar[i])).sqrt()
                })
                .collect(),
        };
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
            sigma,
            sigma_mode,
        })
    }

    /// Linear ramp from `beta_start` at `t = 1` to `beta_end` at `t = T`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64, sigma_mode: SigmaMode) -> Result<Self, ScheduleError> {
        if steps < 2 {
            return Err(ScheduleError::InvalidParameter(format!(
                "linear schedule needs T >= 2, got {steps}"
            )));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(ScheduleError::InvalidParameter(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let span = (steps - 1) as f64;
        let beta = (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / span)
            .collect();
        Self::from_betas(beta, sigma_mode)
    }

    /// DDPM's `1e-4 → 0.02` ramp over 1000 steps, rescaled by `1000 / T`.
    pub fn ddpm_default(steps: usize, sigma_mode: SigmaMode) -> Result<Self, ScheduleError> {
        let scale = 1000.0 / steps.max(1) as f64;
        Self::linear(steps, 1e-4 * scale, (0.02 * scale).min(0.999), sigma_mode)
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn sigma_mode(&self) -> SigmaMode {
        self.sigma_mode
    }

    fn idx(&self, t: StepIndex) -> Result<usize, ScheduleError> {
        if t.total() != self.steps() {
            return Err(ScheduleError::StepOutOfRange {
                t: t.t(),
                total: self.steps(),
            });
        }
        Ok(t.t() - 1)
    }

    pub fn step(&self, t: usize) -> Result<StepIndex, ScheduleError> {
        StepIndex::new(t, self.steps())
    }

    pub fn beta(&self, t: StepIndex) -> Result<f64, ScheduleError> {
        Ok(self.beta[self.idx(t)?])
    }

    pub fn alpha(&self, t: StepIndex) -> Result<f64, ScheduleError> {
        Ok(self.alpha[self.idx(t)?])
    }

    pub fn alpha_bar(&self, t: StepIndex) -> Result<f64, ScheduleError> {
        Ok(self.alpha_bar[self.idx(t)?])
    }

    pub fn sigma(&self, t: StepIndex) -> Result<f64, ScheduleError> {
        Ok(self.sigma[self.idx(t)?])
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigma
    }
}

/// `√ᾱ·x0 + √(1−ᾱ)·noise` for an explicit `ᾱ`.
pub(crate) fn forward_with_alpha_bar(x0: &Vector, noise: &Vector, alpha_bar: f64) -> Result<Vector, NumericsError> {
    x0.lin_comb(alpha_bar.sqrt(), noise, (1.0 - alpha_bar).sqrt())
}

/// Closed-form forward process: sample `x_t` directly from `x_0`.
pub fn forward_sample(
    x0: &Vector,
    t: StepIndex,
    noise: &Vector,
    sched: &NoiseSchedule,
) -> Result<Vector, ScheduleError> {
    Ok(forward_with_alpha_bar(x0, noise, sched.alpha_bar(t)?)?)
}

/// `μ_θ(x_t, t) = (x_t − (1−α_t)/√(1−ᾱ_t)·ε) / √α_t`.
pub fn posterior_mean(
    x_t: &Vector,
    t: StepIndex,
    eps: &Vector,
    sched: &NoiseSchedule,
) -> Result<Vector, ScheduleError> {
    let alpha = sched.alpha(t)?;
    let alpha_bar = sched.alpha_bar(t)?;
    let coef = (1.0 - alpha) / (1.0 - alpha_bar).sqrt();
    let inv = 1.0 / alpha.sqrt();
    x_t.check_len(eps)?;
    Ok(Vector::new(
        x_t.iter().zip(eps.iter()).map(|(x, e)| inv * (x - coef * e)).collect(),
    )?)
}

/// One reverse DDPM step. The noise term is skipped at `t = 1` and in
/// [`SigmaMode::Zero`], so the output is then exactly the posterior mean.
pub fn ddpm_step(
    x_t: &Vector,
    t: StepIndex,
    eps: &Vector,
    sched: &NoiseSchedule,
    step_noise: &Vector,
) -> Result<Vector, ScheduleError> {
    let mean = posterior_mean(x_t, t, eps, sched)?;
    mean.check_len(step_noise)?;
    if t.t() == 1 || sched.sigma_mode() == SigmaMode::Zero {
        return Ok(mean);
    }
    let sigma = sched.sigma(t)?;
    Ok(mean.lin_comb(1.0, step_noise, sigma)?)
}

/// Explicit Euler step of a learned velocity field: `z + dt·v`.
pub fn euler_flow_step(z: &Vector, v: &Vector, dt: f64) -> Result<Vector, NumericsError> {
    z.check_len(v)?;
    Vector::new(z.iter().zip(v.iter()).map(|(a, b)| a + dt * b).collect())
}

/// The scheduler driving a sampling run.
///
/// In flow mode step `t` integrates from `τ = (T − t)/T` to `τ + 1/T`, so the
/// run starts at the reference distribution (`τ = 0`) and ends at `τ = 1`.
#[derive(Debug, Clone, PartialEq)]
pub enum Sampler {
    Ddpm(NoiseSchedule),
    Flow { steps: usize },
}

impl Sampler {
    pub fn steps(&self) -> usize {
        match self {
            Sampler::Ddpm(s) => s.steps(),
            Sampler::Flow { steps } => *steps,
        }
    }

    pub fn step(&self, t: usize) -> Result<StepIndex, ScheduleError> {
        StepIndex::new(t, self.steps())
    }

    /// The `x_T` every worker derives from the run seed.
    pub fn initial_sample(&self, seed: u64, dim: usize) -> Vector {
        let mut rng = RngStream::for_purpose(seed, StreamPurpose::InitialSample, 0);
        crate::numerics::draw_normal(&mut rng, dim)
    }

    /// The per-step sampling noise `z_t`, identical on every worker.
    pub fn step_noise(&self, seed: u64, t: StepIndex, dim: usize) -> Option<Vector> {
        match self {
            Sampler::Ddpm(s) if s.sigma_mode() == SigmaMode::Posterior && t.t() > 1 => {
                let mut rng = RngStream::for_purpose(seed, StreamPurpose::StepNoise, t.t() as u64);
                Some(crate::numerics::draw_normal(&mut rng, dim))
            }
            _ => None,
        }
    }

    /// Applies the scheduler to `x_t` with the model output for step `t`.
    pub fn update(&self, x_t: &Vector, t: StepIndex, model_out: &Vector, seed: u64) -> Result<Vector, ScheduleError> {
        if t.total() != self.steps() {
            return Err(ScheduleError::StepOutOfRange {
                t: t.t(),
                total: self.steps(),
            });
        }
        match self {
            Sampler::Ddpm(s) => match self.step_noise(seed, t, x_t.len()) {
                Some(z) => ddpm_step(x_t, t, model_out, s, &z),
                None => Ok(posterior_mean(x_t, t, model_out, s)?),
            },
            Sampler::Flow { steps } => Ok(euler_flow_step(x_t, model_out, 1.0 / *steps as f64)?),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::draw_normal;

    fn v(xs: &[f64]) -> Vector {
        Vector::new(xs.to_vec()).unwrap()
    }

    #[test]
    fn two_step_alpha_bar() {
        let s = NoiseSchedule::linear(2, 0.1, 0.2, SigmaMode::Posterior).unwrap();
        assert!((s.alpha_bars()[0] - 0.9).abs() < 1e-15);
        assert!((s.alpha_bars()[1] - 0.72).abs() < 1e-15);
    }

    #[test]
    fn ten_step_alpha_bar_matches_product_oracle() {
        // Running product of (1 - β_t) at 40 digits, computed outside this crate and rounded to f64.
        let oracle = 0.903_739_416_151_237;
        let s = NoiseSchedule::linear(10, 1e-4, 0.02, SigmaMode::Posterior).unwrap();
        assert!((s.alpha_bars()[9] - oracle).abs() < 1e-14);
    }

    #[test]
    fn zero_sigma_mode() {
        let s = NoiseSchedule::linear(20, 1e-3, 0.1, SigmaMode::Zero).unwrap();
        assert!(s.sigmas().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn posterior_sigma_vanishes_at_first_step() {
        let s = NoiseSchedule::linear(20, 1e-3, 0.1, SigmaMode::Posterior).unwrap();
        assert_eq!(s.sigmas()[0], 0.0);
        assert!(s.sigmas()[1..].iter().all(|x| *x > 0.0));
    }

    #[test]
    fn invalid_ranges_rejected() {
        assert!(NoiseSchedule::linear(1, 0.1, 0.2, SigmaMode::Zero).is_err());
        assert!(NoiseSchedule::linear(5, 0.0, 0.2, SigmaMode::Zero).is_err());
        assert!(NoiseSchedule::linear(5, 0.3, 0.2, SigmaMode::Zero).is_err());
        assert!(NoiseSchedule::linear(5, 0.1, 1.0, SigmaMode::Zero).is_err());
        assert!(NoiseSchedule::from_betas(vec![], SigmaMode::Zero).is_err());
    }

    #[test]
    fn alpha_bar_strictly_decreasing() {
        for steps in [2, 10, 50, 200, 1000] {
            let s = NoiseSchedule::ddpm_default(steps, SigmaMode::Posterior).unwrap();
            let ab = s.alpha_bars();
            for i in 1..ab.len() {
                assert!(ab[i] < ab[i - 1]);
                let t = s.step(i + 1).unwrap();
                let expect = ab[i - 1] * s.alpha(t).unwrap();
                assert!((ab[i] - expect).abs() <= f64::EPSILON * ab[i]);
            }
        }
    }

    #[test]
    fn forward_sample_examples() {
        let x0 = v(&[1.5, -2.0]);
        assert!(forward_with_alpha_bar(&x0, &Vector::zeros(2), 1.0)
            .unwrap()
            .bits_eq(&x0));
        let noise = v(&[0.3, 0.4]);
        let out = forward_with_alpha_bar(&Vector::zeros(2), &noise, 0.64).unwrap();
        assert!(out.bits_eq(&noise.scaled(0.6)));
        // ᾱ_1 = 0.64 through a real schedule.
        let s = NoiseSchedule::from_betas(vec![0.36, 0.5], SigmaMode::Posterior).unwrap();
        let out = forward_sample(&v(&[1.0]), s.step(1).unwrap(), &v(&[1.0]), &s).unwrap();
        assert!((out[0] - 1.4).abs() < 1e-15);
        assert!(forward_sample(&x0, s.step(1).unwrap(), &v(&[1.0]), &s).is_err());
    }

    #[test]
    fn forward_sample_statistics() {
        let s = NoiseSchedule::ddpm_default(50, SigmaMode::Posterior).unwrap();
        let t = s.step(20).unwrap();
        let ab = s.alpha_bar(t).unwrap();
        let x0 = v(&[0.7]);
        let n = 10_000;
        let mut rng = RngStream::new(5, 9);
        let xs: Vec<f64> = (0..n)
            .map(|_| forward_sample(&x0, t, &draw_normal(&mut rng, 1), &s).unwrap()[0])
            .collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = ((1.0 - ab) / n as f64).sqrt();
        assert!((mean - ab.sqrt() * 0.7).abs() < 3.0 * se);
        assert!((var / (1.0 - ab) - 1.0).abs() < 0.05);
    }

    #[test]
    fn posterior_mean_examples() {
        let s = NoiseSchedule::from_betas(vec![0.25, 0.3], SigmaMode::Posterior).unwrap();
        let t = s.step(1).unwrap();
        let out = posterior_mean(&v(&[1.0]), t, &v(&[0.5]), &s).unwrap();
        // (1/√0.75)(1 − (0.25/0.5)·0.5) = 0.75/√0.75 = √0.75
        assert!((out[0] - 0.75f64.sqrt()).abs() < 1e-12);

        let x = v(&[0.4, -1.1]);
        let plain = posterior_mean(&x, t, &Vector::zeros(2), &s).unwrap();
        assert!(plain.bits_eq(&x.scaled(1.0 / 0.75f64.sqrt())));

        let t2 = s.step(2).unwrap();
        let e1 = v(&[0.3, -0.8]);
        let e2 = v(&[1.2, 0.1]);
        let lhs = posterior_mean(&x, t2, &e1.add(&e2).unwrap(), &s)
            .unwrap()
            .sub(&posterior_mean(&x, t2, &e2, &s).unwrap())
            .unwrap();
        let rhs = posterior_mean(&x, t2, &e1, &s)
            .unwrap()
            .sub(&posterior_mean(&x, t2, &Vector::zeros(2), &s).unwrap())
            .unwrap();
        for i in 0..2 {
            assert!((lhs[i] - rhs[i]).abs() < 1e-12);
        }
        assert!(posterior_mean(&x, t2, &v(&[1.0]), &s).is_err());
        let foreign = StepIndex::new(1, 3).unwrap();
        assert!(posterior_mean(&x, foreign, &e1, &s).is_err());
    }

    #[test]
    fn ddpm_step_noise_conventions() {
        let x = v(&[0.9, -0.2, 0.4]);
        let eps = v(&[0.1, 0.5, -0.3]);
        let z = v(&[1.0, 2.0, -1.0]);
        let zero = NoiseSchedule::ddpm_default(10, SigmaMode::Zero).unwrap();
        let t = zero.step(6).unwrap();
        let a = ddpm_step(&x, t, &eps, &zero, &z).unwrap();
        assert!(a.bits_eq(&posterior_mean(&x, t, &eps, &zero).unwrap()));

        let post = NoiseSchedule::ddpm_default(10, SigmaMode::Posterior).unwrap();
        let t1 = post.step(1).unwrap();
        let a = ddpm_step(&x, t1, &eps, &post, &z).unwrap();
        let b = ddpm_step(&x, t1, &eps, &post, &z.scaled(-7.0)).unwrap();
        assert!(a.bits_eq(&b));

        let t6 = post.step(6).unwrap();
        let with_noise = ddpm_step(&x, t6, &eps, &post, &z).unwrap();
        assert!(!with_noise.bits_eq(&posterior_mean(&x, t6, &eps, &post).unwrap()));
    }

    #[test]
    fn ddpm_step_is_affine_in_eps() {
        let s = NoiseSchedule::ddpm_default(10, SigmaMode::Posterior).unwrap();
        let t = s.step(7).unwrap();
        let x = v(&[0.3, -0.6]);
        let z = v(&[0.2, 0.9]);
        let e0 = v(&[0.1, 0.2]);
        let e1 = v(&[-0.7, 1.3]);
        let lam = 0.35;
        let mix = e0.lin_comb(1.0 - lam, &e1, lam).unwrap();
        let f = |e: &Vector| ddpm_step(&x, t, e, &s, &z).unwrap();
        let lhs = f(&mix);
        let rhs = f(&e0).lin_comb(1.0 - lam, &f(&e1), lam).unwrap();
        for i in 0..2 {
            assert!((lhs[i] - rhs[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn single_step_reconstruction() {
        let s = NoiseSchedule::ddpm_default(25, SigmaMode::Posterior).unwrap();
        let t = s.step(1).unwrap();
        let x0 = v(&[1.3, -0.4, 0.05]);
        let noise = v(&[0.5, -1.5, 2.0]);
        let xt = forward_sample(&x0, t, &noise, &s).unwrap();
        let back = ddpm_step(&xt, t, &noise, &s, &Vector::zeros(3)).unwrap();
        for i in 0..3 {
            assert!((back[i] - x0[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn euler_examples() {
        let z = v(&[1.0, 1.0]);
        assert!(euler_flow_step(&z, &v(&[3.0, 4.0]), 0.0).unwrap().bits_eq(&z));
        let out = euler_flow_step(&z, &v(&[2.0, -2.0]), 0.5).unwrap();
        assert_eq!(out.as_slice(), &[2.0, 0.0]);
        let vel = v(&[0.8, -1.6]);
        let two = euler_flow_step(&euler_flow_step(&z, &vel, 0.25).unwrap(), &vel, 0.25).unwrap();
        let one = euler_flow_step(&z, &vel, 0.5).unwrap();
        for i in 0..2 {
            assert!((two[i] - one[i]).abs() < 1e-15);
        }
        assert!(euler_flow_step(&z, &v(&[1.0]), 0.1).is_err());
    }

    #[test]
    fn step_index_bounds() {
        assert!(StepIndex::new(0, 5).is_err());
        assert!(StepIndex::new(6, 5).is_err());
        let order: Vec<usize> = StepIndex::descending(4).map(|s| s.t()).collect();
        assert_eq!(order, vec![4, 3, 2, 1]);
        assert_eq!(StepIndex::new(1, 4).unwrap().next(), None);
    }

    #[test]
    fn sampler_step_noise_is_shared() {
        let s = Sampler::Ddpm(NoiseSchedule::ddpm_default(10, SigmaMode::Posterior).unwrap());
        let t = s.step(4).unwrap();
        let a = s.step_noise(3, t, 2).unwrap();
        let b = s.step_noise(3, t, 2).unwrap();
        assert!(a.bits_eq(&b));
        assert!(s.step_noise(3, s.step(1).unwrap(), 2).is_none());
        let flow = Sampler::Flow { steps: 10 };
        assert!(flow.step_noise(3, t, 2).is_none());
    }
}
