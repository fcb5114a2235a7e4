use crate::numerics::{draw_normal, RngStream, StreamPurpose, Vector};
use crate::par::{self, Execution};
use crate::schedule::{forward_sample, Sampler, StepIndex};

use super::mlp::{Activation, Layer, PredictorWeights};
use super::{Dataset, NoisePredictor, PredictorError};

/// Examples per gradient chunk. Chunks are summed in order, so the result
/// does not depend on how many threads evaluate them.
const GRAD_CHUNK: usize = 32;

/// Number of trailing iterations averaged into [`TrainOutcome::final_loss`].
const FINAL_LOSS_WINDOW: usize = 100;

/// One regression target: the network sees `(input, t)` and should output `target`.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub input: Vector,
    pub t: StepIndex,
    pub target: Vector,
}

/// Gradient with the same shape as the predictor's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Gradients {
    pub fn zeros_like(w: &PredictorWeights) -> Self {
        Self {
            layers: w.layers().iter().map(|l| Layer::zeros(l.rows, l.cols)).collect(),
        }
    }

    fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weights.iter_mut().zip(&b.weights) {
                *x += y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += y;
            }
        }
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
    }
}

/// Draws `t ~ U{1..T}` and `ε ~ N(0, I)` per element (in batch order, from
/// one stream) and builds the regression examples.
///
/// DDPM mode regresses `ε` from `√ᾱ_t·x0 + √(1−ᾱ_t)·ε`. Flow mode regresses
/// the velocity `x0 − ε` from `(1−τ)·ε + τ·x0` with `τ = (T − t)/T`.
pub fn make_examples(
    x0_batch: &[Vector],
    sampler: &Sampler,
    rng: &mut RngStream,
) -> Result<Vec<TrainingExample>, PredictorError> {
    let steps = sampler.steps();
    x0_batch
        .iter()
        .map(|x0| {
            let t = sampler.step(rng.next_index(steps) + 1)?;
            let eps = draw_normal(rng, x0.len());
            Ok(match sampler {
                Sampler::Ddpm(sched) => TrainingExample {
                    input: forward_sample(x0, t, &eps, sched)?,
                    t,
                    target: eps,
                },
                Sampler::Flow { steps } => {
                    let tau = (steps - t.t()) as f64 / *steps as f64;
                    TrainingExample {
                        input: eps.lin_comb(1.0 - tau, x0, tau)?,
                        t,
                        target: x0.sub(&eps)?,
                    }
                }
            })
        })
        .collect()
}

/// Mean over the batch of `‖target − f(input, t)‖²` and its exact gradient.
pub fn loss_and_grad(
    w: &PredictorWeights,
    x0_batch: &[Vector],
    sampler: &Sampler,
    rng: &mut RngStream,
) -> Result<(f64, Gradients), PredictorError> {
    let examples = make_examples(x0_batch, sampler, rng)?;
    loss_and_grad_examples(w, &examples, Execution::default())
}

pub fn loss_and_grad_examples(
    w: &PredictorWeights,
    examples: &[TrainingExample],
    exec: Execution,
) -> Result<(f64, Gradients), PredictorError> {
    if examples.is_empty() {
        return Err(PredictorError::InvalidConfig("empty training batch".into()));
    }
    let scale = 1.0 / examples.len() as f64;
    let chunks: Vec<&[TrainingExample]> = examples.chunks(GRAD_CHUNK).collect();
    let partials = par::try_map_range(exec, chunks.len(), |c| {
        let mut grad = Gradients::zeros_like(w);
        let mut loss = 0.0;
        for ex in chunks[c] {
            loss += backprop_one(w, ex, scale, &mut grad)?;
        }
        Ok::<_, PredictorError>((loss, grad))
    })?;
    let mut total = Gradients::zeros_like(w);
    let mut loss = 0.0;
    for (l, g) in &partials {
        loss += l;
        total.accumulate(g);
    }
    Ok((loss * scale, total))
}

/// Adds `scale · ∇‖target − f‖²` into `grad`; returns the unscaled squared error.
fn backprop_one(
    w: &PredictorWeights,
    ex: &TrainingExample,
    scale: f64,
    grad: &mut Gradients,
) -> Result<f64, PredictorError> {
    if ex.target.len() != w.data_dim() {
        return Err(PredictorError::Dimension {
            expected: w.data_dim(),
            got: ex.target.len(),
        });
    }
    let input = w.network_input(&ex.input, ex.t)?;
    let (pre, act) = w.forward_trace(input);
    let out = &act[act.len() - 1];
    let mut sq = 0.0;
    let mut delta: Vec<f64> = out
        .iter()
        .zip(ex.target.iter())
        .map(|(o, y)| {
            let d = o - y;
            sq += d * d;
            2.0 * d * scale
        })
        .collect();

    let activation = w.activation();
    for l in (0..w.layers().len()).rev() {
        let layer = &w.layers()[l];
        let g = &mut grad.layers[l];
        let a_prev = &act[l];
        for (i, a) in a_prev.iter().enumerate() {
            let row = &mut g.weights[i * layer.cols..(i + 1) * layer.cols];
            for (gw, d) in row.iter_mut().zip(&delta) {
                *gw += a * d;
            }
        }
        for (gb, d) in g.bias.iter_mut().zip(&delta) {
            *gb += d;
        }
        if l > 0 {
            let z_prev = &pre[l - 1];
            delta = (0..layer.rows)
                .map(|i| {
                    let row = &layer.weights[i * layer.cols..(i + 1) * layer.cols];
                    let back: f64 = row.iter().zip(&delta).map(|(wij, d)| wij * d).sum();
                    back * activation.derivative(z_prev[i])
                })
                .collect();
        }
    }
    Ok(sq)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub dataset: Dataset,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub activation: Activation,
    pub learning_rate: f64,
    pub adam: AdamParams,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
    /// Log the loss every this many iterations (and at the last one).
    pub log_interval: usize,
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dataset: Dataset::Gauss8,
            hidden: vec![64, 64],
            embed_dim: 16,
            activation: Activation::Silu,
            learning_rate: 1e-3,
            adam: AdamParams::default(),
            batch_size: 128,
            iterations: 5000,
            seed: 42,
            log_interval: 100,
            execution: Execution::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), PredictorError> {
        let bad = |m: &str| Err(PredictorError::InvalidConfig(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if self.batch_size == 0 || self.log_interval == 0 {
            return bad("batch size and log interval must be positive");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden widths must be nonempty and positive");
        }
        if self.embed_dim == 0 || self.embed_dim % 2 != 0 {
            return bad("embedding width must be even and positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub weights: PredictorWeights,
    /// `(iteration, batch loss)` pairs, 1-based iterations.
    pub log: Vec<(usize, f64)>,
    /// Mean batch loss over the last 100 iterations (fewer if the run is shorter).
    pub final_loss: Option<f64>,
}

/// Adam on the noise-regression objective. Deterministic given `cfg.seed`.
pub fn train(cfg: &TrainConfig, sampler: &Sampler) -> Result<TrainOutcome, PredictorError> {
    cfg.validate()?;
    let mut w = PredictorWeights::init(
        cfg.dataset.data_dim(),
        cfg.embed_dim,
        &cfg.hidden,
        cfg.activation,
        cfg.seed,
    )?;
    let mut m = Gradients::zeros_like(&w);
    let mut v = Gradients::zeros_like(&w);
    let mut log = Vec::new();
    let mut recent = std::collections::VecDeque::with_capacity(FINAL_LOSS_WINDOW);
    let AdamParams { beta1, beta2, eps } = cfg.adam;

    for iter in 1..=cfg.iterations {
        let mut data_rng = RngStream::for_purpose(cfg.seed, StreamPurpose::DataBatch, iter as u64);
        let x0s = cfg.dataset.sample(&mut data_rng, cfg.batch_size);
        let mut draws = RngStream::for_purpose(cfg.seed, StreamPurpose::TrainingDraws, iter as u64);
        let examples = make_examples(&x0s, sampler, &mut draws)?;
        let (loss, grad) = loss_and_grad_examples(&w, &examples, cfg.execution)?;
        if !loss.is_finite() {
            return Err(PredictorError::TrainingDiverged { iteration: iter, loss });
        }

        let bc1 = 1.0 - beta1.powi(iter as i32);
        let bc2 = 1.0 - beta2.powi(iter as i32);
        let lr = cfg.learning_rate;
        for (((layer, g), m), v) in w
            .layers_mut()
            .iter_mut()
            .zip(&grad.layers)
            .zip(&mut m.layers)
            .zip(&mut v.layers)
        {
            let params = layer.weights.iter_mut().chain(layer.bias.iter_mut());
            let gs = g.weights.iter().chain(&g.bias);
            let ms = m.weights.iter_mut().chain(m.bias.iter_mut());
            let vs = v.weights.iter_mut().chain(v.bias.iter_mut());
            for (((p, g), m), v) in params.zip(gs).zip(ms).zip(vs) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }

        if recent.len() == FINAL_LOSS_WINDOW {
            recent.pop_front();
        }
        recent.push_back(loss);
        if iter % cfg.log_interval == 0 || iter == cfg.iterations {
            log.push((iter, loss));
        }
    }

    let final_loss = (!recent.is_empty()).then(|| recent.iter().sum::<f64>() / recent.len() as f64);
    Ok(TrainOutcome {
        weights: w,
        log,
        final_loss,
    })
}
