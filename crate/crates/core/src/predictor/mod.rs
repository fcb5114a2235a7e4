//! The toy noise predictor: an MLP over the sample concatenated with a
//! sinusoidal embedding of `t / T`, trained with the DDPM noise-regression
//! objective (or the linear-interpolation velocity target in flow mode).

mod data;
mod io;
mod mlp;
mod train;

pub use data::Dataset;
pub use io::{load_weights, save_weights, weights_from_bytes, weights_to_bytes, WEIGHTS_MAGIC};
pub use mlp::{time_embed, Activation, Layer, PredictorWeights};
pub use train::{
    loss_and_grad, loss_and_grad_examples, make_examples, train, AdamParams, Gradients, TrainConfig, TrainOutcome,
    TrainingExample,
};

use std::hint::black_box;

use thiserror::Error;

use crate::numerics::{NumericsError, Vector};
use crate::par::{self, Execution};
use crate::schedule::{ScheduleError, StepIndex};

#[derive(Debug, Error)]
pub enum PredictorError {
    #[error("input has {got} elements, predictor expects {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("batch has {inputs} inputs but {steps} steps")]
    BatchMismatch { inputs: usize, steps: usize },
    #[error("invalid predictor configuration: {0}")]
    InvalidConfig(String),
    #[error("training diverged at iteration {iteration} (loss {loss})")]
    TrainingDiverged { iteration: usize, loss: f64 },
    #[error("weight file format error at byte {offset}{}: {reason}", layer.map(|l| format!(" (layer {l})")).unwrap_or_default())]
    Format {
        offset: usize,
        layer: Option<usize>,
        reason: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}

/// Anything that maps `(x_t, t)` to a predicted noise (or velocity).
///
/// Implementations must be pure: equal inputs give bitwise-equal outputs.
pub trait NoisePredictor: Sync {
    fn data_dim(&self) -> usize;

    fn predict(&self, x: &Vector, t: StepIndex) -> Result<Vector, PredictorError>;

    /// Element `i` equals `predict(xs[i], ts[i])` bit for bit.
    fn predict_batch(&self, xs: &[Vector], ts: &[StepIndex]) -> Result<Vec<Vector>, PredictorError> {
        predict_batch_with(self, Execution::default(), xs, ts)
    }
}

pub fn predict_batch_with<P: NoisePredictor + ?Sized>(
    model: &P,
    exec: Execution,
    xs: &[Vector],
    ts: &[StepIndex],
) -> Result<Vec<Vector>, PredictorError> {
    if xs.len() != ts.len() || xs.is_empty() {
        return Err(PredictorError::BatchMismatch {
            inputs: xs.len(),
            steps: ts.len(),
        });
    }
    par::try_map_range(exec, xs.len(), |i| model.predict(&xs[i], ts[i]))
}

impl<P: NoisePredictor + ?Sized> NoisePredictor for &P {
    fn data_dim(&self) -> usize {
        (**self).data_dim()
    }
    fn predict(&self, x: &Vector, t: StepIndex) -> Result<Vector, PredictorError> {
        (**self).predict(x, t)
    }
    fn predict_batch(&self, xs: &[Vector], ts: &[StepIndex]) -> Result<Vec<Vector>, PredictorError> {
        (**self).predict_batch(xs, ts)
    }
}

/// Repeats the wrapped forward pass `repeats` extra times and discards the
/// copies. Output is unchanged; only the cost grows.
#[derive(Debug, Clone)]
pub struct Ballast<P> {
    inner: P,
    repeats: u32,
}

impl<P: NoisePredictor> Ballast<P> {
    pub fn new(inner: P, repeats: u32) -> Self {
        Self { inner, repeats }
    }

    pub fn inner(&self) -> &P {
        &self.inner
    }
}

impl<P: NoisePredictor> NoisePredictor for Ballast<P> {
    fn data_dim(&self) -> usize {
        self.inner.data_dim()
    }

    fn predict(&self, x: &Vector, t: StepIndex) -> Result<Vector, PredictorError> {
        for _ in 0..self.repeats {
            black_box(self.inner.predict(black_box(x), black_box(t))?);
        }
        self.inner.predict(x, t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::StepIndex;

    #[test]
    fn ballast_preserves_output() {
        let w = PredictorWeights::init(2, 8, &[16], Activation::Silu, 3).unwrap();
        let heavy = Ballast::new(&w, 25);
        let x = Vector::new(vec![0.2, -0.7]).unwrap();
        let t = StepIndex::new(4, 10).unwrap();
        assert!(heavy.predict(&x, t).unwrap().bits_eq(&w.predict(&x, t).unwrap()));
    }

    #[test]
    fn batch_rejects_mismatch() {
        let w = PredictorWeights::init(2, 8, &[16], Activation::Tanh, 3).unwrap();
        let x = Vector::zeros(2);
        let t = StepIndex::new(1, 10).unwrap();
        assert!(matches!(
            w.predict_batch(&[x.clone(), x], &[t]),
            Err(PredictorError::BatchMismatch { inputs: 2, steps: 1 })
        ));
        assert!(w.predict_batch(&[], &[]).is_err());
    }
}
