use crate::numerics::{RngStream, StreamPurpose, Vector};
use crate::schedule::{ScheduleError, StepIndex};

use super::{NoisePredictor, PredictorError};

/// Largest angular frequency applied to `t / T` in the time embedding.
const MAX_FREQUENCY: f64 = 64.0;

/// Sinusoidal embedding of `t / T`: `[sin(ω₀s), cos(ω₀s), sin(ω₁s), ...]`
/// with `ω_k = 64^(k / (dim/2))`.
pub fn time_embed(t: usize, total: usize, dim: usize) -> Result<Vector, ScheduleError> {
    if dim < 2 || dim % 2 != 0 {
        return Err(ScheduleError::InvalidParameter(format!(
            "embedding dimension must be even and >= 2, got {dim}"
        )));
    }
    if total == 0 {
        return Err(ScheduleError::InvalidParameter("total steps must be positive".into()));
    }
    let mut out = Vec::with_capacity(dim);
    push_embedding(&mut out, t as f64 / total as f64, dim);
    Ok(Vector::new(out)?)
}

fn push_embedding(out: &mut Vec<f64>, s: f64, dim: usize) {
    let half = dim / 2;
    for k in 0..half {
        let w = MAX_FREQUENCY.powf(k as f64 / half as f64);
        let (sin, cos) = (w * s).sin_cos();
        out.push(sin);
        out.push(cos);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Activation {
    Tanh = 0,
    Silu = 1,
}

impl Activation {
    pub fn from_id(id: u8) -> Option<Self> {
        match id {
            0 => Some(Activation::Tanh),
            1 => Some(Activation::Silu),
            _ => None,
        }
    }

    pub(crate) fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Silu => z / (1.0 + (-z).exp()),
        }
    }

    /// Derivative at pre-activation `z`.
    pub(crate) fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let th = z.tanh();
                1.0 - th * th
            }
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 + z * (1.0 - s))
            }
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = PredictorError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "silu" => Ok(Activation::Silu),
            other => Err(PredictorError::InvalidConfig(format!(
                "unknown activation `{other}` (expected tanh|silu)"
            ))),
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Activation::Tanh => "tanh",
            Activation::Silu => "silu",
        })
    }
}

/// Dense layer `y = x·W + b` with `W` stored row-major as `rows × cols`
/// (`rows` inputs, `cols` outputs).
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            weights: vec![0.0; rows * cols],
            bias: vec![0.0; cols],
        }
    }

    /// For each output `j` the sum runs over inputs in ascending order
    /// starting from zero; the bias is added last.
    pub(crate) fn apply(&self, input: &[f64], out: &mut Vec<f64>) {
        debug_assert_eq!(input.len(), self.rows);
        out.clear();
        out.resize(self.cols, 0.0);
        for (i, x) in input.iter().enumerate() {
            let row = &self.weights[i * self.cols..(i + 1) * self.cols];
            for (o, w) in out.iter_mut().zip(row) {
                *o += x * w;
            }
        }
        for (o, b) in out.iter_mut().zip(&self.bias) {
            *o += b;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorWeights {
    layers: Vec<Layer>,
    activation: Activation,
}

impl PredictorWeights {
    pub fn new(layers: Vec<Layer>, activation: Activation) -> Result<Self, PredictorError> {
        let invalid = |m: String| Err(PredictorError::InvalidConfig(m));
        if layers.is_empty() {
            return invalid("predictor needs at least one layer".into());
        }
        for (i, l) in layers.iter().enumerate() {
            if l.rows == 0 || l.cols == 0 {
                return invalid(format!("layer {i} has an empty dimension"));
            }
            if l.weights.len() != l.rows * l.cols || l.bias.len() != l.cols {
                return invalid(format!("layer {i} storage does not match {}x{}", l.rows, l.cols));
            }
            if !l.weights.iter().chain(&l.bias).all(|v| v.is_finite()) {
                return invalid(format!("layer {i} holds non-finite parameters"));
            }
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].cols != pair[1].rows {
                return invalid(format!(
                    "layer {i} outputs {} values but layer {} takes {}",
                    pair[0].cols,
                    i + 1,
                    pair[1].rows
                ));
            }
        }
        let data_dim = layers[layers.len() - 1].cols;
        let input = layers[0].rows;
        if input < data_dim || (input - data_dim) % 2 != 0 {
            return invalid(format!(
                "input width {input} must be data_dim {data_dim} plus an even embedding width"
            ));
        }
        Ok(Self { layers, activation })
    }

    /// Glorot-uniform weights in `±√(6/(fan_in+fan_out))`, zero biases.
    pub fn init(
        data_dim: usize,
        embed_dim: usize,
        hidden: &[usize],
        activation: Activation,
        seed: u64,
    ) -> Result<Self, PredictorError> {
        let dims = Self::layer_dims(data_dim, embed_dim, hidden)?;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| {
                let (fan_in, fan_out) = (d[0], d[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let mut rng = RngStream::for_purpose(seed, StreamPurpose::WeightInit, i as u64);
                let mut layer = Layer::zeros(fan_in, fan_out);
                for w in &mut layer.weights {
                    *w = (2.0 * rng.next_uniform() - 1.0) * limit;
                }
                layer
            })
            .collect();
        Self::new(layers, activation)
    }

    pub fn zeros(
        data_dim: usize,
        embed_dim: usize,
        hidden: &[usize],
        activation: Activation,
    ) -> Result<Self, PredictorError> {
        let dims = Self::layer_dims(data_dim, embed_dim, hidden)?;
        let layers = dims.windows(2).map(|d| Layer::zeros(d[0], d[1])).collect();
        Self::new(layers, activation)
    }

    fn layer_dims(data_dim: usize, embed_dim: usize, hidden: &[usize]) -> Result<Vec<usize>, PredictorError> {
        if data_dim == 0 || embed_dim % 2 != 0 || hidden.contains(&0) {
            return Err(PredictorError::InvalidConfig(format!(
                "bad shape: data_dim {data_dim}, embed_dim {embed_dim}, hidden {hidden:?}"
            )));
        }
        let mut dims = vec![data_dim + embed_dim];
        dims.extend_from_slice(hidden);
        dims.push(data_dim);
        Ok(dims)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].rows
    }

    pub fn embed_dim(&self) -> usize {
        self.input_dim() - self.data_dim()
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1].iter().map(|l| l.cols).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn bits_eq(&self, other: &PredictorWeights) -> bool {
        let same =
            |a: &[f64], b: &[f64]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits());
        self.activation == other.activation
            && self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.rows == b.rows && a.cols == b.cols && same(&a.weights, &b.weights) && same(&a.bias, &b.bias)
            })
    }

    /// `x ⊕ time_embed(t)`, the network input.
    pub(crate) fn network_input(&self, x: &Vector, t: StepIndex) -> Result<Vec<f64>, PredictorError> {
        if x.len() != self.data_dim() {
            return Err(PredictorError::Dimension {
                expected: self.data_dim(),
                got: x.len(),
            });
        }
        let mut input = Vec::with_capacity(self.input_dim());
        input.extend_from_slice(x.as_slice());
        let embed = self.embed_dim();
        if embed > 0 {
            push_embedding(&mut input, t.t() as f64 / t.total() as f64, embed);
        }
        Ok(input)
    }

    /// Runs the network, keeping pre-activations of every layer for backprop.
    /// Returns `(pre_activations, activations)` where `activations[0]` is the input.
    pub(crate) fn forward_trace(&self, input: Vec<f64>) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let last = self.layers.len() - 1;
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut act = Vec::with_capacity(self.layers.len() + 1);
        act.push(input);
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = Vec::new();
            layer.apply(&act[i], &mut z);
            let a = if i == last {
                z.clone()
            } else {
                z.iter().map(|v| self.activation.apply(*v)).collect()
            };
            pre.push(z);
            act.push(a);
        }
        (pre, act)
    }

    pub fn forward(&self, x: &Vector, t: StepIndex) -> Result<Vector, PredictorError> {
        let mut cur = self.network_input(x, t)?;
        let mut next = Vec::new();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            layer.apply(&cur, &mut next);
            if i != last {
                for v in &mut next {
                    *v = self.activation.apply(*v);
                }
            }
            std::mem::swap(&mut cur, &mut next);
        }
        Ok(Vector::new(cur)?)
    }

    pub fn forward_batch(&self, xs: &[Vector], ts: &[StepIndex]) -> Result<Vec<Vector>, PredictorError> {
        self.predict_batch(xs, ts)
    }
}

impl NoisePredictor for PredictorWeights {
    fn data_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].cols
    }

    fn predict(&self, x: &Vector, t: StepIndex) -> Result<Vector, PredictorError> {
        self.forward(x, t)
    }
}
