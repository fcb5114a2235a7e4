//! Vector arithmetic, counter-based random streams and divergence metrics.
//!
//! Every reduction in this module sums left to right in index order. The
//! cross-engine equivalence checks compare trajectories bit for bit, so the
//! order is part of the contract.

use std::f64::consts::TAU;
use std::fmt;
use std::ops::Index;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NumericsError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("reference vector has zero mean magnitude")]
    DegenerateReference,
    #[error("vectors must hold at least one element")]
    Empty,
}

/// Fixed-length sample, noise or flow state.
#[derive(Clone, PartialEq)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn new(data: Vec<f64>) -> Result<Self, NumericsError> {
        if data.is_empty() {
            return Err(NumericsError::Empty);
        }
        Ok(Self(data))
    }

    /// # Panics
    /// Panics if `len == 0`.
    pub fn zeros(len: usize) -> Self {
        assert!(len > 0, "vector length must be positive");
        Self(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    /// Always false; kept for the `len`/`is_empty` pairing lint.
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.0.iter()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn check_len(&self, other: &Vector) -> Result<(), NumericsError> {
        if self.len() != other.len() {
            return Err(NumericsError::DimensionMismatch {
                left: self.len(),
                right: other.len(),
            });
        }
        Ok(())
    }

    /// `a·self + b·other`, elementwise.
    pub fn lin_comb(&self, a: f64, other: &Vector, b: f64) -> Result<Vector, NumericsError> {
        self.check_len(other)?;
        Ok(Vector(
            self.0.iter().zip(&other.0).map(|(x, y)| a * x + b * y).collect(),
        ))
    }

    pub fn scaled(&self, c: f64) -> Vector {
        Vector(self.0.iter().map(|x| c * x).collect())
    }

    pub fn add(&self, other: &Vector) -> Result<Vector, NumericsError> {
        self.check_len(other)?;
        Ok(Vector(self.0.iter().zip(&other.0).map(|(x, y)| x + y).collect()))
    }

    pub fn sub(&self, other: &Vector) -> Result<Vector, NumericsError> {
        self.check_len(other)?;
        Ok(Vector(self.0.iter().zip(&other.0).map(|(x, y)| x - y).collect()))
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0` and comparing NaN payloads.
    pub fn bits_eq(&self, other: &Vector) -> bool {
        self.len() == other.len() && self.0.iter().zip(&other.0).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl fmt::Debug for Vector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(&self.0).finish()
    }
}

impl Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl TryFrom<Vec<f64>> for Vector {
    type Error = NumericsError;
    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        Vector::new(v)
    }
}

/// Relative mean absolute error of `b` against the reference `a`.
///
/// Not symmetric: the denominator is the mean magnitude of `a`.
pub fn rel_mae(a: &Vector, b: &Vector) -> Result<f64, NumericsError> {
    a.check_len(b)?;
    let n = a.len() as f64;
    let mut diff = 0.0;
    let mut mag = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        diff += (x - y).abs();
        mag += x.abs();
    }
    if mag == 0.0 {
        return Err(NumericsError::DegenerateReference);
    }
    Ok((diff / n) / (mag / n))
}

pub fn mse(a: &Vector, b: &Vector) -> Result<f64, NumericsError> {
    a.check_len(b)?;
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        let d = x - y;
        acc += d * d;
    }
    Ok(acc / a.len() as f64)
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Lanes separate the raw draws behind uniforms and the two Box-Muller inputs
/// so a single stream may serve both kinds of variate.
#[derive(Clone, Copy)]
#[repr(u64)]
enum Lane {
    Uniform = 0x51A7_0000_0000_0001,
    NormalRadius = 0x51A7_0000_0000_0002,
    NormalAngle = 0x51A7_0000_0000_0003,
}

/// Pure function of `(seed, stream, counter, lane)`.
fn raw_bits(seed: u64, stream: u64, counter: u64, lane: Lane) -> u64 {
    let k = splitmix64(seed ^ 0x243F_6A88_85A3_08D3);
    let s = splitmix64(k ^ stream.wrapping_mul(GOLDEN));
    let c = splitmix64(s ^ counter);
    splitmix64(c ^ lane as u64)
}

/// `[0, 1)` with 53 bits of resolution.
fn unit_open_right(bits: u64) -> f64 {
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// `(0, 1]`, safe to take the logarithm of.
fn unit_open_left(bits: u64) -> f64 {
    ((bits >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// What a random stream is used for. Combined with an index (step, iteration)
/// into the 64-bit stream id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum StreamPurpose {
    InitialSample = 1,
    StepNoise = 2,
    WeightInit = 3,
    DataBatch = 4,
    TrainingDraws = 5,
    Generic = 15,
}

impl StreamPurpose {
    pub fn stream_id(self, index: u64) -> u64 {
        ((self as u64) << 48) ^ (index & 0x0000_FFFF_FFFF_FFFF)
    }
}

/// Counter-based random stream. Draw `i` depends only on
/// `(run_seed, stream_id, counter + i)`, so any worker can regenerate it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngStream {
    pub run_seed: u64,
    pub stream_id: u64,
    pub counter: u64,
}

impl RngStream {
    pub fn new(run_seed: u64, stream_id: u64) -> Self {
        Self {
            run_seed,
            stream_id,
            counter: 0,
        }
    }

    pub fn for_purpose(run_seed: u64, purpose: StreamPurpose, index: u64) -> Self {
        Self::new(run_seed, purpose.stream_id(index))
    }

    pub fn at(mut self, counter: u64) -> Self {
        self.counter = counter;
        self
    }

    pub fn uniform_at(&self, counter: u64) -> f64 {
        unit_open_right(raw_bits(self.run_seed, self.stream_id, counter, Lane::Uniform))
    }

    pub fn normal_at(&self, counter: u64) -> f64 {
        let u1 = unit_open_left(raw_bits(self.run_seed, self.stream_id, counter, Lane::NormalRadius));
        let u2 = unit_open_right(raw_bits(self.run_seed, self.stream_id, counter, Lane::NormalAngle));
        (-2.0 * u1.ln()).sqrt() * (TAU * u2).cos()
    }

    pub fn next_uniform(&mut self) -> f64 {
        let v = self.uniform_at(self.counter);
        self.counter += 1;
        v
    }

    pub fn next_normal(&mut self) -> f64 {
        let v = self.normal_at(self.counter);
        self.counter += 1;
        v
    }

    /// Uniform integer in `[0, n)`.
    pub fn next_index(&mut self, n: usize) -> usize {
        ((self.next_uniform() * n as f64) as usize).min(n - 1)
    }
}

/// `n` standard normal variates; advances the stream counter by `n`.
///
/// # Panics
/// Panics if `n == 0`.
pub fn draw_normal(stream: &mut RngStream, n: usize) -> Vector {
    assert!(n > 0, "draw_normal needs n >= 1");
    Vector((0..n).map(|_| stream.next_normal()).collect())
}
