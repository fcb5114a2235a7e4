use std::f64::consts::{PI, TAU};

use crate::numerics::{RngStream, Vector};

use super::PredictorError;

/// Classic 2-D toy distributions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dataset {
    /// Eight isotropic Gaussians (std 0.1) evenly spaced on a ring of radius 1.5.
    Gauss8,
    SwissRoll,
    TwoMoons,
}

const GAUSS8_RADIUS: f64 = 1.5;
const GAUSS8_STD: f64 = 0.1;

impl Dataset {
    pub fn data_dim(self) -> usize {
        2
    }

    pub fn name(self) -> &'static str {
        match self {
            Dataset::Gauss8 => "gauss8",
            Dataset::SwissRoll => "swiss_roll",
            Dataset::TwoMoons => "two_moons",
        }
    }

    pub fn sample_one(self, rng: &mut RngStream) -> Vector {
        let (x, y) = match self {
            Dataset::Gauss8 => {
                let k = rng.next_index(8) as f64;
                let angle = TAU * k / 8.0;
                (
                    GAUSS8_RADIUS * angle.cos() + GAUSS8_STD * rng.next_normal(),
                    GAUSS8_RADIUS * angle.sin() + GAUSS8_STD * rng.next_normal(),
                )
            }
            Dataset::SwissRoll => {
                let theta = 1.5 * PI * (1.0 + 2.0 * rng.next_uniform());
                (
                    theta * theta.cos() / 7.0 + 0.05 * rng.next_normal(),
                    theta * theta.sin() / 7.0 + 0.05 * rng.next_normal(),
                )
            }
            Dataset::TwoMoons => {
                let upper = rng.next_uniform() < 0.5;
                let a = PI * rng.next_uniform();
                let (mx, my) = if upper {
                    (a.cos(), a.sin())
                } else {
                    (1.0 - a.cos(), 0.5 - a.sin())
                };
                (
                    1.2 * (mx - 0.5) + 0.05 * rng.next_normal(),
                    1.2 * (my - 0.25) + 0.05 * rng.next_normal(),
                )
            }
        };
        Vector::new(vec![x, y]).expect("two elements")
    }

    pub fn sample(self, rng: &mut RngStream, n: usize) -> Vec<Vector> {
        (0..n).map(|_| self.sample_one(rng)).collect()
    }
}

impl std::str::FromStr for Dataset {
    type Err = PredictorError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gauss8" => Ok(Dataset::Gauss8),
            "swiss_roll" => Ok(Dataset::SwissRoll),
            "two_moons" => Ok(Dataset::TwoMoons),
            other => Err(PredictorError::InvalidConfig(format!(
                "unknown dataset `{other}` (expected gauss8|swiss_roll|two_moons)"
            ))),
        }
    }
}

impl std::fmt::Display for Dataset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss8_moments() {
        let mut rng = RngStream::new(1, 1);
        let xs = Dataset::Gauss8.sample(&mut rng, 20_000);
        for axis in 0..2 {
            let mean = xs.iter().map(|v| v[axis]).sum::<f64>() / xs.len() as f64;
            let var = xs.iter().map(|v| (v[axis] - mean).powi(2)).sum::<f64>() / xs.len() as f64;
            assert!(mean.abs() < 0.05);
            let expect = GAUSS8_RADIUS.powi(2) / 2.0 + GAUSS8_STD.powi(2);
            assert!((var / expect - 1.0).abs() < 0.05);
        }
    }

    #[test]
    fn names_round_trip() {
        for d in [Dataset::Gauss8, Dataset::SwissRoll, Dataset::TwoMoons] {
            assert_eq!(d.name().parse::<Dataset>().unwrap(), d);
            let mut rng = RngStream::new(3, 3);
            assert!(d.sample(&mut rng, 100).iter().all(|v| v.is_finite()));
        }
        assert!("moons".parse::<Dataset>().is_err());
    }
}
