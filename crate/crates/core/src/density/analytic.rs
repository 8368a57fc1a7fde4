//! Closed-form conditionals.
//!
//! These implement [`DensityEstimator`] so exact posteriors can stand in for
//! a trained network anywhere one is accepted — coverage calibration checks
//! its own machinery against them, and the sampler-fidelity fixtures build
//! truncated proposals around them without any training noise.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::{Error, Result};

use super::{Conditioned, DensityEstimator};

const LN_2PI: f64 = 1.837877066409345483560659472811;

/// Diagonal Gaussian whose mean is an elementwise affine map of x:
/// θ|x ~ N(scale·x + offset, diag(std²)). Covers the conjugate posterior of
/// a Gaussian-prior / Gaussian-likelihood linear model, where the posterior
/// mean is a fixed multiple of the observation.
#[derive(Debug, Clone)]
pub struct LinearGaussianPosterior {
    pub scale: f64,
    pub offset: f64,
    pub std: f64,
    pub dim: usize,
}

impl LinearGaussianPosterior {
    fn mean(&self, x: &[f64]) -> Vec<f64> {
        x.iter().map(|v| self.scale * v + self.offset).collect()
    }
}

/// Diagonal Gaussian that ignores the conditioning value entirely. A fixture
/// for samplers that need "an estimator" with a known shape.
#[derive(Debug, Clone)]
pub struct FixedDiagGaussian {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub x_dim: usize,
}

struct DiagGaussianConditioned {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl Conditioned for DiagGaussianConditioned {
    fn theta_dim(&self) -> usize {
        self.mean.len()
    }

    fn log_prob(&self, theta: &[f64]) -> Result<f64> {
        if theta.len() != self.mean.len() {
            return Err(Error::dim("gaussian log_prob θ", self.mean.len(), theta.len()));
        }
        Ok(theta
            .iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((t, m), s)| {
                let z = (t - m) / s;
                -0.5 * z * z - s.ln() - 0.5 * LN_2PI
            })
            .sum())
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.std)
            .map(|(m, s)| m + s * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }
}

impl DensityEstimator for LinearGaussianPosterior {
    fn theta_dim(&self) -> usize {
        self.dim
    }

    fn x_dim(&self) -> usize {
        self.dim
    }

    fn condition<'a>(&'a self, x: &[f64]) -> Result<Box<dyn Conditioned + 'a>> {
        if x.len() != self.dim {
            return Err(Error::dim("gaussian condition", self.dim, x.len()));
        }
        Ok(Box::new(DiagGaussianConditioned {
            mean: self.mean(x),
            std: vec![self.std; self.dim],
        }))
    }
}

impl DensityEstimator for FixedDiagGaussian {
    fn theta_dim(&self) -> usize {
        self.mean.len()
    }

    fn x_dim(&self) -> usize {
        self.x_dim
    }

    fn condition<'a>(&'a self, x: &[f64]) -> Result<Box<dyn Conditioned + 'a>> {
        if x.len() != self.x_dim {
            return Err(Error::dim("gaussian condition", self.x_dim, x.len()));
        }
        Ok(Box::new(DiagGaussianConditioned {
            mean: self.mean.clone(),
            std: self.std.clone(),
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    #[test]
    fn linear_gaussian_matches_hand_computed_density() {
        let g = LinearGaussianPosterior {
            scale: 0.5,
            offset: 0.0,
            std: 2.0,
            dim: 1,
        };
        // N(θ; 0.5·x, 2²) at θ=1, x=4 → z = (1-2)/2
        let lp = g.log_prob(&[1.0], &[4.0]).unwrap();
        let expect = -0.5 * 0.25 - 2f64.ln() - 0.5 * LN_2PI;
        assert!((lp - expect).abs() < 1e-14);
    }

    #[test]
    fn fixed_gaussian_sample_moments() {
        let g = FixedDiagGaussian {
            mean: vec![1.0, -2.0],
            std: vec![0.5, 1.5],
            x_dim: 1,
        };
        let mut rng = seed::stream(41, &[0]);
        let n = 20_000;
        let mut sums = [0.0; 2];
        let mut sq = [0.0; 2];
        for _ in 0..n {
            let s = g.sample(&[0.0], &mut rng).unwrap();
            for d in 0..2 {
                sums[d] += s[d];
                sq[d] += s[d] * s[d];
            }
        }
        for d in 0..2 {
            let mean = sums[d] / n as f64;
            let var = sq[d] / n as f64 - mean * mean;
            let se = g.std[d] / (n as f64).sqrt();
            assert!((mean - g.mean[d]).abs() < 4.0 * se);
            assert!((var.sqrt() - g.std[d]).abs() < 0.05);
        }
    }
}
