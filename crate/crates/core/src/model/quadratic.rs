use super::{Objective, WeightScheme, WeightedForm};
use crate::data::{Dataset, Obs};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Data-free objective `½(θ−μ)ᵀA(θ−μ)`. Its quasi-posterior is exactly
/// `N(μ, (nA)⁻¹)` (up to the domain truncation), which makes it the
/// reference case for the sampler and the regressions.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticProblem {
    mu: Vec<f64>,
    a: Matrix,
    radius: f64,
}

impl QuadraticProblem {
    pub fn new(mu: Vec<f64>, a: Matrix, radius: f64) -> Result<Self> {
        let d = mu.len();
        if d == 0 || a.nrows() != d || a.ncols() != d {
            return Err(Error::InvalidInput("curvature must be d×d with d = |μ| ≥ 1".into()));
        }
        if a.clone().cholesky().is_none() {
            return Err(Error::InvalidInput("curvature must be positive definite".into()));
        }
        if !(radius > 0.0) {
            return Err(Error::InvalidConfig("radius must be positive".into()));
        }
        Ok(Self { mu, a, radius })
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn curvature(&self) -> &Matrix {
        &self.a
    }

    pub fn value(&self, theta: &[f64]) -> f64 {
        let d = self.mu.len();
        let dev: Vec<f64> = theta.iter().zip(&self.mu).map(|(t, m)| t - m).collect();
        let mut q = 0.0;
        for i in 0..d {
            for j in 0..d {
                q += dev[i] * self.a[(i, j)] * dev[j];
            }
        }
        0.5 * q
    }
}

struct Scaled {
    value: f64,
}

impl WeightedForm for Scaled {
    fn value(&self, weights: &[f64]) -> f64 {
        let n = weights.len() as f64;
        self.value * (weights.iter().sum::<f64>() / n)
    }
}

impl Objective for QuadraticProblem {
    fn degree(&self) -> usize {
        1
    }

    fn param_dim(&self) -> usize {
        self.mu.len()
    }

    fn covariate_dim(&self) -> Option<usize> {
        None
    }

    fn radius(&self) -> f64 {
        self.radius
    }

    fn kernel(&self, _obs: &[Obs<'_>], theta: &[f64]) -> f64 {
        self.value(theta)
    }

    fn initial_point(&self, _data: &Dataset) -> Vec<f64> {
        self.mu.clone()
    }

    fn weighted_form<'a>(
        &'a self,
        _data: &'a Dataset,
        theta: &[f64],
        _scheme: WeightScheme,
    ) -> Box<dyn WeightedForm + 'a> {
        Box::new(Scaled {
            value: self.value(theta),
        })
    }
}
