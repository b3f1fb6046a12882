use nalgebra::{DMatrix, DVector};

use super::{LinearForm, Objective, WeightScheme, WeightedForm};
use crate::data::{Dataset, Obs};
use crate::error::{Error, Result};

/// Check loss `ξ_τ(u) = u (τ − 1{u < 0})`.
pub fn check_loss(u: f64, tau: f64) -> f64 {
    u * (tau - if u < 0.0 { 1.0 } else { 0.0 })
}

/// Linear quantile regression at level `τ`: kernel `ξ_τ(y − βᵀz)`, `D = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileProblem {
    tau: f64,
    p: usize,
    radius: f64,
}

impl QuantileProblem {
    pub fn new(tau: f64, p: usize, radius: f64) -> Result<Self> {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(Error::InvalidInput(format!("τ = {tau} is outside (0, 1)")));
        }
        if p == 0 {
            return Err(Error::InvalidConfig("covariate dimension must be at least 1".into()));
        }
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::InvalidConfig(format!("radius {radius} must be positive")));
        }
        Ok(Self { tau, p, radius })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// Per-observation score `z (1{y < βᵀz} − τ)`.
    pub fn score(&self, obs: Obs<'_>, beta: &[f64]) -> Vec<f64> {
        let fit: f64 = obs.z.iter().zip(beta).map(|(a, b)| a * b).sum();
        let g = if obs.y < fit { 1.0 } else { 0.0 } - self.tau;
        obs.z.iter().map(|z| z * g).collect()
    }
}

impl Objective for QuantileProblem {
    fn degree(&self) -> usize {
        1
    }

    fn param_dim(&self) -> usize {
        self.p
    }

    fn covariate_dim(&self) -> Option<usize> {
        Some(self.p)
    }

    fn radius(&self) -> f64 {
        self.radius
    }

    fn kernel(&self, obs: &[Obs<'_>], theta: &[f64]) -> f64 {
        let o = obs[0];
        let fit: f64 = o.z.iter().zip(theta).map(|(a, b)| a * b).sum();
        check_loss(o.y - fit, self.tau)
    }

    /// Least-squares fit, pulled inside the domain ball if needed.
    fn initial_point(&self, data: &Dataset) -> Vec<f64> {
        let n = data.len();
        let x = DMatrix::from_fn(n, self.p, |i, j| data.z(i)[j]);
        let y = DVector::from_column_slice(data.y());
        let xtx = x.transpose() * &x;
        let xty = x.transpose() * y;
        let mut beta: Vec<f64> = match xtx.cholesky() {
            Some(ch) => ch.solve(&xty).iter().copied().collect(),
            None => vec![0.0; self.p],
        };
        let norm = super::norm2(&beta);
        if norm > 0.9 * self.radius {
            let s = 0.9 * self.radius / norm;
            beta.iter_mut().for_each(|b| *b *= s);
        }
        beta
    }

    fn weighted_form<'a>(
        &'a self,
        data: &'a Dataset,
        theta: &[f64],
        _scheme: WeightScheme,
    ) -> Box<dyn WeightedForm + 'a> {
        let terms = data
            .linear_scores(theta)
            .iter()
            .zip(data.y())
            .map(|(fit, y)| check_loss(y - fit, self.tau))
            .collect();
        Box::new(LinearForm {
            terms,
            norm: data.len() as f64,
        })
    }
}
