//! Score-variance estimation by perturbing the objective.
//!
//! For each candidate `θⱼ` the conditional variance (over random weights)
//! of `M†(θⱼ) − M†(θ̂)` is approximately `δⱼᵀ Σ δⱼ / n`. Regressing those
//! variances on the quadratic features of `δⱼ` recovers `Σ`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::defaults;
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::model::{validate, Objective, WeightScheme, WeightVector};
use crate::rng::stream;
use crate::sampler::quad_features;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbConfig {
    pub replicates: usize,
    pub scheme: WeightScheme,
    pub seed: u64,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self {
            replicates: defaults::PERTURB_QUANTILE,
            scheme: WeightScheme::MultinomialBootstrap,
            seed: defaults::SEED,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVariance {
    /// `Σ̂_S`, symmetric PSD.
    pub sigma: Matrix,
    /// Raw regression coefficients in `quad_features` order.
    pub gamma_raw: Vec<f64>,
    /// Whether negative eigenvalues were clipped.
    pub psd_adjusted: bool,
}

/// Variance over weight draws of `M†(θⱼ) − M†(θ̂)` for every `θⱼ`.
///
/// The same weight vectors are used for every `θⱼ`; replicate `r` draws
/// from its own substream of `cfg.seed`.
pub fn empirical_v(
    problem: &dyn Objective,
    data: &Dataset,
    theta_hat: &[f64],
    thetas: &[Vec<f64>],
    cfg: &PerturbConfig,
) -> Result<Vec<f64>> {
    if cfg.replicates < 2 {
        return Err(Error::InvalidConfig(format!(
            "need at least 2 perturbation replicates, got {}",
            cfg.replicates
        )));
    }
    if thetas.is_empty() {
        return Err(Error::InvalidInput("no parameter values to perturb at".into()));
    }
    validate(problem, data, theta_hat)?;
    for t in thetas {
        validate(problem, data, t)?;
    }
    let n = data.len();
    let base = problem.weighted_form(data, theta_hat, cfg.scheme);
    let forms: Vec<_> = thetas
        .iter()
        .map(|t| problem.weighted_form(data, t, cfg.scheme))
        .collect();
    let mut diffs = vec![Vec::with_capacity(cfg.replicates); thetas.len()];
    for r in 0..cfg.replicates {
        let mut rng = stream(cfg.seed, &[r as u64]);
        let w = WeightVector::draw(cfg.scheme, n, problem.degree(), &mut rng);
        let v0 = base.value(w.as_slice());
        for (form, out) in forms.iter().zip(diffs.iter_mut()) {
            out.push(form.value(w.as_slice()) - v0);
        }
    }
    Ok(diffs.iter().map(|x| sample_variance(x)).collect())
}

fn sample_variance(x: &[f64]) -> f64 {
    let m = x.len() as f64;
    let mean = x.iter().sum::<f64>() / m;
    x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0)
}

/// Dimension `d` with `d(d+1)/2 = len`.
pub(crate) fn dim_from_triangle(len: usize) -> Result<usize> {
    let mut d = 0;
    while d * (d + 1) / 2 < len {
        d += 1;
    }
    if d * (d + 1) / 2 != len || d == 0 {
        return Err(Error::InvalidInput(format!(
            "{len} is not a triangular feature count"
        )));
    }
    Ok(d)
}

/// Least squares of `V` on the quadratic features (no intercept), mapped
/// to `Σ̂`: diagonal `n γ̂ᵤᵤ`, off-diagonal `n γ̂ᵤᵥ / 2`. Negative
/// eigenvalues are clipped.
pub fn regress_score_variance(v_values: &[f64], features: &[Vec<f64>], n: usize) -> Result<ScoreVariance> {
    let len = features
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::InvalidInput("no regression points".into()))?;
    let d = dim_from_triangle(len)?;
    if features.len() <= len {
        return Err(Error::InvalidInput(format!(
            "{} points cannot identify {len} variance coefficients",
            features.len()
        )));
    }
    let x = Matrix::from_fn(features.len(), len, |i, j| features[i][j]);
    let gamma = linalg::least_squares(&x, v_values)?;
    let nf = n as f64;
    let mut sigma = Matrix::zeros(d, d);
    let mut k = 0;
    for u in 0..d {
        for v in u..d {
            if u == v {
                sigma[(u, u)] = nf * gamma[k];
            } else {
                sigma[(u, v)] = nf / 2.0 * gamma[k];
                sigma[(v, u)] = sigma[(u, v)];
            }
            k += 1;
        }
    }
    let (sigma, psd_adjusted) = linalg::clip_psd(&sigma);
    Ok(ScoreVariance {
        sigma,
        gamma_raw: gamma.iter().copied().collect(),
        psd_adjusted,
    })
}

/// `empirical_v` followed by `regress_score_variance` at the given draws.
pub fn estimate_score_variance(
    problem: &dyn Objective,
    data: &Dataset,
    theta_hat: &[f64],
    thetas: &[Vec<f64>],
    cfg: &PerturbConfig,
) -> Result<ScoreVariance> {
    let v = empirical_v(problem, data, theta_hat, thetas, cfg)?;
    let features: Vec<Vec<f64>> = thetas.iter().map(|t| quad_features(t, theta_hat).1).collect();
    regress_score_variance(&v, &features, data.len())
}

/// Debug dump of `(θⱼ, Vⱼ)` pairs.
pub fn write_v_csv<W: Write>(mut w: W, thetas: &[Vec<f64>], v: &[f64]) -> Result<()> {
    let d = thetas.first().map_or(0, Vec::len);
    let header: Vec<String> = (1..=d).map(|j| format!("theta{j}")).collect();
    writeln!(w, "{},v", header.join(","))?;
    for (t, v) in thetas.iter().zip(v) {
        let row: Vec<String> = t.iter().map(f64::to_string).collect();
        writeln!(w, "{},{v}", row.join(","))?;
    }
    Ok(())
}
