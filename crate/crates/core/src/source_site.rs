//! Source-site reply: score and curvature at the target estimate, plus the
//! score variance, all from objective evaluations at the broadcast draws.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::defaults;
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::model::{eval_objective, Objective};
use crate::perturbation::{self, PerturbConfig};
use crate::sampler::{quad_features, TargetSummary};

/// What a source site sends back. Every field is `O(d²)`; no row-level
/// data leaves the site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSummary {
    pub site: String,
    pub n: usize,
    /// `Ŝ_{n,k}(θ̂_T)`.
    pub score: Vec<f64>,
    /// `Â_k`.
    #[serde(rename = "A", with = "linalg::serde_rows")]
    pub a: Matrix,
    /// `Σ̂_{S,k}`.
    #[serde(rename = "Sigma", with = "linalg::serde_rows")]
    pub sigma: Matrix,
    pub a_is_pd: bool,
}

impl SourceSummary {
    pub fn dim(&self) -> usize {
        self.score.len()
    }
}

/// `min eig(a) > 1e-8 (1 + ‖a‖)`.
pub fn is_positive_definite(a: &Matrix) -> bool {
    let tol = defaults::PD_TOLERANCE * (1.0 + linalg::op_norm(a));
    linalg::min_eigenvalue(a) > tol
}

/// No-intercept regression of objective differences on `(δ, Θ)`.
///
/// Returns the linear coefficients as the score and the curvature with
/// diagonal `2β̂ᵤᵤ` and off-diagonal `β̂ᵤᵥ`.
pub fn regress_score_hessian(
    obj_diffs: &[f64],
    deltas: &[Vec<f64>],
    quads: &[Vec<f64>],
) -> Result<(Vec<f64>, Matrix)> {
    let m = obj_diffs.len();
    if deltas.len() != m || quads.len() != m {
        return Err(Error::InvalidInput("regression inputs differ in length".into()));
    }
    let d = deltas
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::InvalidInput("no regression points".into()))?;
    let q = d * (d + 1) / 2;
    if quads.iter().any(|t| t.len() != q) || deltas.iter().any(|t| t.len() != d) {
        return Err(Error::InvalidInput("inconsistent feature lengths".into()));
    }
    if m <= d + q {
        return Err(Error::InvalidInput(format!(
            "{m} points cannot identify {} score and curvature coefficients",
            d + q
        )));
    }
    let x = Matrix::from_fn(m, d + q, |i, j| if j < d { deltas[i][j] } else { quads[i][j - d] });
    let coef = linalg::least_squares(&x, obj_diffs)?;
    let score: Vec<f64> = coef.iter().take(d).copied().collect();
    let mut a = Matrix::zeros(d, d);
    let mut k = d;
    for u in 0..d {
        for v in u..d {
            if u == v {
                a[(u, u)] = 2.0 * coef[k];
            } else {
                a[(u, v)] = coef[k];
                a[(v, u)] = coef[k];
            }
            k += 1;
        }
    }
    Ok((score, a))
}

/// Builds the reply of one source site from the target broadcast.
pub fn build_source_summary(
    problem: &dyn Objective,
    data: &Dataset,
    broadcast: &TargetSummary,
    cfg: &PerturbConfig,
) -> Result<SourceSummary> {
    let d = broadcast.dim();
    if problem.param_dim() != d {
        return Err(Error::InvalidInput(format!(
            "broadcast has dimension {d}, problem has {}",
            problem.param_dim()
        )));
    }
    let params = d + d * (d + 1) / 2;
    if data.len() < params {
        return Err(Error::InvalidInput(format!(
            "site `{}` has {} rows, fewer than the {params} regression coefficients",
            data.label(),
            data.len()
        )));
    }
    let theta_hat = &broadcast.theta_hat;
    let base = eval_objective(problem, data, theta_hat)?;
    let mut diffs = Vec::with_capacity(broadcast.broadcast_draws.len());
    let mut deltas = Vec::with_capacity(diffs.capacity());
    let mut quads = Vec::with_capacity(diffs.capacity());
    for t in &broadcast.broadcast_draws {
        diffs.push(eval_objective(problem, data, t)? - base);
        let (delta, quad) = quad_features(t, theta_hat);
        deltas.push(delta);
        quads.push(quad);
    }
    let (score, mut a) = regress_score_hessian(&diffs, &deltas, &quads)?;
    linalg::symmetrize(&mut a);
    let sv = perturbation::estimate_score_variance(
        problem,
        data,
        theta_hat,
        &broadcast.broadcast_draws,
        cfg,
    )?;
    Ok(SourceSummary {
        site: data.label().to_string(),
        n: data.len(),
        score,
        a_is_pd: is_positive_definite(&a),
        a,
        sigma: sv.sigma,
    })
}
