//! Random-walk Metropolis on the quasi-posterior `exp{−n M_n(θ)} 1{‖θ‖ ≤ R}`
//! and the target-site summaries derived from its draws.

use std::collections::HashSet;
use std::io::Write;

use log::warn;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::defaults;
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::model::{eval_objective, norm2, validate, Objective};
use crate::perturbation::{self, PerturbConfig};
use crate::rng::{purpose, stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Draws kept after burn-in and thinning.
    pub draws: usize,
    pub burn_in: usize,
    pub thin: usize,
    /// Size of the broadcast subset.
    pub broadcast: usize,
    /// Starting point; the problem's heuristic when absent.
    pub init: Option<Vec<f64>>,
    /// Initial proposal standard deviation; `2.4 / √(d n)` when absent.
    pub step_scale: Option<f64>,
    /// Acceptance rate the burn-in adaptation aims for; dimension-based
    /// default when absent.
    pub target_accept: Option<f64>,
    pub seed: u64,
    /// Keep a per-iteration trace for diagnostics.
    #[serde(default)]
    pub record_trace: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            draws: defaults::DRAWS,
            burn_in: defaults::BURN_IN,
            thin: defaults::THIN,
            broadcast: defaults::BROADCAST_QUANTILE,
            init: None,
            step_scale: None,
            target_accept: None,
            seed: defaults::SEED,
            record_trace: false,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, d: usize) -> Result<()> {
        let q = d * (d + 1) / 2 + d;
        if self.draws <= q {
            return Err(Error::InvalidConfig(format!(
                "draws = {} must exceed d(d+1)/2 + d = {q}",
                self.draws
            )));
        }
        if self.broadcast > self.draws {
            return Err(Error::InvalidConfig(format!(
                "broadcast size {} exceeds draws {}",
                self.broadcast, self.draws
            )));
        }
        if self.thin == 0 {
            return Err(Error::InvalidConfig("thin must be at least 1".into()));
        }
        if let Some(a) = self.target_accept {
            if !(a > 0.0 && a < 1.0) {
                return Err(Error::InvalidConfig(format!("target_accept {a} outside (0, 1)")));
            }
        }
        if let Some(s) = self.step_scale {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::InvalidConfig(format!("step_scale {s} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub theta: Vec<f64>,
    pub objective: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone)]
pub struct McmcDraws {
    pub draws: Vec<Vec<f64>>,
    /// Post-burn-in acceptance rate.
    pub acceptance_rate: f64,
    /// `M_n` at each kept draw.
    pub objective_values: Vec<f64>,
    /// Proposal scale after adaptation.
    pub step_scale: f64,
    pub trace: Vec<TraceRow>,
}

impl McmcDraws {
    /// Smallest per-coordinate effective sample size (Geyer's initial
    /// positive sequence). Diagnostic only.
    pub fn min_ess(&self) -> f64 {
        let b = self.draws.len();
        if b < 4 {
            return b as f64;
        }
        let d = self.draws[0].len();
        (0..d)
            .map(|j| {
                let x: Vec<f64> = self.draws.iter().map(|t| t[j]).collect();
                ess(&x)
            })
            .fold(f64::INFINITY, f64::min)
    }

    pub fn write_trace_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let d = self.draws.first().map_or(0, Vec::len);
        let mut header = vec!["iteration".to_string()];
        header.extend((1..=d).map(|j| format!("theta{j}")));
        header.push("objective".into());
        header.push("accepted".into());
        writeln!(w, "{}", header.join(","))?;
        for row in &self.trace {
            let theta: Vec<String> = row.theta.iter().map(f64::to_string).collect();
            writeln!(
                w,
                "{},{},{},{}",
                row.iteration,
                theta.join(","),
                row.objective,
                u8::from(row.accepted)
            )?;
        }
        Ok(())
    }
}

fn ess(x: &[f64]) -> f64 {
    let n = x.len();
    let mean = x.iter().sum::<f64>() / n as f64;
    let c0 = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    if c0 <= 0.0 {
        return 1.0;
    }
    let rho = |k: usize| -> f64 {
        (0..n - k).map(|i| (x[i] - mean) * (x[i + k] - mean)).sum::<f64>() / (n as f64 * c0)
    };
    let mut sum = 0.0;
    let mut m = 0;
    while 2 * m + 1 < n {
        let pair = rho(2 * m) + rho(2 * m + 1);
        if pair <= 0.0 {
            break;
        }
        sum += pair;
        m += 1;
    }
    let tau = (2.0 * sum - 1.0).max(1.0);
    n as f64 / tau
}

/// Runs the Metropolis chain.
///
/// The proposal scale follows a Robbins–Monro recursion on its logarithm
/// during burn-in and is frozen afterwards. Proposals outside the ball are
/// rejected without evaluating the objective.
pub fn run_chain(problem: &dyn Objective, data: &Dataset, config: &SamplerConfig) -> Result<McmcDraws> {
    let d = problem.param_dim();
    config.validate(d)?;
    let n = data.len() as f64;
    let init = config
        .init
        .clone()
        .unwrap_or_else(|| problem.initial_point(data));
    if norm2(&init) > problem.radius() {
        return Err(Error::InvalidInput(format!(
            "initial point has norm {} outside the domain radius {}",
            norm2(&init),
            problem.radius()
        )));
    }
    validate(problem, data, &init)?;
    let target_accept = config.target_accept.unwrap_or_else(|| defaults::target_accept(d));
    let step0 = config
        .step_scale
        .unwrap_or_else(|| 2.4 / ((d as f64) * n).sqrt());
    let (step_min, step_max) = (step0 * 1e-6, step0 * 1e6);

    let mut rng = stream(config.seed, &[purpose::TARGET_CHAIN]);
    let mut theta = init;
    let mut energy = n * eval_objective(problem, data, &theta)?;
    let mut log_step = step0.ln();
    let total = config.burn_in + config.draws * config.thin;
    let mut draws = Vec::with_capacity(config.draws);
    let mut values = Vec::with_capacity(config.draws);
    let mut trace = Vec::new();
    let mut accepted_after = 0usize;
    let mut proposal = vec![0.0; d];

    for it in 0..total {
        let step = log_step.exp();
        for (p, t) in proposal.iter_mut().zip(&theta) {
            let z: f64 = rng.sample(StandardNormal);
            *p = t + step * z;
        }
        // one uniform per iteration keeps the stream aligned across branches
        let u: f64 = rng.random();
        let mut accepted = false;
        if norm2(&proposal) <= problem.radius() {
            let e = n * eval_objective(problem, data, &proposal)?;
            if u.ln() < energy - e {
                theta.copy_from_slice(&proposal);
                energy = e;
                accepted = true;
            }
        }
        if it < config.burn_in {
            let gain = 1.0 / ((it + 1) as f64).powf(0.6);
            log_step += gain * (f64::from(u8::from(accepted)) - target_accept);
            log_step = log_step.clamp(step_min.ln(), step_max.ln());
        } else {
            accepted_after += usize::from(accepted);
            if (it - config.burn_in + 1) % config.thin == 0 {
                draws.push(theta.clone());
                values.push(energy / n);
            }
        }
        if config.record_trace {
            trace.push(TraceRow {
                iteration: it,
                theta: theta.clone(),
                objective: energy / n,
                accepted,
            });
        }
    }
    let post = (total - config.burn_in) as f64;
    let acceptance_rate = if post > 0.0 { accepted_after as f64 / post } else { 0.0 };
    if accepted_after == 0 {
        return Err(Error::Sampler(format!(
            "no proposal was accepted after burn-in (final step scale {:.3e}); \
             shrink step_scale or check the domain radius",
            log_step.exp()
        )));
    }
    Ok(McmcDraws {
        draws,
        acceptance_rate,
        objective_values: values,
        step_scale: log_step.exp(),
        trace,
    })
}

/// Draw mean `θ̂` and `Â = n⁻¹ {B⁻¹ Σ (θ*−θ̂)(θ*−θ̂)ᵀ}⁻¹`.
pub fn summarize(draws: &[Vec<f64>], n: usize) -> Result<(Vec<f64>, Matrix)> {
    let b = draws.len();
    if b == 0 {
        return Err(Error::InvalidInput("no draws to summarize".into()));
    }
    let d = draws[0].len();
    let mut mean = vec![0.0; d];
    for t in draws {
        for (m, v) in mean.iter_mut().zip(t) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= b as f64);
    let mut cov = Matrix::zeros(d, d);
    for t in draws {
        for i in 0..d {
            let di = t[i] - mean[i];
            for j in 0..d {
                cov[(i, j)] += di * (t[j] - mean[j]);
            }
        }
    }
    cov /= b as f64;
    linalg::symmetrize(&mut cov);
    let eig = cov.clone().symmetric_eigen();
    let (imin, &lmin) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("d ≥ 1");
    let lmax = eig.eigenvalues.iter().fold(0.0_f64, |a, &v| a.max(v));
    if lmin <= 1e-12 * lmax || lmax == 0.0 {
        let dir: Vec<String> = eig
            .eigenvectors
            .column(imin)
            .iter()
            .map(|v| format!("{v:.4}"))
            .collect();
        return Err(Error::Numerical(format!(
            "draw covariance is singular along direction [{}]",
            dir.join(", ")
        )));
    }
    let mut a_hat = linalg::inverse(&cov, "draw covariance")? / n as f64;
    linalg::symmetrize(&mut a_hat);
    Ok((mean, a_hat))
}

/// Broadcast subset of draws.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub draws: Vec<Vec<f64>>,
    /// Positions of the selected draws in the chain output.
    pub indices: Vec<usize>,
    /// `√n · max selected distance`.
    pub c1_used: f64,
}

/// The `b1` draws nearest to `theta_hat`, closest first.
///
/// Repeated chain states (rejected proposals) are ranked behind every
/// distinct draw so the regressions see as many distinct points as the
/// chain provides; ties in distance go to the earlier draw.
pub fn select_broadcast(draws: &[Vec<f64>], theta_hat: &[f64], n: usize, b1: usize) -> Result<Selection> {
    if b1 > draws.len() {
        return Err(Error::InvalidInput(format!(
            "cannot select {b1} of {} draws",
            draws.len()
        )));
    }
    let dist = |t: &[f64]| -> f64 {
        t.iter().zip(theta_hat).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
    };
    let mut seen = HashSet::with_capacity(draws.len());
    let mut keyed: Vec<(bool, f64, usize)> = Vec::with_capacity(draws.len());
    for (i, t) in draws.iter().enumerate() {
        let bits: Vec<u64> = t.iter().map(|v| v.to_bits()).collect();
        let repeat = !seen.insert(bits);
        keyed.push((repeat, dist(t), i));
    }
    keyed.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)).then(a.2.cmp(&b.2)));
    let chosen = &keyed[..b1];
    let max_dist = chosen.iter().map(|k| k.1).fold(0.0, f64::max);
    let c1_used = (n as f64).sqrt() * max_dist;
    if c1_used > defaults::C1_WARN {
        warn!("broadcast radius constant C1 = {c1_used:.2} exceeds {}", defaults::C1_WARN);
    }
    Ok(Selection {
        draws: chosen.iter().map(|k| draws[k.2].clone()).collect(),
        indices: chosen.iter().map(|k| k.2).collect(),
        c1_used,
    })
}

/// `δ = θ* − θ̂` and the upper triangle (diagonal included) of `δδᵀ` in
/// row-major order: `(1,1), (1,2), …, (1,d), (2,2), …, (d,d)`.
pub fn quad_features(theta_star: &[f64], theta_hat: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let delta: Vec<f64> = theta_star.iter().zip(theta_hat).map(|(a, b)| a - b).collect();
    let d = delta.len();
    let mut quad = Vec::with_capacity(d * (d + 1) / 2);
    for u in 0..d {
        for v in u..d {
            quad.push(delta[u] * delta[v]);
        }
    }
    (delta, quad)
}

/// What the target site keeps after its local analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSummary {
    pub theta_hat: Vec<f64>,
    pub a_hat: Matrix,
    pub sigma_s_hat: Matrix,
    pub broadcast_draws: Vec<Vec<f64>>,
    pub n_target: usize,
    pub label: String,
    pub c1_used: f64,
}

impl TargetSummary {
    pub fn dim(&self) -> usize {
        self.theta_hat.len()
    }

    /// `Â⁻¹ Σ̂ Â⁻¹`, the variance of `√n θ̂`.
    pub fn sandwich(&self) -> Result<Matrix> {
        let inv = linalg::inverse(&self.a_hat, "target curvature Â_T")?;
        let mut v = &inv * &self.sigma_s_hat * &inv;
        linalg::symmetrize(&mut v);
        Ok(v)
    }
}

#[derive(Debug, Clone)]
pub struct TargetDiagnostics {
    pub acceptance_rate: f64,
    pub min_ess: f64,
    pub step_scale: f64,
    pub sigma_psd_adjusted: bool,
}

/// Chain, summary, broadcast selection and score-variance estimation on
/// the target site.
pub fn build_target_summary(
    problem: &dyn Objective,
    data: &Dataset,
    sampler: &SamplerConfig,
    perturb: &PerturbConfig,
) -> Result<(TargetSummary, TargetDiagnostics)> {
    let n = data.len();
    let chain = run_chain(problem, data, sampler)?;
    let (theta_hat, a_hat) = summarize(&chain.draws, n)?;
    let sel = select_broadcast(&chain.draws, &theta_hat, n, sampler.broadcast)?;
    let sv = perturbation::estimate_score_variance(problem, data, &theta_hat, &sel.draws, perturb)?;
    let diag = TargetDiagnostics {
        acceptance_rate: chain.acceptance_rate,
        min_ess: chain.min_ess(),
        step_scale: chain.step_scale,
        sigma_psd_adjusted: sv.psd_adjusted,
    };
    Ok((
        TargetSummary {
            theta_hat,
            a_hat,
            sigma_s_hat: sv.sigma,
            broadcast_draws: sel.draws,
            n_target: n,
            label: data.label().to_string(),
            c1_used: sel.c1_used,
        },
        diag,
    ))
}
