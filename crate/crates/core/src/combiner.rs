//! Target-side aggregation of source replies.
//!
//! Sites are screened with a score-type dissimilarity statistic, synthetic
//! Gaussian draws of `(√n θ̂_T, √n Ŝ_1, …, √n Ŝ_K)` are generated from the
//! joint covariance `Ω̂`, and per-site weight matrices are fitted by an
//! adaptive lasso whose penalty factors are the inverse p-values.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::defaults;
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, Vector};
use crate::numeric::{gamma_upper_regularized, normal_upper_quantile};
use crate::rng::{purpose, stream};
use crate::sampler::TargetSummary;
use crate::source_site::SourceSummary;

/// `P(χ²_d > t)`.
pub fn chisq_upper_tail(t: f64, d: usize) -> f64 {
    if t <= 0.0 {
        return 1.0;
    }
    if t.is_infinite() {
        return 0.0;
    }
    gamma_upper_regularized(d as f64 / 2.0, t / 2.0)
}

/// Inner matrix `Σ̂_k + (n_k/n_T) Â_k Â_T⁻¹ Σ̂_T Â_T⁻¹ Â_k` of the
/// dissimilarity statistic.
fn dissimilarity_inner(src: &SourceSummary, tgt: &TargetSummary, sandwich: &Matrix) -> Matrix {
    let ratio = src.n as f64 / tgt.n_target as f64;
    let mut inner = &src.sigma + (&src.a * sandwich * &src.a) * ratio;
    linalg::symmetrize(&mut inner);
    inner
}

/// `(T_k, p_k)` for one source site; `(+∞, 0)` when `Â_k` is not positive
/// definite.
pub fn dissimilarity(src: &SourceSummary, tgt: &TargetSummary) -> Result<(f64, f64)> {
    if src.dim() != tgt.dim() {
        return Err(Error::InvalidInput(format!(
            "site `{}` has dimension {}, target has {}",
            src.site,
            src.dim(),
            tgt.dim()
        )));
    }
    if !src.a_is_pd {
        return Ok((f64::INFINITY, 0.0));
    }
    let sandwich = tgt.sandwich()?;
    let inner = dissimilarity_inner(src, tgt, &sandwich);
    let inv = linalg::inverse(&inner, &format!("dissimilarity matrix of site `{}`", src.site))?;
    let s = Vector::from_column_slice(&src.score);
    let t = (src.n as f64 * (s.transpose() * inv * &s)[(0, 0)]).max(0.0);
    Ok((t, chisq_upper_tail(t, src.dim())))
}

mod inf_as_null {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        v.iter()
            .map(|x| if x.is_finite() { Some(*x) } else { None })
            .collect::<Vec<_>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let v = Vec::<Option<f64>>::deserialize(d)?;
        Ok(v.into_iter().map(|x| x.unwrap_or(f64::INFINITY)).collect())
    }
}

/// Per-site screening results, in site order. An infinite statistic is
/// written as `null` in JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DissimilarityReport {
    pub sites: Vec<String>,
    #[serde(with = "inf_as_null")]
    pub t: Vec<f64>,
    pub p: Vec<f64>,
    pub excluded_non_pd: Vec<String>,
    /// Sites whose dissimilarity matrix could not be inverted.
    pub excluded_singular: Vec<String>,
}

impl DissimilarityReport {
    pub fn compute(tgt: &TargetSummary, srcs: &[SourceSummary]) -> Result<Self> {
        let mut rep = Self {
            sites: Vec::new(),
            t: Vec::new(),
            p: Vec::new(),
            excluded_non_pd: Vec::new(),
            excluded_singular: Vec::new(),
        };
        for src in srcs {
            rep.sites.push(src.site.clone());
            if !src.a_is_pd {
                rep.excluded_non_pd.push(src.site.clone());
            }
            match dissimilarity(src, tgt) {
                Ok((t, p)) => {
                    rep.t.push(t);
                    rep.p.push(p);
                }
                Err(Error::Numerical(_)) => {
                    rep.excluded_singular.push(src.site.clone());
                    rep.t.push(f64::INFINITY);
                    rep.p.push(0.0);
                }
                Err(e) => return Err(e),
            }
        }
        Ok(rep)
    }

    /// Sites hard-fixed at zero weight in the adaptive lasso.
    pub fn excluded(&self) -> Vec<bool> {
        self.t.iter().map(|t| t.is_infinite()).collect()
    }
}

/// Joint covariance of `√n_T (θ̂_T, Ŝ_1, …, Ŝ_K)`, target block first.
#[derive(Debug, Clone, PartialEq)]
pub struct OmegaMatrix {
    pub omega: Matrix,
    pub d: usize,
    pub sites: Vec<String>,
    /// Whether diagonal jitter was needed to factorize.
    pub jittered: bool,
}

impl OmegaMatrix {
    pub fn n_sites(&self) -> usize {
        self.sites.len()
    }
}

/// Assembles `Ω̂` from the target summary and the replies (in the given
/// order).
pub fn assemble_omega(tgt: &TargetSummary, srcs: &[SourceSummary]) -> Result<OmegaMatrix> {
    let d = tgt.dim();
    let k = srcs.len();
    let v_t = tgt.sandwich()?;
    let dim = d * (k + 1);
    let mut omega = Matrix::zeros(dim, dim);
    omega.view_mut((0, 0), (d, d)).copy_from(&v_t);
    let nt = tgt.n_target as f64;
    for (i, si) in srcs.iter().enumerate() {
        if si.dim() != d {
            return Err(Error::InvalidInput(format!(
                "site `{}` has dimension {}, target has {d}",
                si.site,
                si.dim()
            )));
        }
        let off = d * (i + 1);
        let cross = &si.a * &v_t;
        omega.view_mut((off, 0), (d, d)).copy_from(&cross);
        omega.view_mut((0, off), (d, d)).copy_from(&cross.transpose());
        for (j, sj) in srcs.iter().enumerate() {
            let offj = d * (j + 1);
            let mut block = &si.a * &v_t * sj.a.transpose();
            if i == j {
                block += &si.sigma * (nt / si.n as f64);
            }
            omega.view_mut((off, offj), (d, d)).copy_from(&block);
        }
    }
    linalg::symmetrize(&mut omega);
    let mut jittered = false;
    if omega.clone().cholesky().is_none() {
        let trace = omega.trace();
        let eps = defaults::OMEGA_JITTER * trace / dim as f64;
        for i in 0..dim {
            omega[(i, i)] += eps;
        }
        jittered = true;
        if omega.clone().cholesky().is_none() {
            return Err(Error::Numerical(
                "joint covariance Ω̂ is not positive definite even after jitter".into(),
            ));
        }
    }
    Ok(OmegaMatrix {
        omega,
        d,
        sites: srcs.iter().map(|s| s.site.clone()).collect(),
        jittered,
    })
}

/// `q` mean-zero Gaussian draws with covariance `omega`, one per row.
/// Rank-deficient covariances are supported: draws stay in the column
/// space.
pub fn draw_joint_samples(omega: &Matrix, q: usize, seed: u64) -> Result<Matrix> {
    if q == 0 {
        return Err(Error::InvalidInput("need at least one draw".into()));
    }
    let l = linalg::psd_cholesky(omega)?;
    let dim = omega.nrows();
    let mut rng = stream(seed, &[purpose::COMBINE_DRAWS]);
    let z = Matrix::from_fn(dim, q, |_, _| rng.sample::<f64, _>(StandardNormal));
    Ok((l * z).transpose())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Penalty {
    /// `λ Σ_k p_k⁻¹ Σ |Λ_k,ij|`.
    #[default]
    Elementwise,
    /// `λ Σ_k p_k⁻¹ ‖Λ_k‖_F`.
    Group,
}

/// Second moments of the synthetic draws restricted to active sites.
struct Moments {
    /// `XᵀX / Q` over active score columns.
    gram: Matrix,
    /// `XᵀY / Q`, one column per target coordinate.
    cross: Matrix,
    /// Site index of each active column.
    col_site: Vec<usize>,
    /// Sample columns of the active sites.
    active: Vec<usize>,
}

fn moments(samples: &Matrix, d: usize, excluded: &[bool]) -> Result<Moments> {
    let k = excluded.len();
    if samples.ncols() != d * (k + 1) {
        return Err(Error::InvalidInput(format!(
            "draws have {} columns, expected {} for {k} sites",
            samples.ncols(),
            d * (k + 1)
        )));
    }
    let q = samples.nrows() as f64;
    let mut active = Vec::new();
    let mut col_site = Vec::new();
    for (site, &ex) in excluded.iter().enumerate() {
        if !ex {
            for c in 0..d {
                active.push(d * (site + 1) + c);
                col_site.push(site);
            }
        }
    }
    let x = samples.select_columns(&active);
    let y = samples.columns(0, d);
    let gram = x.transpose() * &x / q;
    let cross = x.transpose() * y / q;
    Ok(Moments {
        gram,
        cross,
        col_site,
        active,
    })
}

fn unpack(coef: &Matrix, m: &Moments, d: usize, k: usize) -> Vec<Matrix> {
    let mut lambdas = vec![Matrix::zeros(d, d); k];
    for (j, &col) in m.active.iter().enumerate() {
        let site = m.col_site[j];
        let c = (col - d) % d;
        for r in 0..d {
            lambdas[site][(r, c)] = coef[(j, r)];
        }
    }
    lambdas
}

fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// Penalty factors `p_k⁻¹` with finite p-values floored.
fn penalty_factors(p_values: &[f64], excluded: &[bool]) -> Result<Vec<f64>> {
    if p_values.len() != excluded.len() {
        return Err(Error::InvalidInput("p-values and exclusion flags differ in length".into()));
    }
    p_values
        .iter()
        .zip(excluded)
        .map(|(&p, &ex)| {
            if ex {
                Ok(f64::INFINITY)
            } else if !(0.0..=1.0).contains(&p) {
                Err(Error::InvalidInput(format!("p-value {p} outside [0, 1]")))
            } else {
                Ok(1.0 / p.max(defaults::P_VALUE_FLOOR))
            }
        })
        .collect()
}

/// Fits the per-site weight matrices.
///
/// Minimizes `Q⁻¹ Σ_q ‖θ^(q) − Σ_k Λ_k S_k^(q)‖² + λ Σ_k p_k⁻¹ ‖Λ_k‖₁`.
/// `samples` holds one draw per row laid out as in `Ω̂`. Excluded sites are
/// fixed at zero. The objective separates across output coordinates, so
/// each row of the stacked weights is solved by cyclic coordinate descent
/// with exact soft-threshold updates.
pub fn adaptive_lasso(
    samples: &Matrix,
    d: usize,
    p_values: &[f64],
    lambda: f64,
    excluded: &[bool],
    penalty: Penalty,
) -> Result<Vec<Matrix>> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidInput(format!("λ = {lambda} must be finite and ≥ 0")));
    }
    let k = excluded.len();
    let factors = penalty_factors(p_values, excluded)?;
    let m = moments(samples, d, excluded)?;
    let coef = match penalty {
        Penalty::Elementwise => coordinate_descent(&m, &factors, lambda, d)?,
        Penalty::Group => group_proximal(&m, &factors, lambda, d)?,
    };
    Ok(unpack(&coef, &m, d, k))
}

fn coordinate_descent(m: &Moments, factors: &[f64], lambda: f64, d: usize) -> Result<Matrix> {
    let p = m.active.len();
    let mut coef = Matrix::zeros(p, d);
    if p == 0 {
        return Ok(coef);
    }
    let thresh: Vec<f64> = m.col_site.iter().map(|&s| lambda * factors[s] / 2.0).collect();
    for r in 0..d {
        let c = m.cross.column(r);
        let mut beta = vec![0.0; p];
        // residual correlation  c − Gβ, kept up to date
        let mut resid: Vec<f64> = c.iter().copied().collect();
        let mut converged = false;
        for _ in 0..defaults::LASSO_MAX_SWEEPS {
            let mut max_change = 0.0_f64;
            for j in 0..p {
                let gjj = m.gram[(j, j)];
                if gjj <= 0.0 {
                    continue;
                }
                let z = resid[j] + gjj * beta[j];
                let new = soft_threshold(z, thresh[j]) / gjj;
                let change = new - beta[j];
                if change != 0.0 {
                    for (i, rv) in resid.iter_mut().enumerate() {
                        *rv -= m.gram[(i, j)] * change;
                    }
                    beta[j] = new;
                    max_change = max_change.max(change.abs());
                }
            }
            if max_change < defaults::LASSO_TOL {
                converged = true;
                break;
            }
        }
        if !converged {
            let gap = kkt_violation(m, &beta, &thresh, r);
            return Err(Error::Numerical(format!(
                "adaptive lasso did not converge in {} sweeps (row {r}, KKT violation {gap:.3e})",
                defaults::LASSO_MAX_SWEEPS
            )));
        }
        for j in 0..p {
            coef[(j, r)] = beta[j];
        }
    }
    Ok(coef)
}

/// Largest violation of the subgradient optimality conditions.
fn kkt_violation(m: &Moments, beta: &[f64], thresh: &[f64], r: usize) -> f64 {
    let p = beta.len();
    (0..p)
        .map(|j| {
            let grad: f64 = 2.0 * ((0..p).map(|l| m.gram[(j, l)] * beta[l]).sum::<f64>() - m.cross[(j, r)]);
            let pen = 2.0 * thresh[j];
            if beta[j] != 0.0 {
                (grad + pen * beta[j].signum()).abs()
            } else {
                (grad.abs() - pen).max(0.0)
            }
        })
        .fold(0.0, f64::max)
}

/// Accelerated proximal gradient with block soft-thresholding per site.
fn group_proximal(m: &Moments, factors: &[f64], lambda: f64, d: usize) -> Result<Matrix> {
    let p = m.active.len();
    let mut coef = Matrix::zeros(p, d);
    if p == 0 {
        return Ok(coef);
    }
    let lmax = linalg::sym_eigenvalues(&m.gram).last().copied().unwrap_or(0.0);
    if lmax <= 0.0 {
        return Ok(coef);
    }
    let step = 1.0 / (2.0 * lmax);
    let mut sites: Vec<usize> = m.col_site.clone();
    sites.dedup();
    let mut y = coef.clone();
    let mut t = 1.0_f64;
    let max_iter = defaults::LASSO_MAX_SWEEPS * 10;
    for _ in 0..max_iter {
        let grad = (&m.gram * &y - &m.cross) * 2.0;
        let mut next = &y - grad * step;
        for &s in &sites {
            let rows: Vec<usize> = (0..p).filter(|&j| m.col_site[j] == s).collect();
            let norm = rows
                .iter()
                .map(|&j| next.row(j).norm_squared())
                .sum::<f64>()
                .sqrt();
            let shrink = if norm > 0.0 {
                (1.0 - step * lambda * factors[s] / norm).max(0.0)
            } else {
                0.0
            };
            for &j in &rows {
                let scaled = next.row(j) * shrink;
                next.row_mut(j).copy_from(&scaled);
            }
        }
        let change = (&next - &coef).amax();
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        y = &next + (&next - &coef) * ((t - 1.0) / t_next);
        coef = next;
        t = t_next;
        if change < defaults::LASSO_TOL {
            return Ok(coef);
        }
    }
    Err(Error::Numerical(format!(
        "group lasso did not converge in {max_iter} iterations"
    )))
}

/// Penalized objective of a set of weights; used for diagnostics and the
/// path checks.
pub fn lasso_objective(
    samples: &Matrix,
    d: usize,
    lambdas: &[Matrix],
    p_values: &[f64],
    lambda: f64,
) -> f64 {
    let q = samples.nrows();
    let mut loss = 0.0;
    for row in 0..q {
        for r in 0..d {
            let mut pred = 0.0;
            for (k, l) in lambdas.iter().enumerate() {
                for c in 0..d {
                    pred += l[(r, c)] * samples[(row, d * (k + 1) + c)];
                }
            }
            loss += (samples[(row, r)] - pred).powi(2);
        }
    }
    let pen: f64 = lambdas
        .iter()
        .zip(p_values)
        .map(|(l, &p)| {
            let l1: f64 = l.iter().map(|v| v.abs()).sum();
            if l1 == 0.0 {
                0.0
            } else {
                lambda / p.max(defaults::P_VALUE_FLOOR) * l1
            }
        })
        .sum();
    loss / q as f64 + pen
}

/// Unpenalized least-squares weights on the normal equations. A singular
/// Gram matrix gets a `1e-8` ridge; the flag reports it.
pub fn full_borrow_weights(samples: &Matrix, d: usize, excluded: &[bool]) -> Result<(Vec<Matrix>, bool)> {
    let k = excluded.len();
    let m = moments(samples, d, excluded)?;
    let p = m.active.len();
    if p == 0 {
        return Ok((vec![Matrix::zeros(d, d); k], false));
    }
    let (coef, ridged) = match m.gram.clone().cholesky() {
        Some(ch) => (ch.solve(&m.cross), false),
        None => {
            let scale = m.gram.trace() / p as f64;
            let ridge = &m.gram + Matrix::identity(p, p) * (1e-8 * scale.max(1e-300));
            let ch = ridge
                .cholesky()
                .ok_or_else(|| Error::Numerical("Gram matrix is singular even with ridge".into()))?;
            (ch.solve(&m.cross), true)
        }
    };
    Ok((unpack(&coef, &m, d, k), ridged))
}

/// `θ̂_C = θ̂_T − Σ_k Λ̂_k Ŝ_k`.
pub fn combine(tgt: &TargetSummary, srcs: &[SourceSummary], lambdas: &[Matrix]) -> Result<Vec<f64>> {
    if srcs.len() != lambdas.len() {
        return Err(Error::InvalidInput("one weight matrix per site required".into()));
    }
    let mut theta = Vector::from_column_slice(&tgt.theta_hat);
    for (s, l) in srcs.iter().zip(lambdas) {
        theta -= l * Vector::from_column_slice(&s.score);
    }
    Ok(theta.iter().copied().collect())
}

/// `V̂_C = [I, −Λ̂_1, …, −Λ̂_K] Ω̂ [I, −Λ̂_1, …, −Λ̂_K]ᵀ`, the variance of
/// `√n_T θ̂_C`.
pub fn combined_variance(lambdas: &[Matrix], omega: &OmegaMatrix) -> Result<Matrix> {
    let d = omega.d;
    if lambdas.len() != omega.n_sites() {
        return Err(Error::InvalidInput("one weight matrix per site required".into()));
    }
    let mut stack = Matrix::zeros(d, d * (lambdas.len() + 1));
    stack.view_mut((0, 0), (d, d)).copy_from(&Matrix::identity(d, d));
    for (k, l) in lambdas.iter().enumerate() {
        stack.view_mut((0, d * (k + 1)), (d, d)).copy_from(&(-l));
    }
    let mut v = &stack * &omega.omega * stack.transpose();
    linalg::symmetrize(&mut v);
    Ok(v)
}

/// Per-coordinate Wald intervals `θⱼ ± z_{1−α/2} √(vⱼⱼ / n)`.
pub fn wald_ci(theta: &[f64], var: &Matrix, n: usize, alpha: f64) -> Result<Vec<(f64, f64)>> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidInput(format!("α = {alpha} outside (0, 1]")));
    }
    let z = normal_upper_quantile(alpha / 2.0);
    theta
        .iter()
        .enumerate()
        .map(|(j, &t)| {
            let v = var[(j, j)];
            if v < 0.0 || !v.is_finite() {
                return Err(Error::Numerical(format!("variance of coordinate {j} is {v}")));
            }
            let half = z * (v / n as f64).sqrt();
            Ok((t - half, t + half))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LambdaChoice {
    /// `n_T^{-1/2}`.
    #[default]
    Default,
    Fixed(f64),
    /// Five-fold cross-validation on the synthetic draws over
    /// `{n^{-1/4}, n^{-1/2}, n^{-1}}`.
    CrossValidated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CombineConfig {
    pub lambda: LambdaChoice,
    pub q_draws: usize,
    pub alpha: f64,
    pub penalty: Penalty,
    pub seed: u64,
}

impl Default for CombineConfig {
    fn default() -> Self {
        Self {
            lambda: LambdaChoice::Default,
            q_draws: defaults::Q_DRAWS,
            alpha: defaults::ALPHA,
            penalty: Penalty::Elementwise,
            seed: defaults::SEED,
        }
    }
}

/// Point estimate, variance of `√n_T θ̂`, weights and intervals of one
/// estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Estimate {
    pub theta: Vec<f64>,
    #[serde(with = "linalg::serde_rows")]
    pub variance: Matrix,
    #[serde(with = "serde_matrix_list")]
    pub lambdas: Vec<Matrix>,
    pub ci: Vec<(f64, f64)>,
}

mod serde_matrix_list {
    use crate::linalg::{from_rows, to_rows, Matrix};
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[Matrix], s: S) -> Result<S::Ok, S::Error> {
        v.iter().map(to_rows).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Matrix>, D::Error> {
        Vec::<Vec<Vec<f64>>>::deserialize(d)?
            .iter()
            .map(|m| from_rows(m).map_err(serde::de::Error::custom))
            .collect()
    }
}

/// The adaptive transfer estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CombinedEstimate {
    pub theta_c: Vec<f64>,
    /// Variance of `√n_T θ̂_C`.
    #[serde(with = "linalg::serde_rows")]
    pub v_c: Matrix,
    /// One weight matrix per site, in `diagnostics.sites` order.
    #[serde(with = "serde_matrix_list")]
    pub lambdas: Vec<Matrix>,
    pub ci: Vec<(f64, f64)>,
    pub diagnostics: DissimilarityReport,
    pub lambda: f64,
    pub alpha: f64,
    pub n_target: usize,
    pub omega_jittered: bool,
}

/// Everything the combine step produces: the transfer estimate and the
/// target-only and full-borrowing baselines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CombineOutput {
    pub combined: CombinedEstimate,
    pub target_only: Estimate,
    pub full_borrow: Estimate,
    /// Full-borrowing Gram matrix needed a ridge.
    pub full_borrow_ridged: bool,
}

impl CombineOutput {
    /// Estimate of the named method (`target`, `transfer`, `full_borrow`).
    pub fn method(&self, m: Method) -> (&[f64], &[(f64, f64)]) {
        match m {
            Method::Target => (&self.target_only.theta, &self.target_only.ci),
            Method::Transfer => (&self.combined.theta_c, &self.combined.ci),
            Method::FullBorrow => (&self.full_borrow.theta, &self.full_borrow.ci),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Target,
    Transfer,
    FullBorrow,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Target, Method::Transfer, Method::FullBorrow];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Target => "target",
            Method::Transfer => "transfer",
            Method::FullBorrow => "full_borrow",
        }
    }
}

fn choose_lambda(
    choice: &LambdaChoice,
    n_target: usize,
    samples: &Matrix,
    d: usize,
    p: &[f64],
    excluded: &[bool],
    penalty: Penalty,
) -> Result<f64> {
    match *choice {
        LambdaChoice::Default => Ok(defaults::lambda(n_target)),
        LambdaChoice::Fixed(l) => Ok(l),
        LambdaChoice::CrossValidated => {
            let n = n_target as f64;
            let grid = [n.powf(-0.25), n.powf(-0.5), 1.0 / n];
            let q = samples.nrows();
            let folds = 5.min(q);
            let mut best = (f64::INFINITY, grid[1]);
            for &lam in &grid {
                let mut err = 0.0;
                for f in 0..folds {
                    let (train, test): (Vec<usize>, Vec<usize>) = (0..q).partition(|i| i % folds != f);
                    let tr = samples.select_rows(&train);
                    let te = samples.select_rows(&test);
                    let fit = adaptive_lasso(&tr, d, p, lam, excluded, penalty)?;
                    let zero = vec![0.0; p.len()];
                    err += lasso_objective(&te, d, &fit, &zero, 0.0);
                }
                if err < best.0 {
                    best = (err, lam);
                }
            }
            Ok(best.1)
        }
    }
}

/// Target-side combine step over replies already sorted by site label.
pub fn combine_sites(tgt: &TargetSummary, srcs: &[SourceSummary], cfg: &CombineConfig) -> Result<CombineOutput> {
    let d = tgt.dim();
    let n = tgt.n_target;
    let v_t = tgt.sandwich()?;
    let target_only = Estimate {
        theta: tgt.theta_hat.clone(),
        ci: wald_ci(&tgt.theta_hat, &v_t, n, cfg.alpha)?,
        variance: v_t,
        lambdas: vec![Matrix::zeros(d, d); srcs.len()],
    };
    let report = DissimilarityReport::compute(tgt, srcs)?;
    let omega = assemble_omega(tgt, srcs)?;
    let samples = draw_joint_samples(&omega.omega, cfg.q_draws, cfg.seed)?;
    let excluded = report.excluded();
    let lambda = choose_lambda(&cfg.lambda, n, &samples, d, &report.p, &excluded, cfg.penalty)?;
    let lambdas = adaptive_lasso(&samples, d, &report.p, lambda, &excluded, cfg.penalty)?;
    let transfer = estimate_with(tgt, srcs, lambdas, &omega, cfg.alpha)?;
    let unusable: Vec<bool> = srcs
        .iter()
        .map(|s| report.excluded_singular.contains(&s.site))
        .collect();
    let (full, ridged) = full_borrow_weights(&samples, d, &unusable)?;
    let full_borrow = estimate_with(tgt, srcs, full, &omega, cfg.alpha)?;
    Ok(CombineOutput {
        combined: CombinedEstimate {
            theta_c: transfer.theta,
            v_c: transfer.variance,
            lambdas: transfer.lambdas,
            ci: transfer.ci,
            diagnostics: report,
            lambda,
            alpha: cfg.alpha,
            n_target: n,
            omega_jittered: omega.jittered,
        },
        target_only,
        full_borrow,
        full_borrow_ridged: ridged,
    })
}

fn estimate_with(
    tgt: &TargetSummary,
    srcs: &[SourceSummary],
    lambdas: Vec<Matrix>,
    omega: &OmegaMatrix,
    alpha: f64,
) -> Result<Estimate> {
    let theta = combine(tgt, srcs, &lambdas)?;
    let variance = combined_variance(&lambdas, omega)?;
    let ci = wald_ci(&theta, &variance, tgt.n_target, alpha)?;
    Ok(Estimate {
        theta,
        variance,
        lambdas,
        ci,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_target(theta: f64, a: f64, sigma: f64, n: usize) -> TargetSummary {
        TargetSummary {
            theta_hat: vec![theta],
            a_hat: Matrix::from_element(1, 1, a),
            sigma_s_hat: Matrix::from_element(1, 1, sigma),
            broadcast_draws: vec![],
            n_target: n,
            label: "target".into(),
            c1_used: 0.0,
        }
    }

    fn scalar_source(site: &str, score: f64, a: f64, sigma: f64, n: usize) -> SourceSummary {
        SourceSummary {
            site: site.into(),
            n,
            score: vec![score],
            a: Matrix::from_element(1, 1, a),
            sigma: Matrix::from_element(1, 1, sigma),
            a_is_pd: a > 0.0,
        }
    }

    #[test]
    fn dissimilarity_scalar_formula() {
        let tgt = scalar_target(0.0, 1.0, 1.0, 100);
        let (t, p) = dissimilarity(&scalar_source("s", 0.1, 1.0, 1.0, 100), &tgt).unwrap();
        assert!((t - 0.5).abs() < 1e-12);
        assert!((p - chisq_upper_tail(0.5, 1)).abs() < 1e-15);
        let (t, p) = dissimilarity(&scalar_source("s", 0.0, 1.0, 1.0, 100), &tgt).unwrap();
        assert_eq!((t, p), (0.0, 1.0));
        let (t, p) = dissimilarity(&scalar_source("s", 0.1, -1.0, 1.0, 100), &tgt).unwrap();
        assert_eq!((t, p), (f64::INFINITY, 0.0));
    }

    #[test]
    fn singular_inner_matrix_is_an_error() {
        let tgt = scalar_target(0.0, 1.0, 0.0, 100);
        let err = dissimilarity(&scalar_source("s", 0.1, 1.0, 0.0, 100), &tgt).unwrap_err();
        assert!(err.to_string().contains("condition number"), "{err}");
    }

    #[test]
    fn omega_block_formula() {
        let tgt = scalar_target(0.0, 1.0, 1.0, 100);
        let om = assemble_omega(&tgt, &[scalar_source("s", 0.0, 1.0, 1.0, 100)]).unwrap();
        assert_eq!(om.omega, Matrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 2.0]));
        assert!(!om.jittered);
        let om0 = assemble_omega(&tgt, &[]).unwrap();
        assert_eq!(om0.omega, Matrix::from_element(1, 1, 1.0));
    }

    #[test]
    fn combine_and_variance_scalar() {
        let tgt = scalar_target(1.0, 1.0, 1.0, 100);
        let src = scalar_source("s", 0.2, 1.0, 1.0, 100);
        let lam = vec![Matrix::from_element(1, 1, 0.5)];
        let theta = combine(&tgt, std::slice::from_ref(&src), &lam).unwrap();
        assert!((theta[0] - 0.9).abs() < 1e-15);
        let om = assemble_omega(&tgt, &[src]).unwrap();
        let v = combined_variance(&lam, &om).unwrap();
        assert!((v[(0, 0)] - 0.5).abs() < 1e-15);
        let v0 = combined_variance(&[Matrix::zeros(1, 1)], &om).unwrap();
        assert_eq!(v0[(0, 0)], 1.0);
    }

    #[test]
    fn wald_interval_values() {
        let v = Matrix::from_element(1, 1, 0.5);
        let ci = wald_ci(&[0.9], &v, 100, 0.05).unwrap();
        assert!((ci[0].0 - 0.76141).abs() < 1e-4 && (ci[0].1 - 1.03859).abs() < 1e-4);
        let ci = wald_ci(&[0.9], &Matrix::zeros(1, 1), 100, 0.05).unwrap();
        assert_eq!(ci[0], (0.9, 0.9));
        let ci = wald_ci(&[0.9], &v, 100, 1.0).unwrap();
        assert_eq!(ci[0], (0.9, 0.9));
        assert!(wald_ci(&[0.9], &Matrix::from_element(1, 1, -1.0), 100, 0.05).is_err());
    }

    #[test]
    fn huge_penalty_zeroes_everything() {
        let om = Matrix::from_row_slice(3, 3, &[1.0, 0.5, 0.2, 0.5, 2.0, 0.1, 0.2, 0.1, 1.5]);
        let s = draw_joint_samples(&om, 2000, 1).unwrap();
        let l = adaptive_lasso(&s, 1, &[0.5, 0.5], 1e6, &[false, false], Penalty::Elementwise).unwrap();
        assert!(l.iter().all(|m| m.iter().all(|v| *v == 0.0)));
        let l = adaptive_lasso(&s, 1, &[0.5, 0.5], 1e6, &[false, false], Penalty::Group).unwrap();
        assert!(l.iter().all(|m| m.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn excluded_sites_get_zero_weight() {
        let om = Matrix::from_row_slice(3, 3, &[1.0, 0.5, 0.2, 0.5, 2.0, 0.1, 0.2, 0.1, 1.5]);
        let s = draw_joint_samples(&om, 2000, 2).unwrap();
        let l = adaptive_lasso(&s, 1, &[0.5, 0.0], 0.0, &[false, true], Penalty::Elementwise).unwrap();
        assert_eq!(l[1][(0, 0)], 0.0);
        assert!(l[0][(0, 0)] != 0.0);
    }

    #[test]
    fn full_borrow_without_sites_is_empty() {
        let s = draw_joint_samples(&Matrix::identity(2, 2), 10, 1).unwrap();
        let (l, ridged) = full_borrow_weights(&s, 2, &[]).unwrap();
        assert!(l.is_empty());
        assert!(!ridged);
    }

    #[test]
    fn draws_are_reproducible() {
        let om = Matrix::identity(2, 2);
        let a = draw_joint_samples(&om, 1, 5).unwrap();
        let b = draw_joint_samples(&om, 1, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.nrows(), 1);
        assert!(draw_joint_samples(&om, 0, 5).is_err());
    }

    #[test]
    fn infinite_statistic_serializes_as_null() {
        let rep = DissimilarityReport {
            sites: vec!["a".into(), "b".into()],
            t: vec![1.5, f64::INFINITY],
            p: vec![0.2, 0.0],
            excluded_non_pd: vec!["b".into()],
            excluded_singular: vec![],
        };
        let json = serde_json::to_string(&rep).unwrap();
        assert!(json.contains(r#""t":[1.5,null]"#), "{json}");
        let back: DissimilarityReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, rep);
    }
}
