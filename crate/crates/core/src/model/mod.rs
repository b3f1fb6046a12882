//! M-estimation problems with U-statistic objectives.
//!
//! An objective of degree `D` averages a symmetric kernel over all unordered
//! `D`-tuples of observations. Perturbed versions reweight each tuple by the
//! product of bootstrap weights (multinomial scheme) or by the sum of i.i.d.
//! multiplier weights (multiplier scheme).

mod auc;
mod quadratic;
mod quantile;

pub use auc::AucProblem;
pub use quadratic::QuadraticProblem;
pub use quantile::{check_loss, QuantileProblem};

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Obs};
use crate::error::{Error, Result};
use crate::numeric::{binomial, compensated_sum};

/// How perturbation weights are generated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum WeightScheme {
    /// Counts of a multinomial `MN(n, (1/n, …, 1/n))` draw; tuple weight is
    /// the product of member weights.
    #[default]
    MultinomialBootstrap,
    /// I.i.d. Gamma weights with mean `1/D` and variance 1; tuple weight is
    /// the sum of member weights.
    JinPerturb,
}

impl std::str::FromStr for WeightScheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multinomial-bootstrap" | "multinomial" => Ok(Self::MultinomialBootstrap),
            "jin-perturb" | "jin" => Ok(Self::JinPerturb),
            other => Err(Error::InvalidConfig(format!("unknown weight scheme `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    weights: Vec<f64>,
    scheme: WeightScheme,
}

impl WeightVector {
    pub fn new(weights: Vec<f64>, scheme: WeightScheme) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidInput("weights must be finite and nonnegative".into()));
        }
        if scheme == WeightScheme::MultinomialBootstrap {
            if weights.iter().any(|w| w.fract() != 0.0) {
                return Err(Error::InvalidInput("multinomial weights must be integers".into()));
            }
            let total: f64 = weights.iter().sum();
            if total != weights.len() as f64 {
                return Err(Error::InvalidInput(format!(
                    "multinomial weights sum to {total}, expected {}",
                    weights.len()
                )));
            }
        }
        Ok(Self { weights, scheme })
    }

    /// All-ones multinomial weights (the unperturbed objective).
    pub fn identity(n: usize) -> Self {
        Self {
            weights: vec![1.0; n],
            scheme: WeightScheme::MultinomialBootstrap,
        }
    }

    pub fn draw<R: Rng + ?Sized>(scheme: WeightScheme, n: usize, degree: usize, rng: &mut R) -> Self {
        let mut weights = vec![0.0; n];
        match scheme {
            WeightScheme::MultinomialBootstrap => {
                for _ in 0..n {
                    weights[rng.random_range(0..n)] += 1.0;
                }
            }
            WeightScheme::JinPerturb => {
                let d = degree as f64;
                let gamma = Gamma::new(1.0 / (d * d), d).expect("valid gamma parameters");
                for w in &mut weights {
                    *w = gamma.sample(rng);
                }
            }
        }
        Self { weights, scheme }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn scheme(&self) -> WeightScheme {
        self.scheme
    }
}

/// The objective at a fixed parameter, viewed as a function of the weights.
pub trait WeightedForm: Send + Sync {
    fn value(&self, weights: &[f64]) -> f64;
}

/// A U-statistic objective `M_n(θ)` together with its parameter domain.
pub trait Objective: Send + Sync {
    /// Degree `D` of the U-statistic.
    fn degree(&self) -> usize;

    /// Parameter dimension `d`.
    fn param_dim(&self) -> usize;

    /// Required covariate dimension, when the kernel reads covariates.
    fn covariate_dim(&self) -> Option<usize>;

    /// Radius `R` of the ball `‖θ‖ ≤ R` the quasi-posterior lives on.
    fn radius(&self) -> f64;

    /// Symmetric kernel over `D` observations.
    fn kernel(&self, obs: &[Obs<'_>], theta: &[f64]) -> f64;

    /// Full coefficient vector implied by `theta`.
    fn param_to_coef(&self, theta: &[f64]) -> Vec<f64> {
        theta.to_vec()
    }

    /// Starting point for the sampler.
    fn initial_point(&self, _data: &Dataset) -> Vec<f64> {
        vec![0.0; self.param_dim()]
    }

    /// Objective at `theta` as a function of weights. Implementations may
    /// exploit kernel structure; the default enumerates all tuples.
    fn weighted_form<'a>(
        &'a self,
        data: &'a Dataset,
        theta: &[f64],
        scheme: WeightScheme,
    ) -> Box<dyn WeightedForm + 'a> {
        Box::new(EnumeratedForm {
            problem: self,
            data,
            theta: theta.to_vec(),
            scheme,
        })
    }
}

/// Default form: visits every `D`-tuple.
struct EnumeratedForm<'a, P: ?Sized> {
    problem: &'a P,
    data: &'a Dataset,
    theta: Vec<f64>,
    scheme: WeightScheme,
}

impl<P: Objective + ?Sized> WeightedForm for EnumeratedForm<'_, P> {
    fn value(&self, weights: &[f64]) -> f64 {
        enumerate_ustat(self.problem, self.data, &self.theta, Some((weights, self.scheme)))
    }
}

/// Objective that is linear in the weights: `Σ wᵢ tᵢ / norm`.
pub(crate) struct LinearForm {
    pub(crate) terms: Vec<f64>,
    pub(crate) norm: f64,
}

impl WeightedForm for LinearForm {
    fn value(&self, weights: &[f64]) -> f64 {
        compensated_sum(self.terms.iter().zip(weights).map(|(t, w)| w * t)) / self.norm
    }
}

/// Reference U-statistic: the average of the (weighted) kernel over every
/// unordered `D`-tuple, visited in lexicographic order.
pub fn enumerate_ustat<P: Objective + ?Sized>(
    problem: &P,
    data: &Dataset,
    theta: &[f64],
    weights: Option<(&[f64], WeightScheme)>,
) -> f64 {
    let d = problem.degree();
    let n = data.len();
    let mut idx: Vec<usize> = (0..d).collect();
    let mut terms = Vec::new();
    let mut obs: Vec<Obs<'_>> = Vec::with_capacity(d);
    if n < d {
        return f64::NAN;
    }
    loop {
        obs.clear();
        obs.extend(idx.iter().map(|&i| data.row(i)));
        let k = problem.kernel(&obs, theta);
        let w = match weights {
            None => 1.0,
            Some((w, WeightScheme::MultinomialBootstrap)) => idx.iter().map(|&i| w[i]).product(),
            Some((w, WeightScheme::JinPerturb)) => idx.iter().map(|&i| w[i]).sum(),
        };
        terms.push(w * k);
        // advance to the next combination
        let mut pos = d;
        loop {
            if pos == 0 {
                return compensated_sum(terms) / binomial(n, d);
            }
            pos -= 1;
            if idx[pos] < n - d + pos {
                break;
            }
        }
        idx[pos] += 1;
        for q in (pos + 1)..d {
            idx[q] = idx[q - 1] + 1;
        }
    }
}

fn check_args(problem: &dyn Objective, data: &Dataset, theta: &[f64]) -> Result<()> {
    if theta.len() != problem.param_dim() {
        return Err(Error::InvalidInput(format!(
            "parameter has length {}, expected {}",
            theta.len(),
            problem.param_dim()
        )));
    }
    if theta.iter().any(|t| !t.is_finite()) {
        return Err(Error::InvalidInput("parameter has non-finite entries".into()));
    }
    let norm = norm2(theta);
    if norm > problem.radius() {
        return Err(Error::InvalidInput(format!(
            "‖θ‖ = {norm} exceeds the domain radius {}",
            problem.radius()
        )));
    }
    if data.len() < problem.degree() {
        return Err(Error::InvalidInput(format!(
            "{} rows cannot form a {}-tuple",
            data.len(),
            problem.degree()
        )));
    }
    if let Some(p) = problem.covariate_dim() {
        if p != data.dim() {
            return Err(Error::InvalidInput(format!(
                "dataset `{}` has {} covariates, problem expects {p}",
                data.label(),
                data.dim()
            )));
        }
    }
    Ok(())
}

pub fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `M_n(θ)`.
pub fn eval_objective(problem: &dyn Objective, data: &Dataset, theta: &[f64]) -> Result<f64> {
    check_args(problem, data, theta)?;
    let form = problem.weighted_form(data, theta, WeightScheme::MultinomialBootstrap);
    Ok(form.value(WeightVector::identity(data.len()).as_slice()))
}

/// `M†_n(θ)` under the given weights.
pub fn eval_perturbed_objective(
    problem: &dyn Objective,
    data: &Dataset,
    theta: &[f64],
    w: &WeightVector,
) -> Result<f64> {
    check_args(problem, data, theta)?;
    if w.len() != data.len() {
        return Err(Error::InvalidInput(format!(
            "weight vector has length {}, dataset has {} rows",
            w.len(),
            data.len()
        )));
    }
    Ok(problem.weighted_form(data, theta, w.scheme()).value(w.as_slice()))
}

/// Checks domain and data compatibility without evaluating.
pub fn validate(problem: &dyn Objective, data: &Dataset, theta: &[f64]) -> Result<()> {
    check_args(problem, data, theta)
}

/// Runtime choice among the concrete problems.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ProblemSpec {
    Quantile { tau: f64, p: usize, radius: f64 },
    Auc { p_plus_one: usize, radius: f64 },
}

impl ProblemSpec {
    pub fn build(&self) -> Result<Problem> {
        match *self {
            ProblemSpec::Quantile { tau, p, radius } => {
                Ok(Problem::Quantile(QuantileProblem::new(tau, p, radius)?))
            }
            ProblemSpec::Auc { p_plus_one, radius } => {
                Ok(Problem::Auc(AucProblem::new(p_plus_one, radius)?))
            }
        }
    }
}

#[derive(Debug, Clone)]
pub enum Problem {
    Quantile(QuantileProblem),
    Auc(AucProblem),
    Quadratic(QuadraticProblem),
}

impl Problem {
    fn inner(&self) -> &dyn Objective {
        match self {
            Problem::Quantile(p) => p,
            Problem::Auc(p) => p,
            Problem::Quadratic(p) => p,
        }
    }
}

impl Objective for Problem {
    fn degree(&self) -> usize {
        self.inner().degree()
    }
    fn param_dim(&self) -> usize {
        self.inner().param_dim()
    }
    fn covariate_dim(&self) -> Option<usize> {
        self.inner().covariate_dim()
    }
    fn radius(&self) -> f64 {
        self.inner().radius()
    }
    fn kernel(&self, obs: &[Obs<'_>], theta: &[f64]) -> f64 {
        self.inner().kernel(obs, theta)
    }
    fn param_to_coef(&self, theta: &[f64]) -> Vec<f64> {
        self.inner().param_to_coef(theta)
    }
    fn initial_point(&self, data: &Dataset) -> Vec<f64> {
        self.inner().initial_point(data)
    }
    fn weighted_form<'a>(
        &'a self,
        data: &'a Dataset,
        theta: &[f64],
        scheme: WeightScheme,
    ) -> Box<dyn WeightedForm + 'a> {
        self.inner().weighted_form(data, theta, scheme)
    }
}
