//! Data generators for the quantile-regression and AUC simulation settings
//! and a replication harness that tabulates coverage and interval width.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Bernoulli, Distribution, Normal, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::combiner::{CombineOutput, LambdaChoice, Method};
use crate::data::Dataset;
use crate::defaults;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::ProblemSpec;
use crate::protocol::{orchestrate, FederatedConfig};
use crate::rng::{derive_seed, purpose, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Example {
    Quantile,
    Auc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Setting {
    I,
    II,
    III,
}

impl fmt::Display for Example {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Example::Quantile => "quantile",
            Example::Auc => "auc",
        })
    }
}

impl FromStr for Example {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "quantile" => Ok(Example::Quantile),
            "auc" => Ok(Example::Auc),
            _ => Err(Error::InvalidConfig(format!("unknown example `{s}` (quantile, auc)"))),
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Setting::I => "I",
            Setting::II => "II",
            Setting::III => "III",
        })
    }
}

impl FromStr for Setting {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "I" | "1" => Ok(Setting::I),
            "II" | "2" => Ok(Setting::II),
            "III" | "3" => Ok(Setting::III),
            _ => Err(Error::InvalidConfig(format!("unknown setting `{s}` (I, II, III)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Outcome {
    Gaussian,
    Logistic,
    Poisson,
}

/// Generating parameters of one site.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteParams {
    pub beta: Vec<f64>,
    pub sigma: f64,
    pub half_size: bool,
    pub outcome: Outcome,
    pub eligible: bool,
}

const QUANTILE_TARGET: [f64; 5] = [-1.0, 1.0, 0.5, 0.0, 0.0];
const AUC_TARGET: [f64; 5] = [0.5, -0.5, 0.5, -0.5, 0.0];

/// Fixes the last four components and sets the first positive so that the
/// vector has unit norm.
pub fn unit_first(beta: &[f64]) -> Vec<f64> {
    let tail: f64 = beta[1..].iter().map(|b| b * b).sum();
    let mut out = beta.to_vec();
    out[0] = (1.0 - tail).max(0.0).sqrt();
    out
}

fn quantile_sites(setting: Setting) -> Vec<SiteParams> {
    let site = |beta: &[f64], sigma: f64, half: bool| SiteParams {
        eligible: beta == QUANTILE_TARGET,
        beta: beta.to_vec(),
        sigma,
        half_size: half,
        outcome: Outcome::Gaussian,
    };
    let t = &QUANTILE_TARGET;
    match setting {
        Setting::I => vec![
            site(t, 1.0, false),
            site(t, 1.0, false),
            site(t, 1.0, false),
            site(&[-1.25, 0.75, 0.25, -0.25, -0.25], 1.0, false),
            site(&[-0.75, 1.25, 0.75, 0.25, 0.25], 1.0, false),
        ],
        Setting::II => vec![
            site(t, 1.0, false),
            site(t, 1.0, false),
            site(t, 1.0, false),
            site(&[-0.5, 1.0, 0.5, 0.0, 0.0], 1.0, false),
            site(&[-0.5, 1.0, 0.5, 0.0, 0.0], 1.0, false),
        ],
        Setting::III => vec![
            site(t, 1.0, false),
            site(t, 1.0, false),
            site(t, 1.0, false),
            site(t, 1.5, false),
            site(t, 1.0, true),
            site(&[-0.5, 1.0, 0.5, 0.0, 0.0], 1.0, false),
            site(&[-0.7, 0.7, 0.2, 0.3, -0.3], 1.0, false),
        ],
    }
}

fn auc_sites(setting: Setting) -> Vec<SiteParams> {
    let target = unit_first(&AUC_TARGET);
    let site = |beta: &[f64], sigma: f64, half: bool, outcome: Outcome| {
        let beta = unit_first(beta);
        SiteParams {
            eligible: beta == target,
            beta,
            sigma,
            half_size: half,
            outcome,
        }
    };
    let t = &AUC_TARGET;
    let logit = Outcome::Logistic;
    let ineligible_5 = [0.5, 0.5, 0.5, -0.5, 0.0];
    let ineligible_6 = [0.5, 0.25, -0.25, -0.5, 0.0];
    match setting {
        Setting::I => vec![
            site(t, 1.5, false, logit),
            site(t, 1.5, false, logit),
            site(t, 1.5, false, logit),
            site(&[0.5, 0.0, 0.0, 0.0, 0.25], 1.5, false, logit),
            site(&[0.5, 0.0, 0.0, 0.0, -0.25], 1.5, false, logit),
        ],
        Setting::II => vec![
            site(t, 1.5, false, logit),
            site(t, 1.5, false, logit),
            site(t, 1.5, false, logit),
            site(t, 1.0, false, logit),
            site(t, 1.5, true, logit),
            site(&ineligible_5, 1.5, false, logit),
            site(&ineligible_6, 1.5, false, logit),
        ],
        Setting::III => vec![
            site(t, 1.5, false, logit),
            site(t, 1.5, false, logit),
            site(t, 1.5, false, logit),
            site(t, 1.5, false, Outcome::Poisson),
            site(t, 1.5, false, Outcome::Poisson),
            site(&ineligible_5, 1.5, false, logit),
            site(&ineligible_6, 1.5, false, logit),
        ],
    }
}

/// Site parameters with the target at index 0.
pub fn site_params(example: Example, setting: Setting) -> Vec<SiteParams> {
    match example {
        Example::Quantile => quantile_sites(setting),
        Example::Auc => auc_sites(setting),
    }
}

pub fn site_label(site: usize) -> String {
    if site == 0 {
        "target".to_string()
    } else {
        format!("site{site}")
    }
}

fn site_size(params: &SiteParams, n: usize) -> usize {
    if params.half_size {
        n / 2
    } else {
        n
    }
}

fn lookup(example: Example, setting: Setting, site: usize) -> Result<SiteParams> {
    let all = site_params(example, setting);
    all.get(site).cloned().ok_or_else(|| {
        Error::InvalidInput(format!(
            "{example} setting {setting} has sites 0..={}, not {site}",
            all.len() - 1
        ))
    })
}

/// Quantile site: `Z ~ N(0, I₅)`, `Y ~ N(βᵀZ, σ²)`.
pub fn gen_quantile_site(setting: Setting, site: usize, n: usize, seed: u64) -> Result<Dataset> {
    let params = lookup(Example::Quantile, setting, site)?;
    let m = site_size(&params, n);
    let mut rng = stream(seed, &[purpose::DATA, site as u64]);
    let noise = Normal::new(0.0, params.sigma).expect("positive sd");
    let mut data = Dataset::new(site_label(site), 5)?;
    let mut z = [0.0; 5];
    for _ in 0..m {
        for v in z.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let mean: f64 = params.beta.iter().zip(&z).map(|(b, x)| b * x).sum();
        data.push(mean + noise.sample(&mut rng), &z)?;
    }
    Ok(data)
}

/// `Σᵢⱼ = 0.1^|i−j|`.
pub fn auc_covariance(p: usize) -> Matrix {
    Matrix::from_fn(p, p, |i, j| 0.1_f64.powi((i as i32 - j as i32).abs()))
}

/// AUC site: `Z ~ N(0, σ²Σ)` with logistic or Poisson outcome.
pub fn gen_auc_site(setting: Setting, site: usize, n: usize, seed: u64) -> Result<Dataset> {
    let params = lookup(Example::Auc, setting, site)?;
    let m = site_size(&params, n);
    let mut rng = stream(seed, &[purpose::DATA, site as u64]);
    let chol = auc_covariance(5).cholesky().expect("Σ is positive definite");
    let l = chol.l() * params.sigma;
    let mut data = Dataset::new(site_label(site), 5)?;
    let mut e = [0.0; 5];
    let mut z = vec![0.0; 5];
    for _ in 0..m {
        for v in e.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        for (i, zi) in z.iter_mut().enumerate() {
            *zi = (0..=i).map(|j| l[(i, j)] * e[j]).sum();
        }
        let eta: f64 = params.beta.iter().zip(&z).map(|(b, x)| b * x).sum();
        let y = match params.outcome {
            Outcome::Logistic => {
                let prob = 1.0 / (1.0 + (-eta).exp());
                if Bernoulli::new(prob).expect("probability").sample(&mut rng) {
                    1.0
                } else {
                    0.0
                }
            }
            Outcome::Poisson => Poisson::new(eta.exp()).expect("positive rate").sample(&mut rng),
            Outcome::Gaussian => eta + rng.sample::<f64, _>(StandardNormal) * params.sigma,
        };
        data.push(y, &z)?;
    }
    Ok(data)
}

pub fn gen_site(example: Example, setting: Setting, site: usize, n: usize, seed: u64) -> Result<Dataset> {
    match example {
        Example::Quantile => gen_quantile_site(setting, site, n, seed),
        Example::Auc => gen_auc_site(setting, site, n, seed),
    }
}

/// True target parameter in the estimation parameterization.
pub fn truth(example: Example) -> Vec<f64> {
    match example {
        Example::Quantile => QUANTILE_TARGET.to_vec(),
        Example::Auc => unit_first(&AUC_TARGET)[1..].to_vec(),
    }
}

/// Index in the regression vector of parameter coordinate `j`, 1-based.
pub fn coefficient_index(example: Example, j: usize) -> usize {
    match example {
        Example::Quantile => j + 1,
        Example::Auc => j + 2,
    }
}

pub fn problem_spec(example: Example) -> ProblemSpec {
    match example {
        Example::Quantile => ProblemSpec::Quantile {
            tau: defaults::TAU,
            p: 5,
            radius: defaults::RADIUS_QUANTILE,
        },
        Example::Auc => ProblemSpec::Auc {
            p_plus_one: 5,
            radius: defaults::RADIUS_AUC,
        },
    }
}

/// Perturbation count and broadcast size used for each example.
pub fn federated_config(example: Example, seed: u64, lambda: LambdaChoice) -> FederatedConfig {
    let mut cfg = FederatedConfig {
        seed,
        ..FederatedConfig::default()
    };
    match example {
        Example::Quantile => {
            cfg.sampler.broadcast = defaults::BROADCAST_QUANTILE;
            cfg.perturb_replicates = defaults::PERTURB_QUANTILE;
        }
        Example::Auc => {
            cfg.sampler.broadcast = defaults::BROADCAST_AUC;
            cfg.perturb_replicates = defaults::PERTURB_AUC;
        }
    }
    cfg.combine.lambda = lambda;
    cfg
}

/// Largest AUC target size run without `heavy`.
pub const AUC_LIGHT_MAX_N: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct SettingSpec {
    pub example: Example,
    pub setting: Setting,
    pub n: usize,
    pub seed: u64,
    pub reps: usize,
    pub heavy: bool,
    pub lambda: LambdaChoice,
}

impl SettingSpec {
    pub fn new(example: Example, setting: Setting, n: usize, reps: usize, seed: u64) -> Self {
        Self {
            example,
            setting,
            n,
            seed,
            reps,
            heavy: false,
            lambda: LambdaChoice::Default,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.reps == 0 {
            return Err(Error::InvalidConfig("reps must be at least 1".into()));
        }
        if self.n < 40 {
            return Err(Error::InvalidConfig(format!("n = {} is too small (minimum 40)", self.n)));
        }
        if self.example == Example::Auc && self.n > AUC_LIGHT_MAX_N && !self.heavy {
            return Err(Error::InvalidConfig(format!(
                "AUC runs with n > {AUC_LIGHT_MAX_N} need the heavy flag"
            )));
        }
        if let LambdaChoice::Fixed(l) = self.lambda {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::InvalidConfig(format!("λ = {l} must be finite and ≥ 0")));
            }
        }
        Ok(())
    }

    pub fn csv_name(&self) -> String {
        format!("coverage_{}_{}.csv", self.example, self.setting)
    }

    /// Seed of replicate `rep`.
    pub fn rep_seed(&self, rep: usize) -> u64 {
        derive_seed(self.seed, &[rep as u64])
    }

    /// All datasets of replicate `rep`, target first.
    pub fn datasets(&self, rep: usize) -> Result<Vec<Dataset>> {
        let seed = self.rep_seed(rep);
        (0..site_params(self.example, self.setting).len())
            .map(|k| gen_site(self.example, self.setting, k, self.n, seed))
            .collect()
    }
}

/// One coordinate of one method in one replicate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoordResult {
    pub estimate: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub covered: bool,
    pub width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepResult {
    pub method: Method,
    pub coords: Vec<CoordResult>,
}

/// Per-replicate record kept for the campaign.
#[derive(Debug, Clone, PartialEq)]
pub struct Replicate {
    pub rep: usize,
    pub results: Vec<RepResult>,
    /// Sites in label order.
    pub sites: Vec<String>,
    pub t: Vec<f64>,
    pub p: Vec<f64>,
    /// Whether each site's weight matrix is exactly zero.
    pub zero_weight: Vec<bool>,
}

impl Replicate {
    pub fn result(&self, m: Method) -> &RepResult {
        self.results.iter().find(|r| r.method == m).expect("all methods recorded")
    }

    fn from_output(rep: usize, out: &CombineOutput, truth: &[f64]) -> Self {
        let results = Method::ALL
            .iter()
            .map(|&m| {
                let (theta, ci) = out.method(m);
                let coords = theta
                    .iter()
                    .zip(ci)
                    .zip(truth)
                    .map(|((&est, &(lo, hi)), &t)| CoordResult {
                        estimate: est,
                        ci_lo: lo,
                        ci_hi: hi,
                        covered: lo <= t && t <= hi,
                        width: hi - lo,
                    })
                    .collect();
                RepResult { method: m, coords }
            })
            .collect();
        let diag = &out.combined.diagnostics;
        Self {
            rep,
            results,
            sites: diag.sites.clone(),
            t: diag.t.clone(),
            p: diag.p.clone(),
            zero_weight: out
                .combined
                .lambdas
                .iter()
                .map(|l| l.iter().all(|v| *v == 0.0))
                .collect(),
        }
    }
}

/// Runs replicate `rep` of a setting.
pub fn run_replicate(spec: &SettingSpec, rep: usize) -> Result<Replicate> {
    let data = spec.datasets(rep)?;
    let cfg = federated_config(spec.example, spec.rep_seed(rep), spec.lambda.clone());
    let run = orchestrate(&data[0], &data[1..], &problem_spec(spec.example), &cfg)?;
    Ok(Replicate::from_output(rep, &run.output, &truth(spec.example)))
}

/// Aggregated row of the coverage table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub method: String,
    pub coordinate: usize,
    pub n: usize,
    pub reps: usize,
    pub coverage: f64,
    pub mean_width: f64,
    pub failures: usize,
}

#[derive(Debug, Clone)]
pub struct Campaign {
    pub spec: SettingSpec,
    pub replicates: Vec<Replicate>,
    pub failures: Vec<(usize, String)>,
}

impl Campaign {
    /// Coverage and mean width over the successful replicates, per method
    /// and coordinate. `reps` counts successes.
    pub fn table(&self) -> Vec<CoverageRow> {
        let d = truth(self.spec.example).len();
        let ok = self.replicates.len();
        let mut rows = Vec::new();
        for m in Method::ALL {
            for j in 0..d {
                let (mut hits, mut width) = (0usize, 0.0);
                for r in &self.replicates {
                    let c = r.result(m).coords[j];
                    hits += c.covered as usize;
                    width += c.width;
                }
                let denom = ok.max(1) as f64;
                rows.push(CoverageRow {
                    method: m.as_str().to_string(),
                    coordinate: coefficient_index(self.spec.example, j),
                    n: self.spec.n,
                    reps: ok,
                    coverage: if ok == 0 { f64::NAN } else { 100.0 * hits as f64 / denom },
                    mean_width: if ok == 0 { f64::NAN } else { width / denom },
                    failures: self.failures.len(),
                });
            }
        }
        rows
    }

    pub fn row(&self, m: Method, coordinate: usize) -> Option<CoverageRow> {
        self.table()
            .into_iter()
            .find(|r| r.method == m.as_str() && r.coordinate == coordinate)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for row in self.table() {
            out.serialize(row).map_err(|e| Error::Io(std::io::Error::other(e)))?;
        }
        out.flush()?;
        Ok(())
    }

    /// Whitespace-separated long format, one line per replicate, method
    /// and coordinate.
    pub fn write_long<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "# example setting n rep method coordinate estimate ci_lo ci_hi covered width")?;
        for r in &self.replicates {
            for res in &r.results {
                for (j, c) in res.coords.iter().enumerate() {
                    writeln!(
                        w,
                        "{} {} {} {} {} {} {} {} {} {} {}",
                        self.spec.example,
                        self.spec.setting,
                        self.spec.n,
                        r.rep,
                        res.method.as_str(),
                        coefficient_index(self.spec.example, j),
                        c.estimate,
                        c.ci_lo,
                        c.ci_hi,
                        c.covered as u8,
                        c.width
                    )?;
                }
            }
        }
        Ok(())
    }
}

/// Runs all replicates on the current rayon pool. Results do not depend on
/// the number of threads.
pub fn run_replications(spec: &SettingSpec) -> Result<Campaign> {
    spec.validate()?;
    let outcomes: Vec<(usize, Result<Replicate>)> = (0..spec.reps)
        .into_par_iter()
        .map(|r| (r, run_replicate(spec, r)))
        .collect();
    let mut replicates = Vec::new();
    let mut failures = Vec::new();
    for (r, res) in outcomes {
        match res {
            Ok(rep) => replicates.push(rep),
            Err(e) => {
                log::warn!("replicate {r} failed: {e}");
                failures.push((r, e.to_string()));
            }
        }
    }
    Ok(Campaign {
        spec: spec.clone(),
        replicates,
        failures,
    })
}
