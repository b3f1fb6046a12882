//! TOML run configuration and its merge with command-line flags.
//!
//! Precedence is flag, then file, then `FEDM_SEED` (seed only), then the
//! built-in default.

use std::path::Path;

use clap::parser::ValueSource;
use clap::{ArgMatches, Args, ValueEnum};
use serde::Deserialize;

use fedm::combiner::{CombineConfig, LambdaChoice, Penalty};
use fedm::defaults;
use fedm::model::{ProblemSpec, WeightScheme};
use fedm::protocol::FederatedConfig;
use fedm::sampler::SamplerConfig;
use fedm::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProblemKind {
    Quantile,
    Auc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchemeArg {
    Multinomial,
    Jin,
}

impl From<SchemeArg> for WeightScheme {
    fn from(s: SchemeArg) -> Self {
        match s {
            SchemeArg::Multinomial => WeightScheme::MultinomialBootstrap,
            SchemeArg::Jin => WeightScheme::JinPerturb,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PenaltyArg {
    Elementwise,
    Group,
}

impl From<PenaltyArg> for Penalty {
    fn from(p: PenaltyArg) -> Self {
        match p {
            PenaltyArg::Elementwise => Penalty::Elementwise,
            PenaltyArg::Group => Penalty::Group,
        }
    }
}

/// `default` (n^-1/2), `cv`, or a non-negative number.
pub fn parse_lambda(s: &str) -> std::result::Result<LambdaChoice, String> {
    match s {
        "default" => Ok(LambdaChoice::Default),
        "cv" => Ok(LambdaChoice::CrossValidated),
        _ => match s.parse::<f64>() {
            Ok(v) if v >= 0.0 && v.is_finite() => Ok(LambdaChoice::Fixed(v)),
            _ => Err(format!("`{s}` is not `default`, `cv` or a number ≥ 0")),
        },
    }
}

/// Target-side estimation settings.
#[derive(Debug, Clone, Args)]
pub struct TargetArgs {
    /// Estimation problem
    #[arg(long, value_enum, default_value_t = ProblemKind::Quantile)]
    pub problem: ProblemKind,
    /// Quantile level for the quantile problem
    #[arg(long, default_value_t = defaults::TAU)]
    pub tau: f64,
    /// Radius of the parameter ball [default: 50 for quantile, 0.999 for auc]
    #[arg(long)]
    pub radius: Option<f64>,
    /// Retained MCMC draws
    #[arg(long, default_value_t = defaults::DRAWS)]
    pub draws: usize,
    /// Burn-in iterations with step adaptation
    #[arg(long, default_value_t = defaults::BURN_IN)]
    pub burn_in: usize,
    /// Thinning interval
    #[arg(long, default_value_t = defaults::THIN)]
    pub thin: usize,
    /// Broadcast draws B1 [default: 50 for quantile, 100 for auc]
    #[arg(long)]
    pub broadcast: Option<usize>,
    /// Perturbation replicates [default: 500 for quantile, 100 for auc]
    #[arg(long)]
    pub perturbations: Option<usize>,
    /// Perturbation weight scheme
    #[arg(long, value_enum, default_value_t = SchemeArg::Multinomial)]
    pub scheme: SchemeArg,
    /// Master seed
    #[arg(long, env = "FEDM_SEED", default_value_t = defaults::SEED)]
    pub seed: u64,
}

/// Combine-step settings.
#[derive(Debug, Clone, Args)]
pub struct CombineArgs {
    /// Synthetic Gaussian draws Q
    #[arg(long, default_value_t = defaults::Q_DRAWS)]
    pub q_draws: usize,
    /// Lasso penalty level: `default` (n^-1/2), `cv`, or a number
    #[arg(long, default_value = "default", value_parser = parse_lambda)]
    pub lambda: LambdaChoice,
    /// One minus the confidence level
    #[arg(long, default_value_t = defaults::ALPHA)]
    pub alpha: f64,
    /// Penalty shape
    #[arg(long, value_enum, default_value_t = PenaltyArg::Elementwise)]
    pub penalty: PenaltyArg,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum LambdaValue {
    Number(f64),
    Name(String),
}

/// Keys accepted in the TOML file; every one is optional.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub problem: Option<ProblemKind>,
    pub tau: Option<f64>,
    pub radius: Option<f64>,
    pub draws: Option<usize>,
    pub burn_in: Option<usize>,
    pub thin: Option<usize>,
    pub broadcast: Option<usize>,
    pub perturbations: Option<usize>,
    pub scheme: Option<SchemeArg>,
    pub seed: Option<u64>,
    pub q_draws: Option<usize>,
    pub lambda: Option<LambdaValue>,
    pub alpha: Option<f64>,
    pub penalty: Option<PenaltyArg>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }
}

fn from_flag(m: &ArgMatches, id: &str) -> bool {
    m.value_source(id) == Some(ValueSource::CommandLine)
}

/// Flag if given on the command line, else file value, else the flag's
/// default or environment value.
fn pick<T: Clone>(m: &ArgMatches, id: &str, flag: &T, file: &Option<T>) -> T {
    if from_flag(m, id) {
        flag.clone()
    } else {
        file.clone().unwrap_or_else(|| flag.clone())
    }
}

fn pick_opt<T: Clone>(m: &ArgMatches, id: &str, flag: &Option<T>, file: &Option<T>) -> Option<T> {
    if from_flag(m, id) {
        flag.clone()
    } else {
        file.clone().or_else(|| flag.clone())
    }
}

impl TargetArgs {
    pub fn merge(&self, m: &ArgMatches, file: &FileConfig) -> Self {
        Self {
            problem: pick(m, "problem", &self.problem, &file.problem),
            tau: pick(m, "tau", &self.tau, &file.tau),
            radius: pick_opt(m, "radius", &self.radius, &file.radius),
            draws: pick(m, "draws", &self.draws, &file.draws),
            burn_in: pick(m, "burn_in", &self.burn_in, &file.burn_in),
            thin: pick(m, "thin", &self.thin, &file.thin),
            broadcast: pick_opt(m, "broadcast", &self.broadcast, &file.broadcast),
            perturbations: pick_opt(m, "perturbations", &self.perturbations, &file.perturbations),
            scheme: pick(m, "scheme", &self.scheme, &file.scheme),
            seed: pick(m, "seed", &self.seed, &file.seed),
        }
    }

    pub fn problem_spec(&self, p: usize) -> ProblemSpec {
        match self.problem {
            ProblemKind::Quantile => ProblemSpec::Quantile {
                tau: self.tau,
                p,
                radius: self.radius.unwrap_or(defaults::RADIUS_QUANTILE),
            },
            ProblemKind::Auc => ProblemSpec::Auc {
                p_plus_one: p,
                radius: self.radius.unwrap_or(defaults::RADIUS_AUC),
            },
        }
    }

    pub fn federated(&self, combine: CombineConfig) -> Result<FederatedConfig> {
        let (b1, reps) = match self.problem {
            ProblemKind::Quantile => (defaults::BROADCAST_QUANTILE, defaults::PERTURB_QUANTILE),
            ProblemKind::Auc => (defaults::BROADCAST_AUC, defaults::PERTURB_AUC),
        };
        let cfg = FederatedConfig {
            seed: self.seed,
            sampler: SamplerConfig {
                draws: self.draws,
                burn_in: self.burn_in,
                thin: self.thin,
                broadcast: self.broadcast.unwrap_or(b1),
                ..SamplerConfig::default()
            },
            perturb_replicates: self.perturbations.unwrap_or(reps),
            scheme: self.scheme.into(),
            combine,
        };
        if cfg.perturb_replicates < 2 {
            return Err(Error::InvalidConfig("need at least 2 perturbations".into()));
        }
        if cfg.sampler.thin == 0 {
            return Err(Error::InvalidConfig("thin must be at least 1".into()));
        }
        Ok(cfg)
    }
}

impl CombineArgs {
    pub fn merge(&self, m: &ArgMatches, file: &FileConfig) -> Result<Self> {
        let lambda = if from_flag(m, "lambda") {
            self.lambda.clone()
        } else {
            match &file.lambda {
                None => self.lambda.clone(),
                Some(LambdaValue::Number(v)) => parse_lambda(&v.to_string()).map_err(Error::InvalidConfig)?,
                Some(LambdaValue::Name(s)) => parse_lambda(s).map_err(Error::InvalidConfig)?,
            }
        };
        Ok(Self {
            q_draws: pick(m, "q_draws", &self.q_draws, &file.q_draws),
            lambda,
            alpha: pick(m, "alpha", &self.alpha, &file.alpha),
            penalty: pick(m, "penalty", &self.penalty, &file.penalty),
        })
    }

    pub fn config(&self) -> Result<CombineConfig> {
        if self.q_draws == 0 {
            return Err(Error::InvalidConfig("q-draws must be at least 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidConfig(format!("alpha = {} outside (0, 1)", self.alpha)));
        }
        Ok(CombineConfig {
            lambda: self.lambda.clone(),
            q_draws: self.q_draws,
            alpha: self.alpha,
            penalty: self.penalty.into(),
            seed: defaults::SEED,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lambda_values() {
        assert_eq!(parse_lambda("cv").unwrap(), LambdaChoice::CrossValidated);
        assert_eq!(parse_lambda("0.5").unwrap(), LambdaChoice::Fixed(0.5));
        assert!(parse_lambda("-1").is_err());
        assert!(parse_lambda("x").is_err());
    }

    #[test]
    fn file_rejects_unknown_keys() {
        assert!(toml::from_str::<FileConfig>("drawz = 3").is_err());
        let f: FileConfig = toml::from_str("draws = 3\nlambda = \"cv\"\nproblem = \"auc\"").unwrap();
        assert_eq!(f.draws, Some(3));
        assert_eq!(f.problem, Some(ProblemKind::Auc));
    }
}
