//! The one-round exchange between the target and the source sites.
//!
//! Messages are plain JSON with a version tag and a closed field set, so a
//! reply that tries to carry anything beyond the summary statistics is
//! rejected on read. [`orchestrate`] runs every party in-process through
//! the same message types as the file-based flow, which is what makes the
//! two modes agree exactly.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::combiner::{self, CombineConfig, CombineOutput};
use crate::data::Dataset;
use crate::defaults;
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::model::{Objective, ProblemSpec, WeightScheme};
use crate::perturbation::PerturbConfig;
use crate::rng::{derive_seed, label_id, purpose};
use crate::sampler::{self, SamplerConfig, TargetDiagnostics, TargetSummary};
use crate::source_site::{self, SourceSummary};

pub const BROADCAST_FILE: &str = "broadcast.json";
pub const COMBINED_FILE: &str = "combined.json";

pub fn reply_file(site: &str) -> String {
    format!("reply_{site}.json")
}

/// Settings every party must share for the run to be reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederatedConfig {
    pub seed: u64,
    pub sampler: SamplerConfig,
    pub perturb_replicates: usize,
    pub scheme: WeightScheme,
    pub combine: CombineConfig,
}

impl Default for FederatedConfig {
    fn default() -> Self {
        Self {
            seed: defaults::SEED,
            sampler: SamplerConfig::default(),
            perturb_replicates: defaults::PERTURB_QUANTILE,
            scheme: WeightScheme::default(),
            combine: CombineConfig::default(),
        }
    }
}

impl FederatedConfig {
    pub fn target_sampler(&self) -> SamplerConfig {
        SamplerConfig {
            seed: derive_seed(self.seed, &[purpose::TARGET_CHAIN]),
            ..self.sampler.clone()
        }
    }

    pub fn target_perturb(&self) -> PerturbConfig {
        PerturbConfig {
            replicates: self.perturb_replicates,
            scheme: self.scheme,
            seed: derive_seed(self.seed, &[purpose::TARGET_PERTURB]),
        }
    }

    /// Each site gets its own weight stream, keyed by its label.
    pub fn source_perturb(&self, site: &str) -> PerturbConfig {
        PerturbConfig {
            replicates: self.perturb_replicates,
            scheme: self.scheme,
            seed: derive_seed(self.seed, &[purpose::SOURCE_PERTURB, label_id(site)]),
        }
    }

    pub fn combine_config(&self) -> CombineConfig {
        CombineConfig {
            seed: derive_seed(self.seed, &[purpose::COMBINE_DRAWS]),
            ..self.combine.clone()
        }
    }
}

/// What the target sends to every source site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BroadcastMessage {
    pub protocol_version: String,
    pub target_label: String,
    pub problem: ProblemSpec,
    pub n_target: usize,
    pub theta_hat: Vec<f64>,
    pub broadcast_draws: Vec<Vec<f64>>,
    #[serde(with = "linalg::serde_rows")]
    pub a_hat: Matrix,
    #[serde(with = "linalg::serde_rows")]
    pub sigma_s_hat: Matrix,
    pub c1_used: f64,
    /// Perturbation settings the sources should use.
    pub perturb_replicates: usize,
    pub scheme: WeightScheme,
    pub seed: u64,
}

impl BroadcastMessage {
    pub fn from_summary(summary: &TargetSummary, problem: &ProblemSpec, cfg: &FederatedConfig) -> Self {
        Self {
            protocol_version: defaults::PROTOCOL_VERSION.to_string(),
            target_label: summary.label.clone(),
            problem: problem.clone(),
            n_target: summary.n_target,
            theta_hat: summary.theta_hat.clone(),
            broadcast_draws: summary.broadcast_draws.clone(),
            a_hat: summary.a_hat.clone(),
            sigma_s_hat: summary.sigma_s_hat.clone(),
            c1_used: summary.c1_used,
            perturb_replicates: cfg.perturb_replicates,
            scheme: cfg.scheme,
            seed: cfg.seed,
        }
    }

    pub fn summary(&self) -> TargetSummary {
        TargetSummary {
            theta_hat: self.theta_hat.clone(),
            a_hat: self.a_hat.clone(),
            sigma_s_hat: self.sigma_s_hat.clone(),
            broadcast_draws: self.broadcast_draws.clone(),
            n_target: self.n_target,
            label: self.target_label.clone(),
            c1_used: self.c1_used,
        }
    }

    fn validate(&self) -> Result<()> {
        check_version(&self.protocol_version)?;
        let d = self.theta_hat.len();
        if d == 0 {
            return Err(Error::Protocol("broadcast has an empty θ̂".into()));
        }
        if self.a_hat.shape() != (d, d) || self.sigma_s_hat.shape() != (d, d) {
            return Err(Error::Protocol(format!("broadcast matrices are not {d}×{d}")));
        }
        if let Some(bad) = self.broadcast_draws.iter().position(|t| t.len() != d) {
            return Err(Error::Protocol(format!("broadcast draw {bad} does not have length {d}")));
        }
        let finite = self.theta_hat.iter().all(|v| v.is_finite())
            && self.broadcast_draws.iter().flatten().all(|v| v.is_finite())
            && self.a_hat.iter().all(|v| v.is_finite())
            && self.sigma_s_hat.iter().all(|v| v.is_finite())
            && self.c1_used.is_finite();
        if !finite {
            return Err(Error::Protocol("broadcast contains non-finite values".into()));
        }
        Ok(())
    }
}

/// What a source site sends back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplyMessage {
    pub protocol_version: String,
    pub target_label: String,
    pub site: String,
    pub n: usize,
    pub score: Vec<f64>,
    #[serde(rename = "A", with = "linalg::serde_rows")]
    pub a: Matrix,
    #[serde(rename = "Sigma", with = "linalg::serde_rows")]
    pub sigma: Matrix,
    pub a_is_pd: bool,
}

impl ReplyMessage {
    pub fn new(summary: SourceSummary, target_label: &str) -> Self {
        Self {
            protocol_version: defaults::PROTOCOL_VERSION.to_string(),
            target_label: target_label.to_string(),
            site: summary.site,
            n: summary.n,
            score: summary.score,
            a: summary.a,
            sigma: summary.sigma,
            a_is_pd: summary.a_is_pd,
        }
    }

    pub fn summary(&self) -> SourceSummary {
        SourceSummary {
            site: self.site.clone(),
            n: self.n,
            score: self.score.clone(),
            a: self.a.clone(),
            sigma: self.sigma.clone(),
            a_is_pd: self.a_is_pd,
        }
    }

    fn validate(&self) -> Result<()> {
        check_version(&self.protocol_version)?;
        let d = self.score.len();
        if self.a.shape() != (d, d) || self.sigma.shape() != (d, d) {
            return Err(Error::Protocol(format!(
                "reply from `{}` has matrices inconsistent with a score of length {d}",
                self.site
            )));
        }
        let finite = self.score.iter().all(|v| v.is_finite())
            && self.a.iter().all(|v| v.is_finite())
            && self.sigma.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::Protocol(format!("reply from `{}` contains non-finite values", self.site)));
        }
        Ok(())
    }
}

fn check_version(v: &str) -> Result<()> {
    if v != defaults::PROTOCOL_VERSION {
        return Err(Error::Protocol(format!(
            "protocol version `{v}` is not supported (expected `{}`)",
            defaults::PROTOCOL_VERSION
        )));
    }
    Ok(())
}

fn to_json<T: Serialize>(msg: &T) -> Result<String> {
    serde_json::to_string_pretty(msg).map_err(|e| Error::Protocol(format!("cannot encode message: {e}")))
}

fn from_json<T: DeserializeOwned>(text: &str, what: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::Protocol(format!("malformed {what}: {e}")))
}

fn read_all<R: Read>(mut r: R) -> Result<String> {
    let mut s = String::new();
    r.read_to_string(&mut s)?;
    Ok(s)
}

pub fn write_broadcast<W: Write>(msg: &BroadcastMessage, mut w: W) -> Result<()> {
    msg.validate()?;
    w.write_all(to_json(msg)?.as_bytes())?;
    Ok(())
}

pub fn read_broadcast<R: Read>(r: R) -> Result<BroadcastMessage> {
    let msg: BroadcastMessage = from_json(&read_all(r)?, "broadcast")?;
    msg.validate()?;
    Ok(msg)
}

pub fn write_reply<W: Write>(msg: &ReplyMessage, mut w: W) -> Result<()> {
    msg.validate()?;
    w.write_all(to_json(msg)?.as_bytes())?;
    Ok(())
}

pub fn read_reply<R: Read>(r: R) -> Result<ReplyMessage> {
    let msg: ReplyMessage = from_json(&read_all(r)?, "reply")?;
    msg.validate()?;
    Ok(msg)
}

pub fn write_combined<W: Write>(out: &CombineOutput, mut w: W) -> Result<()> {
    w.write_all(to_json(out)?.as_bytes())?;
    Ok(())
}

pub fn read_combined<R: Read>(r: R) -> Result<CombineOutput> {
    from_json(&read_all(r)?, "combined estimate")
}

/// Broadcast plus the diagnostics that stay on the target.
#[derive(Debug, Clone)]
pub struct TargetInit {
    pub broadcast: BroadcastMessage,
    pub diagnostics: TargetDiagnostics,
}

/// Target site, first half: chain, summary and broadcast.
pub fn target_init(
    problem: &ProblemSpec,
    target: &Dataset,
    cfg: &FederatedConfig,
) -> Result<TargetInit> {
    let obj = problem.build().map_err(|e| e.at_stage("problem"))?;
    let (summary, diagnostics) =
        sampler::build_target_summary(&obj, target, &cfg.target_sampler(), &cfg.target_perturb())
            .map_err(|e| e.at_stage("target summary"))?;
    Ok(TargetInit {
        broadcast: BroadcastMessage::from_summary(&summary, problem, cfg),
        diagnostics,
    })
}

/// Source site: evaluates its local objective at the broadcast points.
/// Perturbation settings come from the broadcast.
pub fn source_reply(broadcast: &BroadcastMessage, data: &Dataset) -> Result<ReplyMessage> {
    broadcast.validate()?;
    let stage = format!("source `{}`", data.label());
    let obj = broadcast.problem.build().map_err(|e| e.at_stage(&stage))?;
    check_covariates(&obj, data).map_err(|e| e.at_stage(&stage))?;
    let cfg = FederatedConfig {
        seed: broadcast.seed,
        perturb_replicates: broadcast.perturb_replicates,
        scheme: broadcast.scheme,
        ..FederatedConfig::default()
    };
    let summary = source_site::build_source_summary(
        &obj,
        data,
        &broadcast.summary(),
        &cfg.source_perturb(data.label()),
    )
    .map_err(|e| e.at_stage(&stage))?;
    Ok(ReplyMessage::new(summary, &broadcast.target_label))
}

fn check_covariates(obj: &dyn Objective, data: &Dataset) -> Result<()> {
    if let Some(p) = obj.covariate_dim() {
        if data.dim() != p {
            return Err(Error::Data(format!(
                "site `{}` has {} covariates, the problem expects {p}",
                data.label(),
                data.dim()
            )));
        }
    }
    Ok(())
}

/// Target site, second half: folds the replies in site-label order.
pub fn target_combine(
    broadcast: &BroadcastMessage,
    replies: &[ReplyMessage],
    combine: &CombineConfig,
) -> Result<CombineOutput> {
    broadcast.validate()?;
    let mut by_site: BTreeMap<&str, &ReplyMessage> = BTreeMap::new();
    for r in replies {
        r.validate()?;
        if r.target_label != broadcast.target_label {
            return Err(Error::Protocol(format!(
                "reply from `{}` answers target `{}`, not `{}`",
                r.site, r.target_label, broadcast.target_label
            )));
        }
        if r.score.len() != broadcast.theta_hat.len() {
            return Err(Error::Protocol(format!(
                "reply from `{}` has dimension {}, broadcast has {}",
                r.site,
                r.score.len(),
                broadcast.theta_hat.len()
            )));
        }
        if by_site.insert(&r.site, r).is_some() {
            return Err(Error::Protocol(format!("duplicate site label `{}`", r.site)));
        }
    }
    let sources: Vec<SourceSummary> = by_site.values().map(|r| r.summary()).collect();
    combiner::combine_sites(&broadcast.summary(), &sources, combine).map_err(|e| e.at_stage("combine"))
}

/// Everything produced by one federated run.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub broadcast: BroadcastMessage,
    pub diagnostics: TargetDiagnostics,
    /// Replies sorted by site label.
    pub replies: Vec<ReplyMessage>,
    pub output: CombineOutput,
}

/// Runs the whole exchange in-process.
pub fn orchestrate(
    target: &Dataset,
    sources: &[Dataset],
    problem: &ProblemSpec,
    cfg: &FederatedConfig,
) -> Result<RunResult> {
    check_labels(target, sources)?;
    let init = target_init(problem, target, cfg)?;
    let mut replies = sources
        .iter()
        .map(|s| source_reply(&init.broadcast, s))
        .collect::<Result<Vec<_>>>()?;
    replies.sort_by(|a, b| a.site.cmp(&b.site));
    let output = target_combine(&init.broadcast, &replies, &cfg.combine_config())?;
    Ok(RunResult {
        broadcast: init.broadcast,
        diagnostics: init.diagnostics,
        replies,
        output,
    })
}

fn check_labels(target: &Dataset, sources: &[Dataset]) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    seen.insert(target.label());
    for s in sources {
        if !seen.insert(s.label()) {
            return Err(Error::Protocol(format!("duplicate site label `{}`", s.label())));
        }
        if s.dim() != target.dim() {
            return Err(Error::Data(format!(
                "site `{}` has {} covariates, target `{}` has {}",
                s.label(),
                s.dim(),
                target.label(),
                target.dim()
            )));
        }
    }
    Ok(())
}

fn write_file(path: &Path, f: impl FnOnce(&mut fs::File) -> Result<()>) -> Result<()> {
    let mut file = fs::File::create(path)?;
    f(&mut file)
}

pub fn write_broadcast_file(dir: &Path, msg: &BroadcastMessage) -> Result<PathBuf> {
    let path = dir.join(BROADCAST_FILE);
    write_file(&path, |f| write_broadcast(msg, f))?;
    Ok(path)
}

pub fn read_broadcast_file(path: &Path) -> Result<BroadcastMessage> {
    let file = fs::File::open(path)
        .map_err(|e| Error::Protocol(format!("cannot open broadcast {}: {e}", path.display())))?;
    read_broadcast(file)
}

pub fn write_reply_file(dir: &Path, msg: &ReplyMessage) -> Result<PathBuf> {
    let path = dir.join(reply_file(&msg.site));
    write_file(&path, |f| write_reply(msg, f))?;
    Ok(path)
}

pub fn read_reply_file(path: &Path) -> Result<ReplyMessage> {
    let file = fs::File::open(path)
        .map_err(|e| Error::Protocol(format!("cannot open reply {}: {e}", path.display())))?;
    read_reply(file)
}

pub fn write_combined_file(dir: &Path, out: &CombineOutput) -> Result<PathBuf> {
    let path = dir.join(COMBINED_FILE);
    write_file(&path, |f| write_combined(out, f))?;
    Ok(path)
}

/// Reads `reply_<site>.json` for every expected site, reporting all absent
/// ones at once.
pub fn read_replies(dir: &Path, sites: &[String]) -> Result<Vec<ReplyMessage>> {
    let missing: Vec<&str> = sites
        .iter()
        .filter(|s| !dir.join(reply_file(s)).is_file())
        .map(String::as_str)
        .collect();
    if !missing.is_empty() {
        return Err(Error::Protocol(format!("missing replies from sites: {}", missing.join(", "))));
    }
    let replies = sites
        .iter()
        .map(|s| read_reply_file(&dir.join(reply_file(s))))
        .collect::<Result<Vec<_>>>()?;
    for (s, r) in sites.iter().zip(&replies) {
        if &r.site != s {
            return Err(Error::Protocol(format!("{} holds the reply of site `{}`", reply_file(s), r.site)));
        }
    }
    Ok(replies)
}

/// All `reply_*.json` files in a directory, in file-name order.
pub fn discover_replies(dir: &Path) -> Result<Vec<ReplyMessage>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("reply_") && n.ends_with(".json"))
        })
        .collect();
    paths.sort();
    paths.iter().map(|p| read_reply_file(p)).collect()
}
