//! `fedm`: federated sampling-based inference for non-smooth M-estimators.

mod config;
mod report;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgMatches, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

use fedm::combiner::LambdaChoice;
use fedm::defaults;
use fedm::protocol::{self, FederatedConfig};
use fedm::simlab::{self, Example, Setting, SettingSpec};
use fedm::{Dataset, Error, Result};

use config::{parse_lambda, CombineArgs, FileConfig, TargetArgs};

#[derive(Debug, Parser)]
#[command(name = "fedm", version, about = "Federated sampling-based inference for M-estimators")]
pub struct Cli {
    /// Worker threads for replicate and site parallelism [default: available cores]
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Log verbosity (-v info, -vv debug)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the whole exchange in one process and write combined.json
    Run {
        /// TOML settings file; flags take precedence
        #[arg(long)]
        config: Option<PathBuf>,
        /// Target site CSV (columns y,z1..zp)
        #[arg(long)]
        target: PathBuf,
        /// Source site CSV; repeat for several sites. Site labels are file stems
        #[arg(long = "source")]
        sources: Vec<PathBuf>,
        /// Output directory
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[command(flatten)]
        target_args: TargetArgs,
        #[command(flatten)]
        combine_args: CombineArgs,
    },
    /// Target step 1: local analysis, writes broadcast.json
    TargetInit {
        /// TOML settings file; flags take precedence
        #[arg(long)]
        config: Option<PathBuf>,
        /// Target site CSV (columns y,z1..zp)
        #[arg(long)]
        target: PathBuf,
        /// Output directory
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[command(flatten)]
        target_args: TargetArgs,
    },
    /// Source step: answers a broadcast, writes reply_<site>.json
    SourceReply {
        /// The target's broadcast.json
        #[arg(long)]
        broadcast: PathBuf,
        /// Local site CSV (columns y,z1..zp)
        #[arg(long)]
        data: PathBuf,
        /// Site label [default: file stem of --data]
        #[arg(long)]
        site: Option<String>,
        /// Output directory
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Target step 2: folds the replies, writes combined.json
    TargetCombine {
        /// TOML settings file; flags take precedence
        #[arg(long)]
        config: Option<PathBuf>,
        /// The broadcast.json written by target-init
        #[arg(long)]
        broadcast: PathBuf,
        /// Directory holding reply_<site>.json files
        #[arg(long, default_value = ".")]
        replies: PathBuf,
        /// Expected site labels, comma separated [default: every reply file found]
        #[arg(long, value_delimiter = ',')]
        sites: Vec<String>,
        /// Output directory
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[command(flatten)]
        combine_args: CombineArgs,
    },
    /// Simulation campaign, writes coverage_<example>_<setting>.csv
    Simulate {
        /// Simulation example
        #[arg(long, value_enum)]
        example: ExampleArg,
        /// Simulation setting
        #[arg(long, value_enum)]
        setting: SettingArg,
        /// Target sample size
        #[arg(long, default_value_t = 1000)]
        n: usize,
        /// Replications
        #[arg(long, default_value_t = 500)]
        reps: usize,
        /// Master seed
        #[arg(long, env = "FEDM_SEED", default_value_t = defaults::SEED)]
        seed: u64,
        /// Allow AUC runs with n above 1000
        #[arg(long)]
        heavy: bool,
        /// Lasso penalty level: `default` (n^-1/2), `cv`, or a number
        #[arg(long, default_value = "default", value_parser = parse_lambda)]
        lambda: LambdaChoice,
        /// Output directory
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Also write the per-replicate long-format table
        #[arg(long)]
        long: bool,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ExampleArg {
    Quantile,
    Auc,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SettingArg {
    #[value(name = "I")]
    I,
    #[value(name = "II")]
    II,
    #[value(name = "III")]
    III,
}

/// Process exit code of an error.
fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::InvalidConfig(_) => 2,
        Error::Data(_) | Error::InvalidInput(_) | Error::Io(_) => 3,
        Error::Numerical(_) | Error::Sampler(_) => 4,
        Error::Protocol(_) => 5,
        Error::Stage { .. } => unreachable!("root skips stage tags"),
    }
}

fn main() -> ExitCode {
    let matches = Cli::command().get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            eprintln!("error: --jobs must be at least 1");
            return ExitCode::from(2);
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .expect("thread pool is configured once");
    }
    let sub = matches.subcommand().map(|(_, m)| m).expect("subcommand is required");
    match dispatch(cli.command, sub) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn dispatch(cmd: Command, m: &ArgMatches) -> Result<()> {
    match cmd {
        Command::Run {
            config,
            target,
            sources,
            out,
            target_args,
            combine_args,
        } => {
            let file = FileConfig::load(config.as_deref())?;
            let t = target_args.merge(m, &file);
            let c = combine_args.merge(m, &file)?;
            cmd_run(&t, &c, &target, &sources, &out)
        }
        Command::TargetInit {
            config,
            target,
            out,
            target_args,
        } => {
            let file = FileConfig::load(config.as_deref())?;
            cmd_target_init(&target_args.merge(m, &file), &target, &out)
        }
        Command::SourceReply {
            broadcast,
            data,
            site,
            out,
        } => cmd_source_reply(&broadcast, &data, site, &out),
        Command::TargetCombine {
            config,
            broadcast,
            replies,
            sites,
            out,
            combine_args,
        } => {
            let file = FileConfig::load(config.as_deref())?;
            cmd_target_combine(&combine_args.merge(m, &file)?, &broadcast, &replies, &sites, &out)
        }
        Command::Simulate {
            example,
            setting,
            n,
            reps,
            seed,
            heavy,
            lambda,
            out,
            long,
        } => {
            let example = match example {
                ExampleArg::Quantile => Example::Quantile,
                ExampleArg::Auc => Example::Auc,
            };
            let setting = match setting {
                SettingArg::I => Setting::I,
                SettingArg::II => Setting::II,
                SettingArg::III => Setting::III,
            };
            let spec = SettingSpec {
                heavy,
                lambda,
                ..SettingSpec::new(example, setting, n, reps, seed)
            };
            cmd_simulate(&spec, &out, long)
        }
    }
}

fn site_label(path: &Path) -> Result<String> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .ok_or_else(|| Error::Data(format!("cannot derive a site label from {}", path.display())))
}

fn load_site(path: &Path, label: Option<String>) -> Result<Dataset> {
    let mut data = Dataset::read_csv_path(path)?;
    data.set_label(match label {
        Some(l) => l,
        None => site_label(path)?,
    });
    Ok(data)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn federated(t: &TargetArgs, c: &CombineArgs) -> Result<FederatedConfig> {
    t.federated(c.config()?)
}

fn cmd_run(t: &TargetArgs, c: &CombineArgs, target: &Path, sources: &[PathBuf], out: &Path) -> Result<()> {
    let target = load_site(target, None)?;
    let sources = sources
        .iter()
        .map(|p| load_site(p, None))
        .collect::<Result<Vec<_>>>()?;
    let cfg = federated(t, c)?;
    let run = protocol::orchestrate(&target, &sources, &t.problem_spec(target.dim()), &cfg)?;
    ensure_dir(out)?;
    let path = protocol::write_combined_file(out, &run.output)?;
    report::print_summary(&run.output, Some(&run.diagnostics));
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_target_init(t: &TargetArgs, target: &Path, out: &Path) -> Result<()> {
    let target = load_site(target, None)?;
    let cfg = t.federated(Default::default())?;
    let init = protocol::target_init(&t.problem_spec(target.dim()), &target, &cfg)?;
    ensure_dir(out)?;
    let path = protocol::write_broadcast_file(out, &init.broadcast)?;
    report::print_target(&init.broadcast, &init.diagnostics);
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_source_reply(broadcast: &Path, data: &Path, site: Option<String>, out: &Path) -> Result<()> {
    let msg = protocol::read_broadcast_file(broadcast)?;
    let data = load_site(data, site)?;
    let reply = protocol::source_reply(&msg, &data)?;
    ensure_dir(out)?;
    let path = protocol::write_reply_file(out, &reply)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_target_combine(
    c: &CombineArgs,
    broadcast: &Path,
    replies: &Path,
    sites: &[String],
    out: &Path,
) -> Result<()> {
    let msg = protocol::read_broadcast_file(broadcast)?;
    let replies = if sites.is_empty() {
        protocol::discover_replies(replies)?
    } else {
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = sites.iter().find(|s| !seen.insert(s.as_str())) {
            return Err(Error::Protocol(format!("duplicate site label `{dup}`")));
        }
        protocol::read_replies(replies, sites)?
    };
    // The combine seed follows the broadcast so that the staged flow
    // reproduces an in-process run.
    let cfg = FederatedConfig {
        seed: msg.seed,
        combine: c.config()?,
        ..FederatedConfig::default()
    };
    let output = protocol::target_combine(&msg, &replies, &cfg.combine_config())?;
    ensure_dir(out)?;
    let path = protocol::write_combined_file(out, &output)?;
    report::print_summary(&output, None);
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_simulate(spec: &SettingSpec, out: &Path, long: bool) -> Result<()> {
    spec.validate()?;
    let campaign = simlab::run_replications(spec)?;
    ensure_dir(out)?;
    let csv_path = out.join(spec.csv_name());
    campaign.write_csv(fs::File::create(&csv_path)?)?;
    if long {
        let long_path = out.join(format!("long_{}_{}.dat", spec.example, spec.setting));
        campaign.write_long(fs::File::create(&long_path)?)?;
        println!("wrote {}", long_path.display());
    }
    report::print_campaign(&campaign);
    println!("wrote {}", csv_path.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    /// Every argument defined in code shows up in the rendered help, and
    /// every option that takes a value states its default.
    #[test]
    fn help_matches_definitions() {
        let mut root = Cli::command();
        root.build();
        for sub in root.get_subcommands() {
            let mut sub = sub.clone();
            let help = sub.render_long_help().to_string();
            for arg in sub.get_arguments() {
                let Some(long) = arg.get_long() else { continue };
                assert!(help.contains(&format!("--{long}")), "`{}` help lacks --{long}", sub.get_name());
                let takes_value = arg.get_num_args().is_some_and(|n| n.takes_values());
                if !takes_value || arg.is_required_set() || long == "help" {
                    continue;
                }
                let has_default = !arg.get_default_values().is_empty()
                    || arg.get_help().is_some_and(|h| h.to_string().contains("[default:"));
                let optional_list = matches!(long, "source" | "config");
                assert!(
                    has_default || optional_list,
                    "`{} --{long}` has no documented default",
                    sub.get_name()
                );
            }
        }
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::InvalidConfig("x".into()).at_stage("s")), 2);
        assert_eq!(exit_code(&Error::Data("x".into())), 3);
        assert_eq!(exit_code(&Error::Numerical("x".into())), 4);
        assert_eq!(exit_code(&Error::Protocol("x".into()).at_stage("a").at_stage("b")), 5);
    }
}
