use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use fedm::simlab::{gen_quantile_site, Setting};

fn fedm() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_fedm"));
    c.env_remove("FEDM_SEED").env_remove("RUST_LOG");
    c
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Writes target.csv and site1..site4.csv for quantile setting I.
fn quantile_files(dir: &Path, n: usize) -> Vec<PathBuf> {
    (0..5)
        .map(|k| {
            let data = gen_quantile_site(Setting::I, k, n, 11).unwrap();
            let path = dir.join(format!("{}.csv", data.label()));
            data.write_csv(fs::File::create(&path).unwrap()).unwrap();
            path
        })
        .collect()
}

const FAST: [&str; 6] = ["--draws", "1500", "--burn-in", "800", "--perturbations", "100"];

#[test]
fn run_without_sources_is_target_only() {
    let dir = tempfile::tempdir().unwrap();
    let files = quantile_files(dir.path(), 300);
    let out = run(fedm()
        .arg("run")
        .arg("--target")
        .arg(&files[0])
        .args(FAST)
        .arg("--out")
        .arg(dir.path()));
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let combined = fedm::protocol::read_combined(fs::File::open(dir.path().join("combined.json")).unwrap()).unwrap();
    assert_eq!(combined.combined.theta_c, combined.target_only.theta);
    assert_eq!(combined.combined.ci, combined.target_only.ci);
    assert!(String::from_utf8_lossy(&out.stdout).contains("target-only"));
}

#[test]
fn malformed_csv_exits_with_data_code() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.csv");
    fs::write(&path, "y,z1\n1.0,2.0\n1.0,oops\n").unwrap();
    let out = run(fedm().arg("run").arg("--target").arg(&path).arg("--out").arg(dir.path()));
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("row 3"), "{}", stderr(&out));
}

#[test]
fn mismatched_dimensions_exit_with_data_code() {
    let dir = tempfile::tempdir().unwrap();
    let files = quantile_files(dir.path(), 100);
    let other = dir.path().join("narrow.csv");
    fs::write(&other, "y,z1\n1.0,2.0\n0.5,1.0\n").unwrap();
    let out = run(fedm()
        .arg("run")
        .arg("--target")
        .arg(&files[0])
        .arg("--source")
        .arg(&other)
        .arg("--out")
        .arg(dir.path()));
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

#[test]
fn staged_flow_matches_run_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let files = quantile_files(dir.path(), 300);
    let run_dir = dir.path().join("run");
    let stage_dir = dir.path().join("staged");
    let mut cmd = fedm();
    cmd.arg("run").arg("--target").arg(&files[0]);
    for f in &files[1..] {
        cmd.arg("--source").arg(f);
    }
    let out = run(cmd.args(FAST).arg("--out").arg(&run_dir));
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let out = run(fedm()
        .arg("target-init")
        .arg("--target")
        .arg(&files[0])
        .args(FAST)
        .arg("--out")
        .arg(&stage_dir));
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let broadcast = stage_dir.join("broadcast.json");
    for f in &files[1..] {
        let out = run(fedm()
            .arg("source-reply")
            .arg("--broadcast")
            .arg(&broadcast)
            .arg("--data")
            .arg(f)
            .arg("--out")
            .arg(&stage_dir));
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    let out = run(fedm()
        .arg("target-combine")
        .arg("--broadcast")
        .arg(&broadcast)
        .arg("--replies")
        .arg(&stage_dir)
        .arg("--sites")
        .arg("site1,site2,site3,site4")
        .arg("--out")
        .arg(&stage_dir));
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let a = fs::read(run_dir.join("combined.json")).unwrap();
    let b = fs::read(stage_dir.join("combined.json")).unwrap();
    assert!(a == b, "staged combined.json differs from the in-process run");

    // missing and duplicate sites
    fs::remove_file(stage_dir.join("reply_site3.json")).unwrap();
    let out = run(fedm()
        .arg("target-combine")
        .arg("--broadcast")
        .arg(&broadcast)
        .arg("--replies")
        .arg(&stage_dir)
        .arg("--sites")
        .arg("site1,site2,site3,site4,site9")
        .arg("--out")
        .arg(&stage_dir));
    assert_eq!(code(&out), 5);
    assert!(stderr(&out).contains("site3, site9"), "{}", stderr(&out));
    let out = run(fedm()
        .arg("target-combine")
        .arg("--broadcast")
        .arg(&broadcast)
        .arg("--replies")
        .arg(&stage_dir)
        .arg("--sites")
        .arg("site1,site1")
        .arg("--out")
        .arg(&stage_dir));
    assert_eq!(code(&out), 5);
    assert!(stderr(&out).contains("duplicate"), "{}", stderr(&out));
}

#[test]
fn duplicate_run_labels_exit_with_protocol_code() {
    let dir = tempfile::tempdir().unwrap();
    let files = quantile_files(dir.path(), 100);
    let sub = dir.path().join("copy");
    fs::create_dir(&sub).unwrap();
    let twin = sub.join("site1.csv");
    fs::copy(&files[1], &twin).unwrap();
    let out = run(fedm()
        .arg("run")
        .arg("--target")
        .arg(&files[0])
        .arg("--source")
        .arg(&files[1])
        .arg("--source")
        .arg(&twin)
        .arg("--out")
        .arg(dir.path()));
    assert_eq!(code(&out), 5, "{}", stderr(&out));
}

#[test]
fn config_file_and_seed_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let files = quantile_files(dir.path(), 200);
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "draws = 1200\nburn_in = 600\nperturbations = 60\nseed = 5\n").unwrap();
    let init = |extra: &[&str], env: Option<&str>, out: &Path| {
        let mut c = fedm();
        if let Some(s) = env {
            c.env("FEDM_SEED", s);
        }
        let o = run(c
            .arg("target-init")
            .arg("--target")
            .arg(&files[0])
            .args(extra)
            .arg("--out")
            .arg(out));
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        fedm::protocol::read_broadcast_file(&out.join("broadcast.json")).unwrap()
    };
    let cfg_arg = ["--config", cfg.to_str().unwrap()];
    let b = init(&cfg_arg, Some("9"), &dir.path().join("a"));
    assert_eq!(b.seed, 5, "file beats environment");
    assert_eq!(b.perturb_replicates, 60);
    let b = init(&[&cfg_arg[..], &["--seed", "7", "--perturbations", "70"]].concat(), None, &dir.path().join("b"));
    assert_eq!(b.seed, 7, "flag beats file");
    assert_eq!(b.perturb_replicates, 70);
    let b = init(&FAST, Some("9"), &dir.path().join("c"));
    assert_eq!(b.seed, 9, "environment is the fallback");

    fs::write(&cfg, "drawz = 1\n").unwrap();
    let o = run(fedm().arg("target-init").arg("--target").arg(&files[0]).args(cfg_arg));
    assert_eq!(code(&o), 2);
}

#[test]
fn simulate_rejects_bad_arguments() {
    let dir = tempfile::tempdir().unwrap();
    let base = |c: &mut Command| {
        c.arg("simulate").arg("--out").arg(dir.path());
    };
    let mut c = fedm();
    base(&mut c);
    let out = run(c.args(["--example", "quantile", "--setting", "I", "--reps", "0"]));
    assert_eq!(code(&out), 2);
    let mut c = fedm();
    base(&mut c);
    let out = run(c.args(["--example", "probit", "--setting", "I"]));
    assert_eq!(code(&out), 2);
    let mut c = fedm();
    base(&mut c);
    let out = run(c.args(["--example", "auc", "--setting", "IV"]));
    assert_eq!(code(&out), 2);
    let mut c = fedm();
    base(&mut c);
    let out = run(c.args(["--example", "auc", "--setting", "I", "--n", "2000"]));
    assert_eq!(code(&out), 2, "AUC above 1000 needs --heavy");
}

#[test]
fn simulate_desk_run_is_fast_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let go = |sub: &str| {
        let start = Instant::now();
        let out = run(fedm().args([
            "simulate", "--example", "quantile", "--setting", "I", "--n", "250", "--reps", "10", "--long", "--out",
        ])
        .arg(dir.path().join(sub)));
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        start.elapsed()
    };
    let elapsed = go("a");
    assert!(elapsed < Duration::from_secs(120), "took {elapsed:?}");
    go("b");
    for name in ["coverage_quantile_I.csv", "long_quantile_I.dat"] {
        let a = fs::read(dir.path().join("a").join(name)).unwrap();
        let b = fs::read(dir.path().join("b").join(name)).unwrap();
        assert!(a == b, "{name} differs between identical runs");
    }
    let csv = fs::read_to_string(dir.path().join("a/coverage_quantile_I.csv")).unwrap();
    assert!(csv.starts_with("method,coordinate,n,reps,coverage,mean_width,failures\n"), "{csv}");
    assert_eq!(csv.lines().count(), 1 + 3 * 5);
}

fn help(sub: &str) -> String {
    let out = run(fedm().args([sub, "--help"]));
    assert_eq!(code(&out), 0);
    String::from_utf8(out.stdout).unwrap()
}

/// Long flags listed in a help text.
fn flags_in(help: &str) -> Vec<String> {
    help.lines()
        .filter_map(|l| {
            let l = l.trim_start();
            let l = l.strip_prefix("-v, ").or_else(|| l.strip_prefix("-h, ")).or_else(|| l.strip_prefix("-V, ")).unwrap_or(l);
            l.strip_prefix("--").map(|rest| {
                rest.split(|c: char| c == ' ' || c == '<' || c == '=')
                    .next()
                    .unwrap()
                    .trim_end_matches("...")
                    .to_string()
            })
        })
        .collect()
}

#[test]
fn help_documents_every_flag_with_its_default() {
    let expected: &[(&str, &[&str])] = &[
        (
            "run",
            &[
                "config", "target", "source", "out", "problem", "tau", "radius", "draws", "burn-in", "thin",
                "broadcast", "perturbations", "scheme", "seed", "q-draws", "lambda", "alpha", "penalty",
            ],
        ),
        (
            "target-init",
            &[
                "config", "target", "out", "problem", "tau", "radius", "draws", "burn-in", "thin", "broadcast",
                "perturbations", "scheme", "seed",
            ],
        ),
        ("source-reply", &["broadcast", "data", "site", "out"]),
        (
            "target-combine",
            &["config", "broadcast", "replies", "sites", "out", "q-draws", "lambda", "alpha", "penalty"],
        ),
        (
            "simulate",
            &["example", "setting", "n", "reps", "seed", "heavy", "lambda", "out", "long"],
        ),
    ];
    // flags that take no value, need a value, or have nothing to default to
    let no_default = ["config", "target", "source", "broadcast", "data", "example", "setting", "heavy", "long", "help", "version", "verbose"];
    for (sub, flags) in expected {
        let text = help(sub);
        let mut found = flags_in(&text);
        found.retain(|f| !["help", "jobs", "verbose"].contains(&f.as_str()));
        let mut want: Vec<String> = flags.iter().map(|s| s.to_string()).collect();
        want.sort();
        found.sort();
        assert_eq!(found, want, "flags of `{sub}` drifted from its help text");
        // every option with a default shows it
        let mut entry = String::new();
        let mut entries = Vec::new();
        for line in text.lines() {
            if line.trim_start().starts_with('-') {
                if !entry.is_empty() {
                    entries.push(std::mem::take(&mut entry));
                }
            }
            entry.push_str(line);
            entry.push(' ');
        }
        entries.push(entry);
        for e in entries.iter().filter(|e| e.trim_start().starts_with('-')) {
            let flag = flags_in(e).into_iter().next().unwrap_or_default();
            if no_default.contains(&flag.as_str()) || flag.is_empty() {
                continue;
            }
            assert!(e.contains("[default"), "`{sub} --{flag}` does not state its default: {e}");
        }
    }
    let top = help("run");
    assert!(top.contains("--jobs") && top.contains("[default: available cores]"));
    assert!(top.contains("[default: 4000]") && top.contains("[default: 20240521]"));
}
