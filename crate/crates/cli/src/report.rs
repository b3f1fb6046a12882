//! Human-readable summaries printed after each command.

use fedm::combiner::{CombineOutput, Method};
use fedm::protocol::BroadcastMessage;
use fedm::sampler::TargetDiagnostics;
use fedm::simlab::Campaign;

pub fn print_target(b: &BroadcastMessage, diag: &TargetDiagnostics) {
    println!(
        "target `{}`: n = {}, acceptance {:.3}, min ESS {:.0}, C1 {:.2}",
        b.target_label, b.n_target, diag.acceptance_rate, diag.min_ess, b.c1_used
    );
    if diag.sigma_psd_adjusted {
        println!("note: score variance was projected onto the PSD cone");
    }
}

pub fn print_summary(out: &CombineOutput, diag: Option<&TargetDiagnostics>) {
    if let Some(d) = diag {
        println!(
            "chain: acceptance {:.3}, min ESS {:.0}, step {:.3e}",
            d.acceptance_rate, d.min_ess, d.step_scale
        );
    }
    let level = 100.0 * (1.0 - out.combined.alpha);
    println!("{:>5}  {:>12}  {:>27}  {:>27}", "coord", "estimate", format!("transfer {level:.0}% CI"), "target-only CI");
    for j in 0..out.combined.theta_c.len() {
        let (lo, hi) = out.combined.ci[j];
        let (tlo, thi) = out.target_only.ci[j];
        println!(
            "{:>5}  {:>12.6}  [{:>11.6}, {:>11.6}]  [{:>11.6}, {:>11.6}]",
            j + 1,
            out.combined.theta_c[j],
            lo,
            hi,
            tlo,
            thi
        );
    }
    let diag = &out.combined.diagnostics;
    if diag.sites.is_empty() {
        println!("no source sites; the estimate is target-only");
        return;
    }
    println!("lambda = {:.6}", out.combined.lambda);
    println!("{:<16}  {:>12}  {:>10}  {:>10}", "site", "T_k", "p_k", "|Lambda|_1");
    for (k, site) in diag.sites.iter().enumerate() {
        let l1: f64 = out.combined.lambdas[k].iter().map(|v| v.abs()).sum();
        let t = if diag.t[k].is_finite() {
            format!("{:.4}", diag.t[k])
        } else {
            "inf".to_string()
        };
        println!("{:<16}  {:>12}  {:>10.4}  {:>10.4}", site, t, diag.p[k], l1);
    }
}

pub fn print_campaign(c: &Campaign) {
    println!(
        "{} setting {} n = {}: {} replicates, {} failed",
        c.spec.example,
        c.spec.setting,
        c.spec.n,
        c.replicates.len(),
        c.failures.len()
    );
    println!("{:<12}  {:>5}  {:>9}  {:>10}", "method", "coord", "coverage", "width");
    for m in Method::ALL {
        for row in c.table().iter().filter(|r| r.method == m.as_str()) {
            println!(
                "{:<12}  {:>5}  {:>8.1}%  {:>10.5}",
                row.method, row.coordinate, row.coverage, row.mean_width
            );
        }
    }
}
