//! Independent reference computations checked against the library.

use rand::Rng;
use rand_distr::StandardNormal;

use fedm::combiner::{
    adaptive_lasso, chisq_upper_tail, draw_joint_samples, full_borrow_weights, lasso_objective, Penalty,
};
use fedm::linalg::Matrix;
use fedm::numeric::normal_upper_quantile;
use fedm::protocol::{self, FederatedConfig};
use fedm::rng::stream;
use fedm::simlab::{self, auc_covariance, gen_auc_site, Example, Setting};

/// Composite Simpson rule.
fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, intervals: usize) -> f64 {
    let n = intervals + intervals % 2;
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let x = a + i as f64 * h;
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x);
    }
    s * h / 3.0
}

fn ln_gamma_half_integer(a: f64) -> f64 {
    // Γ(1/2) = √π, Γ(1) = 1, Γ(a + 1) = a Γ(a)
    let (mut x, mut v) = if (a.fract() - 0.5).abs() < 1e-12 {
        (0.5, 0.5 * std::f64::consts::PI.ln())
    } else {
        (1.0, 0.0)
    };
    while x < a - 1e-12 {
        v += x.ln();
        x += 1.0;
    }
    v
}

/// `P(χ²_d > t)` by integrating the density.
fn chisq_tail_quadrature(t: f64, d: usize) -> f64 {
    let k = d as f64 / 2.0;
    let norm = k * 2f64.ln() + ln_gamma_half_integer(k);
    if d == 1 {
        // substitute x = u² to remove the singularity at zero
        let phi = |u: f64| 2.0 * (-0.5 * u * u - norm).exp();
        return simpson(phi, t.sqrt(), 40.0, 400_000);
    }
    let dens = |x: f64| ((k - 1.0) * x.ln() - x / 2.0 - norm).exp();
    simpson(dens, t, t + 400.0, 800_000)
}

#[test]
fn chisq_tail_matches_quadrature() {
    for d in 1..=8 {
        for &t in &[0.5, 1.0, 3.0, 7.5, 15.0, 30.0] {
            let got = chisq_upper_tail(t, d);
            let want = chisq_tail_quadrature(t, d);
            assert!((got - want).abs() < 1e-11, "d = {d}, t = {t}: {got} vs {want}");
        }
    }
    assert!((chisq_upper_tail(3.841459, 1) - 0.05).abs() < 1e-5);
    assert!((chisq_upper_tail(5.991465, 2) - 0.05).abs() < 1e-5);
    for &t in &[0.1, 2.0, 9.0] {
        assert!((chisq_upper_tail(t, 2) - (-t / 2.0_f64).exp()).abs() < 1e-13);
    }
    assert_eq!(chisq_upper_tail(0.0, 3), 1.0);
    assert_eq!(chisq_upper_tail(f64::INFINITY, 3), 0.0);
}

#[test]
fn normal_quantile_matches_quadrature() {
    let z = normal_upper_quantile(0.025);
    assert!((z - 1.959964).abs() < 1e-6);
    let tail = simpson(
        |u| (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt(),
        z,
        40.0,
        200_000,
    );
    assert!((tail - 0.025).abs() < 1e-12);
}

#[test]
fn joint_draws_have_the_requested_covariance() {
    let q = 100_000;
    let s = draw_joint_samples(&Matrix::identity(2, 2), q, 3).unwrap();
    let cov = s.transpose() * &s / q as f64;
    assert!((cov - Matrix::identity(2, 2)).amax() < 0.02);
}

#[test]
fn rank_deficient_draws_stay_in_the_column_space() {
    let v = Matrix::from_column_slice(2, 1, &[1.0, 2.0]);
    let omega = &v * v.transpose();
    let s = draw_joint_samples(&omega, 1000, 4).unwrap();
    for row in s.row_iter() {
        assert!((2.0 * row[0] - row[1]).abs() < 1e-8);
    }
}

fn random_omega(dim: usize, seed: u64) -> Matrix {
    let mut rng = stream(seed, &[0]);
    let b = Matrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    &b * b.transpose() + Matrix::identity(dim, dim) * 0.1
}

#[test]
fn lasso_solution_satisfies_kkt_from_raw_samples() {
    let d = 2;
    let samples = draw_joint_samples(&random_omega(6, 8), 5000, 8).unwrap();
    let p = [0.3, 0.01];
    for &lambda in &[0.0, 0.01, 0.05, 0.5] {
        let fit = adaptive_lasso(&samples, d, &p, lambda, &[false, false], Penalty::Elementwise).unwrap();
        let q = samples.nrows() as f64;
        for r in 0..d {
            let resid: Vec<f64> = samples
                .row_iter()
                .map(|row| {
                    let mut pred = 0.0;
                    for (k, l) in fit.iter().enumerate() {
                        for c in 0..d {
                            pred += l[(r, c)] * row[d * (k + 1) + c];
                        }
                    }
                    row[r] - pred
                })
                .collect();
            for (k, l) in fit.iter().enumerate() {
                let pen = lambda / p[k];
                for c in 0..d {
                    let col = d * (k + 1) + c;
                    let grad: f64 =
                        -2.0 / q * samples.column(col).iter().zip(&resid).map(|(x, e)| x * e).sum::<f64>();
                    let b = l[(r, c)];
                    if b != 0.0 {
                        assert!((grad + pen * b.signum()).abs() < 1e-8, "λ = {lambda}: active {grad} {pen}");
                    } else {
                        assert!(grad.abs() <= pen + 1e-8, "λ = {lambda}: inactive {grad} {pen}");
                    }
                }
            }
        }
    }
}

#[test]
fn larger_penalty_never_loses_on_its_own_objective() {
    let d = 2;
    let samples = draw_joint_samples(&random_omega(6, 9), 4000, 9).unwrap();
    let p = [0.5, 0.05];
    let lambdas = [0.0, 0.001, 0.01, 0.05, 0.2, 1.0];
    for w in lambdas.windows(2) {
        let (l1, l2) = (w[0], w[1]);
        let f1 = adaptive_lasso(&samples, d, &p, l1, &[false, false], Penalty::Elementwise).unwrap();
        let f2 = adaptive_lasso(&samples, d, &p, l2, &[false, false], Penalty::Elementwise).unwrap();
        let at2 = lasso_objective(&samples, d, &f2, &p, l2);
        let at1 = lasso_objective(&samples, d, &f1, &p, l2);
        assert!(at2 <= at1 + 1e-10, "λ {l1} → {l2}: {at2} > {at1}");
    }
}

#[test]
fn full_borrow_equals_unpenalized_lasso() {
    let samples = draw_joint_samples(&random_omega(6, 10), 4000, 10).unwrap();
    let (fb, ridged) = full_borrow_weights(&samples, 2, &[false, false]).unwrap();
    assert!(!ridged);
    let cd = adaptive_lasso(&samples, 2, &[0.5, 0.5], 0.0, &[false, false], Penalty::Elementwise).unwrap();
    for (a, b) in fb.iter().zip(&cd) {
        assert!((a - b).amax() < 1e-8);
    }
}

#[test]
fn singular_gram_falls_back_to_ridge() {
    // two identical sites make the score columns collinear
    let v = Matrix::from_row_slice(3, 3, &[1.0, 0.5, 0.5, 0.5, 1.0, 1.0, 0.5, 1.0, 1.0]);
    let samples = draw_joint_samples(&v, 2000, 11).unwrap();
    let (l, ridged) = full_borrow_weights(&samples, 1, &[false, false]).unwrap();
    assert!(ridged);
    assert!(l.iter().all(|m| m[(0, 0)].is_finite()));
}

#[test]
fn group_penalty_zeroes_whole_blocks() {
    let samples = draw_joint_samples(&random_omega(6, 12), 4000, 12).unwrap();
    let fit = adaptive_lasso(&samples, 2, &[0.9, 1e-6], 0.05, &[false, false], Penalty::Group).unwrap();
    assert!(fit[1].iter().all(|v| *v == 0.0));
    assert!(fit[0].iter().any(|v| *v != 0.0));
}

#[test]
fn auc_covariates_match_their_covariance() {
    let n = 100_000;
    let data = gen_auc_site(Setting::II, 3, n, 13).unwrap();
    let mut cov = Matrix::zeros(5, 5);
    let mut mean = [0.0; 5];
    for i in 0..n {
        for (m, z) in mean.iter_mut().zip(data.z(i)) {
            *m += z / n as f64;
        }
    }
    for i in 0..n {
        let z = data.z(i);
        for a in 0..5 {
            for b in 0..5 {
                cov[(a, b)] += (z[a] - mean[a]) * (z[b] - mean[b]) / (n - 1) as f64;
            }
        }
    }
    // site 3 of setting II has σ = 1
    let err = (cov - auc_covariance(5)).amax();
    assert!(err < 0.02, "max deviation {err}");
}

#[test]
fn quantile_generator_has_the_right_residual_scale() {
    let data = simlab::gen_quantile_site(Setting::III, 3, 50_000, 14).unwrap();
    let beta = [-1.0, 1.0, 0.5, 0.0, 0.0];
    let resid: Vec<f64> = (0..data.len())
        .map(|i| data.y()[i] - data.z(i).iter().zip(&beta).map(|(z, b)| z * b).sum::<f64>())
        .collect();
    let var = resid.iter().map(|r| r * r).sum::<f64>() / resid.len() as f64;
    assert!((var - 2.25).abs() < 0.05, "residual variance {var}");
}

#[test]
fn target_summary_matches_quantile_asymptotics() {
    // for median regression with N(0, 1) errors and Z ~ N(0, I):
    // A = f(0) E[ZZᵀ] = φ(0) I and Σ = τ(1 − τ) E[ZZᵀ] = I / 4
    let data = simlab::gen_quantile_site(Setting::I, 0, 3000, 15).unwrap();
    let cfg = simlab::federated_config(Example::Quantile, 15, Default::default());
    let init = protocol::target_init(&simlab::problem_spec(Example::Quantile), &data, &cfg).unwrap();
    let phi0 = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
    let a = init.broadcast.a_hat.clone();
    let s = init.broadcast.sigma_s_hat.clone();
    let a_err = (&a - Matrix::identity(5, 5) * phi0).amax() / phi0;
    let s_err = (&s - Matrix::identity(5, 5) * 0.25).amax() / 0.25;
    assert!(a_err < 0.3, "Â relative error {a_err}\n{a}");
    assert!(s_err < 0.3, "Σ̂ relative error {s_err}\n{s}");
}

#[test]
fn no_sources_reproduces_the_target_only_estimate() {
    let data = simlab::gen_quantile_site(Setting::I, 0, 300, 16).unwrap();
    let cfg = FederatedConfig {
        perturb_replicates: 100,
        ..FederatedConfig::default()
    };
    let run = protocol::orchestrate(&data, &[], &simlab::problem_spec(Example::Quantile), &cfg).unwrap();
    let out = run.output;
    assert_eq!(out.combined.theta_c, out.target_only.theta);
    assert_eq!(out.combined.v_c, out.target_only.variance);
    assert_eq!(out.combined.ci, out.target_only.ci);
    assert!(out.combined.lambdas.is_empty());
}

#[test]
fn identical_sources_give_identical_replies() {
    let spec = simlab::SettingSpec::new(Example::Quantile, Setting::I, 300, 1, 17);
    let data = spec.datasets(0).unwrap();
    let cfg = simlab::federated_config(Example::Quantile, 17, Default::default());
    let init = protocol::target_init(&simlab::problem_spec(Example::Quantile), &data[0], &cfg).unwrap();
    let a = protocol::source_reply(&init.broadcast, &data[1]).unwrap();
    let b = protocol::source_reply(&init.broadcast, &data[1].clone()).unwrap();
    assert_eq!(a, b);
}
