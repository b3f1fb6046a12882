//! Canonical default values. Every configurable knob takes its default
//! from here; the CLI help text is generated from the same constants.

/// Post-burn-in draws kept from the chain.
pub const DRAWS: usize = 4000;
pub const BURN_IN: usize = 2000;
pub const THIN: usize = 1;
/// Broadcast subset size for degree-1 (quantile) problems.
pub const BROADCAST_QUANTILE: usize = 50;
/// Broadcast subset size for degree-2 (AUC) problems.
pub const BROADCAST_AUC: usize = 100;
/// Target Metropolis acceptance rate for `d > 4` and `d ≤ 4`.
pub const ACCEPT_HIGH_DIM: f64 = 0.234;
pub const ACCEPT_LOW_DIM: f64 = 0.35;
/// Warning threshold for the realized broadcast radius constant.
pub const C1_WARN: f64 = 10.0;

/// Domain radius for quantile regression.
pub const RADIUS_QUANTILE: f64 = 50.0;
/// Domain radius for the unit-norm AUC parameterization.
pub const RADIUS_AUC: f64 = 0.999;
pub const TAU: f64 = 0.5;

/// Perturbation replicates for quantile and AUC problems.
pub const PERTURB_QUANTILE: usize = 500;
pub const PERTURB_AUC: usize = 100;

/// Gaussian draws used to fit the combination weights.
pub const Q_DRAWS: usize = 10_000;
/// Floor applied to finite-statistic p-values before inversion.
pub const P_VALUE_FLOOR: f64 = 1e-12;
/// Relative tolerance of the positive-definiteness check on `Â_k`.
pub const PD_TOLERANCE: f64 = 1e-8;
pub const ALPHA: f64 = 0.05;
/// Lasso stopping rule.
pub const LASSO_TOL: f64 = 1e-10;
pub const LASSO_MAX_SWEEPS: usize = 10_000;
/// Relative jitter added to `Ω̂` when its Cholesky factorization fails.
pub const OMEGA_JITTER: f64 = 1e-10;

pub const SEED: u64 = 20240521;
pub const PROTOCOL_VERSION: &str = "1.0";

/// Default penalty `λ = n^{-1/2}`.
pub fn lambda(n_target: usize) -> f64 {
    (n_target as f64).powf(-0.5)
}

pub fn target_accept(d: usize) -> f64 {
    if d > 4 {
        ACCEPT_HIGH_DIM
    } else {
        ACCEPT_LOW_DIM
    }
}
