//! Summation and special functions shared by several modules.

use statrs::distribution::{ContinuousCDF, Normal};

/// Neumaier-compensated sum.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0_f64;
    let mut comp = 0.0_f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Regularized upper incomplete gamma `Q(a, x)`.
pub fn gamma_upper_regularized(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if x.is_infinite() {
        return 0.0;
    }
    statrs::function::gamma::gamma_ur(a, x)
}

/// Upper quantile `z` of the standard normal: `P(Z > z) = upper`.
pub fn normal_upper_quantile(upper: f64) -> f64 {
    if upper >= 0.5 {
        if upper == 0.5 {
            return 0.0;
        }
        return -normal_upper_quantile(1.0 - upper);
    }
    Normal::standard().inverse_cdf(1.0 - upper)
}

pub fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}
