use super::{norm2, LinearForm, Objective, WeightScheme, WeightedForm};
use crate::data::{Dataset, Obs};
use crate::error::{Error, Result};

/// AUC maximization over unit-norm coefficients.
///
/// The parameter `θ ∈ R^d` holds the last `d` coefficients; the first is
/// `√(1 − ‖θ‖²)` so that `‖β(θ)‖ = 1` with `β₁ > 0`. The degree-2 kernel is
/// the symmetrized discordance indicator, with ties in the linear score
/// counted as discordant.
#[derive(Debug, Clone, PartialEq)]
pub struct AucProblem {
    p_plus_one: usize,
    radius: f64,
}

impl AucProblem {
    pub fn new(p_plus_one: usize, radius: f64) -> Result<Self> {
        if p_plus_one < 2 {
            return Err(Error::InvalidConfig(
                "AUC needs at least two covariates".into(),
            ));
        }
        if !(radius > 0.0 && radius < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "AUC domain radius must lie in (0, 1), got {radius}"
            )));
        }
        Ok(Self { p_plus_one, radius })
    }

    pub fn coef(&self, theta: &[f64]) -> Vec<f64> {
        let s: f64 = theta.iter().map(|t| t * t).sum();
        let mut beta = Vec::with_capacity(theta.len() + 1);
        beta.push((1.0 - s).max(0.0).sqrt());
        beta.extend_from_slice(theta);
        beta
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Objective for AucProblem {
    fn degree(&self) -> usize {
        2
    }

    fn param_dim(&self) -> usize {
        self.p_plus_one - 1
    }

    fn covariate_dim(&self) -> Option<usize> {
        Some(self.p_plus_one)
    }

    fn radius(&self) -> f64 {
        self.radius
    }

    fn kernel(&self, obs: &[Obs<'_>], theta: &[f64]) -> f64 {
        let beta = self.coef(theta);
        let (a, b) = (obs[0], obs[1]);
        let (sa, sb) = (dot(a.z, &beta), dot(b.z, &beta));
        let ab = if a.y > b.y && sa <= sb { 1.0 } else { 0.0 };
        let ba = if b.y > a.y && sb <= sa { 1.0 } else { 0.0 };
        0.5 * (ab + ba)
    }

    fn param_to_coef(&self, theta: &[f64]) -> Vec<f64> {
        self.coef(theta)
    }

    fn weighted_form<'a>(
        &'a self,
        data: &'a Dataset,
        theta: &[f64],
        scheme: WeightScheme,
    ) -> Box<dyn WeightedForm + 'a> {
        debug_assert!(norm2(theta) <= 1.0);
        let ranked = Ranked::new(data, &data.linear_scores(&self.coef(theta)));
        match scheme {
            WeightScheme::MultinomialBootstrap => Box::new(ranked),
            WeightScheme::JinPerturb => {
                let n = data.len() as f64;
                Box::new(LinearForm {
                    terms: ranked.pair_counts(),
                    norm: n * (n - 1.0) / 2.0,
                })
            }
        }
    }
}

/// Fenwick tree over outcome ranks.
struct Fenwick(Vec<f64>);

impl Fenwick {
    fn new(n: usize) -> Self {
        Self(vec![0.0; n + 1])
    }

    fn add(&mut self, rank: usize, w: f64) {
        let mut i = rank + 1;
        while i < self.0.len() {
            self.0[i] += w;
            i += i & i.wrapping_neg();
        }
    }

    /// Sum over ranks `< rank`.
    fn prefix(&self, rank: usize) -> f64 {
        let mut i = rank;
        let mut s = 0.0;
        while i > 0 {
            s += self.0[i];
            i -= i & i.wrapping_neg();
        }
        s
    }
}

/// Observations grouped by tied linear score, with dense outcome ranks.
/// Evaluates `Σ_{i≠j} wᵢ wⱼ 1{yᵢ > yⱼ} 1{sᵢ ≤ sⱼ} / (n(n−1))` in
/// `O(n log n)`.
struct Ranked {
    /// Indices sorted by descending score.
    order: Vec<usize>,
    /// Start offsets of tied-score groups in `order`, plus a final `n`.
    groups: Vec<usize>,
    y_rank: Vec<usize>,
    n_ranks: usize,
}

impl Ranked {
    fn new(data: &Dataset, scores: &[f64]) -> Self {
        let n = data.len();
        let y = data.y();
        let mut by_y: Vec<usize> = (0..n).collect();
        by_y.sort_by(|&a, &b| y[a].total_cmp(&y[b]));
        let mut y_rank = vec![0; n];
        let mut rank = 0;
        for (k, &i) in by_y.iter().enumerate() {
            if k > 0 && y[i] != y[by_y[k - 1]] {
                rank += 1;
            }
            y_rank[i] = rank;
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        let mut groups = Vec::new();
        for k in 0..n {
            if k == 0 || scores[order[k]] != scores[order[k - 1]] {
                groups.push(k);
            }
        }
        groups.push(n);
        Self {
            order,
            groups,
            y_rank,
            n_ranks: if n == 0 { 0 } else { rank + 1 },
        }
    }

    /// `cᵢ = Σ_{j≠i} h(xᵢ, xⱼ)`.
    fn pair_counts(&self) -> Vec<f64> {
        let n = self.order.len();
        let mut counts = vec![0.0; n];
        // #{j : yⱼ < yᵢ, sⱼ ≥ sᵢ}
        let mut tree = Fenwick::new(self.n_ranks);
        for g in self.groups.windows(2) {
            let members = &self.order[g[0]..g[1]];
            for &j in members {
                tree.add(self.y_rank[j], 1.0);
            }
            for &i in members {
                counts[i] += tree.prefix(self.y_rank[i]);
            }
        }
        // #{j : yⱼ > yᵢ, sⱼ ≤ sᵢ}, visiting ascending scores
        let mut tree = Fenwick::new(self.n_ranks);
        let mut inserted = 0.0;
        for g in self.groups.windows(2).rev() {
            let members = &self.order[g[0]..g[1]];
            for &j in members {
                tree.add(self.y_rank[j], 1.0);
                inserted += 1.0;
            }
            for &i in members {
                counts[i] += inserted - tree.prefix(self.y_rank[i] + 1);
            }
        }
        counts.iter_mut().for_each(|c| *c *= 0.5);
        counts
    }
}

impl WeightedForm for Ranked {
    fn value(&self, weights: &[f64]) -> f64 {
        let n = self.order.len() as f64;
        let mut tree = Fenwick::new(self.n_ranks);
        let mut total = 0.0;
        for g in self.groups.windows(2) {
            let members = &self.order[g[0]..g[1]];
            for &j in members {
                tree.add(self.y_rank[j], weights[j]);
            }
            for &i in members {
                if weights[i] != 0.0 {
                    total += weights[i] * tree.prefix(self.y_rank[i]);
                }
            }
        }
        total / (n * (n - 1.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{
        enumerate_ustat, eval_objective, eval_perturbed_objective, WeightScheme, WeightVector,
    };
    use crate::rng::stream;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn random_data(n: usize, p: usize, seed: u64, ordinal: bool) -> Dataset {
        let mut rng = stream(seed, &[]);
        let rows: Vec<(f64, Vec<f64>)> = (0..n)
            .map(|_| {
                // coarse grid to force score ties
                let z: Vec<f64> = (0..p)
                    .map(|_| (rng.sample::<f64, _>(StandardNormal) * 2.0).round() / 2.0)
                    .collect();
                let y = if ordinal {
                    rng.random_range(0..4) as f64
                } else {
                    rng.random_range(0..2) as f64
                };
                (y, z)
            })
            .collect();
        Dataset::from_rows("t", &rows).unwrap()
    }

    #[test]
    fn theta_zero_maps_to_first_axis() {
        let a = AucProblem::new(4, 0.999).unwrap();
        assert_eq!(a.coef(&[0.0, 0.0, 0.0]), vec![1.0, 0.0, 0.0, 0.0]);
        let b = a.coef(&[0.6, 0.0, 0.0]);
        assert!((b[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn rejects_radius_at_or_above_one() {
        assert!(AucProblem::new(3, 1.0).is_err());
        assert!(AucProblem::new(3, 1.5).is_err());
        assert!(AucProblem::new(1, 0.5).is_err());
    }

    #[test]
    fn two_rows_one_discordant_pair() {
        // β(θ) = (1, 0): scores are the first covariate
        let data = Dataset::from_rows("t", &[(1.0, vec![0.2, 9.0]), (0.0, vec![0.5, -3.0])]).unwrap();
        let a = AucProblem::new(2, 0.9).unwrap();
        assert_eq!(eval_objective(&a, &data, &[0.0]).unwrap(), 0.5);
    }

    #[test]
    fn constant_outcome_gives_zero() {
        let mut data = random_data(30, 3, 1, false);
        let rows: Vec<(f64, Vec<f64>)> = data.rows().map(|o| (1.0, o.z.to_vec())).collect();
        data = Dataset::from_rows("t", &rows).unwrap();
        let a = AucProblem::new(3, 0.99).unwrap();
        for theta in [[0.0, 0.0], [0.3, -0.5], [-0.7, 0.1]] {
            assert_eq!(eval_objective(&a, &data, &theta).unwrap(), 0.0);
        }
    }

    #[test]
    fn kernel_is_symmetric_and_shift_invariant() {
        let a = AucProblem::new(3, 0.99).unwrap();
        let theta = [0.3, -0.4];
        let beta = a.coef(&theta);
        let z1 = [0.1, 0.5, -0.2];
        let z2 = [0.4, -0.3, 0.9];
        let x1 = Obs { y: 1.0, z: &z1 };
        let x2 = Obs { y: 0.0, z: &z2 };
        assert_eq!(a.kernel(&[x1, x2], &theta), a.kernel(&[x2, x1], &theta));
        // shift orthogonal to β
        let v = [beta[1], -beta[0], 0.0];
        let z1s: Vec<f64> = z1.iter().zip(&v).map(|(a, b)| a + 3.0 * b).collect();
        let z2s: Vec<f64> = z2.iter().zip(&v).map(|(a, b)| a + 3.0 * b).collect();
        let (y1s, y2s) = (Obs { y: 1.0, z: &z1s }, Obs { y: 0.0, z: &z2s });
        assert_eq!(a.kernel(&[x1, x2], &theta), a.kernel(&[y1s, y2s], &theta));
    }

    #[test]
    fn ranked_evaluation_matches_pair_enumeration() {
        let a = AucProblem::new(3, 0.99).unwrap();
        for (seed, ordinal) in [(2, false), (3, true), (4, true)] {
            let data = random_data(60, 3, seed, ordinal);
            let mut rng = stream(seed, &[9]);
            for theta in [[0.0, 0.0], [0.3, -0.2], [0.0, 0.6]] {
                let fast = eval_objective(&a, &data, &theta).unwrap();
                let slow = enumerate_ustat(&a, &data, &theta, None);
                assert!((fast - slow).abs() < 1e-12, "{fast} vs {slow}");
                for scheme in [WeightScheme::MultinomialBootstrap, WeightScheme::JinPerturb] {
                    let w = WeightVector::draw(scheme, data.len(), 2, &mut rng);
                    let fast = eval_perturbed_objective(&a, &data, &theta, &w).unwrap();
                    let slow = enumerate_ustat(&a, &data, &theta, Some((w.as_slice(), scheme)));
                    assert!((fast - slow).abs() < 1e-12 * slow.abs().max(1.0), "{scheme:?}: {fast} vs {slow}");
                }
            }
        }
    }
}
