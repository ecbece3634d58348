//! Recovering the embedding that makes an edited model reproduce what the
//! original model did with a concept.
//!
//! Minimizes `sum_i |W_i^new c' - W_i^old c|^2 + lambda |c'|^2`, whose
//! unique minimizer is `c' = (lambda I + sum_i W_i^newT W_i^new)^-1 sum_i W_i^newT W_i^old c`.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{tr_mul, SymmetricSolver};
use crate::model::{AttentionLayerSet, Embedding, DEFAULT_SOLVE_TOL};

#[derive(Debug, Clone, Serialize)]
pub struct DerivationResult {
    #[serde(skip)]
    pub c_prime: Embedding,
    pub objective_value: f64,
    /// `|W_i^new c' - W_i^old c|^2` per layer.
    pub residual_per_layer: Vec<(String, f64)>,
    /// Euclidean norm of each column of `c'`.
    pub norm: Vec<f64>,
    pub lambda_used: f64,
    /// Set when `lambda == 0`: the solve relied on the stacked edited
    /// matrices having full column rank.
    pub unregularized: bool,
    pub condition_estimate: f64,
    pub warning: Option<String>,
}

impl DerivationResult {
    pub fn total_norm(&self) -> f64 {
        self.c_prime.frobenius_norm()
    }
}

fn check_inputs(
    c: &Embedding,
    new_set: &AttentionLayerSet,
    old_set: &AttentionLayerSet,
    lambda_reg: f64,
) -> Result<()> {
    new_set.check_aligned(old_set)?;
    new_set.check_embedding(c, "derivation target")?;
    if !(lambda_reg.is_finite() && lambda_reg >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "derivation lambda must be finite and non-negative, got {lambda_reg}"
        )));
    }
    Ok(())
}

/// Per-layer residuals `W_i^new c' - W_i^old c`.
fn residuals(
    c_prime: &DMatrix<f64>,
    c: &DMatrix<f64>,
    new_set: &AttentionLayerSet,
    old_set: &AttentionLayerSet,
) -> Vec<DMatrix<f64>> {
    new_set
        .layers()
        .iter()
        .zip(old_set.layers())
        .map(|(n, o)| n.weight() * c_prime - o.weight() * c)
        .collect()
}

pub fn derivation_objective(
    c_prime: &Embedding,
    c: &Embedding,
    new_set: &AttentionLayerSet,
    old_set: &AttentionLayerSet,
    lambda_reg: f64,
) -> Result<f64> {
    check_inputs(c, new_set, old_set, lambda_reg)?;
    new_set.check_embedding(c_prime, "derived embedding")?;
    if c_prime.tokens() != c.tokens() {
        return Err(Error::dims("derived embedding token count", c.tokens(), c_prime.tokens()));
    }
    let fit: f64 = residuals(c_prime.data(), c.data(), new_set, old_set)
        .iter()
        .map(|r| r.norm_squared())
        .sum();
    Ok(fit + lambda_reg * c_prime.data().norm_squared())
}

/// `2 sum_i W_i^newT (W_i^new c' - W_i^old c) + 2 lambda c'`.
pub fn derivation_gradient(
    c_prime: &Embedding,
    c: &Embedding,
    new_set: &AttentionLayerSet,
    old_set: &AttentionLayerSet,
    lambda_reg: f64,
) -> Result<DMatrix<f64>> {
    check_inputs(c, new_set, old_set, lambda_reg)?;
    new_set.check_embedding(c_prime, "derived embedding")?;
    if c_prime.tokens() != c.tokens() {
        return Err(Error::dims("derived embedding token count", c.tokens(), c_prime.tokens()));
    }
    let mut grad = c_prime.data() * (2.0 * lambda_reg);
    for (layer, r) in new_set
        .layers()
        .iter()
        .zip(residuals(c_prime.data(), c.data(), new_set, old_set))
    {
        grad += tr_mul(layer.weight(), &r) * 2.0;
    }
    Ok(grad)
}

/// `sum_i W_i^T W_i`, accumulated in layer order.
pub fn gram(set: &AttentionLayerSet) -> DMatrix<f64> {
    let parts: Vec<DMatrix<f64>> = set
        .layers()
        .par_iter()
        .map(|l| tr_mul(l.weight(), l.weight()))
        .collect();
    let d = set.embed_dim();
    parts.into_iter().fold(DMatrix::zeros(d, d), |acc, p| acc + p)
}

/// A factored `lambda I + sum_i W_i^newT W_i^new`, reusable for every
/// concept derived against the same pair of layer sets.
pub struct Deriver<'a> {
    new_set: &'a AttentionLayerSet,
    old_set: &'a AttentionLayerSet,
    lambda_reg: f64,
    solver: SymmetricSolver,
}

impl<'a> Deriver<'a> {
    pub fn new(new_set: &'a AttentionLayerSet, old_set: &'a AttentionLayerSet, lambda_reg: f64) -> Result<Self> {
        Self::with_gram(new_set, old_set, lambda_reg, gram(new_set), DEFAULT_SOLVE_TOL)
    }

    /// Uses a precomputed `sum_i W_i^newT W_i^new`.
    pub fn with_gram(
        new_set: &'a AttentionLayerSet,
        old_set: &'a AttentionLayerSet,
        lambda_reg: f64,
        new_gram: DMatrix<f64>,
        solve_tol: f64,
    ) -> Result<Self> {
        new_set.check_aligned(old_set)?;
        if new_gram.shape() != (new_set.embed_dim(), new_set.embed_dim()) {
            return Err(Error::dims("gram matrix size", new_set.embed_dim(), new_gram.nrows()));
        }
        let mut a = new_gram;
        for i in 0..a.nrows() {
            a[(i, i)] += lambda_reg;
        }
        let solver = SymmetricSolver::factor(&a, "derivation system A", solve_tol)?;
        Ok(Self {
            new_set,
            old_set,
            lambda_reg,
            solver,
        })
    }

    pub fn derive(&self, c: &Embedding) -> Result<DerivationResult> {
        check_inputs(c, self.new_set, self.old_set, self.lambda_reg)?;
        // B c = sum_i W_i^newT (W_i^old c), accumulated in layer order.
        let parts: Vec<DMatrix<f64>> = self
            .new_set
            .layers()
            .par_iter()
            .zip(self.old_set.layers().par_iter())
            .map(|(n, o)| tr_mul(n.weight(), &(o.weight() * c.data())))
            .collect();
        let rhs = parts
            .into_iter()
            .fold(DMatrix::zeros(c.dim(), c.tokens()), |acc, p| acc + p);
        let solution = self.solver.solve(&rhs);
        let c_prime = Embedding::new(format!("{}'", c.label()), solution).map_err(|_| Error::Singular {
            matrix: "derivation system A",
            dim: c.dim(),
            rank: c.dim() - 1,
        })?;

        let residual_per_layer: Vec<(String, f64)> = self
            .new_set
            .layers()
            .iter()
            .zip(residuals(c_prime.data(), c.data(), self.new_set, self.old_set))
            .map(|(l, r)| (l.name().to_owned(), r.norm_squared()))
            .collect();
        let fit: f64 = residual_per_layer.iter().map(|(_, v)| v).sum();
        let objective_value = fit + self.lambda_reg * c_prime.data().norm_squared();

        let mut warning = self.solver.warning("derivation system A");
        if self.lambda_reg == 0.0 {
            let note = "lambda = 0: unregularized derivation".to_owned();
            warning = Some(match warning {
                Some(w) => format!("{w}; {note}"),
                None => note,
            });
        }
        Ok(DerivationResult {
            norm: c_prime.column_norms(),
            c_prime,
            objective_value,
            residual_per_layer,
            lambda_used: self.lambda_reg,
            unregularized: self.lambda_reg == 0.0,
            condition_estimate: self.solver.condition_estimate(),
            warning,
        })
    }
}

pub fn derive_embedding(
    c: &Embedding,
    new_set: &AttentionLayerSet,
    old_set: &AttentionLayerSet,
    lambda_reg: f64,
) -> Result<DerivationResult> {
    check_inputs(c, new_set, old_set, lambda_reg)?;
    Deriver::new(new_set, old_set, lambda_reg)?.derive(c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ProjectionKind, ProjectionMatrix};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn set(rng: &mut ChaCha8Rng, outs: &[usize], d: usize) -> AttentionLayerSet {
        AttentionLayerSet::new(
            outs.iter()
                .enumerate()
                .map(|(i, o)| ProjectionMatrix::new(format!("l{i}"), ProjectionKind::Value, rand_mat(rng, *o, d)).unwrap())
                .collect(),
        )
        .unwrap()
    }

    fn perturbed(rng: &mut ChaCha8Rng, s: &AttentionLayerSet, scale: f64) -> AttentionLayerSet {
        AttentionLayerSet::new(
            s.layers()
                .iter()
                .map(|l| {
                    let noise = rand_mat(rng, l.out_dim(), l.embed_dim()) * scale;
                    l.with_weight(l.weight() + noise)
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn objective_trivial_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let old = set(&mut rng, &[5, 6], 4);
        let c = Embedding::new("c", rand_mat(&mut rng, 4, 2)).unwrap();
        assert_eq!(derivation_objective(&c, &c, &old, &old, 0.0).unwrap(), 0.0);

        let new = perturbed(&mut rng, &old, 0.1);
        let zero = Embedding::zeros("0", 4, 2);
        let expected: f64 = old.layers().iter().map(|l| (l.weight() * c.data()).norm_squared()).sum();
        let got = derivation_objective(&zero, &c, &new, &old, 3.0).unwrap();
        assert!((got - expected).abs() < 1e-12 * expected);
    }

    #[test]
    fn objective_matches_explicit_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let d = 3;
        let old = set(&mut rng, &[2, 4], d);
        let new = perturbed(&mut rng, &old, 0.5);
        let c = rand_mat(&mut rng, d, 1);
        let cp = rand_mat(&mut rng, d, 1);
        let lambda = 0.25;
        let mut expected = 0.0;
        for (n, o) in new.layers().iter().zip(old.layers()) {
            for r in 0..n.out_dim() {
                let mut a = 0.0;
                for k in 0..d {
                    a += n.weight()[(r, k)] * cp[(k, 0)] - o.weight()[(r, k)] * c[(k, 0)];
                }
                expected += a * a;
            }
        }
        for k in 0..d {
            expected += lambda * cp[(k, 0)] * cp[(k, 0)];
        }
        let got = derivation_objective(
            &Embedding::new("cp", cp).unwrap(),
            &Embedding::new("c", c).unwrap(),
            &new,
            &old,
            lambda,
        )
        .unwrap();
        assert!((got - expected).abs() < 1e-12 * expected.max(1.0));
    }

    #[test]
    fn unedited_model_recovers_the_concept() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let old = set(&mut rng, &[8, 8, 8], 6);
        let c = Embedding::new("c", rand_mat(&mut rng, 6, 3)).unwrap();
        let res = derive_embedding(&c, &old, &old, 0.0).unwrap();
        let rel = (res.c_prime.data() - c.data()).norm() / c.data().norm();
        assert!(rel < 1e-10, "{rel}");
        assert!(res.unregularized);
    }

    #[test]
    fn huge_lambda_shrinks_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let old = set(&mut rng, &[8, 8], 5);
        let new = perturbed(&mut rng, &old, 0.2);
        let c = Embedding::new("c", rand_mat(&mut rng, 5, 1)).unwrap();
        let scale = gram(&new).norm();
        let res = derive_embedding(&c, &new, &old, 1e12 * scale).unwrap();
        assert!(res.total_norm() <= 1e-6 * c.frobenius_norm());
    }

    #[test]
    fn gradient_vanishes_at_solution_and_matches_origin_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let old = set(&mut rng, &[7, 9, 5], 6);
        let new = perturbed(&mut rng, &old, 0.3);
        let c = Embedding::new("c", rand_mat(&mut rng, 6, 2)).unwrap();
        let res = derive_embedding(&c, &new, &old, 0.1).unwrap();
        let g = derivation_gradient(&res.c_prime, &c, &new, &old, 0.1).unwrap();
        assert!(g.amax() <= 1e-8 * (1.0 + c.frobenius_norm()));

        let zero = Embedding::zeros("0", 6, 2);
        let g0 = derivation_gradient(&zero, &c, &new, &old, 7.0).unwrap();
        let mut expected = DMatrix::zeros(6, 2);
        for (n, o) in new.layers().iter().zip(old.layers()) {
            expected -= n.weight().transpose() * o.weight() * c.data() * 2.0;
        }
        assert!((g0 - expected).amax() < 1e-12);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let old = set(&mut rng, &[6, 4], 5);
        let new = perturbed(&mut rng, &old, 0.4);
        let c = Embedding::new("c", rand_mat(&mut rng, 5, 1)).unwrap();
        let point = rand_mat(&mut rng, 5, 1);
        let lambda = 0.2;
        let analytic =
            derivation_gradient(&Embedding::new("p", point.clone()).unwrap(), &c, &new, &old, lambda).unwrap();
        let h = 1e-5;
        for k in 0..5 {
            let mut plus = point.clone();
            let mut minus = point.clone();
            plus[k] += h;
            minus[k] -= h;
            let fp = derivation_objective(&Embedding::new("p", plus).unwrap(), &c, &new, &old, lambda).unwrap();
            let fm = derivation_objective(&Embedding::new("m", minus).unwrap(), &c, &new, &old, lambda).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - analytic[k]).abs() <= 1e-4 * analytic[k].abs().max(1.0));
        }
    }

    #[test]
    fn rank_deficient_unregularized_system_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        // two rows stacked cannot span a 5-dimensional space
        let old = set(&mut rng, &[1, 1], 5);
        let c = Embedding::new("c", rand_mat(&mut rng, 5, 1)).unwrap();
        assert!(matches!(derive_embedding(&c, &old, &old, 0.0), Err(Error::Singular { .. })));
        assert!(derive_embedding(&c, &old, &old, 0.1).is_ok());
    }

    #[test]
    fn misaligned_sets_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let a = set(&mut rng, &[3, 3], 4);
        let b = set(&mut rng, &[3, 4], 4);
        let c = Embedding::new("c", rand_mat(&mut rng, 4, 1)).unwrap();
        assert!(matches!(derive_embedding(&c, &a, &b, 0.1), Err(Error::Misaligned { index: 1, .. })));
    }
}
