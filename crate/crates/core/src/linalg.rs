//! Factorization helpers for the symmetric systems every closed form reduces to.

use nalgebra::{Cholesky, DMatrix, Dyn, LU};

use crate::error::{Error, Result};

/// Condition estimates above this are reported as warnings.
pub const ILL_CONDITIONED: f64 = 1e12;

enum Factor {
    Cholesky(Cholesky<f64, Dyn>),
    Lu(LU<f64, Dyn, Dyn>),
}

/// A factored symmetric matrix, reusable across right-hand sides.
pub struct SymmetricSolver {
    factor: Factor,
    condition_estimate: f64,
}

impl SymmetricSolver {
    /// Cholesky first; when that fails or its pivots imply a condition number
    /// above `1 / solve_tol`, the rank is checked by SVD and a pivoted LU is
    /// used for full-rank matrices.
    pub fn factor(matrix: &DMatrix<f64>, name: &'static str, solve_tol: f64) -> Result<Self> {
        let dim = matrix.nrows();
        debug_assert_eq!(dim, matrix.ncols());
        if let Some(chol) = Cholesky::new(matrix.clone()) {
            let (lo, hi) = chol
                .l_dirty()
                .diagonal()
                .iter()
                .fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
            let cond = if lo > 0.0 { (hi / lo).powi(2) } else { f64::INFINITY };
            if cond.is_finite() && cond * solve_tol < 1.0 {
                return Ok(Self {
                    factor: Factor::Cholesky(chol),
                    condition_estimate: cond,
                });
            }
        }

        let sv = matrix.clone().singular_values();
        let max = sv.max();
        let threshold = max * dim as f64 * f64::EPSILON;
        let rank = sv.iter().filter(|s| **s > threshold).count();
        if rank < dim || max == 0.0 {
            return Err(Error::Singular {
                matrix: name,
                dim,
                rank,
            });
        }
        let lu = LU::new(matrix.clone());
        if !lu.is_invertible() {
            return Err(Error::Singular {
                matrix: name,
                dim,
                rank: dim - 1,
            });
        }
        Ok(Self {
            factor: Factor::Lu(lu),
            condition_estimate: max / sv.min(),
        })
    }

    /// Solves `M X = rhs`.
    pub fn solve(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.factor {
            Factor::Cholesky(c) => c.solve(rhs),
            // invertibility was checked at factor time
            Factor::Lu(lu) => lu.solve(rhs).expect("factor checked invertibility"),
        }
    }

    pub fn is_cholesky(&self) -> bool {
        matches!(self.factor, Factor::Cholesky(_))
    }

    pub fn condition_estimate(&self) -> f64 {
        self.condition_estimate
    }

    pub fn warning(&self, name: &str) -> Option<String> {
        (self.condition_estimate > ILL_CONDITIONED).then(|| {
            format!(
                "{name} is ill-conditioned (condition estimate {:.3e})",
                self.condition_estimate
            )
        })
    }
}

pub fn frobenius_sq(m: &DMatrix<f64>) -> f64 {
    m.norm_squared()
}

/// Matrix product that routes large operands through the blocked kernel.
///
/// `a.transpose() * b` materializes the transpose so the product uses the
/// same fast path as an ordinary multiply.
pub fn tr_mul(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.transpose() * b
}
