//! Upper bounds on how far one derive-then-erase step can move an unrelated
//! concept's projection.
//!
//! With `W2 = W1 N U^-1` the chain is
//!
//! ```text
//! F  = |W2 d - W1 d|^2          <= F1 |d|^2
//! F1 = |W2 - W1|_F^2            <= |W1|_F^2 F2
//! F2 = |N U^-1 - I|_F^2         <= F3 |U^-1|_F^2
//! F3 = |sum (c* - c') c'^T|_F^2 <= sum |(c* - c') c'^T|_F^2
//! ```
//!
//! The preserve and `lambda2` terms appear in both `N` and `U` and cancel in
//! `N - U`, so `F3` does not depend on the lambdas.
//!
//! The last link is only guaranteed for a single term: for two terms
//! `|A + B|^2 = |A|^2 + |B|^2 + 2<A, B>`, which exceeds the squared sum
//! whenever `<A, B> > 0`. The report therefore also carries the triangle
//! bound `F3 <= (sum |(c* - c') c'^T|_F)^2`, which always holds, and
//! `triangle_chain_ok` for the chain closed with it.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::edit::EditCoefficients;
use crate::error::{Error, Result};
use crate::linalg::SymmetricSolver;
use crate::model::{AttentionLayerSet, ConceptTask, Embedding, ProjectionMatrix, DEFAULT_SOLVE_TOL};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    #[serde(rename = "F")]
    pub f: f64,
    #[serde(rename = "F1")]
    pub f1: f64,
    #[serde(rename = "F2")]
    pub f2: f64,
    #[serde(rename = "F3")]
    pub f3: f64,
    #[serde(rename = "F3_upper")]
    pub f3_upper: f64,
    pub u_inv_frob_sq: f64,
    pub w_new1_frob_sq: f64,
    pub d_norm_sq: f64,
    /// All four links hold, the last one with the squared-sum bound.
    pub chain_ok: bool,
    /// `(sum |(c* - c') c'^T|_F)^2`.
    pub f3_triangle_upper: f64,
    /// The first three links hold and `F3 <= f3_triangle_upper`.
    pub triangle_chain_ok: bool,
}

/// `lhs <= rhs` up to a tolerance relative to the size of `rhs`.
pub fn within_bound(lhs: f64, rhs: f64) -> bool {
    lhs <= rhs + 1e-9 * (1.0 + rhs.abs())
}

impl BoundReport {
    /// Each link of the chain as `(name, lhs, rhs)`.
    pub fn links(&self) -> [(&'static str, f64, f64); 4] {
        [
            ("F <= F1 |d|^2", self.f, self.f1 * self.d_norm_sq),
            ("F1 <= |W1|^2 F2", self.f1, self.w_new1_frob_sq * self.f2),
            ("F2 <= F3 |U^-1|^2", self.f2, self.f3 * self.u_inv_frob_sq),
            ("F3 <= sum |(c*-c')c'^T|^2", self.f3, self.f3_upper),
        ]
    }

    /// Names of the links that do not hold.
    pub fn violations(&self) -> Vec<&'static str> {
        self.links()
            .iter()
            .filter(|(_, lhs, rhs)| !within_bound(*lhs, *rhs))
            .map(|(name, _, _)| *name)
            .collect()
    }

    fn evaluate(&mut self) {
        let links = self.links();
        self.chain_ok = links.iter().all(|(_, lhs, rhs)| within_bound(*lhs, *rhs));
        self.triangle_chain_ok = links[..3].iter().all(|(_, lhs, rhs)| within_bound(*lhs, *rhs))
            && within_bound(self.f3, self.f3_triangle_upper);
    }
}

/// Bound chain for a single matrix.
pub fn bound_chain(
    w_new1: &ProjectionMatrix,
    erase: &[(Embedding, Embedding)],
    preserve: &[Embedding],
    lambda1: f64,
    lambda2: f64,
    d_emb: &Embedding,
) -> Result<BoundReport> {
    let set = AttentionLayerSet::new(vec![w_new1.clone()])?;
    bound_chain_set(&set, erase, preserve, lambda1, lambda2, d_emb)
}

/// Bound chain for a whole layer set, treated as one matrix stacked by rows.
pub fn bound_chain_set(
    w_new1: &AttentionLayerSet,
    erase: &[(Embedding, Embedding)],
    preserve: &[Embedding],
    lambda1: f64,
    lambda2: f64,
    d_emb: &Embedding,
) -> Result<BoundReport> {
    let dim = w_new1.embed_dim();
    w_new1.check_embedding(d_emb, "drift probe")?;
    let tasks = erase
        .iter()
        .enumerate()
        .map(|(i, (cp, cs))| ConceptTask::new(format!("derived-{i}"), cp.clone(), cs.clone()))
        .collect::<Result<Vec<_>>>()?;

    let coeffs = EditCoefficients::new(dim, &tasks, preserve, lambda1, lambda2)?;
    let w_new2 = coeffs.apply_set(w_new1)?;

    let mut f = 0.0;
    let mut f1 = 0.0;
    let mut w_new1_frob_sq = 0.0;
    for (a, b) in w_new2.layers().iter().zip(w_new1.layers()) {
        f += (a.weight() * d_emb.data() - b.weight() * d_emb.data()).norm_squared();
        f1 += (a.weight() - b.weight()).norm_squared();
        w_new1_frob_sq += b.weight().norm_squared();
    }

    let identity = DMatrix::<f64>::identity(dim, dim);
    let (f2, u_inv_frob_sq) = match coeffs.transform() {
        Some(x) => {
            let f2 = (x - &identity).norm_squared();
            let u = SymmetricSolver::factor(coeffs.denominator(), "bound denominator U", DEFAULT_SOLVE_TOL)?;
            (f2, u.solve(&identity).norm_squared())
        }
        None => {
            // N == U; U^-1 is still needed for the report when it exists.
            let u_inv = match SymmetricSolver::factor(coeffs.denominator(), "bound denominator U", DEFAULT_SOLVE_TOL) {
                Ok(u) => u.solve(&identity).norm_squared(),
                Err(Error::Singular { .. }) if erase.iter().all(|(cp, _)| cp.is_zero()) => 0.0,
                Err(e) => return Err(e),
            };
            (0.0, u_inv)
        }
    };

    let mut difference = DMatrix::<f64>::zeros(dim, dim);
    let mut f3_upper = 0.0;
    let mut norm_sum = 0.0;
    for task in &tasks {
        let cp = task.source().data();
        // one term per token column
        for (k, col) in cp.column_iter().enumerate() {
            let dest = task.matched_destination();
            let term = (dest.column(k) - col) * col.transpose();
            let sq = term.norm_squared();
            f3_upper += sq;
            norm_sum += sq.sqrt();
            difference += term;
        }
    }

    let mut report = BoundReport {
        f,
        f1,
        f2,
        f3: difference.norm_squared(),
        f3_upper,
        u_inv_frob_sq,
        w_new1_frob_sq,
        d_norm_sq: d_emb.data().norm_squared(),
        chain_ok: false,
        f3_triangle_upper: norm_sum * norm_sum,
        triangle_chain_ok: false,
    };
    report.evaluate();
    Ok(report)
}
