//! Closed-form editing of K/V projections.
//!
//! For erase tasks `(c_i, c_i*)` and preserved embeddings `c_j` the edited
//! weight minimizing
//!
//! ```text
//! sum_i |W c_i - W_old c_i*|^2 + l1 sum_j |W c_j - W_old c_j|^2 + l2 |W - W_old|_F^2
//! ```
//!
//! is `W = W_old N D^-1` with
//!
//! ```text
//! N = sum_i c_i* c_i^T + l1 sum_j c_j c_j^T + l2 I
//! D = sum_i c_i  c_i^T + l1 sum_j c_j c_j^T + l2 I
//! ```
//!
//! `N` and `D` depend only on the embeddings, so [`EditCoefficients`] builds
//! the transform `N D^-1` once and applies it to every matrix of a layer set.
//! Since `N = D + sum_i (c_i* - c_i) c_i^T`, the transform is a low-rank
//! update of the identity,
//!
//! ```text
//! N D^-1 = I + Delta R^T,   Delta = [c_i* - c_i],   R = D^-1 [c_i]
//! ```
//!
//! and an edit costs `O(out d k)` per matrix for `k` erased columns.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::SymmetricSolver;
use crate::model::{AttentionLayerSet, ConceptTask, Embedding, ProjectionMatrix, DEFAULT_SOLVE_TOL};

/// `W c`, column by column.
pub fn project_kv(w: &ProjectionMatrix, c: &Embedding) -> Result<DMatrix<f64>> {
    check_dim(w, c, "projected embedding")?;
    Ok(w.weight() * c.data())
}

fn check_dim(w: &ProjectionMatrix, c: &Embedding, context: &str) -> Result<()> {
    if w.embed_dim() != c.dim() {
        return Err(Error::dims(
            format!("{context} `{}` against matrix `{}`", c.label(), w.name()),
            w.embed_dim(),
            c.dim(),
        ));
    }
    Ok(())
}

fn check_tasks(dim: usize, erase: &[ConceptTask], preserve: &[Embedding]) -> Result<()> {
    for task in erase {
        if task.dim() != dim {
            return Err(Error::dims(format!("erase task `{}`", task.label()), dim, task.dim()));
        }
    }
    for emb in preserve {
        if emb.dim() != dim {
            return Err(Error::dims(format!("preserved embedding `{}`", emb.label()), dim, emb.dim()));
        }
    }
    Ok(())
}

/// Value of the editing objective at `w`.
pub fn uce_objective(
    w: &ProjectionMatrix,
    w_old: &ProjectionMatrix,
    erase: &[ConceptTask],
    preserve: &[Embedding],
    lambda1: f64,
    lambda2: f64,
) -> Result<f64> {
    if w.weight().shape() != w_old.weight().shape() {
        return Err(Error::dims(
            format!("rows of `{}` against `{}`", w.name(), w_old.name()),
            w_old.out_dim(),
            w.out_dim(),
        ));
    }
    check_tasks(w.embed_dim(), erase, preserve)?;
    let mut total = 0.0;
    for task in erase {
        let target = w_old.weight() * task.matched_destination();
        total += (w.weight() * task.source().data() - target).norm_squared();
    }
    for emb in preserve {
        total += lambda1 * (w.weight() * emb.data() - w_old.weight() * emb.data()).norm_squared();
    }
    total += lambda2 * (w.weight() - w_old.weight()).norm_squared();
    Ok(total)
}

/// The shared right factor `N D^-1` of one edit.
pub struct EditCoefficients {
    numerator: DMatrix<f64>,
    denominator: DMatrix<f64>,
    /// `None` when `N == D` exactly, i.e. the edit is the identity.
    transform: Option<DMatrix<f64>>,
    /// `(Delta, R)` with `N D^-1 = I + Delta R^T`.
    low_rank: Option<(DMatrix<f64>, DMatrix<f64>)>,
    condition_estimate: f64,
    warning: Option<String>,
}

impl EditCoefficients {
    pub fn new(
        dim: usize,
        erase: &[ConceptTask],
        preserve: &[Embedding],
        lambda1: f64,
        lambda2: f64,
    ) -> Result<Self> {
        Self::with_tolerance(dim, erase, preserve, lambda1, lambda2, DEFAULT_SOLVE_TOL)
    }

    pub fn with_tolerance(
        dim: usize,
        erase: &[ConceptTask],
        preserve: &[Embedding],
        lambda1: f64,
        lambda2: f64,
        solve_tol: f64,
    ) -> Result<Self> {
        check_tasks(dim, erase, preserve)?;
        let mut shared = DMatrix::<f64>::identity(dim, dim) * lambda2;
        for emb in preserve {
            let outer = emb.data() * emb.data().transpose();
            shared += outer * lambda1;
        }
        let mut numerator = shared.clone();
        let mut denominator = shared;
        let k: usize = erase.iter().map(|t| t.source().tokens()).sum();
        let mut delta = DMatrix::<f64>::zeros(dim, k);
        let mut sources = DMatrix::<f64>::zeros(dim, k);
        let mut col = 0;
        for task in erase {
            let src = task.source().data();
            let dst = task.matched_destination();
            numerator += &dst * src.transpose();
            denominator += src * src.transpose();
            let m = src.ncols();
            delta.columns_mut(col, m).copy_from(&(dst - src));
            sources.columns_mut(col, m).copy_from(src);
            col += m;
        }

        if numerator == denominator {
            return Ok(Self {
                numerator,
                denominator,
                transform: None,
                low_rank: None,
                condition_estimate: 1.0,
                warning: None,
            });
        }

        let solver = SymmetricSolver::factor(&denominator, "edit denominator D", solve_tol)?;
        // D is symmetric, so c^T D^-1 = (D^-1 c)^T.
        let right = solver.solve(&sources);
        let mut transform = &delta * right.transpose();
        for i in 0..dim {
            transform[(i, i)] += 1.0;
        }
        Ok(Self {
            numerator,
            denominator,
            transform: Some(transform),
            low_rank: Some((delta, right)),
            condition_estimate: solver.condition_estimate(),
            warning: solver.warning("edit denominator D"),
        })
    }

    pub fn numerator(&self) -> &DMatrix<f64> {
        &self.numerator
    }

    pub fn denominator(&self) -> &DMatrix<f64> {
        &self.denominator
    }

    /// `N D^-1`, or `None` for an identity edit.
    pub fn transform(&self) -> Option<&DMatrix<f64>> {
        self.transform.as_ref()
    }

    /// `(Delta, R)` with `N D^-1 = I + Delta R^T`, or `None` for an identity
    /// edit.
    pub fn low_rank(&self) -> Option<(&DMatrix<f64>, &DMatrix<f64>)> {
        self.low_rank.as_ref().map(|(a, b)| (a, b))
    }

    fn edit_weight(&self, w: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.low_rank {
            None => w.clone(),
            Some((delta, right)) => w + (w * delta) * right.transpose(),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.transform.is_none()
    }

    pub fn condition_estimate(&self) -> f64 {
        self.condition_estimate
    }

    pub fn warning(&self) -> Option<&str> {
        self.warning.as_deref()
    }

    pub fn dim(&self) -> usize {
        self.numerator.nrows()
    }

    pub fn apply(&self, w_old: &ProjectionMatrix) -> Result<ProjectionMatrix> {
        if w_old.embed_dim() != self.dim() {
            return Err(Error::dims(
                format!("embedding dimension of `{}`", w_old.name()),
                self.dim(),
                w_old.embed_dim(),
            ));
        }
        Ok(w_old.with_weight(self.edit_weight(w_old.weight())))
    }

    /// Applies the edit to every layer. Layers are independent, so the
    /// parallel result is bitwise equal to a serial loop.
    pub fn apply_set(&self, layers: &AttentionLayerSet) -> Result<AttentionLayerSet> {
        if layers.embed_dim() != self.dim() {
            return Err(Error::dims("layer set embedding dimension", self.dim(), layers.embed_dim()));
        }
        let edited: Vec<ProjectionMatrix> = match &self.low_rank {
            None => layers.layers().to_vec(),
            Some(_) => layers
                .layers()
                .par_iter()
                .map(|l| l.with_weight(self.edit_weight(l.weight())))
                .collect(),
        };
        Ok(AttentionLayerSet::from_parts_unchecked(edited, layers.embed_dim()))
    }
}

/// Closed-form minimizer of [`uce_objective`].
pub fn uce_edit(
    w_old: &ProjectionMatrix,
    erase: &[ConceptTask],
    preserve: &[Embedding],
    lambda1: f64,
    lambda2: f64,
) -> Result<ProjectionMatrix> {
    EditCoefficients::new(w_old.embed_dim(), erase, preserve, lambda1, lambda2)?.apply(w_old)
}

/// Edits every matrix of `layers` with one shared set of coefficients.
pub fn edit_layer_set(
    layers: &AttentionLayerSet,
    erase: &[ConceptTask],
    preserve: &[Embedding],
    lambda1: f64,
    lambda2: f64,
) -> Result<AttentionLayerSet> {
    EditCoefficients::new(layers.embed_dim(), erase, preserve, lambda1, lambda2)?.apply_set(layers)
}

/// `|W_a d - W_b d|^2`, summed over the columns of `d_emb`.
pub fn drift(w_a: &ProjectionMatrix, w_b: &ProjectionMatrix, d_emb: &Embedding) -> Result<f64> {
    if w_a.weight().shape() != w_b.weight().shape() {
        return Err(Error::dims(
            format!("rows of `{}` against `{}`", w_a.name(), w_b.name()),
            w_a.out_dim(),
            w_b.out_dim(),
        ));
    }
    check_dim(w_a, d_emb, "drift probe")?;
    Ok((w_a.weight() * d_emb.data() - w_b.weight() * d_emb.data()).norm_squared())
}

/// [`drift`] summed over every layer of two aligned sets.
pub fn set_drift(a: &AttentionLayerSet, b: &AttentionLayerSet, d_emb: &Embedding) -> Result<f64> {
    a.check_aligned(b)?;
    a.layers()
        .iter()
        .zip(b.layers())
        .map(|(x, y)| drift(x, y, d_emb))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ProjectionKind;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn naive_matmul(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(a.nrows(), b.ncols());
        for i in 0..a.nrows() {
            for j in 0..b.ncols() {
                let mut s = 0.0;
                for k in 0..a.ncols() {
                    s += a[(i, k)] * b[(k, j)];
                }
                out[(i, j)] = s;
            }
        }
        out
    }

    fn pm(name: &str, w: DMatrix<f64>) -> ProjectionMatrix {
        ProjectionMatrix::new(name, ProjectionKind::Key, w).unwrap()
    }

    fn emb(label: &str, m: DMatrix<f64>) -> Embedding {
        Embedding::new(label, m).unwrap()
    }

    #[test]
    fn project_identity_and_zero() {
        let e1 = Embedding::from_vector("e1", &[1.0, 0.0, 0.0]).unwrap();
        let out = project_kv(&pm("I", DMatrix::identity(3, 3)), &e1).unwrap();
        assert_eq!(out.as_slice(), &[1.0, 0.0, 0.0]);
        let zero = project_kv(&pm("Z", DMatrix::zeros(3, 3)), &e1).unwrap();
        assert!(zero.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn project_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = rand_mat(&mut rng, 4, 3);
        let c = rand_mat(&mut rng, 3, 2);
        let got = project_kv(&pm("W", w.clone()), &emb("c", c.clone())).unwrap();
        assert!((got - naive_matmul(&w, &c)).amax() < 1e-15);
    }

    #[test]
    fn project_rejects_mismatch() {
        let err = project_kv(
            &pm("W", DMatrix::zeros(4, 3)),
            &Embedding::from_vector("c", &[1.0, 2.0]).unwrap(),
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('3') && msg.contains('2'), "{msg}");
    }

    #[test]
    fn objective_zero_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = pm("W", rand_mat(&mut rng, 5, 4));
        let p = vec![emb("p", rand_mat(&mut rng, 4, 2))];
        assert_eq!(uce_objective(&w, &w, &[], &p, 0.1, 0.1).unwrap(), 0.0);
        let c = emb("c", rand_mat(&mut rng, 4, 1));
        let t = ConceptTask::new("t", c.clone(), c).unwrap();
        assert_eq!(uce_objective(&w, &w, &[t], &p, 0.1, 0.1).unwrap(), 0.0);
    }

    #[test]
    fn objective_matches_explicit_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (out, d) = (5, 4);
        let w = rand_mat(&mut rng, out, d);
        let w_old = rand_mat(&mut rng, out, d);
        let c = rand_mat(&mut rng, d, 2);
        let cs = rand_mat(&mut rng, d, 2);
        let p = rand_mat(&mut rng, d, 1);
        let (l1, l2) = (0.3, 0.7);

        let mut expected = 0.0;
        for col in 0..2 {
            for r in 0..out {
                let mut a = 0.0;
                let mut b = 0.0;
                for k in 0..d {
                    a += w[(r, k)] * c[(k, col)];
                    b += w_old[(r, k)] * cs[(k, col)];
                }
                expected += (a - b) * (a - b);
            }
        }
        for r in 0..out {
            let mut a = 0.0;
            for k in 0..d {
                a += (w[(r, k)] - w_old[(r, k)]) * p[(k, 0)];
            }
            expected += l1 * a * a;
        }
        for v in (&w - &w_old).iter() {
            expected += l2 * v * v;
        }

        let task = ConceptTask::new("t", emb("c", c), emb("cs", cs)).unwrap();
        let got = uce_objective(&pm("W", w), &pm("Wo", w_old), &[task], &[emb("p", p)], l1, l2).unwrap();
        assert!((got - expected).abs() <= 1e-12 * expected.abs().max(1.0));
    }

    #[test]
    fn empty_erase_and_fixed_point_are_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = pm("W", rand_mat(&mut rng, 6, 5));
        let p = vec![emb("p", rand_mat(&mut rng, 5, 3))];
        assert_eq!(uce_edit(&w, &[], &p, 0.1, 0.1).unwrap(), w);
        let c = emb("c", rand_mat(&mut rng, 5, 2));
        let t = ConceptTask::new("t", c.clone(), c).unwrap();
        assert_eq!(uce_edit(&w, &[t], &p, 0.1, 0.1).unwrap(), w);
    }

    #[test]
    fn zero_source_is_a_no_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = pm("W", rand_mat(&mut rng, 6, 5));
        let t = ConceptTask::new(
            "zero",
            Embedding::zeros("z", 5, 1),
            emb("dest", rand_mat(&mut rng, 5, 1)),
        )
        .unwrap();
        let coeffs = EditCoefficients::new(5, &[t], &[], 0.1, 0.1).unwrap();
        assert!(coeffs.is_identity());
        assert_eq!(coeffs.apply(&w).unwrap(), w);
    }

    #[test]
    fn singular_denominator_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w = pm("W", rand_mat(&mut rng, 3, 4));
        let t = ConceptTask::new(
            "t",
            emb("c", rand_mat(&mut rng, 4, 1)),
            emb("d", rand_mat(&mut rng, 4, 1)),
        )
        .unwrap();
        match uce_edit(&w, &[t], &[], 0.0, 0.0) {
            Err(Error::Singular { dim: 4, rank: 1, .. }) => {}
            other => panic!("expected singular error, got {other:?}"),
        }
    }

    #[test]
    fn unconstrained_full_rank_edit_interpolates() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = 3;
        let w = pm("W", rand_mat(&mut rng, 4, d));
        let c = emb("c", rand_mat(&mut rng, d, d));
        let cs = emb("cs", rand_mat(&mut rng, d, d));
        let t = ConceptTask::new("t", c.clone(), cs.clone()).unwrap();
        let edited = uce_edit(&w, &[t], &[], 0.0, 0.0).unwrap();
        let resid = edited.weight() * c.data() - w.weight() * cs.data();
        assert!(resid.amax() < 1e-9);
    }

    #[test]
    fn layer_set_matches_per_layer_edit() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let d = 6;
        let layers: Vec<_> = (0..4)
            .map(|i| pm(&format!("l{i}"), rand_mat(&mut rng, 3 + i, d)))
            .collect();
        let set = AttentionLayerSet::new(layers).unwrap();
        let t = ConceptTask::new(
            "t",
            emb("c", rand_mat(&mut rng, d, 1)),
            emb("cs", rand_mat(&mut rng, d, 1)),
        )
        .unwrap();
        let p = vec![emb("p", rand_mat(&mut rng, d, 1))];
        let edited = edit_layer_set(&set, std::slice::from_ref(&t), &p, 0.1, 0.1).unwrap();
        for (e, orig) in edited.layers().iter().zip(set.layers()) {
            let single = uce_edit(orig, std::slice::from_ref(&t), &p, 0.1, 0.1).unwrap();
            assert_eq!(e, &single);
        }
        assert_eq!(edit_layer_set(&set, &[], &p, 0.1, 0.1).unwrap(), set);
    }

    #[test]
    fn drift_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = rand_mat(&mut rng, 4, 3);
        let b = rand_mat(&mut rng, 4, 3);
        let d = rand_mat(&mut rng, 3, 2);
        let (wa, wb, de) = (pm("a", a.clone()), pm("b", b.clone()), emb("d", d.clone()));
        assert_eq!(drift(&wa, &wa, &de).unwrap(), 0.0);
        let diff = naive_matmul(&a, &d) - naive_matmul(&b, &d);
        let expected: f64 = diff.iter().map(|v| v * v).sum();
        assert!((drift(&wa, &wb, &de).unwrap() - expected).abs() < 1e-12 * expected.max(1.0));
    }
}
