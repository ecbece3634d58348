//! Iterative erasure: an initial closed-form edit followed by epochs that
//! each derive the embeddings still carrying the erased concepts and erase
//! those too.
//!
//! Epoch 0 edits the original weights with the original tasks. Epoch `t`
//! derives `c_i'` against the original weights and the epoch `t - 1`
//! weights, pairs each with its task's original destination, and edits the
//! epoch `t - 1` weights. The original weights only ever appear inside the
//! derivation.

use std::time::Instant;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::bounds::{bound_chain_set, BoundReport};
use crate::derivation::{gram, Deriver};
use crate::edit::{set_drift, EditCoefficients};
use crate::error::{Error, Result};
use crate::linalg::tr_mul;
use crate::model::{AttentionLayerSet, ConceptTask, EditConfig, Embedding};

/// What to erase, what to keep, and which unrelated concepts to watch.
#[derive(Debug, Clone)]
pub struct EraseSpec {
    pub tasks: Vec<ConceptTask>,
    pub preserve: Vec<Embedding>,
    /// Unrelated concepts whose drift is reported each epoch.
    pub probes: Vec<Embedding>,
}

impl EraseSpec {
    pub fn new(tasks: Vec<ConceptTask>, preserve: Vec<Embedding>) -> Self {
        Self {
            tasks,
            preserve,
            probes: Vec::new(),
        }
    }

    pub fn with_probes(mut self, probes: Vec<Embedding>) -> Self {
        self.probes = probes;
        self
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::InvalidConfig("erase spec has no tasks".into()));
        }
        for t in &self.tasks {
            if t.dim() != dim {
                return Err(Error::dims(format!("erase task `{}`", t.label()), dim, t.dim()));
            }
        }
        for e in self.preserve.iter().chain(&self.probes) {
            if e.dim() != dim {
                return Err(Error::dims(format!("embedding `{}`", e.label()), dim, e.dim()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskRecord {
    pub label: String,
    /// Norm of the derived embedding erased this epoch; absent at epoch 0.
    pub c_prime_norm: Option<f64>,
    /// Derivation objective at the derived embedding; absent at epoch 0.
    pub derivation_residual: Option<f64>,
    /// `|W_new c - W_old c*|` over all layers after this epoch's edit.
    pub erasure_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub tasks: Vec<TaskRecord>,
    /// Drift of each probe between the previous and the new weights.
    pub drift: Vec<(String, f64)>,
    pub bound_chain: Option<BoundReport>,
    pub wall_time_s: f64,
    pub condition_estimate: f64,
    pub warnings: Vec<String>,
}

/// `sqrt(sum_i |W_i^new c - W_i^old c*|^2)`.
pub fn erasure_residual(
    edited: &AttentionLayerSet,
    original: &AttentionLayerSet,
    task: &ConceptTask,
) -> Result<f64> {
    edited.check_aligned(original)?;
    edited.check_embedding(task.source(), "erase task")?;
    let dest = task.matched_destination();
    let sq: f64 = edited
        .layers()
        .iter()
        .zip(original.layers())
        .map(|(n, o)| (n.weight() * task.source().data() - o.weight() * &dest).norm_squared())
        .sum();
    Ok(sq.sqrt())
}

/// State of an erase run between epochs.
pub struct EraseRun {
    original: AttentionLayerSet,
    current: AttentionLayerSet,
    /// `sum_i W_i^T W_i` of `current`.
    current_gram: DMatrix<f64>,
    spec: EraseSpec,
    config: EditConfig,
    epoch: usize,
    last_residuals: Vec<Option<f64>>,
}

impl EraseRun {
    /// Runs the initial edit (epoch 0).
    pub fn start(layers: &AttentionLayerSet, spec: EraseSpec, config: EditConfig) -> Result<(Self, EpochReport)> {
        config.validate()?;
        spec.validate(layers.embed_dim())?;
        let started = Instant::now();
        let coeffs = EditCoefficients::with_tolerance(
            layers.embed_dim(),
            &spec.tasks,
            &spec.preserve,
            config.lambda1,
            config.lambda2,
            config.solve_tol,
        )
        .map_err(|e| e.in_epoch(0, None))?;
        let current = coeffs.apply_set(layers)?;
        let original_gram = gram(layers);
        let current_gram = propagate_gram(&original_gram, &coeffs);

        let mut warnings: Vec<String> = coeffs.warning().map(str::to_owned).into_iter().collect();
        let tasks = spec
            .tasks
            .iter()
            .map(|t| {
                Ok(TaskRecord {
                    label: t.label().to_owned(),
                    c_prime_norm: None,
                    derivation_residual: None,
                    erasure_residual: erasure_residual(&current, layers, t)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let drift = probe_drift(&spec.probes, &current, layers)?;
        warnings.extend(spec.preserve.is_empty().then(|| "preserve set is empty".to_owned()));

        let report = EpochReport {
            epoch: 0,
            tasks,
            drift,
            bound_chain: None,
            wall_time_s: started.elapsed().as_secs_f64(),
            condition_estimate: coeffs.condition_estimate(),
            warnings,
        };
        let run = Self {
            original: layers.clone(),
            current,
            current_gram,
            last_residuals: vec![None; spec.tasks.len()],
            spec,
            config,
            epoch: 0,
        };
        Ok((run, report))
    }

    pub fn original(&self) -> &AttentionLayerSet {
        &self.original
    }

    pub fn current(&self) -> &AttentionLayerSet {
        &self.current
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn into_current(self) -> AttentionLayerSet {
        self.current
    }

    /// One derive-then-erase iteration. `epoch_index` must be the next epoch.
    pub fn epoch_step(&mut self, epoch_index: usize) -> Result<EpochReport> {
        if epoch_index != self.epoch + 1 {
            return Err(Error::InvalidConfig(format!(
                "epoch {epoch_index} requested after epoch {}",
                self.epoch
            )));
        }
        let started = Instant::now();
        let cfg = &self.config;
        let mut warnings = Vec::new();

        let deriver = Deriver::with_gram(
            &self.current,
            &self.original,
            cfg.lambda_reg,
            self.current_gram.clone(),
            cfg.solve_tol,
        )
        .map_err(|e| e.in_epoch(epoch_index, None))?;

        let mut derived_tasks = Vec::with_capacity(self.spec.tasks.len());
        let mut derivations = Vec::with_capacity(self.spec.tasks.len());
        for task in &self.spec.tasks {
            let result = deriver
                .derive(task.source())
                .map_err(|e| e.in_epoch(epoch_index, Some(task.label())))?;
            warnings.extend(result.warning.iter().map(|w| format!("{}: {w}", task.label())));
            derived_tasks.push(task.with_source(result.c_prime.clone())?);
            derivations.push(result);
        }
        drop(deriver);

        let coeffs = EditCoefficients::with_tolerance(
            self.current.embed_dim(),
            &derived_tasks,
            &self.spec.preserve,
            cfg.lambda1,
            cfg.lambda2,
            cfg.solve_tol,
        )
        .map_err(|e| e.in_epoch(epoch_index, None))?;
        warnings.extend(coeffs.warning().map(str::to_owned));

        let bound_chain = if cfg.track_bounds && !self.spec.probes.is_empty() {
            let pairs: Vec<(Embedding, Embedding)> = derived_tasks
                .iter()
                .map(|t| (t.source().clone(), t.destination().clone()))
                .collect();
            let probes = Embedding::hstack("probes", &self.spec.probes)?;
            let report = bound_chain_set(&self.current, &pairs, &self.spec.preserve, cfg.lambda1, cfg.lambda2, &probes)
                .map_err(|e| e.in_epoch(epoch_index, None))?;
            for link in report.violations() {
                warnings.push(format!("drift bound link violated: {link}"));
            }
            Some(report)
        } else {
            None
        };

        let next = coeffs.apply_set(&self.current)?;
        let next_gram = propagate_gram(&self.current_gram, &coeffs);

        let mut tasks = Vec::with_capacity(derivations.len());
        for ((task, result), last) in self
            .spec
            .tasks
            .iter()
            .zip(&derivations)
            .zip(self.last_residuals.iter_mut())
        {
            let residual = result.objective_value;
            if !residual.is_finite() {
                return Err(Error::Singular {
                    matrix: "derivation system A",
                    dim: self.current.embed_dim(),
                    rank: 0,
                }
                .in_epoch(epoch_index, Some(task.label())));
            }
            if let Some(prev) = *last {
                if prev > 0.0 && residual > 10.0 * prev {
                    warnings.push(format!(
                        "{}: derivation residual grew {:.1}x since the previous epoch",
                        task.label(),
                        residual / prev
                    ));
                }
            }
            *last = Some(residual);
            tasks.push(TaskRecord {
                label: task.label().to_owned(),
                c_prime_norm: Some(result.total_norm()),
                derivation_residual: Some(residual),
                erasure_residual: erasure_residual(&next, &self.original, task)?,
            });
        }
        let drift = probe_drift(&self.spec.probes, &next, &self.current)?;

        self.current = next;
        self.current_gram = next_gram;
        self.epoch = epoch_index;
        Ok(EpochReport {
            epoch: epoch_index,
            tasks,
            drift,
            bound_chain,
            wall_time_s: started.elapsed().as_secs_f64(),
            condition_estimate: coeffs.condition_estimate(),
            warnings,
        })
    }
}

/// Gram matrix of `W X` from the Gram matrix `G` of `W`. With
/// `X = I + Delta R^T` and `H = G Delta`,
/// `X^T G X = G + H R^T + R H^T + R (Delta^T H) R^T`.
fn propagate_gram(g: &DMatrix<f64>, coeffs: &EditCoefficients) -> DMatrix<f64> {
    match coeffs.low_rank() {
        None => g.clone(),
        Some((delta, right)) => {
            let h = g * delta;
            let core = tr_mul(delta, &h);
            let hr = &h * right.transpose();
            let full = g + &hr + hr.transpose() + right * core * right.transpose();
            // keep it exactly symmetric so the Cholesky path stays available
            (&full + full.transpose()) * 0.5
        }
    }
}

fn probe_drift(
    probes: &[Embedding],
    next: &AttentionLayerSet,
    prev: &AttentionLayerSet,
) -> Result<Vec<(String, f64)>> {
    probes
        .iter()
        .map(|p| Ok((p.label().to_owned(), set_drift(next, prev, p)?)))
        .collect()
}

/// Final weights, per-epoch reports and per-epoch snapshots (index = epoch).
#[derive(Debug, Clone)]
pub struct EraseOutput {
    pub final_set: AttentionLayerSet,
    pub reports: Vec<EpochReport>,
    pub snapshots: Vec<AttentionLayerSet>,
}

/// Runs all epochs, handing each epoch's weights and report to `observe`
/// as soon as they exist.
pub fn rece_erase_with<F>(
    layers: &AttentionLayerSet,
    spec: EraseSpec,
    config: EditConfig,
    mut observe: F,
) -> Result<(AttentionLayerSet, Vec<EpochReport>)>
where
    F: FnMut(&AttentionLayerSet, &EpochReport) -> Result<()>,
{
    let epochs = config.epochs;
    let (mut run, first) = EraseRun::start(layers, spec, config)?;
    observe(run.current(), &first)?;
    let mut reports = vec![first];
    for t in 1..=epochs {
        let report = run.epoch_step(t)?;
        observe(run.current(), &report)?;
        reports.push(report);
    }
    Ok((run.into_current(), reports))
}

pub fn rece_erase(layers: &AttentionLayerSet, spec: EraseSpec, config: EditConfig) -> Result<EraseOutput> {
    let mut snapshots = Vec::with_capacity(config.epochs + 1);
    let (final_set, reports) = rece_erase_with(layers, spec, config, |set, _| {
        snapshots.push(set.clone());
        Ok(())
    })?;
    Ok(EraseOutput {
        final_set,
        reports,
        snapshots,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskFidelity {
    pub label: String,
    /// `|W_old c - W_old c*|`, the residual before any edit.
    pub residual_before: f64,
    /// `|W_new c - W_old c*|`.
    pub residual_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerDistance {
    pub name: String,
    pub frobenius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FidelityReport {
    pub tasks: Vec<TaskFidelity>,
    pub drift: Vec<(String, f64)>,
    pub layers: Vec<LayerDistance>,
}

/// How well `edited` erases the spec's tasks and how much it moves `probes`.
pub fn fidelity_report(
    original: &AttentionLayerSet,
    edited: &AttentionLayerSet,
    spec: &EraseSpec,
    probes: &[Embedding],
) -> Result<FidelityReport> {
    original.check_aligned(edited)?;
    let tasks = spec
        .tasks
        .iter()
        .map(|t| {
            Ok(TaskFidelity {
                label: t.label().to_owned(),
                residual_before: erasure_residual(original, original, t)?,
                residual_after: erasure_residual(edited, original, t)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let drift = probe_drift(probes, edited, original)?;
    let layers = original
        .layers()
        .iter()
        .zip(edited.layers())
        .map(|(o, e)| LayerDistance {
            name: o.name().to_owned(),
            frobenius: (e.weight() - o.weight()).norm(),
        })
        .collect();
    Ok(FidelityReport { tasks, drift, layers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::derivation::{derivation_objective, derive_embedding};
    use crate::edit::{edit_layer_set, uce_edit};
    use crate::model::{ProjectionKind, ProjectionMatrix};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn layer_set(rng: &mut ChaCha8Rng, outs: &[usize], d: usize) -> AttentionLayerSet {
        AttentionLayerSet::new(
            outs.iter()
                .enumerate()
                .map(|(i, o)| {
                    let kind = if i % 2 == 0 { ProjectionKind::Key } else { ProjectionKind::Value };
                    ProjectionMatrix::new(format!("l{i}"), kind, rand_mat(rng, *o, d)).unwrap()
                })
                .collect(),
        )
        .unwrap()
    }

    fn spec(rng: &mut ChaCha8Rng, d: usize) -> EraseSpec {
        let task = ConceptTask::new(
            "nudity",
            Embedding::new("nudity", rand_mat(rng, d, 1)).unwrap(),
            Embedding::new("", rand_mat(rng, d, 1)).unwrap(),
        )
        .unwrap();
        EraseSpec::new(vec![task], vec![Embedding::new("keep", rand_mat(rng, d, 1)).unwrap()])
            .with_probes(vec![Embedding::new("probe", rand_mat(rng, d, 1)).unwrap()])
    }

    #[test]
    fn zero_epochs_is_a_plain_edit() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let set = layer_set(&mut rng, &[6, 6, 8], 5);
        let s = spec(&mut rng, 5);
        let cfg = EditConfig {
            epochs: 0,
            ..EditConfig::default()
        };
        let out = rece_erase(&set, s.clone(), cfg).unwrap();
        let plain = edit_layer_set(&set, &s.tasks, &s.preserve, 0.1, 0.1).unwrap();
        assert_eq!(out.final_set, plain);
        assert_eq!(out.reports.len(), 1);
        assert_eq!(out.snapshots.len(), 1);
    }

    #[test]
    fn zero_sources_leave_weights_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let set = layer_set(&mut rng, &[4, 4], 3);
        let task = ConceptTask::new(
            "z",
            Embedding::zeros("z", 3, 1),
            Embedding::new("d", rand_mat(&mut rng, 3, 1)).unwrap(),
        )
        .unwrap();
        let out = rece_erase(&set, EraseSpec::new(vec![task], vec![]), EditConfig::default()).unwrap();
        assert_eq!(out.final_set, set);
        assert!(out.snapshots.iter().all(|s| *s == set));
    }

    #[test]
    fn step_by_step_replay_matches() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let d = 16;
        let set = layer_set(&mut rng, &[20, 20, 24, 24], d);
        let s = spec(&mut rng, d);
        let cfg = EditConfig {
            epochs: 3,
            ..EditConfig::default()
        };
        let out = rece_erase(&set, s.clone(), cfg.clone()).unwrap();

        let mut current = edit_layer_set(&set, &s.tasks, &s.preserve, 0.1, 0.1).unwrap();
        assert_eq!(out.snapshots[0], current);
        for t in 1..=3 {
            let derived = derive_embedding(s.tasks[0].source(), &current, &set, cfg.lambda_reg).unwrap();
            let task = s.tasks[0].with_source(derived.c_prime).unwrap();
            let layers: Vec<_> = current
                .layers()
                .iter()
                .map(|l| uce_edit(l, std::slice::from_ref(&task), &s.preserve, 0.1, 0.1).unwrap())
                .collect();
            current = AttentionLayerSet::new(layers).unwrap();
            let diff = current.max_abs_diff(&out.snapshots[t]).unwrap();
            assert!(diff < 1e-9, "epoch {t}: {diff}");
        }
    }

    #[test]
    fn single_step_equals_one_epoch_run() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let set = layer_set(&mut rng, &[6, 7], 4);
        let s = spec(&mut rng, 4);
        let cfg = EditConfig {
            epochs: 1,
            ..EditConfig::default()
        };
        let out = rece_erase(&set, s.clone(), cfg.clone()).unwrap();
        let (mut run, _) = EraseRun::start(&set, s, cfg).unwrap();
        run.epoch_step(1).unwrap();
        assert_eq!(run.current(), &out.final_set);
        assert!(run.epoch_step(3).is_err());
    }

    #[test]
    fn huge_lambda_barely_moves_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let set = layer_set(&mut rng, &[6, 7], 4);
        let s = spec(&mut rng, 4);
        let cfg = EditConfig {
            lambda_reg: 1e12,
            ..EditConfig::default()
        };
        let (mut run, _) = EraseRun::start(&set, s, cfg).unwrap();
        let before = run.current().clone();
        run.epoch_step(1).unwrap();
        assert!(run.current().max_abs_diff(&before).unwrap() <= 1e-6);
    }

    #[test]
    fn reported_residual_matches_objective() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let set = layer_set(&mut rng, &[9, 9, 9], 6);
        let s = spec(&mut rng, 6);
        let cfg = EditConfig::default();
        let (mut run, _) = EraseRun::start(&set, s.clone(), cfg.clone()).unwrap();
        let before = run.current().clone();
        let report = run.epoch_step(1).unwrap();
        let derived = derive_embedding(s.tasks[0].source(), &before, &set, cfg.lambda_reg).unwrap();
        let external = derivation_objective(&derived.c_prime, s.tasks[0].source(), &before, &set, cfg.lambda_reg).unwrap();
        let got = report.tasks[0].derivation_residual.unwrap();
        assert!((got - external).abs() <= 1e-8 * external.max(1.0));
        let drift = set_drift(run.current(), &before, &s.probes[0]).unwrap();
        assert_eq!(report.drift[0].1, drift);
    }

    #[test]
    fn fidelity_of_identity_and_unconstrained_edit() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let set = layer_set(&mut rng, &[5], 3);
        let task = ConceptTask::new(
            "t",
            Embedding::new("c", rand_mat(&mut rng, 3, 1)).unwrap(),
            Embedding::new("d", rand_mat(&mut rng, 3, 1)).unwrap(),
        )
        .unwrap();
        let s = EraseSpec::new(vec![task.clone()], vec![]);
        let probe = Embedding::new("p", rand_mat(&mut rng, 3, 1)).unwrap();

        let same = fidelity_report(&set, &set, &s, std::slice::from_ref(&probe)).unwrap();
        assert_eq!(same.tasks[0].residual_after, same.tasks[0].residual_before);
        assert_eq!(same.drift[0].1, 0.0);

        // one rank-one constraint with lambdas at zero leaves D singular, so
        // use a full column set of constraints on the same destination
        let c = Embedding::new("c", rand_mat(&mut rng, 3, 3)).unwrap();
        let full = ConceptTask::new("t", c, task.destination().clone()).unwrap();
        let edited = AttentionLayerSet::new(vec![uce_edit(&set.layers()[0], std::slice::from_ref(&full), &[], 0.0, 0.0).unwrap()]).unwrap();
        let s = EraseSpec::new(vec![full], vec![]);
        let r = fidelity_report(&set, &edited, &s, std::slice::from_ref(&probe)).unwrap();
        assert!(r.tasks[0].residual_after <= 1e-8);
        assert_eq!(r.drift[0].1, set_drift(&edited, &set, &probe).unwrap());
    }
}
