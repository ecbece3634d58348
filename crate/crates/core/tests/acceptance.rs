//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::process::ExitCode;
use std::time::Instant;

use kvedit_core::certify::{
    random_bound_instance, random_derivation_instance, random_uce_instance, GAP_TOL, ORACLE_GRAD_TOL,
    ORACLE_MAX_ITERS, RIDGE_GRID,
};
use kvedit_core::synthetic::{synthetic_sd_checkpoint, SD_TEXT_DIM};
use kvedit_core::{
    bound_chain, compare, derivation_gradient, derivation_objective, derive_embedding, drift, merge_back,
    oracle_derive, oracle_uce_edit, rece_erase, select_cross_attention, uce_edit, uce_objective,
    AttentionLayerSet, ConceptTask, Dtype, EditCoefficients, EditConfig, Embedding, EraseRun, EraseSpec,
    ProjectionKind, ProjectionMatrix, SelectionPattern, TensorFile,
};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Gate {
    failed: Vec<&'static str>,
}

impl Gate {
    fn report(&mut self, name: &'static str, ok: bool, detail: String) {
        println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            self.failed.push(name);
        }
    }
}

fn uniform(rng: &mut impl Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

fn emb(rng: &mut impl Rng, label: &str, d: usize, m: usize) -> Embedding {
    Embedding::new(label, uniform(rng, d, m)).unwrap()
}

fn edit_certification(gate: &mut Gate) {
    let mut rng = ChaCha8Rng::seed_from_u64(301);
    let start = Instant::now();
    let (mut bad, mut worst_gap, mut worst_obj) = (0, 0.0f64, f64::NEG_INFINITY);
    for _ in 0..500 {
        let inst = random_uce_instance(&mut rng, 16, 32, 3, &[0.01, 0.1, 1.0]);
        let closed = uce_edit(&inst.w_old, &inst.erase, &inst.preserve, inst.lambda1, inst.lambda2).unwrap();
        let oracle = oracle_uce_edit(
            &inst.w_old,
            &inst.erase,
            &inst.preserve,
            inst.lambda1,
            inst.lambda2,
            ORACLE_GRAD_TOL,
            ORACLE_MAX_ITERS,
        )
        .unwrap();
        let cmp = compare(closed.weight(), &oracle, GAP_TOL);
        let obj =
            uce_objective(&closed, &inst.w_old, &inst.erase, &inst.preserve, inst.lambda1, inst.lambda2).unwrap();
        let excess = (obj - oracle.objective) / (1.0 + oracle.objective.abs());
        worst_gap = worst_gap.max(cmp.gap);
        worst_obj = worst_obj.max(excess);
        if !cmp.passed || excess > 1e-9 {
            bad += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    gate.report(
        "edit closed form vs oracle (500 instances)",
        bad == 0 && secs <= 60.0,
        format!(
            "{bad} failures, worst gap {worst_gap:.2e} (tol {GAP_TOL:.0e}), worst scaled objective excess \
             {worst_obj:.2e} (tol 1e-9), {secs:.1} s (limit 60 s)"
        ),
    );
}

fn derivation_certification(gate: &mut Gate) {
    let mut rng = ChaCha8Rng::seed_from_u64(302);
    let (mut bad_gap, mut bad_grad, mut bad_fd) = (0, 0, 0);
    let (mut worst_gap, mut worst_grad, mut worst_fd) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..500 {
        let inst = random_derivation_instance(&mut rng, 4, 16, &[0.0, 1e-3, 0.1, 1.0]).unwrap();
        let (c, new, old, lam) = (&inst.c, &inst.new_set, &inst.old_set, inst.lambda);
        let closed = derive_embedding(c, new, old, lam).unwrap();
        let oracle = oracle_derive(c, new, old, lam, ORACLE_GRAD_TOL, ORACLE_MAX_ITERS).unwrap();
        let cmp = compare(closed.c_prime.data(), &oracle, GAP_TOL);
        worst_gap = worst_gap.max(cmp.gap);
        bad_gap += usize::from(!cmp.passed);

        let g = derivation_gradient(&closed.c_prime, c, new, old, lam).unwrap();
        let ratio = g.amax() / (1e-8 * (1.0 + c.frobenius_norm()));
        worst_grad = worst_grad.max(ratio);
        bad_grad += usize::from(ratio > 1.0);

        // central differences at a random point away from the optimum
        let x = uniform(&mut rng, c.dim(), c.tokens());
        let at = Embedding::new("x", x.clone()).unwrap();
        let analytic = derivation_gradient(&at, c, new, old, lam).unwrap();
        let h = 1e-5;
        let fd = DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| {
            let mut plus = x.clone();
            let mut minus = x.clone();
            plus[(i, j)] += h;
            minus[(i, j)] -= h;
            let fp = derivation_objective(&Embedding::new("+", plus).unwrap(), c, new, old, lam).unwrap();
            let fm = derivation_objective(&Embedding::new("-", minus).unwrap(), c, new, old, lam).unwrap();
            (fp - fm) / (2.0 * h)
        });
        let rel = (&fd - &analytic).norm() / analytic.norm().max(1e-300);
        worst_fd = worst_fd.max(rel);
        bad_fd += usize::from(rel > 1e-4);
    }
    gate.report(
        "derivation closed form vs oracle (500 instances)",
        bad_gap == 0,
        format!("{bad_gap} failures, worst gap {worst_gap:.2e} (tol {GAP_TOL:.0e})"),
    );
    gate.report(
        "derivation gradient vanishes at the solution",
        bad_grad == 0,
        format!("{bad_grad} failures, worst max-norm / (1e-8 (1 + |c|)) = {worst_grad:.2e}"),
    );
    gate.report(
        "derivation gradient matches finite differences",
        bad_fd == 0,
        format!("{bad_fd} failures, worst relative error {worst_fd:.2e} (tol 1e-4)"),
    );
}

fn identity_suite(gate: &mut Gate) {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let inst = random_uce_instance(&mut rng, 16, 32, 3, &[0.01, 0.1, 1.0]);
        let (l1, l2) = (inst.lambda1, inst.lambda2);
        let fixed: Vec<ConceptTask> = inst
            .erase
            .iter()
            .map(|t| ConceptTask::new(t.label(), t.source().clone(), t.source().clone()).unwrap())
            .collect();
        let zero: Vec<ConceptTask> = inst
            .erase
            .iter()
            .map(|t| t.with_source(Embedding::zeros("0", t.dim(), t.source().tokens())).unwrap())
            .collect();
        for tasks in [&[][..], &fixed[..], &zero[..]] {
            let w = uce_edit(&inst.w_old, tasks, &inst.preserve, l1, l2).unwrap();
            worst = worst.max((w.weight() - inst.w_old.weight()).amax());
        }
    }
    gate.report(
        "identity edits (empty, c* = c, zero source)",
        worst <= 1e-12,
        format!("max elementwise deviation {worst:.2e} over 600 edits (tol 1e-12)"),
    );
}

fn zero_derived_drift(gate: &mut Gate) {
    let mut rng = ChaCha8Rng::seed_from_u64(304);
    let d = 12;
    let w1 = ProjectionMatrix::new("w1", ProjectionKind::Key, uniform(&mut rng, 20, d)).unwrap();
    let tasks = vec![
        ConceptTask::new("t0", Embedding::zeros("c0'", d, 1), emb(&mut rng, "c0*", d, 1)).unwrap(),
        ConceptTask::new("t1", Embedding::zeros("c1'", d, 3), emb(&mut rng, "c1*", d, 3)).unwrap(),
    ];
    let preserve = vec![emb(&mut rng, "p", d, 1)];
    let coeffs = EditCoefficients::new(d, &tasks, &preserve, 0.1, 0.1).unwrap();
    let w2 = coeffs.apply(&w1).unwrap();
    let nonzero = (0..100)
        .filter(|_| drift(&w2, &w1, &emb(&mut rng, "d", d, 1)).unwrap() != 0.0)
        .count();
    gate.report(
        "zero derived embedding gives zero drift (100 probes)",
        nonzero == 0,
        format!("{nonzero} probes with non-zero drift"),
    );
}

fn bound_chain_gate(gate: &mut Gate) {
    let mut rng = ChaCha8Rng::seed_from_u64(305);
    let settings = [(0.1, 0.1), (1.0, 0.0), (0.0, 0.1), (1.0, 1.0), (0.0, 0.0), (0.1, 1.0)];
    let mut per_link = [0usize; 4];
    let (mut violated, mut triangle_violated) = (0, 0);
    for i in 0..1000 {
        let (l1, l2) = settings[i % settings.len()];
        let b = random_bound_instance(&mut rng, l1, l2);
        let r = bound_chain(&b.w_new1, &b.erase, &b.preserve, b.lambda1, b.lambda2, &b.d_emb).unwrap();
        violated += usize::from(!r.chain_ok);
        triangle_violated += usize::from(!r.triangle_chain_ok);
        let names = r.links().map(|l| l.0);
        for v in r.violations() {
            per_link[names.iter().position(|n| *n == v).unwrap()] += 1;
        }
    }
    gate.report(
        "drift bound chain (1000 instances)",
        violated == 0,
        format!(
            "{violated} instances with chain_ok = false; violations per link {per_link:?}; \
             with the triangle bound on F3 the chain fails on {triangle_violated}"
        ),
    );
}

fn ridge_monotonicity(gate: &mut Gate) {
    let mut rng = ChaCha8Rng::seed_from_u64(306);
    let mut bad = 0;
    for _ in 0..200 {
        let inst = random_derivation_instance(&mut rng, 4, 16, &[0.0]).unwrap();
        let norms: Vec<f64> = RIDGE_GRID
            .iter()
            .map(|l| derive_embedding(&inst.c, &inst.new_set, &inst.old_set, *l).unwrap().total_norm())
            .collect();
        bad += usize::from(norms.windows(2).any(|w| w[1] > w[0]));
    }
    gate.report(
        "derived norm non-increasing in lambda (200 instances)",
        bad == 0,
        format!("{bad} violations over grid {RIDGE_GRID:?}"),
    );
}

fn random_problem(rng: &mut ChaCha8Rng) -> (AttentionLayerSet, EraseSpec) {
    let d = rng.random_range(2..=10);
    let layers = (0..rng.random_range(1..=4))
        .map(|i| {
            let kind = if i % 2 == 0 { ProjectionKind::Key } else { ProjectionKind::Value };
            let out = rng.random_range(d..=2 * d + 4);
            ProjectionMatrix::new(format!("l{i}"), kind, uniform(rng, out, d)).unwrap()
        })
        .collect();
    let tasks = (0..rng.random_range(1..=2))
        .map(|i| {
            let m = rng.random_range(1..=3);
            ConceptTask::new(format!("t{i}"), emb(rng, "c", d, m), emb(rng, "c*", d, 1)).unwrap()
        })
        .collect();
    let preserve = (0..rng.random_range(0..=2)).map(|_| emb(rng, "p", d, 1)).collect();
    (AttentionLayerSet::new(layers).unwrap(), EraseSpec::new(tasks, preserve))
}

fn fold_law(gate: &mut Gate) {
    let mut rng = ChaCha8Rng::seed_from_u64(307);
    let config = EditConfig {
        epochs: 3,
        ..EditConfig::unsafe_content()
    };
    let mut bad = 0;
    for _ in 0..50 {
        let (layers, spec) = random_problem(&mut rng);
        let out = rece_erase(&layers, spec.clone(), config.clone()).unwrap();
        let (mut run, _) = EraseRun::start(&layers, spec, config.clone()).unwrap();
        let mut manual = vec![run.current().clone()];
        for t in 1..=3 {
            run.epoch_step(t).unwrap();
            manual.push(run.current().clone());
        }
        bad += usize::from(out.snapshots != manual || out.final_set != manual[3]);
    }
    gate.report(
        "epoch loop equals manual step composition, T = 3 (50 instances)",
        bad == 0,
        format!("{bad} instances differ bitwise"),
    );
}

fn sd_timing(gate: &mut Gate) {
    let file = synthetic_sd_checkpoint(308, SD_TEXT_DIM, Dtype::F32).unwrap();
    let layers = select_cross_attention(&file, &SelectionPattern::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(308);
    let task = ConceptTask::new(
        "nudity",
        emb(&mut rng, "c", SD_TEXT_DIM, 1),
        emb(&mut rng, "c*", SD_TEXT_DIM, 1),
    )
    .unwrap();
    let spec = EraseSpec::new(vec![task], vec![emb(&mut rng, "p", SD_TEXT_DIM, 1)]);
    let start = Instant::now();
    let out = rece_erase(&layers, spec, EditConfig::unsafe_content()).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let epochs = out.reports.len();
    gate.report(
        "unsafe preset on SD-scale weights within 10 s",
        epochs == 6 && layers.len() == 32 && secs <= 10.0,
        format!("{epochs} epochs over {} matrices in {secs:.2} s (limit 10 s)", layers.len()),
    );
}

fn fixture(rng: &mut ChaCha8Rng, index: usize) -> TensorFile {
    let dtypes = [Dtype::F16, Dtype::BF16, Dtype::F32, Dtype::F64];
    let dtype = dtypes[index % dtypes.len()];
    let d = rng.random_range(2..=24);
    let mut tensors = Vec::new();
    for b in 0..rng.random_range(1..=4) {
        for proj in ["to_k", "to_v"] {
            let out = rng.random_range(1..=40);
            let values = (0..out * d).map(|_| rng.random_range(-1.0..1.0)).collect();
            tensors.push((format!("blocks.{b}.attn2.{proj}.weight"), dtype, vec![out, d], values));
        }
        let n = rng.random_range(1..=30);
        let values = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        tensors.push((format!("blocks.{b}.norm.weight"), dtype, vec![n], values));
    }
    let metadata = (index % 2 == 0).then(|| [("format".to_owned(), "pt".to_owned())].into_iter().collect());
    TensorFile::from_tensors(tensors, metadata).unwrap()
}

fn file_round_trip(gate: &mut Gate) {
    let mut rng = ChaCha8Rng::seed_from_u64(309);
    let dir = tempfile::tempdir().unwrap();
    let pattern = SelectionPattern::default();
    let (mut bad_trip, mut bad_merge, mut bad_diff) = (0, 0, 0);
    for i in 0..20 {
        let file = fixture(&mut rng, i);
        let path = dir.path().join(format!("f{i}.safetensors"));
        file.write(&path).unwrap();
        let back = TensorFile::read(&path).unwrap();
        bad_trip += usize::from(!back.tensor_eq(&file));

        let layers = select_cross_attention(&back, &pattern).unwrap();
        let merged = merge_back(&layers, &back).unwrap();
        bad_merge += usize::from(merged.to_bytes() != back.to_bytes());

        // a real edit may only touch the payload ranges of selected tensors
        let d = layers.embed_dim();
        let task = ConceptTask::new("t", emb(&mut rng, "c", d, 1), emb(&mut rng, "c*", d, 1)).unwrap();
        let coeffs = EditCoefficients::new(d, &[task], &[], 0.1, 0.1).unwrap();
        let edited = merge_back(&coeffs.apply_set(&layers).unwrap(), &back).unwrap();
        let selected: Vec<(usize, usize)> = back
            .tensors()
            .iter()
            .filter(|(name, _)| pattern.classify(name).is_some())
            .map(|(_, info)| info.data_offsets)
            .collect();
        let (a, b) = (back.to_bytes(), edited.to_bytes());
        let header = a.len() - back.payload().len();
        let stray = a.len() != b.len()
            || a[..header] != b[..header]
            || a[header..]
                .iter()
                .zip(&b[header..])
                .enumerate()
                .any(|(k, (x, y))| x != y && !selected.iter().any(|(s, e)| (*s..*e).contains(&k)));
        let changed = a != b;
        bad_diff += usize::from(stray || !changed);
    }
    gate.report(
        "tensor file round trip (20 fixtures)",
        bad_trip == 0 && bad_merge == 0 && bad_diff == 0,
        format!(
            "{bad_trip} content mismatches, {bad_merge} non-identity empty merges, \
             {bad_diff} edits touching bytes outside selected tensors"
        ),
    );
}

fn main() -> ExitCode {
    let mut gate = Gate { failed: Vec::new() };
    edit_certification(&mut gate);
    derivation_certification(&mut gate);
    identity_suite(&mut gate);
    zero_derived_drift(&mut gate);
    bound_chain_gate(&mut gate);
    ridge_monotonicity(&mut gate);
    fold_law(&mut gate);
    sd_timing(&mut gate);
    file_round_trip(&mut gate);
    if gate.failed.is_empty() {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {} failed: {}", gate.failed.len(), gate.failed.join("; "));
        ExitCode::FAILURE
    }
}
