use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use kvedit_core::certify::{run_suite, SuiteConfig};
use kvedit_core::{
    bound_chain_set, embeddings_file, layers_file, merge_back, model_stats, read_embeddings, rece_erase_with,
    select_cross_attention, AttentionLayerSet, ConceptTask, Deriver, Dtype, Embedding, EraseSpec,
    SelectionPattern, TensorFile,
};

use crate::config::{PatternArgs, RunArgs};
use crate::error::{io_error, CliError, Stage};
use crate::report::{BoundRecord, DerivationRecord, EpochRecord, ReportWriter};

/// Label of the empty-text embedding, the default destination.
pub const EMPTY_LABEL: &str = "";

struct Embeddings {
    by_label: BTreeMap<String, Embedding>,
}

impl Embeddings {
    fn load(path: &Path, slice: Option<(usize, usize)>) -> Result<Self, CliError> {
        let file = TensorFile::read(path).stage("embeddings")?;
        let mut by_label = read_embeddings(&file).stage("embeddings")?;
        if let Some((start, end)) = slice {
            for emb in by_label.values_mut() {
                if emb.tokens() > 1 {
                    *emb = emb.slice_tokens(start, end).stage("token slice")?;
                }
            }
        }
        Ok(Self { by_label })
    }

    fn get(&self, label: &str) -> Result<&Embedding, CliError> {
        self.by_label.get(label).ok_or_else(|| {
            CliError::Data(format!("embedding label `{label}` not found in the embeddings file"))
        })
    }

    fn all(&self, labels: &[String]) -> Result<Vec<Embedding>, CliError> {
        labels.iter().map(|l| self.get(l).cloned()).collect()
    }

    /// Pairs each erase label with its destination.
    fn tasks(&self, erase: &[String], destinations: &[String]) -> Result<Vec<ConceptTask>, CliError> {
        if erase.is_empty() {
            return Err(CliError::Usage("at least one --erase label is needed".into()));
        }
        let dest_for = |i: usize| -> Result<&str, CliError> {
            match destinations.len() {
                0 => Ok(EMPTY_LABEL),
                1 => Ok(&destinations[0]),
                n if n == erase.len() => Ok(&destinations[i]),
                n => Err(CliError::Usage(format!(
                    "{n} destination labels for {} erase labels; give one or one per erase label",
                    erase.len()
                ))),
            }
        };
        erase
            .iter()
            .enumerate()
            .map(|(i, label)| {
                let dest = self.get(dest_for(i)?)?;
                ConceptTask::new(label.clone(), self.get(label)?.clone(), dest.clone()).stage("erase task")
            })
            .collect()
    }
}

fn load_layers(path: &Path, pattern: &SelectionPattern) -> Result<(TensorFile, AttentionLayerSet), CliError> {
    let file = TensorFile::read(path).stage("checkpoint")?;
    let layers = select_cross_attention(&file, pattern).stage("checkpoint")?;
    Ok((file, layers))
}

fn snapshot_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch_{epoch:03}.safetensors"))
}

pub fn edit(args: RunArgs) -> Result<(), CliError> {
    let args = args.merged()?;
    let config = args.edit_config()?;
    let checkpoint = RunArgs::require(&args.checkpoint, "--checkpoint")?;
    let embeddings = RunArgs::require(&args.embeddings, "--embeddings")?;
    let output = RunArgs::require(&args.output, "--output")?;
    if config.track_bounds && args.probe.is_empty() {
        return Err(CliError::Usage("--track-bounds needs at least one --probe label".into()));
    }

    let embs = Embeddings::load(embeddings, args.token_range()?)?;
    let spec = EraseSpec::new(embs.tasks(&args.erase, &args.destination)?, embs.all(&args.preserve)?)
        .with_probes(embs.all(&args.probe)?);
    let (file, layers) = load_layers(checkpoint, &args.selection.pattern())?;

    if let Some(dir) = &args.snapshots {
        fs::create_dir_all(dir).map_err(|e| io_error(dir, e)).stage("snapshots")?;
    }
    let mut report = ReportWriter::create(args.report.as_deref()).stage("report")?;
    let (final_set, _) = rece_erase_with(&layers, spec, config, |set, epoch| {
        if let Some(dir) = &args.snapshots {
            layers_file(set, &file)?.write(snapshot_path(dir, epoch.epoch))?;
        }
        report.record(&EpochRecord::from(epoch))?;
        let residuals: Vec<String> = epoch
            .tasks
            .iter()
            .map(|t| format!("{} {:.4e}", t.label, t.erasure_residual))
            .collect();
        println!(
            "epoch {}: erasure residual [{}], {:.2} s",
            epoch.epoch,
            residuals.join(", "),
            epoch.wall_time_s
        );
        for w in &epoch.warnings {
            eprintln!("warning: epoch {}: {w}", epoch.epoch);
        }
        Ok(())
    })
    .stage("edit")?;

    merge_back(&final_set, &file).and_then(|f| f.write(output)).stage("output")?;
    println!("wrote {}", output.display());
    Ok(())
}

pub fn derive(args: RunArgs) -> Result<(), CliError> {
    let args = args.merged()?;
    let config = args.edit_config()?;
    let original = RunArgs::require(&args.checkpoint, "--checkpoint")?;
    let edited = RunArgs::require(&args.edited, "--edited")?;
    let embeddings = RunArgs::require(&args.embeddings, "--embeddings")?;
    let output = RunArgs::require(&args.output, "--output")?;
    if args.erase.is_empty() {
        return Err(CliError::Usage("at least one --erase label is needed".into()));
    }

    let embs = Embeddings::load(embeddings, args.token_range()?)?;
    let pattern = args.selection.pattern();
    let (_, old) = load_layers(original, &pattern)?;
    let (_, new) = load_layers(edited, &pattern)?;
    let deriver = Deriver::new(&new, &old, config.lambda_reg).stage("derive")?;

    let mut report = ReportWriter::create(args.report.as_deref()).stage("report")?;
    let mut derived = Vec::with_capacity(args.erase.len());
    for label in &args.erase {
        let result = deriver.derive(embs.get(label)?).stage("derive")?;
        report
            .record(&DerivationRecord {
                concept: label,
                c_prime_norm: result.total_norm(),
                residual: result.objective_value,
                result: &result,
            })
            .stage("report")?;
        println!(
            "{label}: |c'| = {:.6e}, residual {:.6e}",
            result.total_norm(),
            result.objective_value
        );
        if let Some(w) = &result.warning {
            eprintln!("warning: {label}: {w}");
        }
        derived.push(result.c_prime.with_label(label.clone()));
    }
    embeddings_file(&derived, Dtype::F64)
        .and_then(|f| f.write(output))
        .stage("output")?;
    println!("wrote {}", output.display());
    Ok(())
}

pub fn bounds(args: RunArgs) -> Result<(), CliError> {
    let args = args.merged()?;
    let config = args.edit_config()?;
    let checkpoint = RunArgs::require(&args.checkpoint, "--checkpoint")?;
    let embeddings = RunArgs::require(&args.embeddings, "--embeddings")?;
    let dir = RunArgs::require(&args.snapshots, "--snapshots")?;
    if args.probe.is_empty() {
        return Err(CliError::Usage("at least one --probe label is needed".into()));
    }

    let embs = Embeddings::load(embeddings, args.token_range()?)?;
    let tasks = embs.tasks(&args.erase, &args.destination)?;
    let preserve = embs.all(&args.preserve)?;
    let probes = Embedding::hstack("probes", &embs.all(&args.probe)?).stage("probes")?;
    let pattern = args.selection.pattern();
    let (_, original) = load_layers(checkpoint, &pattern)?;

    let snapshots = list_snapshots(dir)?;
    if snapshots.len() < 2 {
        return Err(CliError::Data(format!(
            "{} holds {} snapshot(s); at least two consecutive epochs are needed",
            dir.display(),
            snapshots.len()
        )));
    }

    let mut report = ReportWriter::create(args.report.as_deref()).stage("report")?;
    let mut failed = Vec::new();
    for pair in snapshots.windows(2) {
        let (_, ref path) = pair[0];
        let (epoch, _) = pair[1];
        let (_, current) = load_layers(path, &pattern)?;
        let deriver = Deriver::new(&current, &original, config.lambda_reg).stage("bounds")?;
        let erase = tasks
            .iter()
            .map(|t| Ok((deriver.derive(t.source())?.c_prime, t.destination().clone())))
            .collect::<Result<Vec<_>, _>>()
            .stage("bounds")?;
        let bounds = bound_chain_set(&current, &erase, &preserve, config.lambda1, config.lambda2, &probes)
            .stage("bounds")?;
        let violations = bounds.violations();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        report
            .record(&BoundRecord {
                epoch,
                snapshot: name,
                bounds: &bounds,
                violations: violations.clone(),
            })
            .stage("report")?;
        println!(
            "epoch {epoch}: F = {:.4e}, F1 = {:.4e}, F2 = {:.4e}, F3 = {:.4e}, F3 upper = {:.4e}: {}",
            bounds.f,
            bounds.f1,
            bounds.f2,
            bounds.f3,
            bounds.f3_upper,
            if bounds.chain_ok { "chain holds" } else { "chain violated" }
        );
        for v in violations {
            failed.push(format!("epoch {epoch}: {v}"));
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verification(failed.join("; ")))
    }
}

/// `(epoch, path)` of every `epoch_NNN.safetensors` in `dir`, by epoch.
fn list_snapshots(dir: &Path) -> Result<Vec<(usize, PathBuf)>, CliError> {
    let entries = fs::read_dir(dir).map_err(|e| io_error(dir, e)).stage("snapshots")?;
    let mut found = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| io_error(dir, e)).stage("snapshots")?.path();
        let epoch = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("epoch_"))
            .and_then(|n| n.strip_suffix(".safetensors"))
            .and_then(|n| n.parse::<usize>().ok());
        if let Some(epoch) = epoch {
            found.push((epoch, path));
        }
    }
    found.sort();
    for pair in found.windows(2) {
        if pair[1].0 != pair[0].0 + 1 {
            return Err(CliError::Data(format!(
                "snapshots skip from epoch {} to {}",
                pair[0].0, pair[1].0
            )));
        }
    }
    Ok(found)
}

pub fn verify(cases: usize, seed: u64, inject_fault: bool) -> Result<(), CliError> {
    let summary = run_suite(&SuiteConfig {
        seed,
        cases,
        inject_fault,
    })
    .stage("verify")?;
    for p in &summary.properties {
        let verdict = match (p.informational, p.failed) {
            (true, _) => "info",
            (false, 0) => "pass",
            (false, _) => "FAIL",
        };
        println!(
            "{verdict} {}: {}/{} passed (worst {:.3e})",
            p.name,
            p.passed,
            p.total(),
            p.worst
        );
    }
    if summary.all_passed() {
        println!("verify: all properties passed over {} cases", summary.cases);
        Ok(())
    } else {
        let failing: Vec<&str> = summary
            .properties
            .iter()
            .filter(|p| !p.informational && p.failed > 0)
            .map(|p| p.name)
            .collect();
        Err(CliError::Verification(failing.join("; ")))
    }
}

pub fn info(path: &Path, selection: &PatternArgs) -> Result<(), CliError> {
    let file = TensorFile::read_header(path).stage("info")?;
    let stats = model_stats(&file, &selection.pattern());
    println!("tensors: {}", file.tensors().len());
    println!("parameters: {}", stats.total_params);
    println!("selected tensors: {}", stats.selected_tensors);
    println!("selected parameters: {}", stats.selected_params);
    println!("selected fraction: {:.4} ({:.2}%)", stats.fraction, 100.0 * stats.fraction);
    Ok(())
}

