//! Line-delimited JSON reports. Every record is written and flushed on its
//! own, so an interrupted run leaves a parsable prefix.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use kvedit_core::{BoundReport, DerivationResult, EpochReport, Error};
use serde::Serialize;

use crate::error::io_error;

pub struct ReportWriter {
    path: PathBuf,
    file: Option<File>,
}

impl ReportWriter {
    /// A writer that discards records when `path` is `None`.
    pub fn create(path: Option<&Path>) -> Result<Self, Error> {
        let file = path
            .map(|p| File::create(p).map_err(|e| io_error(p, e)))
            .transpose()?;
        Ok(Self {
            path: path.map(Path::to_owned).unwrap_or_default(),
            file,
        })
    }

    pub fn record<T: Serialize>(&mut self, record: &T) -> Result<(), Error> {
        let Some(file) = &mut self.file else {
            return Ok(());
        };
        let mut line = serde_json::to_vec(record).expect("report records serialize");
        line.push(b'\n');
        file.write_all(&line)
            .and_then(|()| file.flush())
            .map_err(|e| io_error(&self.path, e))
    }
}

#[derive(Serialize)]
pub struct TaskLine<'a> {
    pub label: &'a str,
    pub c_prime_norm: Option<f64>,
    /// Derivation objective at the derived embedding.
    pub residual: Option<f64>,
    pub erasure_residual: f64,
}

#[derive(Serialize)]
pub struct DriftLine<'a> {
    pub probe: &'a str,
    pub drift: f64,
}

#[derive(Serialize)]
pub struct EpochRecord<'a> {
    pub epoch: usize,
    pub task: Vec<TaskLine<'a>>,
    pub drift: Vec<DriftLine<'a>>,
    pub wall_time_s: f64,
    pub condition_estimate: f64,
    pub bound_chain: Option<&'a BoundReport>,
    pub warnings: &'a [String],
}

impl<'a> From<&'a EpochReport> for EpochRecord<'a> {
    fn from(r: &'a EpochReport) -> Self {
        Self {
            epoch: r.epoch,
            task: r
                .tasks
                .iter()
                .map(|t| TaskLine {
                    label: &t.label,
                    c_prime_norm: t.c_prime_norm,
                    residual: t.derivation_residual,
                    erasure_residual: t.erasure_residual,
                })
                .collect(),
            drift: r.drift.iter().map(|(p, d)| DriftLine { probe: p, drift: *d }).collect(),
            wall_time_s: r.wall_time_s,
            condition_estimate: r.condition_estimate,
            bound_chain: r.bound_chain.as_ref(),
            warnings: &r.warnings,
        }
    }
}

#[derive(Serialize)]
pub struct DerivationRecord<'a> {
    pub concept: &'a str,
    pub c_prime_norm: f64,
    /// Derivation objective at the derived embedding.
    pub residual: f64,
    #[serde(flatten)]
    pub result: &'a DerivationResult,
}

#[derive(Serialize)]
pub struct BoundRecord<'a> {
    pub epoch: usize,
    pub snapshot: &'a str,
    #[serde(flatten)]
    pub bounds: &'a BoundReport,
    pub violations: Vec<&'static str>,
}
