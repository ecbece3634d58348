//! Command-line options, the optional TOML config file, and how they merge.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use kvedit_core::{EditConfig, SelectionPattern};
use serde::Deserialize;

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// lambda = 0.1, five epochs.
    Unsafe,
    /// lambda = 1e-3, ten epochs.
    Artistic,
    /// lambda = 0.1, five epochs unless overridden.
    Object,
    /// Every lambda and the epoch count must be given.
    Custom,
}

/// Which checkpoint tensors are edited. Lives under `[selection]` in a
/// config file.
#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatternArgs {
    /// Substring every selected tensor name must contain (repeatable).
    #[arg(long = "include", value_name = "SUBSTRING")]
    pub include: Vec<String>,
    /// Name suffix of key projections.
    #[arg(long)]
    pub key_suffix: Option<String>,
    /// Name suffix of value projections.
    #[arg(long)]
    pub value_suffix: Option<String>,
    /// Tensors are stored as `embed_dim x out`.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub transpose: Option<bool>,
}

impl PatternArgs {
    fn or(self, file: PatternArgs) -> Self {
        Self {
            include: if self.include.is_empty() { file.include } else { self.include },
            key_suffix: self.key_suffix.or(file.key_suffix),
            value_suffix: self.value_suffix.or(file.value_suffix),
            transpose: self.transpose.or(file.transpose),
        }
    }

    pub fn pattern(&self) -> SelectionPattern {
        let mut pattern = SelectionPattern::default();
        if !self.include.is_empty() {
            pattern.include = self.include.clone();
        }
        if let Some(s) = &self.key_suffix {
            pattern.key_suffix = s.clone();
        }
        if let Some(s) = &self.value_suffix {
            pattern.value_suffix = s.clone();
        }
        if let Some(t) = self.transpose {
            pattern.transpose = t;
        }
        pattern
    }
}

/// Options shared by `edit`, `derive` and `bounds`. Every option may also be
/// set in the config file; flags win.
#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunArgs {
    /// TOML file with defaults for any option below.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Input checkpoint (the original weights).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Edited checkpoint (`derive` only).
    #[arg(long)]
    pub edited: Option<PathBuf>,
    /// Tensor file of embeddings, one tensor per label.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Label of a concept to erase (repeatable).
    #[arg(long = "erase", value_name = "LABEL")]
    pub erase: Vec<String>,
    /// Label of a concept to preserve (repeatable).
    #[arg(long = "preserve", value_name = "LABEL")]
    pub preserve: Vec<String>,
    /// Destination label: one for all erase labels or one per erase label.
    /// Defaults to the empty-text embedding, label "".
    #[arg(long = "destination", value_name = "LABEL")]
    pub destination: Vec<String>,
    /// Label of an unrelated concept whose drift is reported (repeatable).
    #[arg(long = "probe", value_name = "LABEL")]
    pub probe: Vec<String>,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Weight of the preserve term.
    #[arg(long)]
    pub lambda1: Option<f64>,
    /// Weight of the closeness-to-original term.
    #[arg(long)]
    pub lambda2: Option<f64>,
    /// Ridge weight of the embedding derivation.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Number of derive-then-erase epochs after the initial edit.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Keep tokens `START:END` of every multi-token embedding.
    #[arg(long, value_name = "START:END")]
    pub token_slice: Option<String>,
    /// Compute the drift bound chain for every epoch (needs probes).
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub track_bounds: Option<bool>,
    /// Output file: the edited checkpoint (`edit`) or derived embeddings
    /// (`derive`).
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Directory of per-epoch snapshots.
    #[arg(long)]
    pub snapshots: Option<PathBuf>,
    /// Line-delimited JSON report.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[command(flatten)]
    #[serde(rename = "selection")]
    pub selection: PatternArgs,
}

fn or_vec(flag: Vec<String>, file: Vec<String>) -> Vec<String> {
    if flag.is_empty() {
        file
    } else {
        flag
    }
}

impl RunArgs {
    /// Fills options missing on the command line from the config file.
    pub fn merged(self) -> Result<Self, CliError> {
        let Some(path) = self.config.clone() else {
            return Ok(self);
        };
        let file = load_config(&path)?;
        Ok(Self {
            config: self.config,
            checkpoint: self.checkpoint.or(file.checkpoint),
            edited: self.edited.or(file.edited),
            embeddings: self.embeddings.or(file.embeddings),
            erase: or_vec(self.erase, file.erase),
            preserve: or_vec(self.preserve, file.preserve),
            destination: or_vec(self.destination, file.destination),
            probe: or_vec(self.probe, file.probe),
            preset: self.preset.or(file.preset),
            lambda1: self.lambda1.or(file.lambda1),
            lambda2: self.lambda2.or(file.lambda2),
            lambda: self.lambda.or(file.lambda),
            epochs: self.epochs.or(file.epochs),
            token_slice: self.token_slice.or(file.token_slice),
            track_bounds: self.track_bounds.or(file.track_bounds),
            output: self.output.or(file.output),
            snapshots: self.snapshots.or(file.snapshots),
            report: self.report.or(file.report),
            selection: self.selection.or(file.selection),
        })
    }

    pub fn edit_config(&self) -> Result<EditConfig, CliError> {
        let preset = self.preset.unwrap_or(Preset::Unsafe);
        let mut config = match preset {
            Preset::Unsafe | Preset::Custom => EditConfig::unsafe_content(),
            Preset::Artistic => EditConfig::artistic(),
            Preset::Object => EditConfig::object(),
        };
        if preset == Preset::Custom {
            let missing: Vec<&str> = [
                ("--lambda1", self.lambda1.is_none()),
                ("--lambda2", self.lambda2.is_none()),
                ("--lambda", self.lambda.is_none()),
                ("--epochs", self.epochs.is_none()),
            ]
            .into_iter()
            .filter_map(|(name, absent)| absent.then_some(name))
            .collect();
            if !missing.is_empty() {
                return Err(CliError::Usage(format!("preset custom needs {}", missing.join(", "))));
            }
        }
        if let Some(v) = self.lambda1 {
            config.lambda1 = v;
        }
        if let Some(v) = self.lambda2 {
            config.lambda2 = v;
        }
        if let Some(v) = self.lambda {
            config.lambda_reg = v;
        }
        if let Some(v) = self.epochs {
            config.epochs = v;
        }
        config.track_bounds = self.track_bounds.unwrap_or(false);
        config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(config)
    }

    pub fn token_range(&self) -> Result<Option<(usize, usize)>, CliError> {
        let Some(s) = &self.token_slice else {
            return Ok(None);
        };
        let bad = || CliError::Usage(format!("--token-slice expects START:END, got `{s}`"));
        let (a, b) = s.split_once(':').ok_or_else(bad)?;
        let start: usize = a.trim().parse().map_err(|_| bad())?;
        let end: usize = b.trim().parse().map_err(|_| bad())?;
        if start >= end {
            return Err(bad());
        }
        Ok(Some((start, end)))
    }

    pub fn require<'a, T>(value: &'a Option<T>, flag: &str) -> Result<&'a T, CliError> {
        value.as_ref().ok_or_else(|| CliError::Usage(format!("missing {flag}")))
    }
}

fn load_config(path: &Path) -> Result<RunArgs, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
}
