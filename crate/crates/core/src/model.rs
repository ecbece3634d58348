//! Domain types shared by every stage of an edit: embeddings, projection
//! matrices, layer sets, erase tasks and the tunable configuration.

use std::collections::HashSet;
use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Dtype;
use crate::error::{Error, Result};

/// A concept embedding stored as a `d x m` matrix, one column per token.
///
/// Pooled embeddings have a single column.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    label: String,
    data: DMatrix<f64>,
}

impl Embedding {
    pub fn new(label: impl Into<String>, data: DMatrix<f64>) -> Result<Self> {
        let label = label.into();
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::InvalidEmbedding {
                label,
                reason: format!("empty shape {}x{}", data.nrows(), data.ncols()),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidEmbedding {
                label,
                reason: format!("non-finite entry at flat index {pos}"),
            });
        }
        Ok(Self { label, data })
    }

    /// Single-column embedding.
    pub fn from_vector(label: impl Into<String>, values: &[f64]) -> Result<Self> {
        Self::new(label, DMatrix::from_column_slice(values.len(), 1, values))
    }

    pub fn zeros(label: impl Into<String>, dim: usize, tokens: usize) -> Self {
        Self {
            label: label.into(),
            data: DMatrix::zeros(dim.max(1), tokens.max(1)),
        }
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn tokens(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_data(self) -> DMatrix<f64> {
        self.data
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    /// Euclidean norm of each column.
    pub fn column_norms(&self) -> Vec<f64> {
        self.data.column_iter().map(|c| c.norm()).collect()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.norm()
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|v| *v == 0.0)
    }

    /// Keeps columns `start..end`.
    pub fn slice_tokens(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.tokens() {
            return Err(Error::InvalidEmbedding {
                label: self.label.clone(),
                reason: format!(
                    "token slice {start}..{end} outside 0..{}",
                    self.tokens()
                ),
            });
        }
        Ok(Self {
            label: self.label.clone(),
            data: self.data.columns(start, end - start).into_owned(),
        })
    }

    /// Concatenates the columns of several embeddings sharing one dimension.
    pub fn hstack(label: impl Into<String>, parts: &[Embedding]) -> Result<Self> {
        let label = label.into();
        let first = parts.first().ok_or_else(|| Error::InvalidEmbedding {
            label: label.clone(),
            reason: "no columns to stack".into(),
        })?;
        let dim = first.dim();
        let total: usize = parts.iter().map(Embedding::tokens).sum();
        let mut data = DMatrix::zeros(dim, total);
        let mut at = 0;
        for part in parts {
            if part.dim() != dim {
                return Err(Error::dims(
                    format!("stacking embedding `{}`", part.label),
                    dim,
                    part.dim(),
                ));
            }
            data.columns_mut(at, part.tokens()).copy_from(&part.data);
            at += part.tokens();
        }
        Ok(Self { label, data })
    }
}

/// Which attention projection a matrix implements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ProjectionKind {
    Key,
    Value,
}

impl fmt::Display for ProjectionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProjectionKind::Key => "K",
            ProjectionKind::Value => "V",
        })
    }
}

/// How a selected matrix was laid out on disk, so edits can be written back.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Storage {
    pub dtype: Dtype,
    /// The file stored `d x out`; the in-memory matrix is the transpose.
    pub transposed: bool,
}

/// A named `out x d` projection weight.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionMatrix {
    name: String,
    kind: ProjectionKind,
    weight: DMatrix<f64>,
    storage: Option<Storage>,
}

impl ProjectionMatrix {
    pub fn new(name: impl Into<String>, kind: ProjectionKind, weight: DMatrix<f64>) -> Result<Self> {
        let name = name.into();
        if weight.nrows() == 0 || weight.ncols() == 0 {
            return Err(Error::InvalidMatrix {
                name,
                reason: format!("empty shape {}x{}", weight.nrows(), weight.ncols()),
            });
        }
        if let Some(pos) = weight.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidMatrix {
                name,
                reason: format!("non-finite entry at flat index {pos}"),
            });
        }
        Ok(Self {
            name,
            kind,
            weight,
            storage: None,
        })
    }

    pub fn with_storage(mut self, storage: Storage) -> Self {
        self.storage = Some(storage);
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> ProjectionKind {
        self.kind
    }

    pub fn weight(&self) -> &DMatrix<f64> {
        &self.weight
    }

    pub fn storage(&self) -> Option<Storage> {
        self.storage
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn embed_dim(&self) -> usize {
        self.weight.ncols()
    }

    /// Same name, kind and storage with a replaced weight of identical shape.
    pub(crate) fn with_weight(&self, weight: DMatrix<f64>) -> Self {
        debug_assert_eq!(weight.shape(), self.weight.shape());
        Self {
            name: self.name.clone(),
            kind: self.kind,
            weight,
            storage: self.storage,
        }
    }
}

/// Ordered collection of K/V projections sharing one embedding dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionLayerSet {
    layers: Vec<ProjectionMatrix>,
    embed_dim: usize,
}

impl AttentionLayerSet {
    pub fn new(layers: Vec<ProjectionMatrix>) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::InvalidLayerSet("no layers".into()))?;
        let embed_dim = first.embed_dim();
        let mut seen = HashSet::with_capacity(layers.len());
        for layer in &layers {
            if layer.embed_dim() != embed_dim {
                return Err(Error::dims(
                    format!("embedding dimension of layer `{}`", layer.name()),
                    embed_dim,
                    layer.embed_dim(),
                ));
            }
            if !seen.insert(layer.name()) {
                return Err(Error::InvalidLayerSet(format!(
                    "duplicate layer name `{}`",
                    layer.name()
                )));
            }
        }
        Ok(Self { layers, embed_dim })
    }

    pub fn layers(&self) -> &[ProjectionMatrix] {
        &self.layers
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&ProjectionMatrix> {
        self.layers.iter().find(|l| l.name() == name)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight().len()).sum()
    }

    /// Checks that `other` has the same names, kinds and shapes in the same
    /// order, reporting the first mismatch.
    pub fn check_aligned(&self, other: &AttentionLayerSet) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::Misaligned {
                index: self.layers.len().min(other.layers.len()),
                reason: format!(
                    "layer counts differ ({} vs {})",
                    self.layers.len(),
                    other.layers.len()
                ),
            });
        }
        for (index, (a, b)) in self.layers.iter().zip(&other.layers).enumerate() {
            let reason = if a.name() != b.name() {
                format!("names differ (`{}` vs `{}`)", a.name(), b.name())
            } else if a.kind() != b.kind() {
                format!("kinds of `{}` differ ({} vs {})", a.name(), a.kind(), b.kind())
            } else if a.weight().shape() != b.weight().shape() {
                format!(
                    "shapes of `{}` differ ({:?} vs {:?})",
                    a.name(),
                    a.weight().shape(),
                    b.weight().shape()
                )
            } else {
                continue;
            };
            return Err(Error::Misaligned { index, reason });
        }
        Ok(())
    }

    pub(crate) fn check_embedding(&self, emb: &Embedding, context: &str) -> Result<()> {
        if emb.dim() != self.embed_dim {
            return Err(Error::dims(
                format!("{context} `{}`", emb.label()),
                self.embed_dim,
                emb.dim(),
            ));
        }
        Ok(())
    }

    /// Largest elementwise absolute difference against an aligned set.
    pub fn max_abs_diff(&self, other: &AttentionLayerSet) -> Result<f64> {
        self.check_aligned(other)?;
        Ok(self
            .layers
            .iter()
            .zip(&other.layers)
            .flat_map(|(a, b)| a.weight().iter().zip(b.weight().iter()))
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max))
    }

    pub(crate) fn from_parts_unchecked(layers: Vec<ProjectionMatrix>, embed_dim: usize) -> Self {
        Self { layers, embed_dim }
    }
}

/// One erasure target: map what `source` produces onto what `destination`
/// produced in the original model.
///
/// Each source column pairs with the matching destination column; a
/// single-column destination is shared by every source column.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptTask {
    label: String,
    source: Embedding,
    destination: Embedding,
}

impl ConceptTask {
    pub fn new(label: impl Into<String>, source: Embedding, destination: Embedding) -> Result<Self> {
        let label = label.into();
        if source.dim() != destination.dim() {
            return Err(Error::dims(
                format!("destination of task `{label}`"),
                source.dim(),
                destination.dim(),
            ));
        }
        if destination.tokens() != 1 && destination.tokens() != source.tokens() {
            return Err(Error::dims(
                format!("destination token count of task `{label}`"),
                source.tokens(),
                destination.tokens(),
            ));
        }
        Ok(Self {
            label,
            source,
            destination,
        })
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn source(&self) -> &Embedding {
        &self.source
    }

    pub fn destination(&self) -> &Embedding {
        &self.destination
    }

    pub fn dim(&self) -> usize {
        self.source.dim()
    }

    /// Destination expanded to one column per source column.
    pub fn matched_destination(&self) -> DMatrix<f64> {
        let dest = self.destination.data();
        if dest.ncols() == self.source.tokens() {
            dest.clone()
        } else {
            DMatrix::from_fn(dest.nrows(), self.source.tokens(), |r, _| dest[(r, 0)])
        }
    }

    /// The same task with a different source embedding and the original
    /// destination.
    pub fn with_source(&self, source: Embedding) -> Result<Self> {
        Self::new(self.label.clone(), source, self.destination.clone())
    }
}

/// Hyperparameters of an erase run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditConfig {
    /// Weight of the preserve-set term.
    pub lambda1: f64,
    /// Weight of the weight-deviation term.
    pub lambda2: f64,
    /// Ridge penalty on the derived embedding.
    pub lambda_reg: f64,
    pub epochs: usize,
    /// Symmetric systems whose pivot-implied condition number exceeds
    /// `1 / solve_tol` are rank-checked before being solved.
    pub solve_tol: f64,
    /// Relative gap accepted between closed forms and the oracles.
    pub oracle_tol: f64,
    /// Compute the drift bound chain for every epoch after the first.
    #[serde(default)]
    pub track_bounds: bool,
}

pub const DEFAULT_SOLVE_TOL: f64 = 1e-14;

impl EditConfig {
    /// Unsafe-content preset: five derive-then-erase epochs with `lambda = 0.1`.
    pub fn unsafe_content() -> Self {
        Self {
            lambda1: 0.1,
            lambda2: 0.1,
            lambda_reg: 0.1,
            epochs: 5,
            solve_tol: DEFAULT_SOLVE_TOL,
            oracle_tol: 1e-6,
            track_bounds: false,
        }
    }

    /// Artistic-style preset: ten epochs with `lambda = 1e-3`.
    pub fn artistic() -> Self {
        Self {
            lambda_reg: 1e-3,
            epochs: 10,
            ..Self::unsafe_content()
        }
    }

    /// Object-class preset: `lambda = 0.1`; the epoch count is an operator call.
    pub fn object() -> Self {
        Self::unsafe_content()
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda_reg", self.lambda_reg),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be a finite non-negative number, got {v}"
                )));
            }
        }
        for (name, v) in [("solve_tol", self.solve_tol), ("oracle_tol", self.oracle_tol)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        Ok(())
    }
}

impl Default for EditConfig {
    fn default() -> Self {
        Self::unsafe_content()
    }
}
