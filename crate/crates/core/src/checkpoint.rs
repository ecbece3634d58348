//! Reading, editing and writing checkpoint tensor files.
//!
//! Layout: an 8-byte little-endian header length, a JSON header mapping each
//! tensor name to `{"dtype", "shape", "data_offsets": [begin, end]}` (offsets
//! relative to the payload) plus an optional `"__metadata__"` string map,
//! then the raw little-endian payload.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use half::{bf16, f16};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::{AttentionLayerSet, Embedding, ProjectionKind, ProjectionMatrix, Storage};

const METADATA_KEY: &str = "__metadata__";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Dtype {
    #[serde(rename = "F16")]
    F16,
    #[serde(rename = "BF16")]
    BF16,
    #[serde(rename = "F32")]
    F32,
    #[serde(rename = "F64")]
    F64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F16 | Dtype::BF16 => 2,
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Dtype::F16 => "F16",
            Dtype::BF16 => "BF16",
            Dtype::F32 => "F32",
            Dtype::F64 => "F64",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "F16" => Dtype::F16,
            "BF16" => Dtype::BF16,
            "F32" => Dtype::F32,
            "F64" => Dtype::F64,
            _ => return None,
        })
    }

    /// Decodes little-endian bytes into doubles.
    pub fn decode(self, bytes: &[u8]) -> Vec<f64> {
        match self {
            Dtype::F16 => bytes
                .chunks_exact(2)
                .map(|b| f16::from_le_bytes([b[0], b[1]]).to_f64())
                .collect(),
            Dtype::BF16 => bytes
                .chunks_exact(2)
                .map(|b| bf16::from_le_bytes([b[0], b[1]]).to_f64())
                .collect(),
            Dtype::F32 => bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect(),
            Dtype::F64 => bytes
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                .collect(),
        }
    }

    /// Encodes doubles with round-half-to-even narrowing.
    pub fn encode(self, values: &[f64]) -> Vec<u8> {
        let mut out = Vec::with_capacity(values.len() * self.size());
        for v in values {
            match self {
                Dtype::F16 => out.extend_from_slice(&f16::from_f64(*v).to_le_bytes()),
                Dtype::BF16 => out.extend_from_slice(&bf16::from_f64(*v).to_le_bytes()),
                Dtype::F32 => out.extend_from_slice(&(*v as f32).to_le_bytes()),
                Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
            }
        }
        out
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorInfo {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    /// `[begin, end)` into the payload.
    pub data_offsets: (usize, usize),
}

impl TensorInfo {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Serialize, Deserialize)]
struct RawEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [u64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    tensors: BTreeMap<String, TensorInfo>,
    payload: Vec<u8>,
    metadata: Option<BTreeMap<String, String>>,
}

impl TensorFile {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::parse(bytes, true)
    }

    /// Parses only the header; tensor contents are not loaded.
    pub fn read_header(path: impl AsRef<Path>) -> Result<Self> {
        use std::io::Read;
        let path = path.as_ref();
        let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut len = [0u8; 8];
        file.read_exact(&mut len)
            .map_err(|_| Error::Truncated("missing 8-byte header length".into()))?;
        let n = header_len(len, u64::MAX)?;
        let mut header = vec![0u8; n];
        file.read_exact(&mut header)
            .map_err(|_| Error::Truncated(format!("header declares {n} bytes")))?;
        let payload_len = file
            .metadata()
            .map_err(|e| Error::io(path, e))?
            .len()
            .saturating_sub(8 + n as u64);
        let mut buf = len.to_vec();
        buf.extend_from_slice(&header);
        let mut parsed = Self::parse(&buf, false)?;
        check_offsets(&parsed.tensors, payload_len as usize)?;
        parsed.payload.clear();
        Ok(parsed)
    }

    fn parse(bytes: &[u8], with_payload: bool) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Truncated(format!(
                "{} bytes is shorter than the 8-byte header length",
                bytes.len()
            )));
        }
        let n = header_len(bytes[..8].try_into().expect("8 bytes"), (bytes.len() - 8) as u64)?;
        let header_bytes = &bytes[8..8 + n];
        let header: serde_json::Map<String, Value> = serde_json::from_slice(header_bytes)
            .map_err(|e| Error::MalformedHeader(e.to_string()))?;

        let mut tensors = BTreeMap::new();
        let mut metadata = None;
        for (name, value) in header {
            if name == METADATA_KEY {
                let map: BTreeMap<String, String> = serde_json::from_value(value)
                    .map_err(|e| Error::MalformedHeader(format!("metadata: {e}")))?;
                metadata = Some(map);
                continue;
            }
            let raw: RawEntry = serde_json::from_value(value)
                .map_err(|e| Error::MalformedHeader(format!("tensor `{name}`: {e}")))?;
            let dtype = Dtype::parse(&raw.dtype).ok_or_else(|| Error::UnsupportedDtype {
                name: name.clone(),
                dtype: raw.dtype.clone(),
            })?;
            let [begin, end] = raw.data_offsets;
            let numel: usize = raw.shape.iter().product();
            if end < begin || (end - begin) as usize != numel * dtype.size() {
                return Err(Error::MalformedHeader(format!(
                    "tensor `{name}`: {} bytes at [{begin}, {end}) do not hold {numel} {dtype} values",
                    end.saturating_sub(begin)
                )));
            }
            tensors.insert(
                name,
                TensorInfo {
                    dtype,
                    shape: raw.shape,
                    data_offsets: (begin as usize, end as usize),
                },
            );
        }

        let payload = if with_payload {
            let payload = bytes[8 + n..].to_vec();
            check_offsets(&tensors, payload.len())?;
            payload
        } else {
            Vec::new()
        };
        Ok(Self {
            tensors,
            payload,
            metadata,
        })
    }

    /// Builds a file from named tensors, laid out in name order.
    pub fn from_tensors<I>(tensors: I, metadata: Option<BTreeMap<String, String>>) -> Result<Self>
    where
        I: IntoIterator<Item = (String, Dtype, Vec<usize>, Vec<f64>)>,
    {
        let mut sorted: Vec<_> = tensors.into_iter().collect();
        sorted.sort_by(|a, b| a.0.cmp(&b.0));
        let mut infos = BTreeMap::new();
        let mut payload = Vec::new();
        for (name, dtype, shape, values) in sorted {
            let numel: usize = shape.iter().product();
            if numel != values.len() {
                return Err(Error::MalformedHeader(format!(
                    "tensor `{name}`: shape {shape:?} holds {numel} values, got {}",
                    values.len()
                )));
            }
            let begin = payload.len();
            payload.extend_from_slice(&dtype.encode(&values));
            let info = TensorInfo {
                dtype,
                shape,
                data_offsets: (begin, payload.len()),
            };
            if infos.insert(name.clone(), info).is_some() {
                return Err(Error::MalformedHeader(format!("duplicate tensor `{name}`")));
            }
        }
        Ok(Self {
            tensors: infos,
            payload,
            metadata,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = serde_json::Map::new();
        if let Some(meta) = &self.metadata {
            header.insert(
                METADATA_KEY.to_owned(),
                serde_json::to_value(meta).expect("string map serializes"),
            );
        }
        for (name, info) in &self.tensors {
            let raw = RawEntry {
                dtype: info.dtype.as_str().to_owned(),
                shape: info.shape.clone(),
                data_offsets: [info.data_offsets.0 as u64, info.data_offsets.1 as u64],
            };
            header.insert(name.clone(), serde_json::to_value(raw).expect("entry serializes"));
        }
        // serde_json::Map is ordered by key, so the header is canonical.
        let mut text = serde_json::to_vec(&header).expect("header serializes");
        while (8 + text.len()) % 8 != 0 {
            text.push(b' ');
        }
        let mut out = Vec::with_capacity(8 + text.len() + self.payload.len());
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(&text);
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn tensors(&self) -> &BTreeMap<String, TensorInfo> {
        &self.tensors
    }

    pub fn info(&self, name: &str) -> Result<&TensorInfo> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_owned()))
    }

    pub fn metadata(&self) -> Option<&BTreeMap<String, String>> {
        self.metadata.as_ref()
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    pub fn raw_bytes(&self, name: &str) -> Result<&[u8]> {
        let (b, e) = self.info(name)?.data_offsets;
        self.payload.get(b..e).ok_or_else(|| Error::MissingTensor(name.to_owned()))
    }

    /// Tensor contents widened to double precision.
    pub fn values(&self, name: &str) -> Result<Vec<f64>> {
        let info = self.info(name)?;
        Ok(info.dtype.decode(self.raw_bytes(name)?))
    }

    /// True when both files hold the same tensor names, dtypes, shapes and
    /// bytes, regardless of payload layout.
    pub fn tensor_eq(&self, other: &TensorFile) -> bool {
        self.tensors.len() == other.tensors.len()
            && self.tensors.iter().all(|(name, info)| {
                other.tensors.get(name).is_some_and(|o| {
                    o.dtype == info.dtype
                        && o.shape == info.shape
                        && self.raw_bytes(name).ok() == other.raw_bytes(name).ok()
                })
            })
    }

    fn replace_values(&mut self, name: &str, values: &[f64]) -> Result<()> {
        let info = self.info(name)?.clone();
        let bytes = info.dtype.encode(values);
        let (b, e) = info.data_offsets;
        debug_assert_eq!(bytes.len(), e - b);
        self.payload[b..e].copy_from_slice(&bytes);
        Ok(())
    }
}

fn header_len(raw: [u8; 8], available: u64) -> Result<usize> {
    let n = u64::from_le_bytes(raw);
    if n > available {
        return Err(Error::Truncated(format!(
            "header declares {n} bytes but only {available} follow"
        )));
    }
    usize::try_from(n).map_err(|_| Error::MalformedHeader(format!("header length {n} too large")))
}

fn check_offsets(tensors: &BTreeMap<String, TensorInfo>, payload: usize) -> Result<()> {
    let mut ranges: Vec<(&String, usize, usize)> = tensors
        .iter()
        .map(|(n, i)| (n, i.data_offsets.0, i.data_offsets.1))
        .collect();
    for (name, b, e) in &ranges {
        if *e > payload {
            return Err(Error::OffsetOutOfRange {
                name: (*name).clone(),
                begin: *b as u64,
                end: *e as u64,
                payload: payload as u64,
            });
        }
    }
    ranges.sort_by_key(|(_, b, e)| (*b, *e));
    for pair in ranges.windows(2) {
        let (prev, _, prev_end) = pair[0];
        let (name, begin, _) = pair[1];
        if begin < prev_end {
            return Err(Error::MalformedHeader(format!(
                "tensors `{prev}` and `{name}` overlap"
            )));
        }
    }
    Ok(())
}

pub fn read_tensor_file(path: impl AsRef<Path>) -> Result<TensorFile> {
    TensorFile::read(path)
}

pub fn write_tensor_file(file: &TensorFile, path: impl AsRef<Path>) -> Result<()> {
    file.write(path)
}

/// Which tensors are cross-attention K/V projections.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionPattern {
    /// Every substring must occur in a selected name.
    pub include: Vec<String>,
    pub key_suffix: String,
    pub value_suffix: String,
    /// Tensors are stored `d x out` and must be transposed.
    pub transpose: bool,
}

impl Default for SelectionPattern {
    fn default() -> Self {
        Self {
            include: vec!["attn2".into()],
            key_suffix: ".to_k.weight".into(),
            value_suffix: ".to_v.weight".into(),
            transpose: false,
        }
    }
}

impl SelectionPattern {
    pub fn classify(&self, name: &str) -> Option<ProjectionKind> {
        if !self.include.iter().all(|s| name.contains(s.as_str())) {
            return None;
        }
        if !self.key_suffix.is_empty() && name.ends_with(&self.key_suffix) {
            Some(ProjectionKind::Key)
        } else if !self.value_suffix.is_empty() && name.ends_with(&self.value_suffix) {
            Some(ProjectionKind::Value)
        } else {
            None
        }
    }
}

/// Selected K/V matrices in name order.
pub fn select_cross_attention(file: &TensorFile, pattern: &SelectionPattern) -> Result<AttentionLayerSet> {
    let mut layers = Vec::new();
    for (name, info) in file.tensors() {
        let Some(kind) = pattern.classify(name) else {
            continue;
        };
        let &[rows, cols] = info.shape.as_slice() else {
            return Err(Error::NotMatrix {
                name: name.clone(),
                shape: info.shape.clone(),
            });
        };
        let values = file.values(name)?;
        // stored row-major
        let stored = DMatrix::from_row_slice(rows, cols, &values);
        let weight = if pattern.transpose { stored.transpose() } else { stored };
        let layer = ProjectionMatrix::new(name.clone(), kind, weight)?.with_storage(Storage {
            dtype: info.dtype,
            transposed: pattern.transpose,
        });
        layers.push(layer);
    }
    if layers.is_empty() {
        return Err(Error::EmptySelection);
    }
    AttentionLayerSet::new(layers)
}

/// Row-major values of `layer` in the layout of its tensor in `original`.
fn stored_values(layer: &ProjectionMatrix, original: &TensorFile) -> Result<(Dtype, Vec<usize>, Vec<f64>)> {
    let info = original.info(layer.name())?;
    let transposed = layer.storage().is_some_and(|s| s.transposed);
    let stored = if transposed {
        layer.weight().transpose()
    } else {
        layer.weight().clone()
    };
    let shape = vec![stored.nrows(), stored.ncols()];
    if info.shape != shape {
        return Err(Error::ShapeDrift {
            name: layer.name().to_owned(),
            file: info.shape.clone(),
            edit: shape,
        });
    }
    Ok((info.dtype, shape, stored.transpose().as_slice().to_vec()))
}

/// Writes edited matrices into a copy of `original`; every other tensor keeps
/// its bytes.
pub fn merge_back(edited: &AttentionLayerSet, original: &TensorFile) -> Result<TensorFile> {
    let mut out = original.clone();
    for layer in edited.layers() {
        let (_, _, values) = stored_values(layer, original)?;
        out.replace_values(layer.name(), &values)?;
    }
    Ok(out)
}

/// A file holding only the matrices of `layers`, with the names, dtypes and
/// layout they have in `original`.
pub fn layers_file(layers: &AttentionLayerSet, original: &TensorFile) -> Result<TensorFile> {
    let tensors = layers
        .layers()
        .iter()
        .map(|l| {
            let (dtype, shape, values) = stored_values(l, original)?;
            Ok((l.name().to_owned(), dtype, shape, values))
        })
        .collect::<Result<Vec<_>>>()?;
    TensorFile::from_tensors(tensors, None)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ModelStats {
    pub total_params: usize,
    pub selected_params: usize,
    pub selected_tensors: usize,
    pub fraction: f64,
}

/// Parameter counts from header shapes alone.
pub fn model_stats(file: &TensorFile, pattern: &SelectionPattern) -> ModelStats {
    let mut stats = ModelStats {
        total_params: 0,
        selected_params: 0,
        selected_tensors: 0,
        fraction: 0.0,
    };
    for (name, info) in file.tensors() {
        stats.total_params += info.numel();
        if pattern.classify(name).is_some() {
            stats.selected_params += info.numel();
            stats.selected_tensors += 1;
        }
    }
    if stats.total_params > 0 {
        stats.fraction = stats.selected_params as f64 / stats.total_params as f64;
    }
    stats
}

/// Loads one embedding per tensor; `[m, d]` tensors hold `m` token rows and
/// `[d]` tensors are pooled vectors.
pub fn read_embeddings(file: &TensorFile) -> Result<BTreeMap<String, Embedding>> {
    file.tensors()
        .iter()
        .map(|(name, info)| {
            let values = file.values(name)?;
            let data = match info.shape.as_slice() {
                &[d] => DMatrix::from_column_slice(d, 1, &values),
                // each stored row is one token, i.e. one column here
                &[m, d] => DMatrix::from_column_slice(d, m, &values),
                other => {
                    return Err(Error::InvalidEmbedding {
                        label: name.clone(),
                        reason: format!("expected shape [d] or [m, d], found {other:?}"),
                    })
                }
            };
            Ok((name.clone(), Embedding::new(name.clone(), data)?))
        })
        .collect()
}

/// Stores embeddings as `[m, d]` tensors (or `[d]` when pooled).
pub fn embeddings_file(embeddings: &[Embedding], dtype: Dtype) -> Result<TensorFile> {
    TensorFile::from_tensors(
        embeddings.iter().map(|e| {
            let shape = if e.tokens() == 1 {
                vec![e.dim()]
            } else {
                vec![e.tokens(), e.dim()]
            };
            (e.label().to_owned(), dtype, shape, e.data().as_slice().to_vec())
        }),
        None,
    )
}
