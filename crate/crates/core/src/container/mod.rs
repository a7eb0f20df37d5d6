//! The `.bsc` tensor container.
//!
//! ```text
//! "BSHC" | version u32 LE | header_len u64 LE | header (UTF-8 JSON) | zero pad to 64 |
//! payload₀ | pad | payload₁ | ...
//! ```
//!
//! Payload offsets are relative to the start of the data section and aligned
//! to 64 bytes. All payloads are little-endian.

mod format;
mod manifest;

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::linalg::Matrix;

pub use format::{read_container, write_container, ALIGNMENT, FORMAT_VERSION, MAGIC};
pub use manifest::{
    basis_name, bias_name, coeff_name, gram_name, site_name, Architecture, MatrixType,
    ModelManifest, ORIENTATION,
};

/// Metadata key holding the [`GroupLayout`] of a compressed container.
pub const GROUPS_KEY: &str = "groups";

/// Per matrix type, the ordered layer lists of its sharing groups.
pub type GroupLayout = BTreeMap<MatrixType, Vec<Vec<usize>>>;

#[derive(Debug, thiserror::Error)]
pub enum ContainerError {
    #[error("bad magic bytes (expected BSHC)")]
    BadMagic,
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),
    #[error("container truncated: {0}")]
    Truncated(String),
    #[error("tensor `{name}` has misaligned offset {offset}")]
    MisalignedOffset { name: String, offset: u64 },
    #[error("malformed header: {0}")]
    BadHeader(String),
    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),
    #[error("tensor `{name}`: {detail}")]
    ShapeMismatch { name: String, detail: String },
    #[error("invalid tensor name `{0}`")]
    BadName(String),
    #[error("missing tensor `{0}`")]
    MissingTensor(String),
    #[error("manifest inconsistent: {0}")]
    Manifest(String),
    #[error("token stream: {0}")]
    Tokens(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ContainerError {
    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            ContainerError::BadMagic => "bad-magic",
            ContainerError::UnsupportedVersion(_) => "unsupported-version",
            ContainerError::Truncated(_) => "truncated",
            ContainerError::MisalignedOffset { .. } => "misaligned-offset",
            ContainerError::BadHeader(_) => "bad-header",
            ContainerError::DuplicateName(_) => "duplicate-name",
            ContainerError::ShapeMismatch { .. } => "shape-mismatch",
            ContainerError::BadName(_) => "bad-name",
            ContainerError::MissingTensor(_) => "missing-tensor",
            ContainerError::Manifest(_) => "manifest",
            ContainerError::Tokens(_) => "tokens",
            ContainerError::Io(_) => "io",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
    I32,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I32(Vec<i32>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
            TensorData::I32(_) => DType::I32,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Widened copy of the values.
    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            TensorData::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            TensorData::F64(v) => v.clone(),
            TensorData::I32(v) => v.iter().map(|&x| f64::from(x)).collect(),
        }
    }
}

/// Named tensor with its payload.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn new(
        name: impl Into<String>,
        shape: Vec<usize>,
        data: TensorData,
    ) -> Result<Self, ContainerError> {
        let t = Tensor {
            name: name.into(),
            shape,
            data,
        };
        t.check_shape()?;
        Ok(t)
    }

    pub fn from_matrix(name: impl Into<String>, m: &Matrix) -> Self {
        Tensor {
            name: name.into(),
            shape: vec![m.rows(), m.cols()],
            data: TensorData::F64(m.as_slice().to_vec()),
        }
    }

    pub fn from_matrix_f32(name: impl Into<String>, m: &Matrix) -> Self {
        Tensor {
            name: name.into(),
            shape: vec![m.rows(), m.cols()],
            data: TensorData::F32(m.as_slice().iter().map(|&x| x as f32).collect()),
        }
    }

    pub fn vector_f32(name: impl Into<String>, values: &[f64]) -> Self {
        Tensor {
            name: name.into(),
            shape: vec![values.len()],
            data: TensorData::F32(values.iter().map(|&x| x as f32).collect()),
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn nbytes(&self) -> usize {
        self.data.len() * self.dtype().size()
    }

    fn check_shape(&self) -> Result<(), ContainerError> {
        if self.numel() != self.data.len() {
            return Err(ContainerError::ShapeMismatch {
                name: self.name.clone(),
                detail: format!(
                    "shape {:?} needs {} elements, payload has {}",
                    self.shape,
                    self.numel(),
                    self.data.len()
                ),
            });
        }
        Ok(())
    }

    /// Interprets a 2-D tensor as a matrix, widening to `f64`.
    pub fn to_matrix(&self) -> Result<Matrix, ContainerError> {
        let [r, c] = self.shape[..] else {
            return Err(ContainerError::ShapeMismatch {
                name: self.name.clone(),
                detail: format!("expected 2-D, got shape {:?}", self.shape),
            });
        };
        Matrix::from_vec(r, c, self.data.to_f64()).map_err(|e| ContainerError::ShapeMismatch {
            name: self.name.clone(),
            detail: e.to_string(),
        })
    }

    pub fn to_vector(&self) -> Vec<f64> {
        self.data.to_f64()
    }
}

/// A manifest, free-form metadata and an ordered tensor table.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub manifest: ModelManifest,
    pub metadata: BTreeMap<String, serde_json::Value>,
    pub tensors: Vec<Tensor>,
}

impl Container {
    pub fn new(manifest: ModelManifest) -> Self {
        Self {
            manifest,
            metadata: BTreeMap::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, t: Tensor) {
        self.tensors.push(t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor, ContainerError> {
        self.get(name)
            .ok_or_else(|| ContainerError::MissingTensor(name.to_string()))
    }

    pub fn matrix(&self, name: &str) -> Result<Matrix, ContainerError> {
        self.require(name)?.to_matrix()
    }

    pub fn index(&self) -> HashMap<&str, &Tensor> {
        self.tensors.iter().map(|t| (t.name.as_str(), t)).collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, ContainerError> {
        write_container(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ContainerError> {
        read_container(bytes)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, ContainerError> {
        let bytes = std::fs::read(path)?;
        read_container(&bytes)
    }

    /// Returns true when the container holds factorized (basis/coeff) sites.
    pub fn is_compressed(&self) -> bool {
        self.metadata.contains_key(GROUPS_KEY)
    }

    /// Site → group mapping of a compressed container. Group `g` of type `t`
    /// owns `group.{g}.{t}.basis`; its members own `layers.{i}.{t}.coeff`.
    pub fn group_layout(&self) -> Result<GroupLayout, ContainerError> {
        match self.metadata.get(GROUPS_KEY) {
            None => Ok(GroupLayout::new()),
            Some(v) => serde_json::from_value(v.clone())
                .map_err(|e| ContainerError::BadHeader(format!("{GROUPS_KEY}: {e}"))),
        }
    }

    pub fn set_group_layout(&mut self, layout: &GroupLayout) {
        let v = serde_json::to_value(layout).expect("group layout serializes");
        self.metadata.insert(GROUPS_KEY.to_string(), v);
    }

    /// Checks that every inventoried site resolves to a dense or factorized tensor
    /// with the manifest's shape.
    pub fn validate_sites(&self) -> Result<(), ContainerError> {
        let index = self.index();
        let m = &self.manifest;
        for &t in &m.matrix_types {
            let (d1, d2) = m.matrix_shape(t);
            for layer in 0..m.layers {
                let dense = site_name(layer, t);
                let coeff = coeff_name(layer, t);
                if let Some(x) = index.get(dense.as_str()) {
                    if x.shape != [d1, d2] {
                        return Err(ContainerError::Manifest(format!(
                            "{dense} has shape {:?}, manifest says [{d1}, {d2}]",
                            x.shape
                        )));
                    }
                } else if let Some(c) = index.get(coeff.as_str()) {
                    if c.shape.len() != 2 || c.shape[1] != d2 {
                        return Err(ContainerError::Manifest(format!(
                            "{coeff} has shape {:?}, expected [k, {d2}]",
                            c.shape
                        )));
                    }
                } else {
                    return Err(ContainerError::MissingTensor(dense));
                }
            }
        }
        Ok(())
    }
}
