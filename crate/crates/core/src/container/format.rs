use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use super::manifest::check_name;
use super::{Container, ContainerError, DType, ModelManifest, Tensor, TensorData};

pub const MAGIC: &[u8; 4] = b"BSHC";
pub const FORMAT_VERSION: u32 = 1;
pub const ALIGNMENT: usize = 64;
const PREAMBLE: usize = 4 + 4 + 8;

/// One entry of the header's tensor table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// Offset from the start of the data section.
    pub byte_offset: u64,
    pub nbytes: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    manifest: ModelManifest,
    metadata: BTreeMap<String, serde_json::Value>,
    tensors: Vec<TensorRecord>,
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGNMENT) * ALIGNMENT
}

/// Serializes a container in canonical form: records in table order, each
/// payload at the next 64-byte boundary.
pub fn write_container(c: &Container) -> Result<Vec<u8>, ContainerError> {
    let mut seen = HashSet::new();
    let mut records = Vec::with_capacity(c.tensors.len());
    let mut cursor = 0usize;
    for t in &c.tensors {
        check_name(&t.name)?;
        if !seen.insert(t.name.as_str()) {
            return Err(ContainerError::DuplicateName(t.name.clone()));
        }
        t.check_shape()?;
        cursor = align_up(cursor);
        records.push(TensorRecord {
            name: t.name.clone(),
            dtype: t.dtype(),
            shape: t.shape.clone(),
            byte_offset: cursor as u64,
            nbytes: t.nbytes() as u64,
        });
        cursor += t.nbytes();
    }

    let header = Header {
        manifest: c.manifest.clone(),
        metadata: c.metadata.clone(),
        tensors: records,
    };
    let text = serde_json::to_string_pretty(&header)
        .map_err(|e| ContainerError::BadHeader(e.to_string()))?;
    let data_start = align_up(PREAMBLE + text.len());

    let mut out = Vec::with_capacity(data_start + cursor);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.resize(data_start, 0);

    for (t, r) in c.tensors.iter().zip(&header.tensors) {
        out.resize(data_start + r.byte_offset as usize, 0);
        match &t.data {
            TensorData::F32(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::I32(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
    Ok(out)
}

/// Parses a container; the lossless inverse of [`write_container`].
pub fn read_container(bytes: &[u8]) -> Result<Container, ContainerError> {
    if bytes.len() < MAGIC.len() || &bytes[..4] != MAGIC {
        return Err(ContainerError::BadMagic);
    }
    if bytes.len() < PREAMBLE {
        return Err(ContainerError::Truncated("preamble".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(ContainerError::UnsupportedVersion(version));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header_end = PREAMBLE
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| ContainerError::Truncated("header".into()))?;
    let header: Header = serde_json::from_slice(&bytes[PREAMBLE..header_end])
        .map_err(|e| ContainerError::BadHeader(e.to_string()))?;
    let data_start = align_up(header_end);

    let mut seen = HashSet::new();
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for r in header.tensors {
        check_name(&r.name)?;
        if !seen.insert(r.name.clone()) {
            return Err(ContainerError::DuplicateName(r.name));
        }
        if r.byte_offset % ALIGNMENT as u64 != 0 {
            return Err(ContainerError::MisalignedOffset {
                name: r.name,
                offset: r.byte_offset,
            });
        }
        let numel: usize = r.shape.iter().product();
        if numel as u64 * r.dtype.size() as u64 != r.nbytes {
            return Err(ContainerError::ShapeMismatch {
                name: r.name,
                detail: format!("{} bytes recorded for shape {:?}", r.nbytes, r.shape),
            });
        }
        let start = data_start + r.byte_offset as usize;
        let end = start + r.nbytes as usize;
        if end > bytes.len() {
            return Err(ContainerError::Truncated(format!(
                "payload of `{}`",
                r.name
            )));
        }
        let payload = &bytes[start..end];
        let data = match r.dtype {
            DType::F32 => TensorData::F32(
                payload
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                    .collect(),
            ),
            DType::F64 => TensorData::F64(
                payload
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                    .collect(),
            ),
            DType::I32 => TensorData::I32(
                payload
                    .chunks_exact(4)
                    .map(|b| i32::from_le_bytes(b.try_into().expect("4 bytes")))
                    .collect(),
            ),
        };
        tensors.push(Tensor {
            name: r.name,
            shape: r.shape,
            data,
        });
    }

    Ok(Container {
        manifest: header.manifest,
        metadata: header.metadata,
        tensors,
    })
}

impl Container {
    /// The header's tensor table as it would be written.
    pub fn records(&self) -> Vec<TensorRecord> {
        let mut cursor = 0usize;
        self.tensors
            .iter()
            .map(|t| {
                cursor = align_up(cursor);
                let r = TensorRecord {
                    name: t.name.clone(),
                    dtype: t.dtype(),
                    shape: t.shape.clone(),
                    byte_offset: cursor as u64,
                    nbytes: t.nbytes() as u64,
                };
                cursor += t.nbytes();
                r
            })
            .collect()
    }
}
