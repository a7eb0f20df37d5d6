use std::collections::BTreeMap;

use serde::Serialize;

use crate::container::{Container, MatrixType};

/// Element counts of a container grouped by tensor role.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ParamCounts {
    pub embeddings: usize,
    pub norms: usize,
    pub biases: usize,
    pub head: usize,
    /// Dense weight matrices still stored as `layers.{i}.{t}`.
    pub dense_sites: usize,
    pub bases: usize,
    pub coeffs: usize,
    pub other: usize,
    /// Stored matrix parameters per type (dense sites + bases + coefficients).
    pub per_type: BTreeMap<MatrixType, usize>,
    /// Dense size of every inventoried matrix site, from the manifest.
    pub original_matrix_params: usize,
}

impl ParamCounts {
    pub fn total(&self) -> usize {
        self.embeddings
            + self.norms
            + self.biases
            + self.head
            + self.dense_sites
            + self.bases
            + self.coeffs
            + self.other
    }

    pub fn matrix_params(&self) -> usize {
        self.dense_sites + self.bases + self.coeffs
    }

    /// Whole-model size had every matrix site stayed dense.
    pub fn original_total(&self) -> usize {
        self.total() - self.matrix_params() + self.original_matrix_params
    }
}

fn type_of(segment: &str) -> Option<MatrixType> {
    segment.parse().ok()
}

/// Counts elements of `c` by role, from tensor names.
pub fn account_params(c: &Container) -> ParamCounts {
    let mut p = ParamCounts {
        original_matrix_params: c.manifest.matrix_params(),
        ..ParamCounts::default()
    };
    for t in &c.tensors {
        let n = t.numel();
        let parts: Vec<&str> = t.name.split('.').collect();
        match parts.as_slice() {
            ["embed", ..] => p.embeddings += n,
            ["norm", ..] => p.norms += n,
            ["head", ..] => p.head += n,
            ["layers", _, _, "bias"] => p.biases += n,
            ["layers", _, ty, "coeff"] if type_of(ty).is_some() => {
                p.coeffs += n;
                *p.per_type.entry(type_of(ty).unwrap()).or_default() += n;
            }
            ["layers", _, ty] if type_of(ty).is_some() => {
                p.dense_sites += n;
                *p.per_type.entry(type_of(ty).unwrap()).or_default() += n;
            }
            ["group", _, ty, "basis"] if type_of(ty).is_some() => {
                p.bases += n;
                *p.per_type.entry(type_of(ty).unwrap()).or_default() += n;
            }
            _ => p.other += n,
        }
    }
    p
}
