use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ContainerError;

pub const ORIENTATION: &str = "Y = X·W; W is d_in×d_out";

/// Weight-matrix role within a transformer block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MatrixType {
    K,
    Q,
    V,
    O,
    Up,
    Gate,
    Down,
}

impl MatrixType {
    pub const ALL: [MatrixType; 7] = [
        MatrixType::K,
        MatrixType::Q,
        MatrixType::V,
        MatrixType::O,
        MatrixType::Up,
        MatrixType::Gate,
        MatrixType::Down,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MatrixType::K => "K",
            MatrixType::Q => "Q",
            MatrixType::V => "V",
            MatrixType::O => "O",
            MatrixType::Up => "Up",
            MatrixType::Gate => "Gate",
            MatrixType::Down => "Down",
        }
    }

    /// Parses a comma-separated list such as `K,Q,V,Up,Gate`.
    pub fn parse_list(s: &str) -> Result<Vec<MatrixType>, String> {
        let mut out = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let t: MatrixType = part.parse()?;
            if !out.contains(&t) {
                out.push(t);
            }
        }
        Ok(out)
    }
}

impl fmt::Display for MatrixType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MatrixType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MatrixType::ALL
            .into_iter()
            .find(|t| t.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown matrix type `{s}` (expected K,Q,V,O,Up,Gate,Down)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    /// Learned positions, pre-LayerNorm, GELU MLP. Executable by the runtime.
    Gpt2Like,
    /// Shapes only; can be compressed from precomputed Gram statistics.
    Generic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub architecture: Architecture,
    pub layers: usize,
    pub hidden: usize,
    pub mlp: usize,
    pub heads: usize,
    pub vocab: usize,
    pub context: usize,
    pub norm_eps: f64,
    pub matrix_types: Vec<MatrixType>,
    pub orientation: String,
}

impl ModelManifest {
    /// Manifest for containers that carry no model (e.g. an empty table).
    pub fn empty() -> Self {
        Self {
            architecture: Architecture::Generic,
            layers: 0,
            hidden: 0,
            mlp: 0,
            heads: 0,
            vocab: 0,
            context: 0,
            norm_eps: 1e-5,
            matrix_types: Vec::new(),
            orientation: ORIENTATION.to_string(),
        }
    }

    /// `(d_in, d_out)` of a matrix type.
    pub fn matrix_shape(&self, t: MatrixType) -> (usize, usize) {
        match t {
            MatrixType::K | MatrixType::Q | MatrixType::V | MatrixType::O => {
                (self.hidden, self.hidden)
            }
            MatrixType::Up | MatrixType::Gate => (self.hidden, self.mlp),
            MatrixType::Down => (self.mlp, self.hidden),
        }
    }

    pub fn has_type(&self, t: MatrixType) -> bool {
        self.matrix_types.contains(&t)
    }

    /// Dense parameter count of every inventoried matrix site.
    pub fn matrix_params(&self) -> usize {
        self.matrix_types
            .iter()
            .map(|&t| {
                let (d1, d2) = self.matrix_shape(t);
                d1 * d2 * self.layers
            })
            .sum()
    }
}

pub fn site_name(layer: usize, t: MatrixType) -> String {
    format!("layers.{layer}.{t}")
}

pub fn bias_name(layer: usize, t: MatrixType) -> String {
    format!("layers.{layer}.{t}.bias")
}

pub fn coeff_name(layer: usize, t: MatrixType) -> String {
    format!("layers.{layer}.{t}.coeff")
}

pub fn basis_name(group: usize, t: MatrixType) -> String {
    format!("group.{group}.{t}.basis")
}

pub fn gram_name(layer: usize, t: MatrixType) -> String {
    format!("site.{layer}.{t}.gram")
}

/// Checks a tensor name against the allowed naming families.
pub(crate) fn check_name(name: &str) -> Result<(), ContainerError> {
    let ok = !name.is_empty()
        && name.is_ascii()
        && !name.contains(char::is_whitespace)
        && ["layers.", "embed.", "head.", "norm.", "group.", "site."]
            .iter()
            .any(|p| name.starts_with(p));
    if ok {
        Ok(())
    } else {
        Err(ContainerError::BadName(name.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn type_names_roundtrip() {
        for t in MatrixType::ALL {
            assert_eq!(t.as_str().parse::<MatrixType>().unwrap(), t);
        }
        assert_eq!(
            MatrixType::parse_list("k, q,V,up,Up").unwrap(),
            vec![MatrixType::K, MatrixType::Q, MatrixType::V, MatrixType::Up]
        );
        assert!("X".parse::<MatrixType>().is_err());
    }

    #[test]
    fn shapes_follow_orientation() {
        let mut m = ModelManifest::empty();
        m.hidden = 8;
        m.mlp = 32;
        assert_eq!(m.matrix_shape(MatrixType::Up), (8, 32));
        assert_eq!(m.matrix_shape(MatrixType::Down), (32, 8));
        assert_eq!(m.matrix_shape(MatrixType::O), (8, 8));
    }

    #[test]
    fn names() {
        assert_eq!(site_name(3, MatrixType::Gate), "layers.3.Gate");
        assert_eq!(basis_name(1, MatrixType::K), "group.1.K.basis");
        assert!(check_name("embed.tokens").is_ok());
        assert!(check_name("weights").is_err());
    }
}
