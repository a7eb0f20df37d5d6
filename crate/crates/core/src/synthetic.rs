//! Seeded synthetic GPT-2-like models and token streams for desk-scale runs.
//!
//! Weights of a given type are a mix of one component shared across layers
//! and a per-layer component, with decaying column scales, so the
//! concatenated matrices have structure for a shared basis to exploit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::container::{
    bias_name, site_name, Architecture, Container, MatrixType, ModelManifest, Tensor, ORIENTATION,
};
use crate::linalg::Matrix;
use crate::runtime::EXECUTED_TYPES;
use crate::tokens::TokenStream;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    /// MLP width; `0` means `4 × hidden`.
    pub mlp: usize,
    pub vocab: usize,
    pub context: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            hidden: 64,
            heads: 4,
            mlp: 0,
            vocab: 256,
            context: 128,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn mlp_dim(&self) -> usize {
        if self.mlp == 0 {
            4 * self.hidden
        } else {
            self.mlp
        }
    }

    pub fn manifest(&self) -> ModelManifest {
        ModelManifest {
            architecture: Architecture::Gpt2Like,
            layers: self.layers,
            hidden: self.hidden,
            mlp: self.mlp_dim(),
            heads: self.heads,
            vocab: self.vocab,
            context: self.context,
            norm_eps: 1e-5,
            matrix_types: EXECUTED_TYPES.to_vec(),
            orientation: ORIENTATION.to_string(),
        }
    }
}

fn noise(rng: &mut ChaCha8Rng, n: usize, scale: f64, offset: f64) -> Vec<f64> {
    let m = Matrix::random_normal(1, n, rng);
    m.as_slice().iter().map(|v| offset + scale * v).collect()
}

/// Generates a random model. Identical configs give byte-identical containers.
pub fn gen_synthetic(cfg: &SyntheticConfig) -> Container {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let manifest = cfg.manifest();
    let (d, v) = (cfg.hidden, cfg.vocab);
    let mut c = Container::new(manifest.clone());

    c.push(Tensor::from_matrix_f32(
        "embed.tokens",
        &Matrix::random_normal(v, d, &mut rng).scale(0.1),
    ));
    c.push(Tensor::from_matrix_f32(
        "embed.positions",
        &Matrix::random_normal(cfg.context, d, &mut rng).scale(0.02),
    ));

    let shared: Vec<Matrix> = EXECUTED_TYPES
        .iter()
        .map(|&t| {
            let (d1, d2) = manifest.matrix_shape(t);
            Matrix::random_normal(d1, d2, &mut rng)
        })
        .collect();

    for layer in 0..cfg.layers {
        for (ti, &t) in EXECUTED_TYPES.iter().enumerate() {
            if t == MatrixType::K {
                c.push(Tensor::vector_f32(
                    format!("norm.{layer}.attn.weight"),
                    &noise(&mut rng, d, 0.05, 1.0),
                ));
                c.push(Tensor::vector_f32(
                    format!("norm.{layer}.attn.bias"),
                    &noise(&mut rng, d, 0.02, 0.0),
                ));
            }
            if t == MatrixType::Up {
                c.push(Tensor::vector_f32(
                    format!("norm.{layer}.mlp.weight"),
                    &noise(&mut rng, d, 0.05, 1.0),
                ));
                c.push(Tensor::vector_f32(
                    format!("norm.{layer}.mlp.bias"),
                    &noise(&mut rng, d, 0.02, 0.0),
                ));
            }
            let (d1, d2) = manifest.matrix_shape(t);
            let own = Matrix::random_normal(d1, d2, &mut rng);
            let decay: Vec<f64> = (0..d2)
                .map(|j| 0.1 + (-3.0 * j as f64 / d2 as f64).exp())
                .collect();
            let w = shared[ti]
                .scale(0.7)
                .add(&own.scale(0.5))
                .expect("same shape")
                .scale_columns(&decay)
                .scale(1.0 / (d1 as f64).sqrt());
            c.push(Tensor::from_matrix_f32(site_name(layer, t), &w));
            c.push(Tensor::vector_f32(
                bias_name(layer, t),
                &noise(&mut rng, d2, 0.02, 0.0),
            ));
        }
    }
    c.push(Tensor::vector_f32(
        "norm.final.weight",
        &noise(&mut rng, d, 0.05, 1.0),
    ));
    c.push(Tensor::vector_f32(
        "norm.final.bias",
        &noise(&mut rng, d, 0.02, 0.0),
    ));
    c.metadata
        .insert("synthetic".into(), serde_json::json!({ "seed": cfg.seed }));
    c
}

/// All-zero GPT-2-like model with an explicit zero head and an optional head bias.
pub fn zero_model(cfg: &SyntheticConfig, head_bias: Option<&[f64]>) -> Container {
    let manifest = cfg.manifest();
    let (d, v) = (cfg.hidden, cfg.vocab);
    let mut c = Container::new(manifest.clone());
    c.push(Tensor::from_matrix_f32(
        "embed.tokens",
        &Matrix::zeros(v, d),
    ));
    c.push(Tensor::from_matrix_f32(
        "embed.positions",
        &Matrix::zeros(cfg.context, d),
    ));
    let zeros = vec![0.0; d];
    for layer in 0..cfg.layers {
        for part in ["attn", "mlp"] {
            c.push(Tensor::vector_f32(
                format!("norm.{layer}.{part}.weight"),
                &zeros,
            ));
            c.push(Tensor::vector_f32(
                format!("norm.{layer}.{part}.bias"),
                &zeros,
            ));
        }
        for t in EXECUTED_TYPES {
            let (d1, d2) = manifest.matrix_shape(t);
            c.push(Tensor::from_matrix_f32(
                site_name(layer, t),
                &Matrix::zeros(d1, d2),
            ));
        }
    }
    c.push(Tensor::vector_f32("norm.final.weight", &zeros));
    c.push(Tensor::vector_f32("norm.final.bias", &zeros));
    c.push(Tensor::from_matrix_f32("head.weight", &Matrix::zeros(d, v)));
    if let Some(b) = head_bias {
        c.push(Tensor::vector_f32("head.bias", b));
    }
    c
}

/// Token stream from a seeded sparse Markov chain (mostly deterministic successor).
pub fn synthetic_tokens(vocab: usize, len: usize, seed: u64) -> TokenStream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x746f_6b65_6e73);
    let v = vocab as u32;
    let mult = 31 % v.max(1);
    let mut tokens = Vec::with_capacity(len);
    let mut cur = rng.random_range(0..v);
    for _ in 0..len {
        tokens.push(cur);
        cur = if rng.random_bool(0.7) {
            (cur.wrapping_mul(mult) + 7) % v
        } else {
            rng.random_range(0..v)
        };
    }
    TokenStream::new(vocab as u32, tokens).expect("tokens drawn below vocab")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::Gpt2Model;

    #[test]
    fn deterministic_for_fixed_seed() {
        let cfg = SyntheticConfig {
            layers: 2,
            hidden: 16,
            vocab: 32,
            context: 16,
            seed: 7,
            ..SyntheticConfig::default()
        };
        let a = gen_synthetic(&cfg).to_bytes().unwrap();
        let b = gen_synthetic(&cfg).to_bytes().unwrap();
        assert_eq!(a, b);
        let other = gen_synthetic(&SyntheticConfig {
            seed: 8,
            ..cfg.clone()
        });
        assert_ne!(a, other.to_bytes().unwrap());

        let c = gen_synthetic(&cfg);
        c.validate_sites().unwrap();
        Gpt2Model::from_container(&c).unwrap();
        assert_eq!(synthetic_tokens(32, 100, 1), synthetic_tokens(32, 100, 1));
    }
}
