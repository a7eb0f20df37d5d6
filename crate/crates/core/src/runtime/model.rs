use std::collections::HashMap;
use std::sync::Arc;

use crate::container::{
    basis_name, bias_name, coeff_name, site_name, Architecture, Container, MatrixType,
    ModelManifest,
};
use crate::linalg::Matrix;
use crate::{Error, Result};

/// Matrix types the runtime executes, in block order.
pub const EXECUTED_TYPES: [MatrixType; 6] = [
    MatrixType::K,
    MatrixType::Q,
    MatrixType::V,
    MatrixType::O,
    MatrixType::Up,
    MatrixType::Down,
];

#[derive(Debug, Clone)]
pub enum LinearWeight {
    Dense(Arc<Matrix>),
    /// `basis` may be shared by several sites of a group.
    Factorized {
        basis: Arc<Matrix>,
        coeff: Arc<Matrix>,
    },
}

/// One `Y = X·W + b` site.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: LinearWeight,
    pub bias: Option<Vec<f64>>,
}

impl Linear {
    pub fn dense(w: Matrix, bias: Option<Vec<f64>>) -> Self {
        Linear {
            weight: LinearWeight::Dense(Arc::new(w)),
            bias,
        }
    }

    pub fn d_in(&self) -> usize {
        match &self.weight {
            LinearWeight::Dense(w) => w.rows(),
            LinearWeight::Factorized { basis, .. } => basis.rows(),
        }
    }

    pub fn d_out(&self) -> usize {
        match &self.weight {
            LinearWeight::Dense(w) => w.cols(),
            LinearWeight::Factorized { coeff, .. } => coeff.cols(),
        }
    }

    pub fn is_factorized(&self) -> bool {
        matches!(self.weight, LinearWeight::Factorized { .. })
    }

    /// Factorized sites evaluate `(x·basis)·coeff`; the product `basis·coeff` is never formed.
    pub fn forward(&self, x: &Matrix) -> Matrix {
        let mut y = match &self.weight {
            LinearWeight::Dense(w) => x.matmul(w),
            LinearWeight::Factorized { basis, coeff } => {
                x.matmul(basis).and_then(|h| h.matmul(coeff))
            }
        }
        .expect("linear site shapes validated at load");
        if let Some(b) = &self.bias {
            for i in 0..y.rows() {
                for (v, bj) in y.row_mut(i).iter_mut().zip(b) {
                    *v += bj;
                }
            }
        }
        y
    }

    /// Multiply-add FLOPs for `tokens` rows, bias excluded.
    pub fn flops(&self, tokens: usize) -> u64 {
        let t = tokens as u64;
        match &self.weight {
            LinearWeight::Dense(w) => 2 * t * (w.rows() * w.cols()) as u64,
            LinearWeight::Factorized { basis, coeff } => {
                2 * t * (basis.rows() * basis.cols() + coeff.rows() * coeff.cols()) as u64
            }
        }
    }

    /// Same site with the factors multiplied out.
    pub fn densified(&self) -> Linear {
        match &self.weight {
            LinearWeight::Dense(_) => self.clone(),
            LinearWeight::Factorized { basis, coeff } => Linear {
                weight: LinearWeight::Dense(Arc::new(
                    basis
                        .matmul(coeff)
                        .expect("factor shapes validated at load"),
                )),
                bias: self.bias.clone(),
            },
        }
    }

    pub fn dense_weight(&self) -> Matrix {
        match self.densified().weight {
            LinearWeight::Dense(w) => (*w).clone(),
            LinearWeight::Factorized { .. } => unreachable!(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub eps: f64,
}

impl LayerNorm {
    pub fn forward(&self, x: &Matrix) -> Matrix {
        let d = x.cols() as f64;
        let mut y = x.clone();
        for i in 0..y.rows() {
            let row = y.row_mut(i);
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let inv = 1.0 / (var + self.eps).sqrt();
            for ((v, w), b) in row.iter_mut().zip(&self.weight).zip(&self.bias) {
                *v = (*v - mean) * inv * w + b;
            }
        }
        y
    }
}

#[derive(Debug, Clone)]
pub struct Block {
    pub ln_attn: LayerNorm,
    pub k: Linear,
    pub q: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln_mlp: LayerNorm,
    pub up: Linear,
    pub down: Linear,
}

impl Block {
    pub fn site(&self, t: MatrixType) -> Option<&Linear> {
        Some(match t {
            MatrixType::K => &self.k,
            MatrixType::Q => &self.q,
            MatrixType::V => &self.v,
            MatrixType::O => &self.o,
            MatrixType::Up => &self.up,
            MatrixType::Down => &self.down,
            MatrixType::Gate => return None,
        })
    }

    pub fn site_mut(&mut self, t: MatrixType) -> Option<&mut Linear> {
        Some(match t {
            MatrixType::K => &mut self.k,
            MatrixType::Q => &mut self.q,
            MatrixType::V => &mut self.v,
            MatrixType::O => &mut self.o,
            MatrixType::Up => &mut self.up,
            MatrixType::Down => &mut self.down,
            MatrixType::Gate => return None,
        })
    }
}

/// GPT-2-style decoder: learned positions, pre-LayerNorm, tanh-GELU MLP.
#[derive(Debug, Clone)]
pub struct Gpt2Model {
    pub manifest: ModelManifest,
    pub token_embed: Matrix,
    pub pos_embed: Matrix,
    pub blocks: Vec<Block>,
    pub ln_final: LayerNorm,
    /// `hidden × vocab`. Tied to `token_embedᵀ` when the container has no `head.weight`.
    pub head: Linear,
}

impl Gpt2Model {
    pub fn from_container(c: &Container) -> Result<Self> {
        let m = &c.manifest;
        if m.architecture != Architecture::Gpt2Like {
            return Err(Error::Runtime(
                "only gpt2-like containers can be executed".into(),
            ));
        }
        if m.has_type(MatrixType::Gate) {
            return Err(Error::Runtime(
                "gated MLP (Gate sites) is not supported by the runtime".into(),
            ));
        }
        if m.heads == 0 || !m.hidden.is_multiple_of(m.heads) {
            return Err(Error::Runtime(format!(
                "hidden size {} not divisible by {} heads",
                m.hidden, m.heads
            )));
        }
        let layout = c.group_layout()?;
        let mut bases: HashMap<String, Arc<Matrix>> = HashMap::new();

        let vector = |name: &str, len: usize| -> Result<Vec<f64>> {
            let v = c.require(name)?.to_vector();
            if v.len() != len {
                return Err(Error::Runtime(format!(
                    "{name} has {} values, expected {len}",
                    v.len()
                )));
            }
            Ok(v)
        };
        let norm = |prefix: &str| -> Result<LayerNorm> {
            Ok(LayerNorm {
                weight: vector(&format!("{prefix}.weight"), m.hidden)?,
                bias: vector(&format!("{prefix}.bias"), m.hidden)?,
                eps: m.norm_eps,
            })
        };
        let expect_shape = |name: &str, x: &Matrix, r: usize, cols: usize| -> Result<()> {
            if x.shape() != (r, cols) {
                return Err(Error::Runtime(format!(
                    "{name} is {}x{}, expected {r}x{cols}",
                    x.rows(),
                    x.cols()
                )));
            }
            Ok(())
        };

        let mut load_site = |layer: usize, t: MatrixType| -> Result<Linear> {
            let (d1, d2) = m.matrix_shape(t);
            let bias = match c.get(&bias_name(layer, t)) {
                Some(b) => Some(vector(&b.name, d2)?),
                None => None,
            };
            let dense = site_name(layer, t);
            if let Some(w) = c.get(&dense) {
                let w = w.to_matrix()?;
                expect_shape(&dense, &w, d1, d2)?;
                return Ok(Linear::dense(w, bias));
            }
            let coeff_n = coeff_name(layer, t);
            let coeff = c.matrix(&coeff_n)?;
            let group = layout
                .get(&t)
                .and_then(|gs| gs.iter().position(|g| g.contains(&layer)))
                .ok_or_else(|| {
                    Error::Runtime(format!("{coeff_n} belongs to no group in the layout"))
                })?;
            let bname = basis_name(group, t);
            let basis = match bases.get(&bname) {
                Some(b) => b.clone(),
                None => {
                    let b = Arc::new(c.matrix(&bname)?);
                    bases.insert(bname.clone(), b.clone());
                    b
                }
            };
            expect_shape(&bname, &basis, d1, basis.cols())?;
            expect_shape(&coeff_n, &coeff, basis.cols(), d2)?;
            Ok(Linear {
                weight: LinearWeight::Factorized {
                    basis,
                    coeff: Arc::new(coeff),
                },
                bias,
            })
        };

        let mut blocks = Vec::with_capacity(m.layers);
        for layer in 0..m.layers {
            blocks.push(Block {
                ln_attn: norm(&format!("norm.{layer}.attn"))?,
                k: load_site(layer, MatrixType::K)?,
                q: load_site(layer, MatrixType::Q)?,
                v: load_site(layer, MatrixType::V)?,
                o: load_site(layer, MatrixType::O)?,
                ln_mlp: norm(&format!("norm.{layer}.mlp"))?,
                up: load_site(layer, MatrixType::Up)?,
                down: load_site(layer, MatrixType::Down)?,
            });
        }

        let token_embed = c.matrix("embed.tokens")?;
        expect_shape("embed.tokens", &token_embed, m.vocab, m.hidden)?;
        let pos_embed = c.matrix("embed.positions")?;
        expect_shape("embed.positions", &pos_embed, m.context, m.hidden)?;
        let head_bias = match c.get("head.bias") {
            Some(b) => Some(vector(&b.name, m.vocab)?),
            None => None,
        };
        let head_w = match c.get("head.weight") {
            Some(h) => {
                let h = h.to_matrix()?;
                expect_shape("head.weight", &h, m.hidden, m.vocab)?;
                h
            }
            None => token_embed.transpose(),
        };

        Ok(Gpt2Model {
            manifest: m.clone(),
            token_embed,
            pos_embed,
            blocks,
            ln_final: norm("norm.final")?,
            head: Linear::dense(head_w, head_bias),
        })
    }

    pub fn site(&self, layer: usize, t: MatrixType) -> Option<&Linear> {
        self.blocks.get(layer)?.site(t)
    }

    pub fn site_mut(&mut self, layer: usize, t: MatrixType) -> Option<&mut Linear> {
        self.blocks.get_mut(layer)?.site_mut(t)
    }

    /// Copy with every factorized site replaced by its reconstructed dense matrix.
    pub fn densified(&self) -> Gpt2Model {
        let mut out = self.clone();
        for block in &mut out.blocks {
            for t in EXECUTED_TYPES {
                let site = block.site_mut(t).expect("executed type");
                *site = site.densified();
            }
        }
        out
    }

    pub fn hidden(&self) -> usize {
        self.manifest.hidden
    }

    pub fn vocab(&self) -> usize {
        self.manifest.vocab
    }
}
