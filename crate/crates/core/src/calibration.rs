//! Calibration statistics: per-site Gram matrices `XᵀX` of the input operand of
//! each linear site, their merge over a sharing group, and the whitening factor
//! `S` with `‖X·M‖_F = ‖S·M‖_F`.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde_json::json;

use crate::container::{gram_name, Container, MatrixType, ModelManifest, Tensor};
use crate::linalg::{
    check_symmetric, cholesky_factor, triangular_solve, LinalgError, Matrix, Side, Triangle,
};
use crate::runtime::{forward_sequence, ActivationSink, Gpt2Model};
use crate::{Error, Result};

/// First diagonal shift, relative to the mean Gram diagonal.
pub const JITTER_BASE: f64 = 1e-6;
pub const JITTER_GROWTH: f64 = 10.0;
pub const JITTER_RETRIES: usize = 3;

/// Sequences per private partial during parallel accumulation.
const CHUNK_SEQUENCES: usize = 4;

/// Accumulated `XᵀX` for one site or group.
#[derive(Debug, Clone, PartialEq)]
pub struct GramStats {
    pub id: String,
    pub gram: Matrix,
    pub token_count: u64,
}

impl GramStats {
    pub fn zeros(id: impl Into<String>, dim: usize) -> Self {
        Self {
            id: id.into(),
            gram: Matrix::zeros(dim, dim),
            token_count: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.gram.rows()
    }

    fn add_gram(&mut self, g: &Matrix, tokens: u64) -> Result<()> {
        self.gram.add_assign(g)?;
        self.token_count += tokens;
        Ok(())
    }
}

/// `gram += activationsᵀ·activations`, `token_count += rows`.
pub fn accumulate_gram(activations: &Matrix, mut stats: GramStats) -> Result<GramStats> {
    if activations.cols() != stats.dim() {
        return Err(LinalgError::ShapeMismatch(format!(
            "{}: activation width {} does not match Gram dimension {}",
            stats.id,
            activations.cols(),
            stats.dim()
        ))
        .into());
    }
    activations.ensure_finite()?;
    stats.add_gram(&activations.gram(), activations.rows() as u64)?;
    Ok(stats)
}

/// Sum of the inputs' Grams: the Gram of their row-wise concatenation.
pub fn merge_grams(parts: &[&GramStats]) -> Result<GramStats> {
    let Some(first) = parts.first() else {
        return Err(Error::InvalidArgument("nothing to merge".into()));
    };
    if parts.len() == 1 {
        return Ok((*first).clone());
    }
    let id = parts
        .iter()
        .map(|p| p.id.as_str())
        .collect::<Vec<_>>()
        .join("+");
    let mut out = GramStats::zeros(id, first.dim());
    for p in parts {
        if p.dim() != out.dim() {
            return Err(LinalgError::ShapeMismatch(format!(
                "cannot merge {}-dim Gram `{}` into {}-dim group",
                p.dim(),
                p.id,
                out.dim()
            ))
            .into());
        }
        out.add_gram(&p.gram, p.token_count)?;
    }
    Ok(out)
}

/// Upper-triangular `s = Lᵀ` where `L·Lᵀ = gram + jitter·I`.
#[derive(Debug, Clone, PartialEq)]
pub struct WhiteningFactor {
    pub s: Matrix,
    pub jitter_used: f64,
}

impl WhiteningFactor {
    pub fn identity(dim: usize) -> Self {
        Self {
            s: Matrix::identity(dim),
            jitter_used: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.s.rows()
    }

    /// `s · m`.
    pub fn apply(&self, m: &Matrix) -> Result<Matrix> {
        Ok(self.s.matmul(m)?)
    }

    /// `s⁻¹ · m` by back substitution.
    pub fn solve(&self, m: &Matrix) -> Result<Matrix> {
        Ok(triangular_solve(&self.s, m, Side::Left, Triangle::Upper)?)
    }
}

/// Cholesky-based whitening factor, escalating a diagonal shift on pivot failure.
///
/// With zero shift, `‖X·M‖²_F = tr(MᵀLLᵀM) = ‖LᵀM‖²_F`.
pub fn whitening_factor(stats: &GramStats) -> Result<WhiteningFactor> {
    if stats.token_count == 0 {
        return Err(Error::InvalidArgument(format!(
            "{}: Gram has no calibration tokens",
            stats.id
        )));
    }
    stats.gram.ensure_finite()?;
    check_symmetric(&stats.gram)?;

    let n = stats.dim();
    let mean_diag = stats.gram.trace() / n.max(1) as f64;
    let base = JITTER_BASE * if mean_diag > 0.0 { mean_diag } else { 1.0 };

    let mut jitter = 0.0;
    for attempt in 0..=JITTER_RETRIES {
        if attempt > 0 {
            jitter = base * JITTER_GROWTH.powi(attempt as i32 - 1);
        }
        let shifted = if jitter == 0.0 {
            stats.gram.clone()
        } else {
            stats.gram.add(&Matrix::identity(n).scale(jitter))?
        };
        match cholesky_factor(&shifted) {
            Ok(l) => {
                if jitter > 0.0 {
                    log::debug!("{}: whitening needed jitter {jitter:.3e}", stats.id);
                }
                return Ok(WhiteningFactor {
                    s: l.transpose(),
                    jitter_used: jitter,
                });
            }
            Err(LinalgError::NotPositiveDefinite { .. }) => continue,
            Err(e) => return Err(e.into()),
        }
    }
    Err(Error::PdUnattainable {
        site: stats.id.clone(),
        retries: JITTER_RETRIES,
        last_jitter: jitter,
    })
}

/// Grams for every (layer, type) site of a model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GramSet {
    pub sites: BTreeMap<(usize, MatrixType), GramStats>,
}

impl GramSet {
    pub fn get(&self, layer: usize, t: MatrixType) -> Option<&GramStats> {
        self.sites.get(&(layer, t))
    }

    pub fn require(&self, layer: usize, t: MatrixType) -> Result<&GramStats> {
        self.get(layer, t).ok_or_else(|| {
            Error::Plan(format!(
                "missing Gram statistics for site {}",
                gram_name(layer, t)
            ))
        })
    }

    pub fn insert(&mut self, layer: usize, t: MatrixType, stats: GramStats) {
        self.sites.insert((layer, t), stats);
    }

    fn absorb(&mut self, other: GramSet) -> Result<()> {
        for (key, stats) in other.sites {
            match self.sites.get_mut(&key) {
                Some(mine) => mine.add_gram(&stats.gram, stats.token_count)?,
                None => {
                    self.sites.insert(key, stats);
                }
            }
        }
        Ok(())
    }

    /// Gram container: `site.{i}.{type}.gram` tensors plus token counts in the header.
    pub fn to_container(&self, manifest: &ModelManifest) -> Container {
        let mut c = Container::new(manifest.clone());
        let mut counts = serde_json::Map::new();
        for (&(layer, t), stats) in &self.sites {
            let name = gram_name(layer, t);
            counts.insert(name.clone(), json!(stats.token_count));
            c.push(Tensor::from_matrix(name, &stats.gram));
        }
        c.metadata
            .insert("token_counts".into(), serde_json::Value::Object(counts));
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let counts = c
            .metadata
            .get("token_counts")
            .and_then(|v| v.as_object())
            .ok_or_else(|| Error::Plan("Gram container has no token_counts".into()))?;
        let mut set = GramSet::default();
        for t in &c.tensors {
            let Some((layer, ty)) = parse_gram_name(&t.name) else {
                continue;
            };
            let token_count = counts
                .get(&t.name)
                .and_then(|v| v.as_u64())
                .ok_or_else(|| Error::Plan(format!("no token count recorded for {}", t.name)))?;
            set.insert(
                layer,
                ty,
                GramStats {
                    id: site_id(layer, ty),
                    gram: t.to_matrix()?,
                    token_count,
                },
            );
        }
        Ok(set)
    }
}

fn site_id(layer: usize, t: MatrixType) -> String {
    format!("site.{layer}.{t}")
}

fn parse_gram_name(name: &str) -> Option<(usize, MatrixType)> {
    let rest = name.strip_prefix("site.")?.strip_suffix(".gram")?;
    let (layer, ty) = rest.split_once('.')?;
    Some((layer.parse().ok()?, ty.parse().ok()?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CalibrationConfig {
    /// Number of calibration sequences.
    pub samples: usize,
    pub seq_len: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            samples: 256,
            seq_len: 2048,
        }
    }
}

struct GramSink {
    from_layer: usize,
    types: Vec<MatrixType>,
    set: GramSet,
    dims: BTreeMap<MatrixType, usize>,
}

impl ActivationSink for GramSink {
    fn record(&mut self, layer: usize, types: &[MatrixType], x: &Matrix) {
        if layer < self.from_layer || !types.iter().any(|t| self.types.contains(t)) {
            return;
        }
        let g = x.gram();
        for &t in types.iter().filter(|t| self.types.contains(t)) {
            let dim = self.dims[&t];
            let stats = self
                .set
                .sites
                .entry((layer, t))
                .or_insert_with(|| GramStats::zeros(site_id(layer, t), dim));
            stats
                .add_gram(&g, x.rows() as u64)
                .expect("activation width matches manifest");
        }
    }
}

/// Runs the model over consecutive calibration windows and accumulates site Grams.
pub fn calibrate(model: &Gpt2Model, tokens: &[u32], cfg: &CalibrationConfig) -> Result<GramSet> {
    calibrate_from_layer(model, tokens, cfg, 0)
}

/// Like [`calibrate`] but only records sites at `layer >= from_layer`.
///
/// Windows are split into fixed chunks whose partial sums are combined in chunk
/// order, so the result does not depend on the worker count.
pub fn calibrate_from_layer(
    model: &Gpt2Model,
    tokens: &[u32],
    cfg: &CalibrationConfig,
    from_layer: usize,
) -> Result<GramSet> {
    if cfg.seq_len == 0 || cfg.samples == 0 {
        return Err(Error::InvalidArgument(
            "calibration needs positive samples and sequence length".into(),
        ));
    }
    if cfg.seq_len > model.manifest.context {
        return Err(Error::InvalidArgument(format!(
            "calibration sequence length {} exceeds model context {}",
            cfg.seq_len, model.manifest.context
        )));
    }
    let available = tokens.len() / cfg.seq_len;
    let n = cfg.samples.min(available);
    if n == 0 {
        return Err(Error::InvalidArgument(format!(
            "token stream of {} tokens is shorter than one {}-token calibration window",
            tokens.len(),
            cfg.seq_len
        )));
    }
    if n < cfg.samples {
        log::warn!(
            "calibration: only {n} of {} requested windows available",
            cfg.samples
        );
    }

    let types: Vec<MatrixType> = model
        .manifest
        .matrix_types
        .iter()
        .copied()
        .filter(|&t| t != MatrixType::Gate)
        .collect();
    let dims: BTreeMap<MatrixType, usize> = types
        .iter()
        .map(|&t| (t, model.manifest.matrix_shape(t).0))
        .collect();

    let windows: Vec<&[u32]> = (0..n)
        .map(|i| &tokens[i * cfg.seq_len..(i + 1) * cfg.seq_len])
        .collect();
    let partials: Vec<GramSet> = windows
        .par_chunks(CHUNK_SEQUENCES)
        .map(|chunk| {
            let mut sink = GramSink {
                from_layer,
                types: types.clone(),
                set: GramSet::default(),
                dims: dims.clone(),
            };
            for seq in chunk {
                forward_sequence(model, seq, Some(&mut sink))?;
            }
            Ok(sink.set)
        })
        .collect::<Result<_>>()?;

    let mut total = GramSet::default();
    for p in partials {
        total.absorb(p)?;
    }
    Ok(total)
}
