//! Which matrix types share a basis, how layers are grouped, and at what rank.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{merge_grams, whitening_factor, GramSet, GramStats};
use crate::container::{site_name, Container, MatrixType, ModelManifest};
use crate::decomposition::{
    factorized_params, rank_for_budget, truncation_loss, within_budget, CompressionRatioSpec,
};
use crate::linalg::{LinalgError, Matrix};
use crate::{Error, Result};

/// Fraction of adjacent layer pairs that must favour sharing for a type to share.
pub const SHARE_MAJORITY: f64 = 0.5;

/// Removed fraction at and above which sequential update is on in `Auto` mode.
pub const SEQUENTIAL_THRESHOLD: f64 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SharePolicy {
    /// Consecutive layers share one basis.
    Share,
    /// Every layer gets its own rank-k factors.
    PerLayer,
    /// Left dense and outside the compressed scope.
    #[serde(rename = "exclude-from-sharing")]
    Exclude,
}

impl SharePolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            SharePolicy::Share => "share",
            SharePolicy::PerLayer => "per-layer",
            SharePolicy::Exclude => "exclude-from-sharing",
        }
    }
}

impl fmt::Display for SharePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SequentialMode {
    /// On iff the removed fraction is at least [`SEQUENTIAL_THRESHOLD`].
    #[default]
    Auto,
    On,
    Off,
}

impl SequentialMode {
    pub fn resolve(self, spec: CompressionRatioSpec) -> bool {
        match self {
            SequentialMode::Auto => spec.removed() >= SEQUENTIAL_THRESHOLD,
            SequentialMode::On => true,
            SequentialMode::Off => false,
        }
    }
}

impl std::str::FromStr for SequentialMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "auto" => Ok(SequentialMode::Auto),
            "on" => Ok(SequentialMode::On),
            "off" => Ok(SequentialMode::Off),
            other => Err(format!("expected auto, on or off, got {other:?}")),
        }
    }
}

/// How group ranks are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RankMode {
    /// Largest rank that fits the parameter budget.
    #[default]
    Budget,
    /// `min(d1, n·d2)`: lossless, for roundtrip checks.
    Full,
}

/// Default policy table: K, Q, V, Up and Gate share; O and Down stay per-layer.
pub fn default_policies(manifest: &ModelManifest) -> BTreeMap<MatrixType, SharePolicy> {
    policies_sharing(
        manifest,
        &[
            MatrixType::K,
            MatrixType::Q,
            MatrixType::V,
            MatrixType::Up,
            MatrixType::Gate,
        ],
    )
}

/// Listed types share, every other type present in the manifest is compressed per layer.
pub fn policies_sharing(
    manifest: &ModelManifest,
    shared: &[MatrixType],
) -> BTreeMap<MatrixType, SharePolicy> {
    manifest
        .matrix_types
        .iter()
        .map(|&t| {
            let policy = if shared.contains(&t) {
                SharePolicy::Share
            } else {
                SharePolicy::PerLayer
            };
            (t, policy)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerGroup {
    /// Ascending, consecutive layer indices.
    pub layers: Vec<usize>,
    pub k: usize,
    /// `k` was clamped to 1 and the group exceeds its parameter budget.
    pub over_budget: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypePlan {
    pub matrix_type: MatrixType,
    pub policy: SharePolicy,
    pub group_size: usize,
    /// `(d1, d2)` of one layer's matrix.
    pub shape: (usize, usize),
    /// Empty for excluded types.
    pub groups: Vec<LayerGroup>,
}

impl TypePlan {
    pub fn original_params(&self) -> usize {
        let (d1, d2) = self.shape;
        self.groups.iter().map(|g| d1 * d2 * g.layers.len()).sum()
    }

    pub fn stored_params(&self) -> usize {
        let (d1, d2) = self.shape;
        self.groups
            .iter()
            .map(|g| factorized_params(d1, d2, g.layers.len(), g.k))
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionPlan {
    pub ratio: CompressionRatioSpec,
    pub rank_mode: RankMode,
    pub sequential_update: bool,
    pub layers: usize,
    pub types: Vec<TypePlan>,
    pub warnings: Vec<String>,
}

impl CompressionPlan {
    pub fn type_plan(&self, t: MatrixType) -> Option<&TypePlan> {
        self.types.iter().find(|p| p.matrix_type == t)
    }

    /// Compressed types and their groups, in type order.
    pub fn groups(&self) -> impl Iterator<Item = (MatrixType, usize, &LayerGroup)> {
        self.types.iter().flat_map(|p| {
            p.groups
                .iter()
                .enumerate()
                .map(move |(i, g)| (p.matrix_type, i, g))
        })
    }

    /// Recomputes every group rank for `mode`.
    pub fn with_rank_mode(mut self, mode: RankMode) -> Self {
        self.rank_mode = mode;
        let ratio = self.ratio;
        for p in &mut self.types {
            let (d1, d2) = p.shape;
            for g in &mut p.groups {
                let (k, over) = group_rank(d1, d2, g.layers.len(), ratio, mode);
                g.k = k;
                g.over_budget = over;
            }
        }
        self
    }

    pub fn with_sequential(mut self, mode: SequentialMode) -> Self {
        self.sequential_update = mode.resolve(self.ratio);
        self
    }

    pub fn original_params(&self) -> usize {
        self.types.iter().map(TypePlan::original_params).sum()
    }

    pub fn stored_params(&self) -> usize {
        self.types.iter().map(TypePlan::stored_params).sum()
    }

    /// Checks that the plan describes `manifest`.
    pub fn check_manifest(&self, manifest: &ModelManifest) -> Result<()> {
        if self.layers != manifest.layers {
            return Err(Error::Plan(format!(
                "plan covers {} layers, model has {}",
                self.layers, manifest.layers
            )));
        }
        for p in &self.types {
            if !manifest.has_type(p.matrix_type) {
                return Err(Error::Plan(format!(
                    "plan mentions {} which the model does not have",
                    p.matrix_type
                )));
            }
            if manifest.matrix_shape(p.matrix_type) != p.shape {
                return Err(Error::Plan(format!(
                    "plan shape for {} does not match the model",
                    p.matrix_type
                )));
            }
            let mut covered: Vec<usize> = Vec::new();
            for g in &p.groups {
                let consecutive = g.layers.windows(2).all(|w| w[1] == w[0] + 1);
                if g.layers.is_empty() || !consecutive {
                    return Err(Error::Plan(format!(
                        "{} group {:?} is not a consecutive ascending run",
                        p.matrix_type, g.layers
                    )));
                }
                covered.extend(&g.layers);
            }
            let expected: Vec<usize> = if p.policy == SharePolicy::Exclude {
                Vec::new()
            } else {
                (0..self.layers).collect()
            };
            if covered != expected {
                return Err(Error::Plan(format!(
                    "{} groups do not partition the layers in order",
                    p.matrix_type
                )));
            }
        }
        Ok(())
    }

    /// Human-readable plan document.
    pub fn render_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "compression plan: remove {:.4} (keep {:.4}), {} layers, rank mode {:?}, sequential update {}",
            self.ratio.removed(),
            self.ratio.retained(),
            self.layers,
            self.rank_mode,
            if self.sequential_update { "on" } else { "off" },
        );
        for p in &self.types {
            let (d1, d2) = p.shape;
            let _ = write!(
                s,
                "  {:<4} {:<20} {d1}x{d2}",
                p.matrix_type.as_str(),
                p.policy.as_str()
            );
            if p.policy == SharePolicy::Share {
                let _ = write!(s, " g={}", p.group_size);
            }
            let _ = writeln!(s);
            for g in &p.groups {
                let layers: Vec<String> = g.layers.iter().map(usize::to_string).collect();
                let _ = writeln!(
                    s,
                    "       layers [{}] k={}{}",
                    layers.join(","),
                    g.k,
                    if g.over_budget { " (over budget)" } else { "" }
                );
            }
        }
        let _ = writeln!(
            s,
            "  scope params: {} -> {}",
            self.original_params(),
            self.stored_params()
        );
        for w in &self.warnings {
            let _ = writeln!(s, "  warning: {w}");
        }
        s
    }
}

fn group_rank(
    d1: usize,
    d2: usize,
    n: usize,
    spec: CompressionRatioSpec,
    mode: RankMode,
) -> (usize, bool) {
    match mode {
        RankMode::Full => (d1.min(n * d2), false),
        RankMode::Budget => {
            let k = rank_for_budget(d1, d2, n, spec);
            (k, !within_budget(d1, d2, n, k, spec))
        }
    }
}

/// Splits `0..layers` into consecutive runs of `g`; the last run may be shorter.
pub fn consecutive_groups(layers: usize, g: usize) -> Vec<Vec<usize>> {
    (0..layers)
        .step_by(g.max(1))
        .map(|start| (start..(start + g).min(layers)).collect())
        .collect()
}

/// Builds a budget-rank plan with sequential update resolved from the ratio.
///
/// Types in `policies` that the manifest lacks are skipped; manifest types with
/// no policy are excluded. Down is never shared.
pub fn build_plan(
    manifest: &ModelManifest,
    policies: &BTreeMap<MatrixType, SharePolicy>,
    group_size: usize,
    spec: CompressionRatioSpec,
) -> Result<CompressionPlan> {
    if group_size == 0 {
        return Err(Error::InvalidArgument(
            "group size must be at least 1".into(),
        ));
    }
    if manifest.layers == 0 {
        return Err(Error::Plan("model has no layers".into()));
    }
    let mut warnings = Vec::new();
    let mut g = group_size;
    if g > manifest.layers {
        warnings.push(format!(
            "group size {g} exceeds {} layers; using {}",
            manifest.layers, manifest.layers
        ));
        g = manifest.layers;
    }
    for t in policies.keys().filter(|t| !manifest.has_type(**t)) {
        log::debug!("model has no {t} matrices; skipping its policy");
    }

    let mut types = Vec::new();
    for &t in &manifest.matrix_types {
        let mut policy = policies.get(&t).copied().unwrap_or(SharePolicy::Exclude);
        if t == MatrixType::Down && policy == SharePolicy::Share {
            warnings.push("Down is compressed per layer, never shared".into());
            policy = SharePolicy::PerLayer;
        }
        let type_g = match policy {
            SharePolicy::Share => g,
            _ => 1,
        };
        let (d1, d2) = manifest.matrix_shape(t);
        let groups = if policy == SharePolicy::Exclude {
            Vec::new()
        } else {
            consecutive_groups(manifest.layers, type_g)
                .into_iter()
                .map(|layers| {
                    let (k, over_budget) = group_rank(d1, d2, layers.len(), spec, RankMode::Budget);
                    LayerGroup {
                        layers,
                        k,
                        over_budget,
                    }
                })
                .collect()
        };
        let over: Vec<String> = groups
            .iter()
            .filter(|gr| gr.over_budget)
            .map(|gr| format!("{:?}", gr.layers))
            .collect();
        if !over.is_empty() {
            warnings.push(format!(
                "{t}: rank clamped to 1 exceeds the budget for groups {}",
                over.join(", ")
            ));
        }
        types.push(TypePlan {
            matrix_type: t,
            policy,
            group_size: type_g,
            shape: (d1, d2),
            groups,
        });
    }
    for w in &warnings {
        log::warn!("plan: {w}");
    }
    Ok(CompressionPlan {
        ratio: spec,
        rank_mode: RankMode::Budget,
        sequential_update: SequentialMode::Auto.resolve(spec),
        layers: manifest.layers,
        types,
        warnings,
    })
}

/// Pairwise whitened truncation losses of one matrix type (heatmap data).
#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseLossMatrix {
    pub matrix_type: MatrixType,
    /// `L×L`; `(i,i)` single-layer loss, `(i,j)` loss of layers `i,j` sharing one basis.
    pub loss: Matrix,
}

impl PairwiseLossMatrix {
    pub fn layers(&self) -> usize {
        self.loss.rows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.loss[(i, j)]
    }

    /// Entry-wise squares (truncated singular-value energy).
    pub fn squared(&self) -> Matrix {
        let (n, _) = self.loss.shape();
        Matrix::from_fn(n, n, |i, j| self.loss[(i, j)] * self.loss[(i, j)])
    }

    /// Adjacent pairs `(i, i+1)` where sharing beats separate factorization.
    pub fn adjacent_favored(&self) -> (usize, usize) {
        let n = self.layers();
        let pairs = n.saturating_sub(1);
        let favored = (0..pairs)
            .filter(|&i| share_favored(self.get(i, i), self.get(i + 1, i + 1), self.get(i, i + 1)))
            .count();
        (favored, pairs)
    }
}

/// Sharing is favoured iff the shared loss is strictly below the sum of separate losses.
pub fn share_favored(loss_i: f64, loss_j: f64, shared: f64) -> bool {
    shared < loss_i + loss_j
}

/// Heatmap from raw per-layer weights and Grams (both indexed by layer).
pub fn pairwise_losses(
    matrix_type: MatrixType,
    weights: &[Matrix],
    grams: &[&GramStats],
    spec: CompressionRatioSpec,
) -> Result<PairwiseLossMatrix> {
    let n = weights.len();
    if grams.len() != n {
        return Err(
            LinalgError::ShapeMismatch(format!("{n} weights but {} Grams", grams.len())).into(),
        );
    }
    let Some(first) = weights.first() else {
        return Err(Error::InvalidArgument("no layers to compare".into()));
    };
    let (d1, d2) = first.shape();
    let cells: Vec<(usize, usize)> = (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).collect();
    let values: Vec<f64> = cells
        .par_iter()
        .map(|&(i, j)| {
            if i == j {
                let s = whitening_factor(grams[i])?;
                truncation_loss(&[&weights[i]], &s, rank_for_budget(d1, d2, 1, spec))
            } else {
                let s = whitening_factor(&merge_grams(&[grams[i], grams[j]])?)?;
                let k = rank_for_budget(d1, d2, 2, spec);
                truncation_loss(&[&weights[i], &weights[j]], &s, k)
            }
        })
        .collect::<Result<_>>()?;
    let mut loss = Matrix::zeros(n, n);
    for (&(i, j), v) in cells.iter().zip(values) {
        loss.as_mut_slice()[i * n + j] = v;
        loss.as_mut_slice()[j * n + i] = v;
    }
    Ok(PairwiseLossMatrix { matrix_type, loss })
}

/// Heatmap for type `t` of a dense model container.
pub fn pairwise_loss_matrix(
    model: &Container,
    grams: &GramSet,
    t: MatrixType,
    spec: CompressionRatioSpec,
) -> Result<PairwiseLossMatrix> {
    let layers = model.manifest.layers;
    let weights: Vec<Matrix> = (0..layers)
        .map(|i| model.matrix(&site_name(i, t)))
        .collect::<Result<_, _>>()?;
    let stats: Vec<&GramStats> = (0..layers)
        .map(|i| grams.require(i, t))
        .collect::<Result<_>>()?;
    pairwise_losses(t, &weights, &stats, spec)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShareabilityVerdict {
    pub matrix_type: MatrixType,
    pub policy: SharePolicy,
    pub favored_pairs: usize,
    pub pairs: usize,
}

impl ShareabilityVerdict {
    pub fn fraction(&self) -> f64 {
        if self.pairs == 0 {
            0.0
        } else {
            self.favored_pairs as f64 / self.pairs as f64
        }
    }
}

/// Majority-of-adjacent-pairs rule; Down is per-layer without inspection.
pub fn type_shareability(
    heatmaps: &[PairwiseLossMatrix],
) -> BTreeMap<MatrixType, ShareabilityVerdict> {
    heatmaps
        .iter()
        .map(|h| {
            let (favored_pairs, pairs) = h.adjacent_favored();
            let mut v = ShareabilityVerdict {
                matrix_type: h.matrix_type,
                policy: SharePolicy::PerLayer,
                favored_pairs,
                pairs,
            };
            if h.matrix_type != MatrixType::Down && v.fraction() > SHARE_MAJORITY {
                v.policy = SharePolicy::Share;
            }
            (h.matrix_type, v)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::SyntheticConfig;

    fn ratio(r: f64) -> CompressionRatioSpec {
        CompressionRatioSpec::new(r).unwrap()
    }

    fn manifest(layers: usize) -> ModelManifest {
        SyntheticConfig {
            layers,
            hidden: 8,
            heads: 2,
            vocab: 16,
            context: 8,
            ..SyntheticConfig::default()
        }
        .manifest()
    }

    #[test]
    fn remainder_group() {
        assert_eq!(
            consecutive_groups(5, 2),
            vec![vec![0, 1], vec![2, 3], vec![4]]
        );
        assert_eq!(consecutive_groups(32, 2).len(), 16);
        assert_eq!(consecutive_groups(3, 1), vec![vec![0], vec![1], vec![2]]);
    }

    #[test]
    fn default_table() {
        let m = manifest(4);
        let plan = build_plan(&m, &default_policies(&m), 2, ratio(0.2)).unwrap();
        let policy = |t| plan.type_plan(t).unwrap().policy;
        assert_eq!(policy(MatrixType::K), SharePolicy::Share);
        assert_eq!(policy(MatrixType::Up), SharePolicy::Share);
        assert_eq!(policy(MatrixType::O), SharePolicy::PerLayer);
        assert_eq!(policy(MatrixType::Down), SharePolicy::PerLayer);
        assert!(plan.type_plan(MatrixType::Gate).is_none());
        assert!(!plan.sequential_update);
        plan.check_manifest(&m).unwrap();
        assert_eq!(plan.type_plan(MatrixType::K).unwrap().groups.len(), 2);
        assert_eq!(plan.type_plan(MatrixType::O).unwrap().groups.len(), 4);
    }

    #[test]
    fn oversized_group_clamps() {
        let m = manifest(3);
        let plan = build_plan(&m, &default_policies(&m), 8, ratio(0.5)).unwrap();
        assert_eq!(
            plan.type_plan(MatrixType::K).unwrap().groups[0].layers,
            vec![0, 1, 2]
        );
        assert!(!plan.warnings.is_empty());
        assert!(plan.sequential_update);
        assert!(build_plan(&m, &default_policies(&m), 0, ratio(0.5)).is_err());
    }

    #[test]
    fn down_never_shared_and_exclusion() {
        let m = manifest(2);
        let mut p = policies_sharing(&m, &[MatrixType::Down, MatrixType::K]);
        p.remove(&MatrixType::O);
        let plan = build_plan(&m, &p, 2, ratio(0.2)).unwrap();
        assert_eq!(
            plan.type_plan(MatrixType::Down).unwrap().policy,
            SharePolicy::PerLayer
        );
        let o = plan.type_plan(MatrixType::O).unwrap();
        assert_eq!(o.policy, SharePolicy::Exclude);
        assert!(o.groups.is_empty());
        plan.check_manifest(&m).unwrap();
    }

    #[test]
    fn full_rank_mode() {
        let m = manifest(2);
        let plan = build_plan(&m, &default_policies(&m), 2, ratio(0.0))
            .unwrap()
            .with_rank_mode(RankMode::Full);
        assert_eq!(plan.type_plan(MatrixType::K).unwrap().groups[0].k, 8);
        assert_eq!(plan.type_plan(MatrixType::Down).unwrap().groups[0].k, 8);
    }

    #[test]
    fn plan_serde_roundtrip() {
        let m = manifest(3);
        let plan = build_plan(&m, &default_policies(&m), 2, ratio(0.3)).unwrap();
        let json = serde_json::to_string(&plan).unwrap();
        assert!(json.contains("\"per-layer\""));
        let back: CompressionPlan = serde_json::from_str(&json).unwrap();
        assert_eq!(back, plan);
        assert!(plan.render_text().contains("layers [0,1] k="));
    }

    #[test]
    fn tie_is_not_favored() {
        assert!(!share_favored(1.0, 2.0, 3.0));
        assert!(share_favored(1.0, 2.0, 2.999));
    }

    #[test]
    fn sequential_modes() {
        assert!(!SequentialMode::Auto.resolve(ratio(0.39)));
        assert!(SequentialMode::Auto.resolve(ratio(0.4)));
        assert!(SequentialMode::On.resolve(ratio(0.0)));
        assert!(!SequentialMode::Off.resolve(ratio(0.9)));
        assert_eq!("ON".parse::<SequentialMode>().unwrap(), SequentialMode::On);
    }
}
