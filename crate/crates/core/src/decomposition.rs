//! Shared-basis factorization of a group of same-shape weight matrices.
//!
//! The group `W⁽¹⁾..W⁽ⁿ⁾` (each `d1×d2`) is concatenated horizontally, scaled
//! by the whitening factor `S`, and truncated to rank `k`:
//! `S·[W⁽¹⁾ … W⁽ⁿ⁾] ≈ U_k Σ_k V_kᵀ`. The basis is `S⁻¹·U_kΣ_k` (`d1×k`) and
//! layer `i` keeps the `i`-th `k×d2` column block of `V_kᵀ` as coefficients.

use serde::{Deserialize, Serialize};

use crate::calibration::WhiteningFactor;
use crate::linalg::{singular_values, svd, LinalgError, Matrix};
use crate::{Error, Result};

/// Fraction of parameters removed (`r`); the retained fraction is `x = 1 − r`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompressionRatioSpec {
    removed: f64,
}

impl CompressionRatioSpec {
    pub fn new(removed: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&removed) {
            return Err(Error::InvalidArgument(format!(
                "compression ratio must be in [0, 1), got {removed}"
            )));
        }
        Ok(Self { removed })
    }

    pub fn removed(&self) -> f64 {
        self.removed
    }

    pub fn retained(&self) -> f64 {
        1.0 - self.removed
    }
}

/// Dense parameter budget `d1·d2·n·x` of a group.
pub fn parameter_budget(d1: usize, d2: usize, n: usize, spec: CompressionRatioSpec) -> f64 {
    (d1 * d2 * n) as f64 * spec.retained()
}

/// Stored parameters of a rank-`k` group factorization: `d1·k + k·d2·n`.
pub fn factorized_params(d1: usize, d2: usize, n: usize, k: usize) -> usize {
    d1 * k + k * d2 * n
}

/// `x` as `mant · 2^-shift` with integer `mant`; exact for finite `x ≥ 0`.
fn dyadic(x: f64) -> (u128, u32) {
    let bits = x.to_bits();
    let exp = ((bits >> 52) & 0x7ff) as i32;
    let frac = (bits & ((1 << 52) - 1)) as u128;
    let (mant, e) = if exp == 0 {
        (frac, -1074)
    } else {
        (frac | 1 << 52, exp - 1075)
    };
    // retained fractions are at most 1, so e <= 0
    (mant, (-e) as u32)
}

/// `floor(d1·d2·n·x / (d1 + d2·n))` computed exactly.
fn budget_rank(d1: usize, d2: usize, n: usize, spec: CompressionRatioSpec) -> usize {
    let (mant, shift) = dyadic(spec.retained());
    let scaled = (d1 * d2 * n) as u128 * mant;
    let whole = if shift >= 128 { 0 } else { scaled >> shift };
    (whole / (d1 + d2 * n) as u128) as usize
}

/// Largest `k` with `d1·k + k·d2·n ≤ d1·d2·n·x`, clamped to at least 1.
///
/// A clamped `k` may exceed the budget; check with [`within_budget`].
pub fn rank_for_budget(d1: usize, d2: usize, n: usize, spec: CompressionRatioSpec) -> usize {
    assert!(
        d1 >= 1 && d2 >= 1 && n >= 1,
        "group dimensions must be positive"
    );
    budget_rank(d1, d2, n, spec).max(1)
}

/// True when rank `k` stores no more than the group's budget.
pub fn within_budget(d1: usize, d2: usize, n: usize, k: usize, spec: CompressionRatioSpec) -> bool {
    k <= budget_rank(d1, d2, n, spec)
}

/// Basis plus per-layer coefficients for one sharing group.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisFactorization {
    /// `d1×k`, already multiplied by `S⁻¹`.
    pub basis: Matrix,
    /// One `k×d2` block per group member, in group order.
    pub coeffs: Vec<Matrix>,
    pub k: usize,
    /// `√(Σ_{i>k} σᵢ²)` of the whitened concatenation.
    pub whitened_loss: f64,
}

impl BasisFactorization {
    pub fn group_size(&self) -> usize {
        self.coeffs.len()
    }

    pub fn whitened_loss_sq(&self) -> f64 {
        self.whitened_loss * self.whitened_loss
    }

    pub fn stored_params(&self) -> usize {
        self.basis.rows() * self.basis.cols()
            + self
                .coeffs
                .iter()
                .map(|c| c.rows() * c.cols())
                .sum::<usize>()
    }
}

fn check_group(weights: &[&Matrix], s: &WhiteningFactor, k: usize) -> Result<(usize, usize)> {
    let Some(first) = weights.first() else {
        return Err(Error::InvalidArgument("empty sharing group".into()));
    };
    let (d1, d2) = first.shape();
    if let Some(w) = weights.iter().find(|w| w.shape() != (d1, d2)) {
        return Err(LinalgError::ShapeMismatch(format!(
            "group member is {}x{}, expected {d1}x{d2}",
            w.rows(),
            w.cols()
        ))
        .into());
    }
    if s.dim() != d1 {
        return Err(LinalgError::ShapeMismatch(format!(
            "whitening factor is {0}x{0}, weights have {d1} input rows",
            s.dim()
        ))
        .into());
    }
    let max = d1.min(d2 * weights.len());
    if k == 0 || k > max {
        return Err(LinalgError::RankOutOfRange { k, max }.into());
    }
    Ok((d1, d2))
}

fn tail_energy(sv: &[f64], k: usize) -> f64 {
    sv.iter().skip(k).map(|s| s * s).sum::<f64>().sqrt()
}

fn whitened_concat(weights: &[&Matrix], s: &WhiteningFactor) -> Result<Matrix> {
    let w = Matrix::hconcat(weights)?;
    s.apply(&w)
}

/// Factorizes a group in the given (ascending layer) order.
pub fn factorize_group(
    weights: &[&Matrix],
    s: &WhiteningFactor,
    k: usize,
) -> Result<BasisFactorization> {
    let (_, d2) = check_group(weights, s, k)?;
    let scaled = whitened_concat(weights, s)?;
    let full = svd(&scaled)?;
    let whitened_loss = tail_energy(&full.singular_values, k);
    let top = full.truncate(k);

    let scaled_basis = top.u.scale_columns(&top.singular_values);
    let basis = s.solve(&scaled_basis)?;
    let coeffs = (0..weights.len())
        .map(|i| top.vt.columns(i * d2, (i + 1) * d2))
        .collect();
    Ok(BasisFactorization {
        basis,
        coeffs,
        k,
        whitened_loss,
    })
}

/// `basis · coeffs[layer_index]`.
pub fn reconstruct(f: &BasisFactorization, layer_index: usize) -> Result<Matrix> {
    let coeff = f.coeffs.get(layer_index).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "layer index {layer_index} outside group of {}",
            f.coeffs.len()
        ))
    })?;
    Ok(f.basis.matmul(coeff)?)
}

/// Whitened truncation loss at rank `k` from singular values alone.
pub fn truncation_loss(weights: &[&Matrix], s: &WhiteningFactor, k: usize) -> Result<f64> {
    check_group(weights, s, k)?;
    let sv = singular_values(&whitened_concat(weights, s)?)?;
    Ok(tail_energy(&sv, k))
}
