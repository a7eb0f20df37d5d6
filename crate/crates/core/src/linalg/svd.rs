//! Thin singular value decomposition.
//!
//! Tall inputs are first reduced with a Householder QR so the Jacobi sweeps
//! run on the small `n×n` triangle; wide inputs are handled by transposing.
//! The sweeps themselves are one-sided (Hestenes) Jacobi, which keeps both
//! factor sets orthonormal to working precision.

use rayon::prelude::*;

use super::{dot, LinalgError, Matrix};

const MAX_SWEEPS: usize = 80;
/// Above this many entries the per-column QR updates run on the rayon pool.
const PAR_QR_WORK: usize = 1 << 16;

/// `a ≈ u · diag(singular_values) · vt`.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: Matrix,
    pub singular_values: Vec<f64>,
    pub vt: Matrix,
}

impl SvdResult {
    pub fn rank(&self) -> usize {
        self.singular_values.len()
    }

    /// Keeps the leading `k` triplets.
    pub fn truncate(self, k: usize) -> SvdResult {
        let k = k.min(self.rank());
        SvdResult {
            u: self.u.columns(0, k),
            singular_values: self.singular_values[..k].to_vec(),
            vt: self.vt.row_range(0, k),
        }
    }

    pub fn reconstruct(&self) -> Matrix {
        self.u
            .scale_columns(&self.singular_values)
            .matmul(&self.vt)
            .expect("svd factors are conformable")
    }
}

/// Full thin SVD, `r = min(rows, cols)` triplets in descending order.
pub fn svd(a: &Matrix) -> Result<SvdResult, LinalgError> {
    a.ensure_finite()?;
    decompose(a)
}

/// Top-`k` triplets of `a`; `U_k Σ_k V_kᵀ` is a best rank-`k` approximation in Frobenius norm.
pub fn truncated_svd(a: &Matrix, k: usize) -> Result<SvdResult, LinalgError> {
    let max_k = a.rows().min(a.cols());
    if k == 0 || k > max_k {
        return Err(LinalgError::RankOutOfRange { k, max: max_k });
    }
    Ok(svd(a)?.truncate(k))
}

/// Singular values only, descending. Skips all factor accumulation.
pub fn singular_values(a: &Matrix) -> Result<Vec<f64>, LinalgError> {
    a.ensure_finite()?;
    let tall = if a.rows() >= a.cols() {
        a.clone()
    } else {
        a.transpose()
    };
    let (m, n) = tall.shape();
    let mut cols = to_columns(&tall);
    if m > n {
        cols = householder_qr(cols, m, false).r;
    }
    jacobi_sweeps(&mut cols, None)?;
    let mut sv: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    sv.sort_by(|x, y| y.total_cmp(x));
    Ok(sv)
}

fn decompose(a: &Matrix) -> Result<SvdResult, LinalgError> {
    let transposed = a.rows() < a.cols();
    let tall = if transposed { a.transpose() } else { a.clone() };
    let (m, n) = tall.shape();
    if n == 0 {
        return Ok(SvdResult {
            u: Matrix::zeros(a.rows(), 0),
            singular_values: Vec::new(),
            vt: Matrix::zeros(0, a.cols()),
        });
    }

    let columns = to_columns(&tall);
    let (mut work, q) = if m > n {
        let qr = householder_qr(columns, m, true);
        (qr.r, qr.q)
    } else {
        (columns, None)
    };

    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();
    jacobi_sweeps(&mut work, Some(&mut v))?;

    let norms: Vec<f64> = work.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]));

    // Left vectors of the Jacobi work matrix (length = work column length).
    let len = work[0].len();
    let mut left: Vec<Option<Vec<f64>>> = order
        .iter()
        .map(|&j| {
            let s = norms[j];
            if s * s >= f64::MIN_POSITIVE {
                Some(work[j].iter().map(|x| x / s).collect())
            } else {
                None
            }
        })
        .collect();
    complete_orthonormal(&mut left, len);
    let left: Vec<Vec<f64>> = left.into_iter().map(|c| c.expect("completed")).collect();

    let singular_values: Vec<f64> = order.iter().map(|&j| norms[j]).collect();

    // u_tall: m×n
    let mut u_tall = Matrix::zeros(m, n);
    match q {
        Some(q) => {
            // q is m×n, left vectors are length n.
            let ur = Matrix::from_fn(n, n, |i, j| left[j][i]);
            u_tall = q.matmul(&ur)?;
        }
        None => {
            for (j, col) in left.iter().enumerate() {
                for i in 0..m {
                    u_tall[(i, j)] = col[i];
                }
            }
        }
    }
    // v_tall: n×n with columns = v[order[j]]
    let v_tall = Matrix::from_fn(n, n, |i, j| v[order[j]][i]);

    Ok(if transposed {
        SvdResult {
            u: v_tall,
            singular_values,
            vt: u_tall.transpose(),
        }
    } else {
        SvdResult {
            u: u_tall,
            singular_values,
            vt: v_tall.transpose(),
        }
    })
}

fn to_columns(a: &Matrix) -> Vec<Vec<f64>> {
    (0..a.cols()).map(|j| a.column(j)).collect()
}

struct Qr {
    /// Upper-triangular factor stored as `n` columns of length `n`.
    r: Vec<Vec<f64>>,
    /// Thin orthonormal factor `m×n`.
    q: Option<Matrix>,
}

fn householder_qr(mut cols: Vec<Vec<f64>>, m: usize, want_q: bool) -> Qr {
    let n = cols.len();
    let mut reflectors: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n);
    let parallel = m * n >= PAR_QR_WORK;

    for j in 0..n {
        let x = &cols[j][j..];
        let norm = dot(x, x).sqrt();
        if norm == 0.0 {
            reflectors.push((Vec::new(), 0.0));
            continue;
        }
        let alpha = if x[0] >= 0.0 { -norm } else { norm };
        let mut v = x.to_vec();
        v[0] -= alpha;
        let vnorm2 = dot(&v, &v);
        let beta = if vnorm2 > 0.0 { 2.0 / vnorm2 } else { 0.0 };
        let apply = |c: &mut Vec<f64>| {
            let tail = &mut c[j..];
            let s = beta * dot(&v, tail);
            for (t, vi) in tail.iter_mut().zip(&v) {
                *t -= s * vi;
            }
        };
        if parallel {
            cols[j..].par_iter_mut().for_each(apply);
        } else {
            cols[j..].iter_mut().for_each(apply);
        }
        // Exact zeros below the diagonal.
        cols[j][j] = alpha;
        for t in cols[j][j + 1..].iter_mut() {
            *t = 0.0;
        }
        reflectors.push((v, beta));
    }

    let r: Vec<Vec<f64>> = cols.iter().map(|c| c[..n].to_vec()).collect();

    let q = want_q.then(|| {
        let mut qcols: Vec<Vec<f64>> = (0..n)
            .map(|j| {
                let mut e = vec![0.0; m];
                e[j] = 1.0;
                e
            })
            .collect();
        for (j, (v, beta)) in reflectors.iter().enumerate().rev() {
            if *beta == 0.0 {
                continue;
            }
            let apply = |c: &mut Vec<f64>| {
                let tail = &mut c[j..];
                let s = beta * dot(v, tail);
                for (t, vi) in tail.iter_mut().zip(v) {
                    *t -= s * vi;
                }
            };
            if parallel {
                qcols.par_iter_mut().for_each(apply);
            } else {
                qcols.iter_mut().for_each(apply);
            }
        }
        Matrix::from_fn(m, n, |i, j| qcols[j][i])
    });

    Qr { r, q }
}

/// Cyclic one-sided Jacobi: rotates column pairs until all are mutually orthogonal.
///
/// Columns whose energy falls to rounding level relative to the whole matrix
/// are never rotated and are zeroed on exit: they hold noise that cannot be
/// made orthogonal to the large columns at relative precision.
fn jacobi_sweeps(cols: &mut [Vec<f64>], mut v: Option<&mut [Vec<f64>]>) -> Result<(), LinalgError> {
    let n = cols.len();
    if n < 2 {
        return Ok(());
    }
    let len = cols[0].len();
    let tol = f64::EPSILON * (len as f64).sqrt();
    let total: f64 = cols.iter().map(|c| dot(c, c)).sum();
    let negligible = (f64::EPSILON * len as f64).powi(2) * total;

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..n - 1 {
            for j in i + 1..n {
                let (lo, hi) = cols.split_at_mut(j);
                let (gi, gj) = (&mut lo[i], &mut hi[0]);
                let alpha = dot(gi, gi);
                let beta = dot(gj, gj);
                if alpha <= negligible || beta <= negligible || alpha.min(beta) < f64::MIN_POSITIVE
                {
                    continue;
                }
                let gamma = dot(gi, gj);
                if gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum_or_one() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(gi, gj, c, s);
                if let Some(v) = v.as_deref_mut() {
                    let (lo, hi) = v.split_at_mut(j);
                    rotate(&mut lo[i], &mut hi[0], c, s);
                }
            }
        }
        if !rotated {
            for c in cols.iter_mut().filter(|c| dot(c, c) <= negligible) {
                c.fill(0.0);
            }
            return Ok(());
        }
    }
    Err(LinalgError::NoConvergence { sweeps: MAX_SWEEPS })
}

#[inline]
fn rotate(x: &mut [f64], y: &mut [f64], c: f64, s: f64) {
    for (a, b) in x.iter_mut().zip(y.iter_mut()) {
        let (xa, yb) = (*a, *b);
        *a = c * xa - s * yb;
        *b = s * xa + c * yb;
    }
}

trait SignumOrOne {
    fn signum_or_one(self) -> f64;
}

impl SignumOrOne for f64 {
    #[inline]
    fn signum_or_one(self) -> f64 {
        if self >= 0.0 {
            1.0
        } else {
            -1.0
        }
    }
}

/// Fills `None` slots with unit vectors orthogonal to every other slot.
fn complete_orthonormal(cols: &mut [Option<Vec<f64>>], len: usize) {
    let missing: Vec<usize> = (0..cols.len()).filter(|&j| cols[j].is_none()).collect();
    let mut candidate = 0;
    for slot in missing {
        while candidate < len {
            let mut e = vec![0.0; len];
            e[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for c in cols.iter().flatten() {
                    let p = dot(c, &e);
                    for (x, ci) in e.iter_mut().zip(c) {
                        *x -= p * ci;
                    }
                }
            }
            let norm = dot(&e, &e).sqrt();
            if norm > 0.5 {
                e.iter_mut().for_each(|x| *x /= norm);
                cols[slot] = Some(e);
                break;
            }
        }
    }
}
