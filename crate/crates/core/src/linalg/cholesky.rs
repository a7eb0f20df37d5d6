use super::{LinalgError, Matrix};

/// Relative tolerance for the symmetry precondition.
pub const SYMMETRY_TOLERANCE: f64 = 1e-8;

/// Lower-triangular `L` with `L·Lᵀ = a`.
///
/// Fails with [`LinalgError::NotPositiveDefinite`] on the first non-positive
/// pivot so the caller can retry with a larger diagonal shift.
pub fn cholesky_factor(a: &Matrix) -> Result<Matrix, LinalgError> {
    if !a.is_square() {
        return Err(LinalgError::ShapeMismatch(format!(
            "cholesky needs a square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    a.ensure_finite()?;
    check_symmetric(a)?;

    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let lj = l.row(j)[..j].to_vec();
        let pivot = a[(j, j)] - lj.iter().map(|x| x * x).sum::<f64>();
        if !pivot.is_finite() || pivot <= 0.0 {
            return Err(LinalgError::NotPositiveDefinite { index: j, pivot });
        }
        let d = pivot.sqrt();
        l[(j, j)] = d;
        for i in j + 1..n {
            let li = &l.row(i)[..j];
            let s: f64 = li.iter().zip(&lj).map(|(x, y)| x * y).sum();
            l[(i, j)] = (a[(i, j)] - s) / d;
        }
    }
    Ok(l)
}

pub fn check_symmetric(a: &Matrix) -> Result<(), LinalgError> {
    let scale = a.max_abs();
    let n = a.rows();
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in i + 1..n {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    if worst > SYMMETRY_TOLERANCE * scale {
        return Err(LinalgError::NotSymmetric {
            deviation: worst / scale.max(f64::MIN_POSITIVE),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::frobenius_norm;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_is_fixed() {
        assert_eq!(
            cholesky_factor(&Matrix::identity(3)).unwrap(),
            Matrix::identity(3)
        );
    }

    #[test]
    fn two_by_two() {
        let a = Matrix::from_rows(&[[4.0, 2.0], [2.0, 3.0]]);
        let l = cholesky_factor(&a).unwrap();
        let expect = Matrix::from_rows(&[[2.0, 0.0], [1.0, 2.0_f64.sqrt()]]);
        assert!(l.sub(&expect).unwrap().max_abs() < 1e-15);
        let back = l.matmul(&l.transpose()).unwrap();
        assert!(back.sub(&a).unwrap().max_abs() < 1e-14);
    }

    #[test]
    fn random_gram_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Matrix::random_normal(6, 4, &mut rng);
        let a = x.gram().add(&Matrix::identity(4).scale(0.1)).unwrap();
        let l = cholesky_factor(&a).unwrap();
        let err = frobenius_norm(&l.matmul(&l.transpose()).unwrap().sub(&a).unwrap()).unwrap();
        assert!(err / frobenius_norm(&a).unwrap() < 1e-9);
        for i in 0..4 {
            for j in i + 1..4 {
                assert_eq!(l[(i, j)], 0.0);
            }
        }
    }

    #[test]
    fn rejects_bad_input() {
        let ns = Matrix::from_rows(&[[1.0, 2.0], [0.0, 1.0]]);
        assert!(matches!(
            cholesky_factor(&ns),
            Err(LinalgError::NotSymmetric { .. })
        ));
        let indefinite = Matrix::from_rows(&[[1.0, 2.0], [2.0, 1.0]]);
        assert!(matches!(
            cholesky_factor(&indefinite),
            Err(LinalgError::NotPositiveDefinite { index: 1, .. })
        ));
        let singular = Matrix::zeros(2, 2);
        assert!(matches!(
            cholesky_factor(&singular),
            Err(LinalgError::NotPositiveDefinite { index: 0, .. })
        ));
    }
}
