use super::{LinalgError, Matrix};

/// Which side the triangular operand multiplies the unknown from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    /// `t · z = b`
    Left,
    /// `z · t = b`
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Triangle {
    Lower,
    Upper,
}

/// Diagonal entries smaller than this fraction of the largest one count as singular.
const PIVOT_FLOOR: f64 = 1e-14;

/// Solves a triangular system without forming an inverse.
pub fn triangular_solve(
    t: &Matrix,
    b: &Matrix,
    side: Side,
    tri: Triangle,
) -> Result<Matrix, LinalgError> {
    if !t.is_square() {
        return Err(LinalgError::ShapeMismatch(format!(
            "triangular operand must be square, got {}x{}",
            t.rows(),
            t.cols()
        )));
    }
    let n = t.rows();
    let conformable = match side {
        Side::Left => b.rows() == n,
        Side::Right => b.cols() == n,
    };
    if !conformable {
        return Err(LinalgError::ShapeMismatch(format!(
            "{}x{} triangle does not conform with {}x{} right-hand side",
            n,
            n,
            b.rows(),
            b.cols()
        )));
    }
    t.ensure_finite()?;
    b.ensure_finite()?;
    check_diagonal(t)?;

    match side {
        Side::Left => Ok(solve_left(t, b, tri)),
        Side::Right => {
            // z·t = b  ⇔  tᵀ·zᵀ = bᵀ
            let flipped = match tri {
                Triangle::Lower => Triangle::Upper,
                Triangle::Upper => Triangle::Lower,
            };
            Ok(solve_left(&t.transpose(), &b.transpose(), flipped).transpose())
        }
    }
}

fn check_diagonal(t: &Matrix) -> Result<(), LinalgError> {
    let diag = t.diagonal();
    let max = diag.iter().fold(0.0_f64, |m, d| m.max(d.abs()));
    let min = diag.iter().fold(f64::INFINITY, |m, d| m.min(d.abs()));
    for (index, d) in diag.iter().enumerate() {
        if d.abs() <= PIVOT_FLOOR * max || *d == 0.0 {
            return Err(LinalgError::SingularTriangular {
                index,
                value: *d,
                condition: if min > 0.0 { max / min } else { f64::INFINITY },
            });
        }
    }
    Ok(())
}

fn solve_left(t: &Matrix, b: &Matrix, tri: Triangle) -> Matrix {
    let n = t.rows();
    let w = b.cols();
    let mut z = b.clone();
    let mut acc = vec![0.0; w];
    let mut step = |i: usize, z: &mut Matrix, range: std::ops::Range<usize>| {
        acc.copy_from_slice(z.row(i));
        for j in range {
            let tij = t[(i, j)];
            if tij != 0.0 {
                for (a, zj) in acc.iter_mut().zip(z.row(j)) {
                    *a -= tij * zj;
                }
            }
        }
        let d = t[(i, i)];
        for (dst, a) in z.row_mut(i).iter_mut().zip(&acc) {
            *dst = a / d;
        }
    };
    match tri {
        Triangle::Lower => {
            for i in 0..n {
                step(i, &mut z, 0..i);
            }
        }
        Triangle::Upper => {
            for i in (0..n).rev() {
                step(i, &mut z, i + 1..n);
            }
        }
    }
    z
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::frobenius_norm;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_returns_rhs() {
        let b = Matrix::from_rows(&[[1.0, -2.0], [3.5, 4.0], [0.0, 9.0]]);
        for side_tri in [Triangle::Lower, Triangle::Upper] {
            let z = triangular_solve(&Matrix::identity(3), &b, Side::Left, side_tri).unwrap();
            assert_eq!(z, b);
        }
    }

    #[test]
    fn small_lower_left() {
        let t = Matrix::from_rows(&[[2.0, 0.0], [1.0, 1.0]]);
        let b = Matrix::from_rows(&[[2.0], [3.0]]);
        let z = triangular_solve(&t, &b, Side::Left, Triangle::Lower).unwrap();
        assert_eq!(z, Matrix::from_rows(&[[1.0], [2.0]]));
    }

    #[test]
    fn random_upper_right_side() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut t = Matrix::random_normal(8, 8, &mut rng);
        for i in 0..8 {
            for j in 0..i {
                t[(i, j)] = 0.0;
            }
            t[(i, i)] += 4.0_f64.copysign(t[(i, i)]);
        }
        let b = Matrix::random_normal(5, 8, &mut rng);
        let z = triangular_solve(&t, &b, Side::Right, Triangle::Upper).unwrap();
        let resid = frobenius_norm(&z.matmul(&t).unwrap().sub(&b).unwrap()).unwrap();
        assert!(resid / frobenius_norm(&b).unwrap() < 1e-10);
    }

    #[test]
    fn zero_pivot_is_reported() {
        let t = Matrix::from_rows(&[[1.0, 0.0], [5.0, 0.0]]);
        let b = Matrix::identity(2);
        let err = triangular_solve(&t, &b, Side::Left, Triangle::Lower).unwrap_err();
        assert!(matches!(
            err,
            LinalgError::SingularTriangular { index: 1, .. }
        ));
    }
}
