use super::{dense::dot, DenseMatrix, LinalgError};

/// A column whose norm shrinks below this fraction of its original norm
/// during orthogonalization is treated as linearly dependent.
const DEPENDENCE_TOL: f64 = 1e-10;

/// Orthonormal basis for the column space of `m`.
///
/// Modified Gram-Schmidt with one full re-orthogonalization pass per column.
/// Dependent columns are dropped; the second tuple field is the number of
/// columns kept.
pub fn qr_orthonormalize(m: &DenseMatrix) -> Result<(DenseMatrix, usize), LinalgError> {
    if m.rows() < m.cols() {
        return Err(LinalgError::InvalidArgument(format!(
            "qr_orthonormalize needs rows >= cols, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    let basis = orthonormal_columns(m);
    if basis.is_empty() && m.cols() > 0 {
        return Err(LinalgError::InvalidArgument("all columns are zero".into()));
    }
    let retained = basis.len();
    Ok((columns_to_matrix(m.rows(), &basis), retained))
}

/// Column-wise MGS2; returns the accepted unit columns.
pub(crate) fn orthonormal_columns(m: &DenseMatrix) -> Vec<Vec<f64>> {
    let t = m.transpose();
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(m.cols());
    for j in 0..m.cols() {
        let mut v = t.row(j).to_vec();
        if let Some(u) = orthogonalize_against(&mut v, &basis) {
            basis.push(u);
        }
    }
    basis
}

/// Projects `v` off `basis` twice; returns the normalized remainder unless
/// it is numerically dependent.
fn orthogonalize_against(v: &mut [f64], basis: &[Vec<f64>]) -> Option<Vec<f64>> {
    let norm0 = dot(v, v).sqrt();
    if norm0 == 0.0 || !norm0.is_finite() {
        return None;
    }
    for _ in 0..2 {
        for q in basis {
            let c = dot(q, v);
            for (x, &qi) in v.iter_mut().zip(q) {
                *x -= c * qi;
            }
        }
    }
    let norm = dot(v, v).sqrt();
    if norm <= DEPENDENCE_TOL * norm0 {
        return None;
    }
    Some(v.iter().map(|x| x / norm).collect())
}

/// Extends `basis` with unit vectors until it holds `target` columns.
///
/// Candidates are the standard basis vectors in order, so the result is
/// deterministic.
pub(crate) fn complete_basis(basis: &mut Vec<Vec<f64>>, dim: usize, target: usize) {
    assert!(target <= dim);
    let mut e = 0;
    while basis.len() < target && e < dim {
        let mut v = vec![0.0; dim];
        v[e] = 1.0;
        e += 1;
        let norm0 = 1.0;
        for _ in 0..2 {
            for q in basis.iter() {
                let c = dot(q, &v);
                for (x, &qi) in v.iter_mut().zip(q) {
                    *x -= c * qi;
                }
            }
        }
        let norm = dot(&v, &v).sqrt();
        // A standard basis vector always has a component >= 1/sqrt(dim) outside
        // any proper subspace, for at least one e; skip nearly-contained ones.
        if norm > 0.5 * norm0 / (dim as f64).sqrt() {
            basis.push(v.iter().map(|x| x / norm).collect());
        }
    }
    assert_eq!(basis.len(), target, "basis completion failed");
}

pub(crate) fn columns_to_matrix(rows: usize, columns: &[Vec<f64>]) -> DenseMatrix {
    DenseMatrix::from_fn(rows, columns.len(), |i, j| columns[j][i])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn gram_error(q: &DenseMatrix) -> f64 {
        q.t_matmul(q).unwrap().max_abs_diff(&DenseMatrix::identity(q.cols()))
    }

    #[test]
    fn three_four_five() {
        let m = DenseMatrix::from_rows(&[vec![3.0], vec![4.0]]);
        let (q, kept) = qr_orthonormalize(&m).unwrap();
        assert_eq!(kept, 1);
        assert!((q[(0, 0)] - 0.6).abs() < 1e-15);
        assert!((q[(1, 0)] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn orthonormal_input_is_preserved() {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let m = DenseMatrix::from_rows(&[vec![s, 0.0], vec![s, 0.0], vec![0.0, 1.0]]);
        let (q, _) = qr_orthonormalize(&m).unwrap();
        for j in 0..2 {
            let sign = if q[(0, j)] * m[(0, j)] + q[(2, j)] * m[(2, j)] < 0.0 { -1.0 } else { 1.0 };
            for i in 0..3 {
                assert!((sign * q[(i, j)] - m[(i, j)]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn random_tall_matrix_gives_orthonormal_columns() {
        let mut rng = SplitMix64::seed_from(5);
        let m = DenseMatrix::from_fn(40, 8, |_, _| rng.next_f64() - 0.5);
        let (q, kept) = qr_orthonormalize(&m).unwrap();
        assert_eq!(kept, 8);
        assert!(gram_error(&q) < 1e-10);
        // Same span: projecting m onto Q recovers m.
        let proj = q.matmul(&q.t_matmul(&m).unwrap()).unwrap();
        assert!(proj.max_abs_diff(&m) < 1e-12);
    }

    #[test]
    fn dependent_columns_are_dropped() {
        let m = DenseMatrix::from_rows(&[
            vec![1.0, 2.0, 0.0],
            vec![1.0, 2.0, 1.0],
            vec![0.0, 0.0, 1.0],
            vec![1.0, 2.0, 0.0],
        ]);
        let (q, kept) = qr_orthonormalize(&m).unwrap();
        assert_eq!(kept, 2);
        assert_eq!(q.cols(), 2);
        assert!(gram_error(&q) < 1e-12);
    }

    #[test]
    fn rejects_wide_and_zero_input() {
        assert!(qr_orthonormalize(&DenseMatrix::zeros(2, 3)).is_err());
        assert!(qr_orthonormalize(&DenseMatrix::zeros(3, 2)).is_err());
    }

    #[test]
    fn completion_reaches_target() {
        let mut basis = vec![vec![0.6, 0.8, 0.0]];
        complete_basis(&mut basis, 3, 3);
        let q = columns_to_matrix(3, &basis);
        assert!(gram_error(&q) < 1e-12);
    }
}
