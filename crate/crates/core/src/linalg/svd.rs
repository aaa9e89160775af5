//! Truncated SVD factors, a one-sided Jacobi exact SVD, and a randomized
//! range-finder SVD for sparse matrices.

use std::cell::Cell;

use rand_distr::{Distribution, StandardNormal};

use super::dense::dot;
use super::qr::{columns_to_matrix, complete_basis, orthonormal_columns};
use super::{CsrMatrix, DenseMatrix, LinalgError};
use crate::rng::SplitMix64;

/// Largest smaller-dimension accepted by [`exact_svd_dense`].
pub const EXACT_SVD_MAX_DIM: usize = 500;
const JACOBI_MAX_SWEEPS: usize = 80;
const JACOBI_TOL: f64 = 1e-15;

/// Which side of the bipartite graph a propagation lands on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    /// Item-space input (`N×k`) propagated to users (`M×k`).
    User,
    /// User-space input (`M×k`) propagated to items (`N×k`).
    Item,
}

/// Rank-`r` factors `U_r diag(s) V_rᵀ`, kept in factored form.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdFactors {
    pub u: DenseMatrix,
    pub s: Vec<f64>,
    pub v: DenseMatrix,
}

impl SvdFactors {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    /// Materializes `U diag(s) Vᵀ`. Only for tests and small diagnostics.
    pub fn to_dense(&self) -> DenseMatrix {
        let mut us = self.u.clone();
        us.scale_columns(&self.s);
        us.matmul_t(&self.v).expect("factor shapes are consistent")
    }

    /// Multiplies `h` by the reconstructed matrix without forming it.
    ///
    /// User side computes `U (s ⊙ (Vᵀ h))`, item side `V (s ⊙ (Uᵀ h))`.
    pub fn propagate(&self, h: &DenseMatrix, side: Side) -> Result<DenseMatrix, LinalgError> {
        let (inner, outer) = match side {
            Side::User => (&self.v, &self.u),
            Side::Item => (&self.u, &self.v),
        };
        if h.rows() != inner.rows() {
            return Err(LinalgError::DimensionMismatch {
                op: "svd_propagate",
                left: inner.shape(),
                right: h.shape(),
            });
        }
        let mut core = inner.t_matmul(h)?;
        for (i, &s) in self.s.iter().enumerate() {
            for x in core.row_mut(i) {
                *x *= s;
            }
        }
        outer.matmul(&core)
    }

    /// [`Self::propagate`] for an input that is zero outside `rows`; row `j`
    /// of `h` holds input row `rows[j]`.
    pub fn propagate_rows(&self, rows: &[usize], h: &DenseMatrix, side: Side) -> Result<DenseMatrix, LinalgError> {
        let (inner, outer) = match side {
            Side::User => (&self.v, &self.u),
            Side::Item => (&self.u, &self.v),
        };
        if h.rows() != rows.len() || rows.iter().any(|&i| i >= inner.rows()) {
            return Err(LinalgError::DimensionMismatch {
                op: "svd_propagate_rows",
                left: inner.shape(),
                right: h.shape(),
            });
        }
        let mut core = inner.gather_rows(rows).t_matmul(h)?;
        for (i, &s) in self.s.iter().enumerate() {
            for x in core.row_mut(i) {
                *x *= s;
            }
        }
        outer.matmul(&core)
    }

    /// Largest deviation of `UᵀU` and `VᵀV` from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        let eye = DenseMatrix::identity(self.rank());
        let gu = self.u.t_matmul(&self.u).expect("square gram").max_abs_diff(&eye);
        let gv = self.v.t_matmul(&self.v).expect("square gram").max_abs_diff(&eye);
        gu.max(gv)
    }

    /// Space-separated singular values, for debug dumps.
    pub fn singular_values_line(&self) -> String {
        self.s.iter().map(|s| format!("{s:.12}")).collect::<Vec<_>>().join(" ")
    }

    /// Keeps the leading `r` triplets.
    pub fn truncate(mut self, r: usize) -> Self {
        self.u = self.u.leading_columns(r);
        self.v = self.v.leading_columns(r);
        self.s.truncate(r);
        self
    }

    /// Flips column pairs so the largest-magnitude entry of each `U` column
    /// is positive.
    fn canonicalize_signs(&mut self) {
        for j in 0..self.rank() {
            let col = self.u.column(j);
            let mut best = 0;
            for (i, x) in col.iter().enumerate() {
                if x.abs() > col[best].abs() {
                    best = i;
                }
            }
            if col.get(best).is_some_and(|&x| x < 0.0) {
                let flipped: Vec<f64> = col.iter().map(|x| -x).collect();
                self.u.set_column(j, &flipped);
                let vflipped: Vec<f64> = self.v.column(j).iter().map(|x| -x).collect();
                self.v.set_column(j, &vflipped);
            }
        }
    }
}

/// Full SVD of a small dense matrix by one-sided (Hestenes) Jacobi rotations.
///
/// Returns `min(rows, cols)` factors with singular values in descending order.
/// Left vectors belonging to numerically zero singular values are completed
/// to an orthonormal set.
pub fn exact_svd_dense(m: &DenseMatrix) -> Result<SvdFactors, LinalgError> {
    if m.rows() < m.cols() {
        let f = exact_svd_dense(&m.transpose())?;
        let mut out = SvdFactors { u: f.v, s: f.s, v: f.u };
        out.canonicalize_signs();
        return Ok(out);
    }
    let (rows, n) = m.shape();
    if n > EXACT_SVD_MAX_DIM {
        return Err(LinalgError::InvalidArgument(format!(
            "exact SVD limited to min dimension {EXACT_SVD_MAX_DIM}, got {rows}x{n}"
        )));
    }
    if !m.is_finite() {
        return Err(LinalgError::InvalidArgument("non-finite entry".into()));
    }

    let t = m.transpose();
    let mut a: Vec<Vec<f64>> = (0..n).map(|j| t.row(j).to_vec()).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    let fro = m.frobenius_norm();
    let negligible = (f64::EPSILON * fro).powi(2);
    let mut converged = false;
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..n {
            for j in (i + 1)..n {
                let alpha = dot(&a[i], &a[i]);
                let beta = dot(&a[j], &a[j]);
                if alpha <= negligible || beta <= negligible {
                    continue;
                }
                let gamma = dot(&a[i], &a[j]);
                if gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut a, i, j, c, s);
                rotate(&mut v, i, j, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(LinalgError::NoConvergence { iterations: JACOBI_MAX_SWEEPS });
    }

    let mut order: Vec<(f64, usize)> = a.iter().enumerate().map(|(j, c)| (dot(c, c).sqrt(), j)).collect();
    order.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));

    let s_max = order.first().map_or(0.0, |o| o.0);
    let zero_cut = s_max * (rows as f64) * f64::EPSILON * 4.0;
    let mut s = Vec::with_capacity(n);
    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut v_cols = Vec::with_capacity(n);
    for &(sv, j) in &order {
        if sv > zero_cut && sv > 0.0 {
            u_cols.push(a[j].iter().map(|x| x / sv).collect());
        }
        s.push(sv);
        v_cols.push(v[j].clone());
    }
    complete_basis(&mut u_cols, rows, n);

    let mut out = SvdFactors {
        u: columns_to_matrix(rows, &u_cols),
        s,
        v: columns_to_matrix(n, &v_cols),
    };
    out.canonicalize_signs();
    Ok(out)
}

fn rotate(cols: &mut [Vec<f64>], i: usize, j: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(j);
    let (ci, cj) = (&mut left[i], &mut right[0]);
    for (x, y) in ci.iter_mut().zip(cj.iter_mut()) {
        let (xi, yj) = (*x, *y);
        *x = c * xi - s * yj;
        *y = s * xi + c * yj;
    }
}

/// Settings for [`approx_svd`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ApproxSvdParams {
    pub rank: usize,
    pub oversample: usize,
    pub power_iters: usize,
    pub seed: u64,
}

impl ApproxSvdParams {
    pub fn new(rank: usize) -> Self {
        Self { rank, oversample: 8, power_iters: 4, seed: 0 }
    }
}

thread_local! {
    static APPROX_SVD_CALLS: Cell<usize> = const { Cell::new(0) };
}

/// Number of [`approx_svd`] invocations made on the current thread.
pub fn approx_svd_calls() -> usize {
    APPROX_SVD_CALLS.with(Cell::get)
}

/// Randomized truncated SVD of a sparse matrix.
///
/// Gaussian sketch of `rank + oversample` columns, `power_iters` rounds of
/// subspace iteration with re-orthonormalization after every product, then
/// an exact SVD of the small projected matrix `QᵀA`.
pub fn approx_svd(a: &CsrMatrix, params: &ApproxSvdParams) -> Result<SvdFactors, LinalgError> {
    APPROX_SVD_CALLS.with(|c| c.set(c.get() + 1));
    let r = params.rank;
    let width = r + params.oversample;
    let (m, n) = (a.rows(), a.cols());
    if r == 0 {
        return Err(LinalgError::InvalidArgument("rank must be at least 1".into()));
    }
    if width > m.min(n) {
        return Err(LinalgError::InvalidArgument(format!(
            "rank + oversample = {width} exceeds min({m}, {n})"
        )));
    }

    let mut rng = SplitMix64::seed_from(params.seed);
    let omega = DenseMatrix::from_fn(n, width, |_, _| StandardNormal.sample(&mut rng));

    let mut q = range_basis(&a.spmm(&omega)?, r);
    for _ in 0..params.power_iters {
        let z = range_basis(&a.spmm_t(&q)?, r);
        q = range_basis(&a.spmm(&z)?, r);
    }

    // B = QᵀA, formed as (AᵀQ)ᵀ.
    let b = a.spmm_t(&q)?.transpose();
    let small = exact_svd_dense(&b)?;
    let mut out = SvdFactors { u: q.matmul(&small.u)?, s: small.s, v: small.v }.truncate(r);
    out.canonicalize_signs();
    Ok(out)
}

/// Orthonormal basis of `y`'s columns, padded to at least `min_cols` columns.
fn range_basis(y: &DenseMatrix, min_cols: usize) -> DenseMatrix {
    let mut cols = orthonormal_columns(y);
    if cols.len() < min_cols {
        complete_basis(&mut cols, y.rows(), min_cols);
    }
    columns_to_matrix(y.rows(), &cols)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_dense(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
        let mut rng = SplitMix64::seed_from(seed);
        DenseMatrix::from_fn(rows, cols, |_, _| rng.next_f64() * 2.0 - 1.0)
    }

    fn rel_residual(m: &DenseMatrix, f: &SvdFactors) -> f64 {
        let diff = DenseMatrix::from_fn(m.rows(), m.cols(), |i, j| m[(i, j)] - f.to_dense()[(i, j)]);
        diff.frobenius_norm() / m.frobenius_norm().max(1e-30)
    }

    #[test]
    fn diagonal_singular_values() {
        let f = exact_svd_dense(&DenseMatrix::diag(&[3.0, 2.0, 1.0])).unwrap();
        assert_eq!(f.s.len(), 3);
        for (got, want) in f.s.iter().zip([3.0, 2.0, 1.0]) {
            assert!((got - want).abs() < 1e-14);
        }
        let f = exact_svd_dense(&DenseMatrix::diag(&[1.0, 3.0, 2.0])).unwrap();
        assert!((f.s[0] - 3.0).abs() < 1e-14 && (f.s[2] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn identity_singular_values() {
        let f = exact_svd_dense(&DenseMatrix::identity(3)).unwrap();
        assert!(f.s.iter().all(|s| (s - 1.0).abs() < 1e-14));
    }

    #[test]
    fn random_reconstruction_and_orthonormality() {
        for (rows, cols, seed) in [(20, 15, 1), (15, 20, 2), (9, 9, 3)] {
            let m = random_dense(rows, cols, seed);
            let f = exact_svd_dense(&m).unwrap();
            assert_eq!(f.rank(), rows.min(cols));
            assert!(rel_residual(&m, &f) < 1e-8);
            assert!(f.orthonormality_error() < 1e-8);
            assert!(f.s.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn rank_deficient_input_still_orthonormal() {
        let u = random_dense(12, 2, 4);
        let v = random_dense(8, 2, 5);
        let m = u.matmul_t(&v).unwrap();
        let f = exact_svd_dense(&m).unwrap();
        assert!(rel_residual(&m, &f) < 1e-10);
        assert!(f.orthonormality_error() < 1e-8);
        assert!(f.s[2] < 1e-12);
    }

    #[test]
    fn zero_matrix() {
        let f = exact_svd_dense(&DenseMatrix::zeros(4, 3)).unwrap();
        assert!(f.s.iter().all(|&s| s == 0.0));
        assert!(f.orthonormality_error() < 1e-12);
    }

    #[test]
    fn sign_convention_applied() {
        let f = exact_svd_dense(&random_dense(6, 4, 9)).unwrap();
        for j in 0..f.rank() {
            let col = f.u.column(j);
            let best = col.iter().cloned().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
            assert!(best > 0.0);
        }
    }

    #[test]
    fn approx_recovers_exact_rank_two() {
        let u = random_dense(30, 2, 10);
        let v = random_dense(25, 2, 11);
        let dense = u.matmul_t(&v).unwrap();
        let mut trip = Vec::new();
        for i in 0..30 {
            for j in 0..25 {
                trip.push((i, j, dense[(i, j)]));
            }
        }
        let a = CsrMatrix::from_triplets(30, 25, &trip).unwrap();
        let params = ApproxSvdParams { rank: 2, oversample: 4, power_iters: 2, seed: 1 };
        let f = approx_svd(&a, &params).unwrap();
        assert!(rel_residual(&dense, &f) < 1e-6);
        let exact = exact_svd_dense(&dense).unwrap();
        for i in 0..2 {
            assert!((f.s[i] - exact.s[i]).abs() < 1e-8 * exact.s[0]);
        }
    }

    #[test]
    fn approx_full_rank_matches_exact() {
        let dense = random_dense(12, 10, 21);
        let mut trip = Vec::new();
        for i in 0..12 {
            for j in 0..10 {
                if (i + j) % 3 != 0 {
                    trip.push((i, j, dense[(i, j)]));
                }
            }
        }
        let a = CsrMatrix::from_triplets(12, 10, &trip).unwrap();
        let params = ApproxSvdParams { rank: 10, oversample: 0, power_iters: 2, seed: 3 };
        let f = approx_svd(&a, &params).unwrap();
        let exact = exact_svd_dense(&a.to_dense()).unwrap();
        for (x, y) in f.s.iter().zip(&exact.s) {
            assert!((x - y).abs() < 1e-6);
        }
        assert!(f.orthonormality_error() < 1e-6);
    }

    #[test]
    fn approx_is_deterministic_per_seed() {
        let a = CsrMatrix::from_triplets(6, 5, &[(0, 0, 1.0), (1, 2, 0.5), (3, 4, 2.0), (5, 1, 1.5), (2, 3, 0.7)])
            .unwrap();
        let p = ApproxSvdParams { rank: 2, oversample: 2, power_iters: 3, seed: 77 };
        let x = approx_svd(&a, &p).unwrap();
        let y = approx_svd(&a, &p).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn approx_argument_errors() {
        let a = CsrMatrix::empty(4, 3);
        assert!(approx_svd(&a, &ApproxSvdParams { rank: 0, oversample: 0, power_iters: 0, seed: 0 }).is_err());
        assert!(approx_svd(&a, &ApproxSvdParams { rank: 2, oversample: 2, power_iters: 0, seed: 0 }).is_err());
    }

    #[test]
    fn approx_of_empty_matrix_is_zero() {
        let a = CsrMatrix::empty(5, 4);
        let f = approx_svd(&a, &ApproxSvdParams { rank: 2, oversample: 1, power_iters: 1, seed: 0 }).unwrap();
        assert_eq!(f.s, vec![0.0, 0.0]);
        assert!(f.orthonormality_error() < 1e-12);
    }

    #[test]
    fn propagate_rank_one_picks_first_row() {
        let mut u = DenseMatrix::zeros(3, 1);
        u[(0, 0)] = 1.0;
        let mut v = DenseMatrix::zeros(3, 1);
        v[(0, 0)] = 1.0;
        let f = SvdFactors { u, s: vec![2.0], v };
        let h = DenseMatrix::from_rows(&[vec![1.0, -2.0], vec![5.0, 5.0], vec![7.0, 7.0]]);
        let out = f.propagate(&h, Side::User).unwrap();
        assert_eq!(out, DenseMatrix::from_rows(&[vec![2.0, -4.0], vec![0.0, 0.0], vec![0.0, 0.0]]));
    }

    #[test]
    fn propagate_matches_dense_reconstruction() {
        let m = random_dense(4, 3, 8);
        let f = exact_svd_dense(&m).unwrap().truncate(2);
        let dense = f.to_dense();
        let h_items = random_dense(3, 5, 12);
        let h_users = random_dense(4, 5, 13);
        let user = f.propagate(&h_items, Side::User).unwrap();
        let item = f.propagate(&h_users, Side::Item).unwrap();
        assert!(user.max_abs_diff(&dense.matmul(&h_items).unwrap()) < 1e-10);
        assert!(item.max_abs_diff(&dense.t_matmul(&h_users).unwrap()) < 1e-10);
        assert_eq!(f.propagate(&DenseMatrix::zeros(3, 5), Side::User).unwrap(), DenseMatrix::zeros(4, 5));
        assert!(f.propagate(&h_users, Side::User).is_err());
    }
}
