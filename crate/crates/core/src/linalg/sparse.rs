use super::{DenseMatrix, LinalgError};

/// Compressed sparse row matrix.
///
/// Column indices are strictly increasing within each row; `row_offsets`
/// has `rows + 1` entries and ends at `nnz`.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    rows: usize,
    cols: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    pub fn empty(rows: usize, cols: usize) -> Self {
        Self { rows, cols, row_offsets: vec![0; rows + 1], col_indices: Vec::new(), values: Vec::new() }
    }

    /// Builds from raw CSR arrays, checking every structural invariant.
    pub fn from_parts(
        rows: usize,
        cols: usize,
        row_offsets: Vec<usize>,
        col_indices: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self, LinalgError> {
        let bad = |msg: String| Err(LinalgError::InvalidArgument(msg));
        if row_offsets.len() != rows + 1 || row_offsets[0] != 0 {
            return bad(format!("row_offsets must have {} entries starting at 0", rows + 1));
        }
        if *row_offsets.last().unwrap() != col_indices.len() || col_indices.len() != values.len() {
            return bad("row_offsets, col_indices and values disagree on nnz".into());
        }
        for r in 0..rows {
            let (lo, hi) = (row_offsets[r], row_offsets[r + 1]);
            if lo > hi {
                return bad(format!("row_offsets decreasing at row {r}"));
            }
            let cols_r = &col_indices[lo..hi];
            if cols_r.windows(2).any(|w| w[0] >= w[1]) {
                return bad(format!("column indices not strictly increasing in row {r}"));
            }
            if cols_r.last().is_some_and(|&c| c >= cols) {
                return bad(format!("column index out of range in row {r}"));
            }
        }
        if values.iter().any(|v| !v.is_finite()) {
            return bad("non-finite value".into());
        }
        Ok(Self { rows, cols, row_offsets, col_indices, values })
    }

    /// Builds from `(row, col, value)` triplets; duplicate coordinates are summed.
    pub fn from_triplets(
        rows: usize,
        cols: usize,
        triplets: &[(usize, usize, f64)],
    ) -> Result<Self, LinalgError> {
        let mut sorted = triplets.to_vec();
        for &(r, c, _) in &sorted {
            if r >= rows || c >= cols {
                return Err(LinalgError::InvalidArgument(format!(
                    "triplet ({r}, {c}) outside {rows}x{cols}"
                )));
            }
        }
        sorted.sort_by_key(|&(r, c, _)| (r, c));
        let mut row_offsets = vec![0usize; rows + 1];
        let mut col_indices = Vec::with_capacity(sorted.len());
        let mut values: Vec<f64> = Vec::with_capacity(sorted.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in sorted {
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
                continue;
            }
            row_offsets[r + 1] += 1;
            col_indices.push(c);
            values.push(v);
            last = Some((r, c));
        }
        for r in 0..rows {
            row_offsets[r + 1] += row_offsets[r];
        }
        Self::from_parts(rows, cols, row_offsets, col_indices, values)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    pub fn col_indices(&self) -> &[usize] {
        &self.col_indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Column indices and values of row `r`.
    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let (lo, hi) = (self.row_offsets[r], self.row_offsets[r + 1]);
        (&self.col_indices[lo..hi], &self.values[lo..hi])
    }

    /// Same sparsity pattern, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self, LinalgError> {
        if values.len() != self.nnz() {
            return Err(LinalgError::DimensionMismatch {
                op: "with_values",
                left: (self.nnz(), 1),
                right: (values.len(), 1),
            });
        }
        Ok(Self { values, ..self.clone() })
    }

    /// Keeps entries whose flag in `keep` (one per stored entry) is set,
    /// multiplying survivors by `scale`.
    pub fn filter_scaled(&self, keep: &[bool], scale: f64) -> Self {
        assert_eq!(keep.len(), self.nnz());
        let mut row_offsets = Vec::with_capacity(self.rows + 1);
        let mut col_indices = Vec::new();
        let mut values = Vec::new();
        row_offsets.push(0);
        for r in 0..self.rows {
            for idx in self.row_offsets[r]..self.row_offsets[r + 1] {
                if keep[idx] {
                    col_indices.push(self.col_indices[idx]);
                    values.push(self.values[idx] * scale);
                }
            }
            row_offsets.push(col_indices.len());
        }
        Self { rows: self.rows, cols: self.cols, row_offsets, col_indices, values }
    }

    pub fn row_degrees(&self) -> Vec<usize> {
        self.row_offsets.windows(2).map(|w| w[1] - w[0]).collect()
    }

    pub fn col_degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.cols];
        for &c in &self.col_indices {
            d[c] += 1;
        }
        d
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                out[(r, c)] = v;
            }
        }
        out
    }

    pub fn transpose(&self) -> Self {
        let mut counts = vec![0usize; self.cols + 1];
        for &c in &self.col_indices {
            counts[c + 1] += 1;
        }
        for c in 0..self.cols {
            counts[c + 1] += counts[c];
        }
        let row_offsets = counts.clone();
        let mut next = counts;
        let mut col_indices = vec![0; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        for r in 0..self.rows {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                let dst = next[c];
                col_indices[dst] = r;
                values[dst] = v;
                next[c] += 1;
            }
        }
        Self { rows: self.cols, cols: self.rows, row_offsets, col_indices, values }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `self · b`.
    pub fn spmm(&self, b: &DenseMatrix) -> Result<DenseMatrix, LinalgError> {
        if self.cols != b.rows() {
            return Err(LinalgError::DimensionMismatch {
                op: "spmm",
                left: (self.rows, self.cols),
                right: b.shape(),
            });
        }
        let mut out = DenseMatrix::zeros(self.rows, b.cols());
        dispatch!(spmm_kernel(self, b, &mut out));
        Ok(out)
    }

    /// `selfᵀ · b`, scattering rows of `b` into the output in row order.
    pub fn spmm_t(&self, b: &DenseMatrix) -> Result<DenseMatrix, LinalgError> {
        if self.rows != b.rows() {
            return Err(LinalgError::DimensionMismatch {
                op: "spmm_t",
                left: (self.rows, self.cols),
                right: b.shape(),
            });
        }
        let mut out = DenseMatrix::zeros(self.cols, b.cols());
        dispatch!(spmm_t_kernel(self, b, &mut out));
        Ok(out)
    }
}

/// Runs a kernel through an AVX2-enabled copy when the CPU has it. The
/// kernels only do lane-wise `o += v * x`, so results are the same bits.
macro_rules! dispatch {
    ($kernel:ident($($arg:expr),*)) => {{
        #[cfg(target_arch = "x86_64")]
        {
            #[target_feature(enable = "avx2")]
            unsafe fn wide(a: &CsrMatrix, b: &DenseMatrix, out: &mut DenseMatrix) {
                $kernel(a, b, out)
            }
            if std::arch::is_x86_feature_detected!("avx2") {
                // SAFETY: the CPU supports AVX2, checked just above.
                unsafe { wide($($arg),*) }
            } else {
                $kernel($($arg),*)
            }
        }
        #[cfg(not(target_arch = "x86_64"))]
        $kernel($($arg),*)
    }};
}
use dispatch;

#[inline(always)]
fn spmm_kernel(a: &CsrMatrix, b: &DenseMatrix, out: &mut DenseMatrix) {
    for r in 0..a.rows {
        let (cols, vals) = a.row(r);
        let out_row = out.row_mut(r);
        for (&c, &v) in cols.iter().zip(vals) {
            for (o, &x) in out_row.iter_mut().zip(b.row(c)) {
                *o += v * x;
            }
        }
    }
}

#[inline(always)]
fn spmm_t_kernel(a: &CsrMatrix, b: &DenseMatrix, out: &mut DenseMatrix) {
    for r in 0..a.rows {
        let (cols, vals) = a.row(r);
        let b_row = b.row(r);
        for (&c, &v) in cols.iter().zip(vals) {
            for (o, &x) in out.row_mut(c).iter_mut().zip(b_row) {
                *o += v * x;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn random_sparse(rows: usize, cols: usize, density: f64, rng: &mut SplitMix64) -> CsrMatrix {
        let mut t = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                if rng.next_f64() < density {
                    t.push((r, c, rng.next_f64() * 2.0 - 1.0));
                }
            }
        }
        CsrMatrix::from_triplets(rows, cols, &t).unwrap()
    }

    #[test]
    fn empty_matrix_gives_zero_product() {
        let a = CsrMatrix::empty(3, 4);
        let b = DenseMatrix::from_fn(4, 2, |i, j| (i + j) as f64);
        assert_eq!(a.spmm(&b).unwrap(), DenseMatrix::zeros(3, 2));
    }

    #[test]
    fn single_nonzero_picks_scaled_row() {
        let a = CsrMatrix::from_triplets(2, 3, &[(1, 2, 0.5)]).unwrap();
        let b = DenseMatrix::from_rows(&[vec![1.0, 1.0], vec![2.0, 2.0], vec![4.0, -6.0]]);
        let out = a.spmm(&b).unwrap();
        assert_eq!(out, DenseMatrix::from_rows(&[vec![0.0, 0.0], vec![2.0, -3.0]]));
    }

    #[test]
    fn random_products_match_densified_oracle() {
        let mut rng = SplitMix64::seed_from(11);
        let a = random_sparse(30, 20, 0.2, &mut rng);
        let dense = a.to_dense();
        let b = DenseMatrix::from_fn(20, 6, |_, _| rng.next_f64() - 0.5);
        assert!(a.spmm(&b).unwrap().max_abs_diff(&dense.matmul(&b).unwrap()) < 1e-12);
        let c = DenseMatrix::from_fn(30, 6, |_, _| rng.next_f64() - 0.5);
        let want = dense.transpose().matmul(&c).unwrap();
        assert!(a.spmm_t(&c).unwrap().max_abs_diff(&want) < 1e-12);
        assert_eq!(a.transpose().to_dense(), dense.transpose());
    }

    #[test]
    fn triplets_are_sorted_and_summed() {
        let a = CsrMatrix::from_triplets(2, 2, &[(1, 1, 1.0), (0, 1, 2.0), (1, 1, 3.0), (1, 0, 1.0)])
            .unwrap();
        assert_eq!(a.row_offsets(), &[0, 1, 3]);
        assert_eq!(a.col_indices(), &[1, 0, 1]);
        assert_eq!(a.values(), &[2.0, 1.0, 4.0]);
    }

    #[test]
    fn invalid_parts_rejected() {
        assert!(CsrMatrix::from_parts(1, 2, vec![0, 2], vec![1, 0], vec![1.0, 1.0]).is_err());
        assert!(CsrMatrix::from_parts(1, 2, vec![0, 1], vec![0], vec![f64::NAN]).is_err());
        assert!(CsrMatrix::from_parts(1, 2, vec![0, 1], vec![2], vec![1.0]).is_err());
    }

    #[test]
    fn dimension_mismatch() {
        let a = CsrMatrix::empty(2, 3);
        assert!(a.spmm(&DenseMatrix::zeros(2, 1)).is_err());
        assert!(a.spmm_t(&DenseMatrix::zeros(3, 1)).is_err());
    }
}
