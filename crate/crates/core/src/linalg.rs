//! Sparse storage, banded direct solvers and a few dense helpers.
//!
//! The finite-element matrices in this crate come from structured meshes with
//! row-major node numbering, so their bandwidth is about `nx + 2`. A banded
//! LU (partial pivoting) and a banded Cholesky are all the direct solvers the
//! transport and prior modules need.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{check_len, Error, Result};

/// Compressed sparse row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n_rows: usize,
    n_cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds a matrix from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(n_rows: usize, n_cols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut sorted: Vec<(usize, usize, f64)> = triplets.to_vec();
        sorted.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));

        let mut row_ptr = vec![0usize; n_rows + 1];
        let mut col_idx = Vec::with_capacity(sorted.len());
        let mut values: Vec<f64> = Vec::with_capacity(sorted.len());
        let mut last: Option<(usize, usize)> = None;
        for (i, j, v) in sorted {
            assert!(i < n_rows && j < n_cols, "triplet ({i}, {j}) out of bounds");
            if last == Some((i, j)) {
                *values.last_mut().unwrap() += v;
            } else {
                col_idx.push(j);
                values.push(v);
                row_ptr[i + 1] += 1;
                last = Some((i, j));
            }
        }
        for i in 0..n_rows {
            row_ptr[i + 1] += row_ptr[i];
        }
        Self {
            n_rows,
            n_cols,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let t: Vec<_> = diag.iter().enumerate().map(|(i, &v)| (i, i, v)).collect();
        Self::from_triplets(diag.len(), diag.len(), &t)
    }

    pub fn nrows(&self) -> usize {
        self.n_rows
    }

    pub fn ncols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Iterates over stored entries as `(row, col, value)`.
    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n_rows).flat_map(move |i| {
            (self.row_ptr[i]..self.row_ptr[i + 1]).map(move |k| (i, self.col_idx[k], self.values[k]))
        })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let range = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.col_idx[range.clone()].binary_search(&j) {
            Ok(pos) => self.values[range.start + pos],
            Err(_) => 0.0,
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n_cols);
        (0..self.n_rows)
            .map(|i| {
                (self.row_ptr[i]..self.row_ptr[i + 1])
                    .map(|k| self.values[k] * x[self.col_idx[k]])
                    .sum()
            })
            .collect()
    }

    pub fn transpose_mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n_rows);
        let mut out = vec![0.0; self.n_cols];
        for (i, j, v) in self.triplets() {
            out[j] += v * x[i];
        }
        out
    }

    /// `a * self + b * other`, patterns merged.
    pub fn linear_combination(&self, a: f64, other: &CsrMatrix, b: f64) -> CsrMatrix {
        assert_eq!((self.n_rows, self.n_cols), (other.n_rows, other.n_cols));
        let t: Vec<_> = self
            .triplets()
            .map(|(i, j, v)| (i, j, a * v))
            .chain(other.triplets().map(|(i, j, v)| (i, j, b * v)))
            .collect();
        CsrMatrix::from_triplets(self.n_rows, self.n_cols, &t)
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n_rows)
            .map(|i| self.values[self.row_ptr[i]..self.row_ptr[i + 1]].iter().sum())
            .collect()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n_rows.min(self.n_cols)).map(|i| self.get(i, i)).collect()
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn is_diagonal(&self) -> bool {
        self.triplets().all(|(i, j, v)| i == j || v == 0.0)
    }

    /// Lower and upper bandwidth `(kl, ku)`.
    pub fn bandwidth(&self) -> (usize, usize) {
        self.triplets().fold((0, 0), |(kl, ku), (i, j, _)| {
            if i > j {
                (kl.max(i - j), ku)
            } else {
                (kl, ku.max(j - i))
            }
        })
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n_rows, self.n_cols);
        for (i, j, v) in self.triplets() {
            m[(i, j)] += v;
        }
        m
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Banded LU factorization with partial pivoting (LAPACK `gbtrf` layout in
/// row-major form). Supports solves with `A` and with `Aᵀ`.
#[derive(Debug, Clone)]
pub struct BandedLu {
    n: usize,
    kl: usize,
    ku: usize,
    // Row i stores columns i-kl ..= i+ku+kl at offset j + kl - i.
    band: Vec<f64>,
    width: usize,
    multipliers: Vec<f64>,
    pivots: Vec<usize>,
}

impl BandedLu {
    pub fn factor(a: &CsrMatrix) -> Result<Self> {
        check_len(a.nrows(), a.ncols())?;
        let n = a.nrows();
        let (kl, ku) = a.bandwidth();
        let width = 2 * kl + ku + 1;
        let mut band = vec![0.0; n * width];
        for (i, j, v) in a.triplets() {
            band[i * width + j + kl - i] += v;
        }
        let mut lu = Self {
            n,
            kl,
            ku,
            band,
            width,
            multipliers: vec![0.0; n * kl],
            pivots: vec![0; n],
        };
        lu.eliminate()?;
        Ok(lu)
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        i * self.width + j + self.kl - i
    }

    fn eliminate(&mut self) -> Result<()> {
        let (n, kl, ku) = (self.n, self.kl, self.ku);
        let scale = self.band.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for k in 0..n {
            let last_row = (k + kl).min(n - 1);
            let last_col = (k + ku + kl).min(n - 1);
            let mut p = k;
            let mut best = self.band[self.idx(k, k)].abs();
            for r in k + 1..=last_row {
                let v = self.band[self.idx(r, k)].abs();
                if v > best {
                    best = v;
                    p = r;
                }
            }
            if best <= f64::EPSILON * scale * 1e-3 || best == 0.0 {
                return Err(Error::Singular(k));
            }
            self.pivots[k] = p;
            if p != k {
                for j in k..=last_col {
                    let (a, b) = (self.idx(k, j), self.idx(p, j));
                    self.band.swap(a, b);
                }
            }
            let pivot = self.band[self.idx(k, k)];
            for r in k + 1..=last_row {
                let rk = self.idx(r, k);
                let m = self.band[rk] / pivot;
                self.band[rk] = 0.0;
                self.multipliers[k * kl + (r - k - 1)] = m;
                if m != 0.0 {
                    for j in k + 1..=last_col {
                        let kj = self.band[self.idx(k, j)];
                        let rj = self.idx(r, j);
                        self.band[rj] -= m * kj;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Solves `A x = b` in place.
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let (n, kl, ku) = (self.n, self.kl, self.ku);
        assert_eq!(b.len(), n);
        for k in 0..n {
            b.swap(k, self.pivots[k]);
            let bk = b[k];
            if bk != 0.0 {
                for r in k + 1..=(k + kl).min(n - 1) {
                    b[r] -= self.multipliers[k * kl + (r - k - 1)] * bk;
                }
            }
        }
        for i in (0..n).rev() {
            let mut s = b[i];
            for j in i + 1..=(i + ku + kl).min(n - 1) {
                s -= self.band[self.idx(i, j)] * b[j];
            }
            b[i] = s / self.band[self.idx(i, i)];
        }
    }

    /// Solves `Aᵀ x = b` in place.
    pub fn solve_transpose_in_place(&self, b: &mut [f64]) {
        let (n, kl, ku) = (self.n, self.kl, self.ku);
        assert_eq!(b.len(), n);
        // Uᵀ y = b
        for i in 0..n {
            let yi = b[i] / self.band[self.idx(i, i)];
            b[i] = yi;
            if yi != 0.0 {
                for j in i + 1..=(i + ku + kl).min(n - 1) {
                    b[j] -= self.band[self.idx(i, j)] * yi;
                }
            }
        }
        for k in (0..n).rev() {
            let mut s = 0.0;
            for r in k + 1..=(k + kl).min(n - 1) {
                s += self.multipliers[k * kl + (r - k - 1)] * b[r];
            }
            b[k] -= s;
            b.swap(k, self.pivots[k]);
        }
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }

    pub fn solve_transpose(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_transpose_in_place(&mut x);
        x
    }
}

/// Banded Cholesky factorization `A = L Lᵀ` of a symmetric positive definite
/// matrix. `L` is lower triangular with bandwidth equal to that of `A`.
#[derive(Debug, Clone)]
pub struct BandedCholesky {
    n: usize,
    bw: usize,
    // Row i stores columns i-bw ..= i at offset j + bw - i.
    lower: Vec<f64>,
}

impl BandedCholesky {
    pub fn factor(a: &CsrMatrix) -> Result<Self> {
        check_len(a.nrows(), a.ncols())?;
        let n = a.nrows();
        let (kl, ku) = a.bandwidth();
        let bw = kl.max(ku);
        let w = bw + 1;
        let mut lower = vec![0.0; n * w];
        for (i, j, v) in a.triplets() {
            if j <= i {
                lower[i * w + j + bw - i] += v;
            }
        }
        for i in 0..n {
            let j0 = i.saturating_sub(bw);
            for j in j0..=i {
                let mut s = lower[i * w + j + bw - i];
                let k0 = j0.max(j.saturating_sub(bw));
                for k in k0..j {
                    s -= lower[i * w + k + bw - i] * lower[j * w + k + bw - j];
                }
                if j == i {
                    if s <= 0.0 || !s.is_finite() {
                        return Err(Error::NotPositiveDefinite { pivot: i, value: s });
                    }
                    lower[i * w + bw] = s.sqrt();
                } else {
                    lower[i * w + j + bw - i] = s / lower[j * w + bw];
                }
            }
        }
        Ok(Self { n, bw, lower })
    }

    #[inline]
    fn l(&self, i: usize, j: usize) -> f64 {
        self.lower[i * (self.bw + 1) + j + self.bw - i]
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.l(i, i)).collect()
    }

    /// `L x`
    pub fn mul_lower(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| (i.saturating_sub(self.bw)..=i).map(|j| self.l(i, j) * x[j]).sum())
            .collect()
    }

    /// `Lᵀ x`
    pub fn mul_lower_transpose(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for i in 0..self.n {
            for j in i.saturating_sub(self.bw)..=i {
                out[j] += self.l(i, j) * x[i];
            }
        }
        out
    }

    /// Solves `L y = b` in place.
    pub fn solve_lower_in_place(&self, b: &mut [f64]) {
        for i in 0..self.n {
            let mut s = b[i];
            for j in i.saturating_sub(self.bw)..i {
                s -= self.l(i, j) * b[j];
            }
            b[i] = s / self.l(i, i);
        }
    }

    /// Solves `Lᵀ x = b` in place.
    pub fn solve_lower_transpose_in_place(&self, b: &mut [f64]) {
        for i in (0..self.n).rev() {
            let xi = b[i] / self.l(i, i);
            b[i] = xi;
            for j in i.saturating_sub(self.bw)..i {
                b[j] -= self.l(i, j) * xi;
            }
        }
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_lower_in_place(&mut x);
        self.solve_lower_transpose_in_place(&mut x);
        x
    }
}

/// Outcome of a conjugate-gradient solve.
#[derive(Debug, Clone)]
pub struct CgOutcome {
    pub x: DVector<f64>,
    pub iterations: usize,
    pub relative_residual: f64,
    pub residual_history: Vec<f64>,
}

/// Unpreconditioned conjugate gradients for a symmetric positive definite
/// operator. Stops once `‖r‖ ≤ tol‖b‖`.
pub fn conjugate_gradient<F>(apply: F, b: &DVector<f64>, tol: f64, max_iters: usize) -> Result<CgOutcome>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    if tol <= 0.0 {
        return Err(Error::InvalidArgument(format!("CG tolerance must be positive, got {tol}")));
    }
    let n = b.len();
    let b_norm = b.norm();
    let mut x = DVector::zeros(n);
    if b_norm == 0.0 {
        return Ok(CgOutcome {
            x,
            iterations: 0,
            relative_residual: 0.0,
            residual_history: vec![0.0],
        });
    }
    let mut r = b.clone();
    let mut p = r.clone();
    let mut rr = r.dot(&r);
    let mut history = vec![1.0];
    for it in 1..=max_iters {
        let ap = apply(&p);
        let pap = p.dot(&ap);
        if pap <= 0.0 {
            return Err(Error::NotPositiveDefinite { pivot: it, value: pap });
        }
        let alpha = rr / pap;
        x.axpy(alpha, &p, 1.0);
        r.axpy(-alpha, &ap, 1.0);
        let rr_new = r.dot(&r);
        let rel = rr_new.sqrt() / b_norm;
        history.push(rel);
        if rel <= tol {
            return Ok(CgOutcome {
                x,
                iterations: it,
                relative_residual: rel,
                residual_history: history,
            });
        }
        p = &r + &p * (rr_new / rr);
        rr = rr_new;
    }
    Err(Error::CgStalled {
        iterations: max_iters,
        residual: *history.last().unwrap(),
    })
}

/// Symmetric eigendecomposition with eigenvalues sorted in descending order.
pub fn sorted_symmetric_eigen(a: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let values = DVector::from_iterator(order.len(), order.iter().map(|&i| eig.eigenvalues[i]));
    let vectors = DMatrix::from_fn(a.nrows(), order.len(), |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

/// Eigen-decomposition of `BᵀB` from the SVD of `B`, without forming the
/// product: values are the squared singular values (descending, padded
/// with zeros to `B.ncols()`) and the vectors form a full orthonormal basis.
pub fn gram_eigen_from_factor(b: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = b.ncols();
    let padded;
    let square = if b.nrows() < n {
        padded = b.clone().resize_vertically(n, 0.0);
        &padded
    } else {
        b
    };
    let svd = square.clone().svd(false, true);
    let vt = svd.v_t.as_ref().expect("requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| svd.singular_values[i].powi(2)));
    let vectors = DMatrix::from_fn(n, n, |r, c| vt[(order[c], r)]);
    (values, vectors)
}

/// `log det(I + A)` for a symmetric positive semidefinite `A`, via its
/// eigenvalues (negative round-off is clipped to zero).
pub fn logdet_identity_plus(a: &DMatrix<f64>) -> f64 {
    let (values, _) = sorted_symmetric_eigen(a);
    values.iter().map(|&l| l.max(0.0).ln_1p()).sum()
}

/// Spectral norm of a symmetric matrix.
pub fn symmetric_norm2(a: &DMatrix<f64>) -> f64 {
    let (values, _) = sorted_symmetric_eigen(a);
    values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}
