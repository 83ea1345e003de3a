//! Randomized subspace iteration, a Lanczos eigensolver and the expected-error
//! bounds of randomized low-rank log-determinant estimation.

use std::f64::consts::{E, PI};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{check_len, Error, Result};
use crate::linalg::sorted_symmetric_eigen;

/// A symmetric positive semidefinite operator known only through products.
pub trait SymmetricOperator: Sync {
    fn dim(&self) -> usize;

    fn apply(&self, x: &[f64]) -> Result<Vec<f64>>;

    /// Applies the operator to every column; columns run concurrently.
    fn apply_block(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let n = self.dim();
        check_len(n, x.nrows())?;
        let cols: Vec<Vec<f64>> = (0..x.ncols())
            .into_par_iter()
            .map(|j| self.apply(&x.as_slice()[j * n..(j + 1) * n]))
            .collect::<Result<_>>()?;
        Ok(DMatrix::from_fn(n, x.ncols(), |i, j| cols[j][i]))
    }
}

#[derive(Debug, Clone)]
pub struct DenseOperator(pub DMatrix<f64>);

impl SymmetricOperator for DenseOperator {
    fn dim(&self) -> usize {
        self.0.nrows()
    }

    fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len(self.dim(), x.len())?;
        Ok((&self.0 * DVector::from_column_slice(x)).data.into())
    }

    fn apply_block(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_len(self.dim(), x.nrows())?;
        Ok(&self.0 * x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SketchConfig {
    /// Target rank.
    pub k: usize,
    /// Oversampling.
    pub p: usize,
    /// Power iterations.
    pub q: usize,
    pub seed: u64,
}

impl Default for SketchConfig {
    fn default() -> Self {
        Self { k: 20, p: 5, q: 1, seed: 0 }
    }
}

impl SketchConfig {
    pub fn new(k: usize, p: usize, q: usize, seed: u64) -> Self {
        Self { k, p, q, seed }
    }

    pub fn ell(&self) -> usize {
        self.k + self.p
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidArgument("sketch target rank k must be at least 1".into()));
        }
        if self.q == 0 {
            return Err(Error::InvalidArgument("sketch requires q >= 1 power iterations".into()));
        }
        if self.ell() > n {
            return Err(Error::InvalidArgument(format!(
                "sketch size k + p = {} exceeds the operator dimension {n}",
                self.ell()
            )));
        }
        Ok(())
    }
}

/// Standard Gaussian `n × ℓ` matrix. Column `j` is drawn from its own
/// stream of the seeded generator, so the result does not depend on the
/// order in which columns are produced.
pub fn gaussian_matrix(n: usize, ell: usize, seed: u64) -> DMatrix<f64> {
    let mut data = Vec::with_capacity(n * ell);
    for j in 0..ell {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(j as u64);
        data.extend((0..n).map(|_| -> f64 { StandardNormal.sample(&mut rng) }));
    }
    DMatrix::from_vec(n, ell, data)
}

/// Thin orthonormal basis from Householder QR. Returns the basis and the
/// numerical rank revealed by the triangular factor.
pub fn orthonormalize(y: DMatrix<f64>) -> (DMatrix<f64>, usize) {
    let qr = y.qr();
    let r = qr.r();
    let diag: Vec<f64> = (0..r.nrows().min(r.ncols())).map(|i| r[(i, i)].abs()).collect();
    let top = diag.iter().cloned().fold(0.0, f64::max);
    let rank = diag.iter().filter(|&&d| d > 1e-12 * top && d > 0.0).count();
    (qr.q(), rank)
}

#[derive(Debug, Clone)]
pub struct Sketch {
    /// Orthonormal basis, `n × ℓ`.
    pub q: DMatrix<f64>,
    /// Projected operator `Qᵀ A Q`, symmetrized.
    pub t: DMatrix<f64>,
    /// Numerical rank of the final range sample.
    pub rank: usize,
}

/// Orthonormal basis for the range of `A^q Ω`, re-orthonormalizing after
/// every product.
pub fn range_finder(op: &dyn SymmetricOperator, cfg: &SketchConfig) -> Result<(DMatrix<f64>, usize)> {
    let n = op.dim();
    cfg.validate(n)?;
    let mut y = gaussian_matrix(n, cfg.ell(), cfg.seed);
    for i in 0..cfg.q {
        if i > 0 {
            y = orthonormalize(y).0;
        }
        y = op.apply_block(&y)?;
    }
    let (q, rank) = orthonormalize(y);
    if rank < cfg.ell() {
        log::warn!(
            "range sample has numerical rank {rank} < {}; keeping the completed orthonormal basis",
            cfg.ell()
        );
    }
    Ok((q, rank))
}

/// Randomized subspace iteration: `(Q, T = QᵀAQ)`.
pub fn subspace_iteration(op: &dyn SymmetricOperator, cfg: &SketchConfig) -> Result<Sketch> {
    let (q, rank) = range_finder(op, cfg)?;
    let aq = op.apply_block(&q)?;
    let t = q.transpose() * aq;
    let t = (&t + t.transpose()) * 0.5;
    Ok(Sketch { q, t, rank })
}

/// Approximate dominant eigenpairs in Euclidean-orthonormal form.
#[derive(Debug, Clone)]
pub struct LowRankEig {
    /// `n × r`, orthonormal columns.
    pub vectors: DMatrix<f64>,
    /// Descending, clipped at zero.
    pub values: Vec<f64>,
}

impl LowRankEig {
    pub fn rank(&self) -> usize {
        self.values.len()
    }

    pub fn logdet_identity_plus(&self) -> f64 {
        self.values.iter().map(|l| l.ln_1p()).sum()
    }

    /// `Û diag(λ̂) Ûᵀ x`.
    pub fn reconstruct_apply(&self, x: &DVector<f64>) -> DVector<f64> {
        let c = self.vectors.tr_mul(x);
        let scaled = DVector::from_iterator(c.len(), c.iter().zip(&self.values).map(|(a, l)| a * l));
        &self.vectors * scaled
    }

    /// Keeps the leading `k` pairs.
    pub fn truncate(&self, k: usize) -> LowRankEig {
        let k = k.min(self.rank());
        LowRankEig {
            vectors: self.vectors.columns(0, k).into_owned(),
            values: self.values[..k].to_vec(),
        }
    }
}

pub fn low_rank_eig(q: &DMatrix<f64>, t: &DMatrix<f64>) -> LowRankEig {
    let (values, ut) = sorted_symmetric_eigen(t);
    LowRankEig {
        vectors: q * ut,
        values: values.iter().map(|v| v.max(0.0)).collect(),
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LanczosOptions {
    /// Residual target `‖A û − λ̂ û‖ ≤ tol · min(λ̂₁, 1 + λ̂)`.
    pub tol: f64,
    /// Cap on Krylov dimension; defaults to `n`.
    pub max_dim: Option<usize>,
    pub seed: u64,
    /// Dense eigensolve for dimensions up to this size when Lanczos fails.
    pub dense_fallback: usize,
}

impl Default for LanczosOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_dim: None,
            seed: 0x5eed,
            dense_fallback: 600,
        }
    }
}

fn random_unit_orthogonal(basis: &[DVector<f64>], n: usize, rng: &mut ChaCha8Rng) -> Option<DVector<f64>> {
    for _ in 0..5 {
        let mut v = DVector::from_fn(n, |_, _| -> f64 { StandardNormal.sample(rng) });
        for _ in 0..2 {
            for b in basis {
                let c = b.dot(&v);
                v.axpy(-c, b, 1.0);
            }
        }
        let nv = v.norm();
        if nv > 1e-8 {
            return Some(v / nv);
        }
    }
    None
}

/// Top-`k` eigenpairs by Lanczos with full reorthogonalization.
pub fn exact_eigs(op: &dyn SymmetricOperator, k: usize, opts: &LanczosOptions) -> Result<LowRankEig> {
    let n = op.dim();
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("requested {k} eigenpairs of an operator of size {n}")));
    }
    match lanczos(op, k, opts) {
        Ok(r) => Ok(r),
        Err(e @ Error::NoConvergence { .. }) if n <= opts.dense_fallback => {
            log::warn!("{e}; falling back to a dense eigensolve");
            dense_eigs(op, k)
        }
        Err(e) => Err(e),
    }
}

/// Top-`k` eigenpairs from a materialized operator (`n` products).
pub fn dense_eigs(op: &dyn SymmetricOperator, k: usize) -> Result<LowRankEig> {
    let n = op.dim();
    let a = op.apply_block(&DMatrix::identity(n, n))?;
    let (values, vectors) = sorted_symmetric_eigen(&a);
    Ok(LowRankEig {
        vectors: vectors.columns(0, k).into_owned(),
        values: values.as_slice()[..k].iter().map(|v| v.max(0.0)).collect(),
    })
}

fn lanczos(op: &dyn SymmetricOperator, k: usize, opts: &LanczosOptions) -> Result<LowRankEig> {
    let n = op.dim();
    let max_dim = opts.max_dim.unwrap_or(n).clamp(k, n);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(max_dim);
    let mut alpha: Vec<f64> = Vec::new();
    let mut beta: Vec<f64> = Vec::new();
    let mut scale = 0.0f64;
    let mut v = random_unit_orthogonal(&basis, n, &mut rng).expect("nonempty space");
    let mut last_residuals = vec![f64::INFINITY; k];
    let mut next_check = k;

    loop {
        let mut w = DVector::from_vec(op.apply(v.as_slice())?);
        let a = v.dot(&w);
        w.axpy(-a, &v, 1.0);
        if let (Some(prev), Some(&b)) = (basis.last(), beta.last()) {
            w.axpy(-b, prev, 1.0);
        }
        basis.push(v);
        alpha.push(a);
        for _ in 0..2 {
            for b in &basis {
                let c = b.dot(&w);
                w.axpy(-c, b, 1.0);
            }
        }
        let mut b = w.norm();
        scale = scale.max(a.abs() + b);
        let m = basis.len();
        let breakdown = b <= 100.0 * f64::EPSILON * scale || b == 0.0;

        if m >= next_check || m == max_dim || breakdown && m >= k {
            let t = tridiagonal(&alpha, &beta);
            let (theta, s) = sorted_symmetric_eigen(&t);
            let top = theta[0].max(0.0);
            let coupling = if breakdown { 0.0 } else { b };
            let residuals: Vec<f64> = (0..k.min(m)).map(|i| (coupling * s[(m - 1, i)]).abs()).collect();
            // Each Ritz pair must also be accurate relative to 1 + θ_i so that
            // log(1 + θ_i) is resolved; round-off caps what is attainable.
            let floor = 10.0 * f64::EPSILON * top;
            let converged = m >= k
                && residuals
                    .iter()
                    .enumerate()
                    .all(|(i, &r)| r <= (opts.tol * top.min(1.0 + theta[i].max(0.0))).max(floor));
            if converged || m == max_dim {
                if !converged {
                    let worst = residuals.iter().cloned().fold(0.0, f64::max);
                    return Err(Error::NoConvergence {
                        iterations: m,
                        worst,
                        residuals,
                    });
                }
                let vmat = DMatrix::from_columns(&basis);
                let vectors = vmat * s.columns(0, k);
                return Ok(LowRankEig {
                    vectors,
                    values: theta.as_slice()[..k].iter().map(|v| v.max(0.0)).collect(),
                });
            }
            last_residuals = residuals;
            next_check = m + (m / 10).max(1);
        }

        if breakdown {
            // Invariant subspace found: restart in its orthogonal complement.
            match random_unit_orthogonal(&basis, n, &mut rng) {
                Some(fresh) => {
                    v = fresh;
                    b = 0.0;
                }
                None => {
                    let worst = last_residuals.iter().cloned().fold(0.0, f64::max);
                    return Err(Error::NoConvergence {
                        iterations: m,
                        worst,
                        residuals: last_residuals,
                    });
                }
            }
        } else {
            v = w / b;
        }
        beta.push(b);
    }
}

/// An operator `A = BᵀB` given through products with its factor `B`.
pub trait FactoredOperator: Sync {
    /// `(rows, cols)` of `B`.
    fn factor_dims(&self) -> (usize, usize);

    fn factor_apply(&self, x: &[f64]) -> Result<Vec<f64>>;

    fn factor_apply_transpose(&self, y: &[f64]) -> Result<Vec<f64>>;
}

/// Dense factor for tests and small problems.
#[derive(Debug, Clone)]
pub struct DenseFactor(pub DMatrix<f64>);

impl FactoredOperator for DenseFactor {
    fn factor_dims(&self) -> (usize, usize) {
        self.0.shape()
    }

    fn factor_apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len(self.0.ncols(), x.len())?;
        Ok((&self.0 * DVector::from_column_slice(x)).data.into())
    }

    fn factor_apply_transpose(&self, y: &[f64]) -> Result<Vec<f64>> {
        check_len(self.0.nrows(), y.len())?;
        Ok((self.0.tr_mul(&DVector::from_column_slice(y))).data.into())
    }
}

/// Top-`k` eigenpairs of `BᵀB` by Golub–Kahan bidiagonalization of `B` with
/// full reorthogonalization. Each step costs one product with `B` and one
/// with `Bᵀ`. Eigenvalues are squared singular values, so small ones are
/// resolved to `eps·‖B‖·σ` instead of `eps·‖B‖²`. One extra product with
/// `Bᵀ` forms the starting vector.
pub fn exact_eigs_factored(op: &dyn FactoredOperator, k: usize, opts: &LanczosOptions) -> Result<LowRankEig> {
    let (rows, n) = op.factor_dims();
    let cap = rows.min(n);
    if k == 0 || k > cap {
        return Err(Error::InvalidArgument(format!("requested {k} singular triplets of a {rows}×{n} factor")));
    }
    let max_dim = opts.max_dim.unwrap_or(cap).clamp(k, cap);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut vs: Vec<DVector<f64>> = Vec::with_capacity(max_dim + 1);
    let mut us: Vec<DVector<f64>> = Vec::with_capacity(max_dim);
    // B V_m = U_m C_m with C_m upper bidiagonal: diagonal `alpha`, superdiagonal `beta`.
    let mut alpha: Vec<f64> = Vec::new();
    let mut beta: Vec<f64> = Vec::new();
    let mut scale = 0.0f64;
    // Starting in the row space of B keeps the basis free of null-space
    // components, so the factorization is exact once m reaches the rank.
    let start = random_unit_orthogonal(&[], rows, &mut rng).expect("nonempty space");
    let mut v = DVector::from_vec(op.factor_apply_transpose(start.as_slice())?);
    let vn = v.norm();
    if vn == 0.0 {
        let (q, _) = orthonormalize(gaussian_matrix(n, k, opts.seed));
        return Ok(LowRankEig {
            vectors: q.columns(0, k).into_owned(),
            values: vec![0.0; k],
        });
    }
    v /= vn;
    let mut next_check = k;
    let mut last_residuals = vec![f64::INFINITY; k];

    loop {
        let mut u = DVector::from_vec(op.factor_apply(v.as_slice())?);
        if let (Some(prev), Some(&b)) = (us.last(), beta.last()) {
            u.axpy(-b, prev, 1.0);
        }
        vs.push(v);
        reorthogonalize(&mut u, &us);
        let mut a = u.norm();
        scale = scale.max(a);
        if a <= 100.0 * f64::EPSILON * scale || a == 0.0 {
            a = 0.0;
            u = match random_unit_orthogonal(&us, rows, &mut rng) {
                Some(fresh) => fresh,
                None => DVector::zeros(rows),
            };
        } else {
            u /= a;
        }
        alpha.push(a);
        us.push(u);
        let m = alpha.len();

        let mut r = DVector::from_vec(op.factor_apply_transpose(us[m - 1].as_slice())?);
        r.axpy(-a, &vs[m - 1], 1.0);
        reorthogonalize(&mut r, &vs);
        let mut b = r.norm();
        scale = scale.max(b);
        let breakdown = b <= 100.0 * f64::EPSILON * scale || b == 0.0;
        if breakdown {
            b = 0.0;
        }

        if m >= next_check || m == max_dim || breakdown && m >= k {
            let c = DMatrix::from_fn(m, m, |i, j| {
                if i == j {
                    alpha[i]
                } else if i + 1 == j {
                    beta[i]
                } else {
                    0.0
                }
            });
            let svd = c.svd(true, true);
            let (uc, vtc) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
            let mut order: Vec<usize> = (0..m).collect();
            order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
            let sigma: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
            let top = sigma[0] * sigma[0];
            // ‖BᵀB ŷ − σ² ŷ‖ = σ β_m |x_m| for the Ritz triplet (σ, x, y) of C_m.
            let residuals: Vec<f64> = (0..k.min(m)).map(|i| (sigma[i] * b * uc[(m - 1, order[i])]).abs()).collect();
            let converged = m >= k
                && residuals.iter().enumerate().all(|(i, &res)| {
                    let lam = sigma[i] * sigma[i];
                    res <= (opts.tol * top.min(1.0 + lam)).max(10.0 * f64::EPSILON * sigma[0] * sigma[i])
                });
            if converged || m == max_dim {
                if !converged {
                    let worst = residuals.iter().cloned().fold(0.0, f64::max);
                    return Err(Error::NoConvergence {
                        iterations: m,
                        worst,
                        residuals,
                    });
                }
                let vmat = DMatrix::from_columns(&vs);
                let y = DMatrix::from_fn(m, k, |r, c| vtc[(order[c], r)]);
                return Ok(LowRankEig {
                    vectors: vmat * y,
                    values: sigma[..k].iter().map(|s| s * s).collect(),
                });
            }
            last_residuals = residuals;
            next_check = m + (m / 10).max(1);
        }

        v = if breakdown {
            match random_unit_orthogonal(&vs, n, &mut rng) {
                Some(fresh) => fresh,
                None => {
                    let worst = last_residuals.iter().cloned().fold(0.0, f64::max);
                    return Err(Error::NoConvergence {
                        iterations: m,
                        worst,
                        residuals: last_residuals,
                    });
                }
            }
        } else {
            r / b
        };
        beta.push(b);
    }
}

fn reorthogonalize(x: &mut DVector<f64>, basis: &[DVector<f64>]) {
    for _ in 0..2 {
        for b in basis {
            let c = b.dot(x);
            x.axpy(-c, b, 1.0);
        }
    }
}

fn tridiagonal(alpha: &[f64], beta: &[f64]) -> DMatrix<f64> {
    let m = alpha.len();
    DMatrix::from_fn(m, m, |i, j| {
        if i == j {
            alpha[i]
        } else if i + 1 == j {
            beta[i]
        } else if j + 1 == i {
            beta[j]
        } else {
            0.0
        }
    })
}

/// Constant of the expected-error bounds for a Gaussian sketch with target
/// rank `k`, oversampling `p ≥ 2` and dimension `n`.
pub fn cge_constant(k: usize, p: usize, n: usize) -> Result<f64> {
    if p < 2 {
        return Err(Error::InvalidArgument(format!("the Gaussian sketch bound needs p >= 2, got {p}")));
    }
    if k > n {
        return Err(Error::InvalidArgument(format!("k = {k} exceeds n = {n}")));
    }
    let (kf, pf) = (k as f64, p as f64);
    let mu = ((n - k) as f64).sqrt() + (kf + pf).sqrt();
    Ok(E * E * (kf + pf) / (pf + 1.0).powi(2)
        * (1.0 / (2.0 * PI * (pf + 1.0))).powf(2.0 / (pf + 1.0))
        * (mu + 2f64.sqrt()).powi(2)
        * ((pf + 1.0) / (pf - 1.0)))
}

/// Spectrum split at a target rank `k`.
#[derive(Debug, Clone)]
pub struct SpectrumSplit {
    pub head: Vec<f64>,
    pub tail: Vec<f64>,
    /// `λ_{k+1} / λ_k`.
    pub gap_ratio: f64,
}

impl SpectrumSplit {
    /// `spectrum` must be the full spectrum; it is sorted descending and
    /// clipped at zero.
    pub fn new(spectrum: &[f64], k: usize) -> Result<Self> {
        if k == 0 || k > spectrum.len() {
            return Err(Error::InvalidArgument(format!("cannot split {} eigenvalues at k = {k}", spectrum.len())));
        }
        let mut s: Vec<f64> = spectrum.iter().map(|v| v.max(0.0)).collect();
        s.sort_by(|a, b| b.total_cmp(a));
        let lk = s[k - 1];
        let next = s.get(k).copied().unwrap_or(0.0);
        let gap_ratio = if lk > 0.0 { next / lk } else { 0.0 };
        Ok(Self {
            head: s[..k].to_vec(),
            tail: s[k..].to_vec(),
            gap_ratio,
        })
    }

    pub fn k(&self) -> usize {
        self.head.len()
    }

    pub fn n(&self) -> usize {
        self.head.len() + self.tail.len()
    }

    pub fn tail_trace(&self) -> f64 {
        self.tail.iter().sum()
    }

    pub fn tail_logdet(&self) -> f64 {
        self.tail.iter().map(|l| l.ln_1p()).sum()
    }

    pub fn tail_damped_sum(&self) -> f64 {
        self.tail.iter().map(|l| l / (1.0 + l)).sum()
    }
}

/// Which error bound to evaluate. Gradient kinds carry the operator norms
/// of the design derivatives `Z_j`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BoundKind {
    /// Exact-eigenvalue truncation of the KL divergence.
    KlEig,
    /// Expected KL error of the sketched estimator.
    KlRand,
    /// Expected log-determinant error of the sketched estimator.
    LogdetRand,
    /// Expected error of one sketched gradient component, given `‖Z_j‖₂`.
    GradRandComponent { z_norm: f64 },
    /// Error of one truncated-eigenpair gradient component, given `‖Z_j‖₂`.
    GradEigComponent { z_norm: f64 },
    /// Truncated-eigenpair gradient 2-norm error, given `(Σ_j ‖Z_j‖₂²)^{1/2}`.
    GradNormEig { z_norm_l2: f64 },
    /// Sketched gradient 2-norm error, given `Σ_j ‖Z_j‖₂`.
    GradNormRand { z_norm_sum: f64 },
    /// Frozen forward-map truncation; the split is over singular values.
    Frozen,
}

impl BoundKind {
    fn is_randomized(&self) -> bool {
        matches!(
            self,
            BoundKind::KlRand | BoundKind::LogdetRand | BoundKind::GradRandComponent { .. } | BoundKind::GradNormRand { .. }
        )
    }
}

/// Right-hand side of the selected bound. `cfg.k` must equal `split.k()`;
/// the dimension is taken from the split.
pub fn error_bound(split: &SpectrumSplit, cfg: &SketchConfig, kind: BoundKind) -> Result<f64> {
    let tail_trace = split.tail_trace();
    let tail_logdet = split.tail_logdet();
    if kind.is_randomized() {
        if cfg.k != split.k() {
            return Err(Error::InvalidArgument(format!(
                "sketch target rank {} differs from split rank {}",
                cfg.k,
                split.k()
            )));
        }
        if cfg.q == 0 {
            return Err(Error::InvalidArgument("bounds need q >= 1".into()));
        }
        if tail_trace == 0.0 {
            return Ok(0.0);
        }
        if !(split.gap_ratio < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "randomized bounds need a spectral gap, got ratio {}",
                split.gap_ratio
            )));
        }
    }
    let amp = || -> Result<f64> {
        let c = cge_constant(split.k(), cfg.p, split.n())?;
        Ok(split.gap_ratio.powi(2 * cfg.q as i32 - 1) * c)
    };
    let bound = match kind {
        BoundKind::KlEig => 0.5 * (tail_logdet + tail_trace),
        BoundKind::KlRand => {
            let a = amp()?;
            let inflated: f64 = split.tail.iter().map(|l| (a * l).ln_1p()).sum();
            0.5 * ((1.0 + a) * tail_trace + tail_logdet + inflated)
        }
        BoundKind::LogdetRand => {
            let a = amp()?;
            tail_logdet + split.tail.iter().map(|l| (a * l).ln_1p()).sum::<f64>()
        }
        BoundKind::GradRandComponent { z_norm } => z_norm * (1.0 + amp()?) * tail_trace,
        BoundKind::GradNormRand { z_norm_sum } => z_norm_sum * (1.0 + amp()?) * tail_trace,
        BoundKind::GradEigComponent { z_norm } => z_norm * split.tail_damped_sum(),
        BoundKind::GradNormEig { z_norm_l2 } => z_norm_l2 * split.tail_damped_sum(),
        BoundKind::Frozen => split.tail.iter().map(|s| (s * s).ln_1p()).sum(),
    };
    Ok(bound)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::logdet_identity_plus;

    fn diag_op(values: &[f64]) -> DenseOperator {
        DenseOperator(DMatrix::from_diagonal(&DVector::from_column_slice(values)))
    }

    fn random_psd(n: usize, spectrum: &[f64], seed: u64) -> DMatrix<f64> {
        let (q, _) = orthonormalize(gaussian_matrix(n, n, seed));
        &q * DMatrix::from_diagonal(&DVector::from_column_slice(spectrum)) * q.transpose()
    }

    #[test]
    fn gaussian_columns_are_independent_of_width() {
        let a = gaussian_matrix(7, 3, 11);
        let b = gaussian_matrix(7, 5, 11);
        assert_eq!(a, b.columns(0, 3).into_owned());
        assert_ne!(a.column(0), a.column(1));
    }

    #[test]
    fn exact_capture_of_low_rank_range() {
        let mut d = vec![0.0; 12];
        d[..3].copy_from_slice(&[3.0, 2.0, 1.0]);
        let op = diag_op(&d);
        let s = subspace_iteration(&op, &SketchConfig::new(3, 2, 1, 4)).unwrap();
        let (ev, _) = sorted_symmetric_eigen(&s.t);
        for (a, b) in ev.iter().zip([3.0, 2.0, 1.0, 0.0, 0.0]) {
            assert!((a - b).abs() < 1e-10, "{ev:?}");
        }
        let lr = low_rank_eig(&s.q, &s.t);
        let x = DVector::from_fn(12, |i, _| (i as f64 + 1.0).sqrt());
        let ax = &op.0 * &x;
        assert!((lr.reconstruct_apply(&x) - ax).norm() < 1e-10);
        assert!((lr.vectors.transpose() * &lr.vectors - DMatrix::identity(5, 5)).norm() < 1e-10);
    }

    #[test]
    fn zero_operator_gives_zero_sketch() {
        let op = DenseOperator(DMatrix::zeros(8, 8));
        let s = subspace_iteration(&op, &SketchConfig::new(2, 2, 2, 1)).unwrap();
        assert_eq!(s.t.norm(), 0.0);
    }

    #[test]
    fn sketch_is_deterministic() {
        let op = DenseOperator(random_psd(30, &(0..30).map(|i| 0.7f64.powi(i)).collect::<Vec<_>>(), 2));
        let cfg = SketchConfig::new(4, 3, 2, 77);
        let a = subspace_iteration(&op, &cfg).unwrap();
        let b = subspace_iteration(&op, &cfg).unwrap();
        assert_eq!(a.t, b.t);
    }

    #[test]
    fn invalid_configs_rejected() {
        let op = diag_op(&[1.0; 4]);
        assert!(subspace_iteration(&op, &SketchConfig::new(3, 2, 1, 0)).is_err());
        assert!(subspace_iteration(&op, &SketchConfig::new(0, 2, 1, 0)).is_err());
        assert!(subspace_iteration(&op, &SketchConfig::new(2, 0, 0, 0)).is_err());
    }

    #[test]
    fn negative_roundoff_is_clipped() {
        let q = DMatrix::identity(3, 2);
        let t = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, -1e-14]));
        let lr = low_rank_eig(&q, &t);
        assert_eq!(lr.values, vec![2.0, 0.0]);
    }

    #[test]
    fn diagonal_projection_keeps_basis() {
        let q = DMatrix::identity(4, 2);
        let t = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 3.0]));
        let lr = low_rank_eig(&q, &t);
        assert_eq!(lr.values, vec![3.0, 1.0]);
        assert!((lr.vectors[(1, 0)].abs() - 1.0).abs() < 1e-15);
        assert!((lr.vectors[(0, 1)].abs() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn lanczos_diagonal() {
        let lr = exact_eigs(&diag_op(&[5.0, 4.0, 3.0, 2.0, 1.0]), 2, &LanczosOptions::default()).unwrap();
        assert!((lr.values[0] - 5.0).abs() < 1e-10 && (lr.values[1] - 4.0).abs() < 1e-10);
    }

    #[test]
    fn lanczos_matches_dense_eigensolver() {
        let n = 200;
        let spectrum: Vec<f64> = (0..n).map(|i| 10.0 * 0.9f64.powi(i as i32)).collect();
        let a = random_psd(n, &spectrum, 5);
        let op = DenseOperator(a.clone());
        let lr = exact_eigs(&op, 15, &LanczosOptions::default()).unwrap();
        for i in 0..15 {
            assert!((lr.values[i] - spectrum[i]).abs() < 1e-8 * spectrum[0]);
            let u = lr.vectors.column(i);
            let r = (&a * u - u * lr.values[i]).norm();
            assert!(r <= 1e-8 * lr.values[0], "residual {r}");
        }
    }

    #[test]
    fn lanczos_full_spectrum_and_rank_deficiency() {
        let mut spectrum = vec![0.0; 40];
        for (i, s) in spectrum.iter_mut().take(6).enumerate() {
            *s = 1.0 + i as f64;
        }
        let a = random_psd(40, &spectrum, 9);
        let lr = exact_eigs(&DenseOperator(a.clone()), 40, &LanczosOptions::default()).unwrap();
        assert!((lr.values.iter().sum::<f64>() - a.trace()).abs() < 1e-8);
        assert!((lr.vectors.transpose() * &lr.vectors - DMatrix::identity(40, 40)).norm() < 1e-8);
        let zero = exact_eigs(&DenseOperator(DMatrix::zeros(6, 6)), 3, &LanczosOptions::default()).unwrap();
        assert_eq!(zero.values, vec![0.0; 3]);
    }

    #[test]
    fn cge_requires_oversampling() {
        assert!(cge_constant(10, 1, 100).is_err());
        let mut prev = f64::INFINITY;
        for p in 2..=20 {
            let c = cge_constant(10, p, 500).unwrap();
            assert!(c < prev);
            prev = c;
        }
    }

    #[test]
    fn zero_tail_gives_zero_bounds() {
        let split = SpectrumSplit::new(&[3.0, 2.0, 0.0, 0.0], 2).unwrap();
        let cfg = SketchConfig::new(2, 2, 1, 0);
        for kind in [
            BoundKind::KlEig,
            BoundKind::KlRand,
            BoundKind::LogdetRand,
            BoundKind::GradRandComponent { z_norm: 2.0 },
            BoundKind::GradEigComponent { z_norm: 2.0 },
            BoundKind::GradNormEig { z_norm_l2: 2.0 },
            BoundKind::GradNormRand { z_norm_sum: 2.0 },
            BoundKind::Frozen,
        ] {
            assert_eq!(error_bound(&split, &cfg, kind).unwrap(), 0.0);
        }
    }

    #[test]
    fn kl_bound_below_simplified_form() {
        let spectrum: Vec<f64> = (1..=60).map(|i| 0.5f64.powi(i)).collect();
        let split = SpectrumSplit::new(&spectrum, 10).unwrap();
        let cfg = SketchConfig::new(10, 5, 1, 0);
        let b = error_bound(&split, &cfg, BoundKind::KlRand).unwrap();
        let c = cge_constant(10, 5, 60).unwrap();
        let simple = (1.0 + split.gap_ratio * c) * split.tail_trace();
        assert!(b <= simple);
        assert!(split.gap_ratio == 0.5);
    }

    #[test]
    fn no_gap_rejected_for_randomized_kinds() {
        let split = SpectrumSplit::new(&[1.0, 1.0, 1.0], 1).unwrap();
        let cfg = SketchConfig::new(1, 2, 1, 0);
        assert!(error_bound(&split, &cfg, BoundKind::LogdetRand).is_err());
        assert!(error_bound(&split, &cfg, BoundKind::KlEig).is_ok());
    }

    #[test]
    fn sketch_logdet_never_exceeds_exact() {
        let spectrum: Vec<f64> = (0..50).map(|i| 4.0 * 0.8f64.powi(i)).collect();
        let a = random_psd(50, &spectrum, 21);
        let exact = logdet_identity_plus(&a);
        for seed in 0..10 {
            let s = subspace_iteration(&DenseOperator(a.clone()), &SketchConfig::new(5, 3, 1, seed)).unwrap();
            assert!(logdet_identity_plus(&s.t) <= exact + 1e-12);
        }
    }
}
