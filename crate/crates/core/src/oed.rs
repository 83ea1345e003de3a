//! D-optimal design criterion `J(w) = log det(I + Gᵀ W^σ G)`, its gradient
//! and the KL divergence, estimated by truncated eigenpairs, randomized
//! sketching or a frozen SVD of the forward map, with exact references.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{check_len, Error, Result};
use crate::inverse::map_estimate;
use crate::linalg::{gram_eigen_from_factor, logdet_identity_plus, sorted_symmetric_eigen};
use crate::prior::WhitenedForwardMap;
use crate::sketch::{
    dense_eigs, exact_eigs_factored, gaussian_matrix, low_rank_eig, orthonormalize, range_finder,
    subspace_iteration, FactoredOperator, LanczosOptions, LowRankEig, SketchConfig, SymmetricOperator,
};
use crate::transport::SolveCounts;

/// Largest dimension for which the Hessian is ever materialized.
pub const DENSE_GUARD: usize = 600;

#[derive(Debug, Clone, PartialEq)]
pub struct DesignWeights(Vec<f64>);

impl DesignWeights {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if let Some(i) = w.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument(format!("weight {i} = {} lies outside [0, 1]", w[i])));
        }
        Ok(Self(w))
    }

    pub fn ones(n: usize) -> Self {
        Self(vec![1.0; n])
    }

    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    sigma: Vec<f64>,
}

impl NoiseModel {
    pub fn new(sigma: Vec<f64>) -> Result<Self> {
        if let Some(i) = sigma.iter().position(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument(format!("noise level {i} = {} must be positive", sigma[i])));
        }
        Ok(Self { sigma })
    }

    pub fn uniform(sigma: f64, n_sensors: usize) -> Result<Self> {
        Self::new(vec![sigma; n_sensors])
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn n_sensors(&self) -> usize {
        self.sigma.len()
    }

    #[inline]
    pub fn precision(&self, j: usize) -> f64 {
        1.0 / (self.sigma[j] * self.sigma[j])
    }

    /// Per-observation diagonal of `W^σ` for the time-major layout.
    pub fn weighted_precisions(&self, w: &[f64], n_times: usize) -> Vec<f64> {
        let ns = self.n_sensors();
        (0..ns * n_times).map(|r| w[r % ns] * self.precision(r % ns)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ZSource {
    Exact,
    Frozen,
}

/// `z_j = tr(Z_j)`, the design-independent part of the gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorDerivConstants {
    pub z: Vec<f64>,
    pub source: ZSource,
}

const Z_MAGIC: &[u8; 4] = b"OEDZ";
const Z_VERSION: u32 = 1;

impl SensorDerivConstants {
    /// Writes a versioned little-endian file tagged with `key`.
    pub fn save(&self, path: &Path, key: &str) -> Result<()> {
        let mut buf = Vec::with_capacity(32 + key.len() + 8 * self.z.len());
        buf.extend_from_slice(Z_MAGIC);
        buf.extend_from_slice(&Z_VERSION.to_le_bytes());
        buf.extend_from_slice(&(key.len() as u32).to_le_bytes());
        buf.extend_from_slice(key.as_bytes());
        buf.push(match self.source {
            ZSource::Exact => 0,
            ZSource::Frozen => 1,
        });
        buf.extend_from_slice(&(self.z.len() as u64).to_le_bytes());
        for v in &self.z {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::File::create(path)?.write_all(&buf)?;
        Ok(())
    }

    /// Reads a cache file; `None` when it is absent, malformed or was
    /// written for a different key.
    pub fn load(path: &Path, key: &str) -> Result<Option<Self>> {
        let mut bytes = Vec::new();
        match fs::File::open(path) {
            Ok(mut f) => f.read_to_end(&mut bytes)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(e.into()),
        };
        Ok(parse_z_cache(&bytes, key))
    }
}

fn parse_z_cache(bytes: &[u8], key: &str) -> Option<SensorDerivConstants> {
    let take = |at: usize, len: usize| bytes.get(at..at + len);
    if take(0, 4)? != Z_MAGIC {
        return None;
    }
    let version = u32::from_le_bytes(take(4, 4)?.try_into().ok()?);
    if version != Z_VERSION {
        return None;
    }
    let klen = u32::from_le_bytes(take(8, 4)?.try_into().ok()?) as usize;
    if take(12, klen)? != key.as_bytes() {
        return None;
    }
    let mut at = 12 + klen;
    let source = match *bytes.get(at)? {
        0 => ZSource::Exact,
        1 => ZSource::Frozen,
        _ => return None,
    };
    at += 1;
    let n = u64::from_le_bytes(take(at, 8)?.try_into().ok()?) as usize;
    at += 8;
    if bytes.len() != at + 8 * n {
        return None;
    }
    let z = (0..n)
        .map(|i| f64::from_le_bytes(bytes[at + 8 * i..at + 8 * i + 8].try_into().unwrap()))
        .collect();
    Some(SensorDerivConstants { z, source })
}

/// `z_j = σ_j⁻² Σ_m ‖Gᵀ(e_m ⊗ e_j)‖²`: one adjoint solve per observation.
pub fn precompute_z(g: &WhitenedForwardMap, noise: &NoiseModel) -> Result<SensorDerivConstants> {
    let (ns, ny) = (g.n_sensors(), g.n_obs());
    check_len(ns, noise.n_sensors())?;
    let norms: Vec<f64> = (0..ny)
        .into_par_iter()
        .map(|r| {
            let mut e = vec![0.0; ny];
            e[r] = 1.0;
            Ok(g.apply_transpose(&e)?.iter().map(|v| v * v).sum())
        })
        .collect::<Result<_>>()?;
    let mut z = vec![0.0; ns];
    for (r, v) in norms.into_iter().enumerate() {
        z[r % ns] += v;
    }
    for (j, zj) in z.iter_mut().enumerate() {
        *zj *= noise.precision(j);
    }
    Ok(SensorDerivConstants { z, source: ZSource::Exact })
}

/// [`precompute_z`] behind a file cache tagged by a configuration key.
pub fn precompute_z_cached(
    g: &WhitenedForwardMap,
    noise: &NoiseModel,
    path: &Path,
    key: &str,
) -> Result<SensorDerivConstants> {
    match SensorDerivConstants::load(path, key)? {
        Some(c) if c.z.len() == g.n_sensors() && c.source == ZSource::Exact => return Ok(c),
        Some(_) => log::warn!("z cache at {} does not fit this problem; recomputing", path.display()),
        None if path.exists() => log::warn!("z cache at {} is stale; recomputing", path.display()),
        None => {}
    }
    let z = precompute_z(g, noise)?;
    z.save(path, key)?;
    Ok(z)
}

/// `x ↦ Gᵀ W^σ G x`.
pub struct MisfitHessianOp<'a> {
    g: &'a WhitenedForwardMap,
    obs_weights: Vec<f64>,
}

impl<'a> MisfitHessianOp<'a> {
    pub fn new(g: &'a WhitenedForwardMap, noise: &NoiseModel, w: &[f64]) -> Result<Self> {
        check_len(g.n_sensors(), w.len())?;
        check_len(g.n_sensors(), noise.n_sensors())?;
        Ok(Self {
            obs_weights: noise.weighted_precisions(w, g.n_times()),
            g,
        })
    }

    pub fn obs_weights(&self) -> &[f64] {
        &self.obs_weights
    }
}

impl SymmetricOperator for MisfitHessianOp<'_> {
    fn dim(&self) -> usize {
        self.g.n()
    }

    fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut y = self.g.apply(x)?;
        for (v, d) in y.iter_mut().zip(&self.obs_weights) {
            *v *= d;
        }
        self.g.apply_transpose(&y)
    }
}

impl FactoredOperator for MisfitHessianOp<'_> {
    /// The factor is `(W^σ)^{1/2} G`.
    fn factor_dims(&self) -> (usize, usize) {
        (self.g.n_obs(), self.g.n())
    }

    fn factor_apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut y = self.g.apply(x)?;
        for (v, d) in y.iter_mut().zip(&self.obs_weights) {
            *v *= d.sqrt();
        }
        Ok(y)
    }

    fn factor_apply_transpose(&self, y: &[f64]) -> Result<Vec<f64>> {
        let scaled: Vec<f64> = y.iter().zip(&self.obs_weights).map(|(v, d)| v * d.sqrt()).collect();
        self.g.apply_transpose(&scaled)
    }
}

/// Top-`k` eigenpairs of the misfit Hessian through its factor, with a
/// dense fallback on small problems.
pub fn top_eigenpairs(op: &MisfitHessianOp<'_>, k: usize, opts: &LanczosOptions) -> Result<LowRankEig> {
    match exact_eigs_factored(op, k, opts) {
        Ok(lr) => Ok(lr),
        Err(e @ Error::NoConvergence { .. }) if op.dim() <= opts.dense_fallback => {
            log::warn!("{e}; falling back to a dense eigensolve");
            dense_eigs(op, k)
        }
        Err(e) => Err(e),
    }
}

/// One objective/gradient evaluation.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub objective: f64,
    pub gradient: Vec<f64>,
    /// Eigenvalues the estimate was built from, descending.
    pub eigenvalues: Vec<f64>,
    pub solves: SolveCounts,
    pub wall_time: f64,
}

/// Anything that yields `J(w)` and `∇J(w)` for the optimizer.
pub trait DesignCriterion: Sync {
    fn n_sensors(&self) -> usize;

    fn evaluate(&self, w: &[f64]) -> Result<Evaluation>;

    /// Nonmonotone line-search memory; 1 for estimators whose gradient is
    /// the exact derivative of their objective.
    fn line_search_window(&self) -> usize {
        1
    }

    fn name(&self) -> &'static str;
}

/// The operator stack together with the noise model and `z`.
#[derive(Debug, Clone)]
pub struct OedProblem {
    pub g: WhitenedForwardMap,
    pub noise: NoiseModel,
    pub z: SensorDerivConstants,
}

impl OedProblem {
    pub fn new(g: WhitenedForwardMap, noise: NoiseModel) -> Result<Self> {
        let z = precompute_z(&g, &noise)?;
        Ok(Self { g, noise, z })
    }

    pub fn with_z(g: WhitenedForwardMap, noise: NoiseModel, z: SensorDerivConstants) -> Result<Self> {
        check_len(g.n_sensors(), noise.n_sensors())?;
        check_len(g.n_sensors(), z.z.len())?;
        Ok(Self { g, noise, z })
    }

    pub fn n_sensors(&self) -> usize {
        self.g.n_sensors()
    }

    pub fn hessian(&self, w: &[f64]) -> Result<MisfitHessianOp<'_>> {
        MisfitHessianOp::new(&self.g, &self.noise, w)
    }

    fn timed<F: FnOnce() -> Result<(f64, Vec<f64>, Vec<f64>)>>(&self, f: F) -> Result<Evaluation> {
        let start = Instant::now();
        let before = self.g.counter().snapshot();
        let (objective, gradient, eigenvalues) = f()?;
        Ok(Evaluation {
            objective,
            gradient,
            eigenvalues,
            solves: self.g.counter().snapshot() - before,
            wall_time: start.elapsed().as_secs_f64(),
        })
    }

    fn woodbury_gradient(&self, values: &[f64], gu: &DMatrix<f64>) -> Vec<f64> {
        let precisions: Vec<f64> = (0..self.n_sensors()).map(|j| self.noise.precision(j)).collect();
        woodbury_gradient(&self.z.z, &precisions, values, gu)
    }

    fn forward_columns(&self, u: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let n = self.g.n();
        let cols: Vec<Vec<f64>> = (0..u.ncols())
            .into_par_iter()
            .map(|i| self.g.apply(&u.as_slice()[i * n..(i + 1) * n]))
            .collect::<Result<_>>()?;
        Ok(DMatrix::from_fn(self.g.n_obs(), u.ncols(), |r, i| cols[i][r]))
    }

    /// Truncated spectral estimate from the top `k` eigenpairs.
    pub fn objective_grad_eig(&self, w: &[f64], k: usize, opts: &LanczosOptions) -> Result<Evaluation> {
        let rank_cap = self.g.n().min(self.g.n_obs());
        if k == 0 || k > rank_cap {
            return Err(Error::InvalidArgument(format!("eig estimator needs 1 <= k <= {rank_cap}, got {k}")));
        }
        self.timed(|| {
            let op = self.hessian(w)?;
            let lr = top_eigenpairs(&op, k, opts)?;
            let gu = self.forward_columns(&lr.vectors)?;
            let grad = self.woodbury_gradient(&lr.values, &gu);
            Ok((lr.logdet_identity_plus(), grad, lr.values))
        })
    }

    /// Randomized estimate `log det(I + T)` with the Woodbury gradient.
    /// With `reuse_forward_products`, `GQ` from the projection step also
    /// supplies `T = (GQ)ᵀW(GQ)` and `q̂ = (GQ)U_T`.
    pub fn objective_grad_rand(&self, w: &[f64], cfg: &SketchConfig, reuse_forward_products: bool) -> Result<Evaluation> {
        self.timed(|| {
            let op = self.hessian(w)?;
            let (lr, gu, t) = if reuse_forward_products {
                let (q, _) = range_finder(&op, cfg)?;
                let gq = self.forward_columns(&q)?;
                let d = DMatrix::from_diagonal(&DVector::from_column_slice(op.obs_weights()));
                let t = gq.transpose() * d * &gq;
                let t = (&t + t.transpose()) * 0.5;
                let (_, ut) = sorted_symmetric_eigen(&t);
                let lr = low_rank_eig(&q, &t);
                (lr, gq * ut, t)
            } else {
                let s = subspace_iteration(&op, cfg)?;
                let lr = low_rank_eig(&s.q, &s.t);
                let gu = self.forward_columns(&lr.vectors)?;
                (lr, gu, s.t)
            };
            let grad = self.woodbury_gradient(&lr.values, &gu);
            Ok((logdet_identity_plus(&t), grad, lr.values))
        })
    }

    /// Exact `J`, `∇J` and spectrum from the materialized factor
    /// `(W^σ)^{1/2} G`, assembled with `n` forward solves.
    pub fn dense_reference(&self, w: &[f64]) -> Result<DenseReference> {
        let n = self.g.n();
        if n > DENSE_GUARD {
            return Err(Error::TooLarge { n, limit: DENSE_GUARD });
        }
        check_len(self.n_sensors(), w.len())?;
        let g = self.g.to_dense_forward()?;
        DenseReference::from_forward_map(g, w, &self.noise)
    }

    /// Exact reference through the full SVD of the noise-whitened map,
    /// built once with `n_y` adjoint solves.
    pub fn gram(&self) -> Result<GramReference> {
        GramReference::new(self.g.to_dense()?, self.noise.clone())
    }

    /// `½ J`.
    pub fn expected_info_gain(&self, criterion: &dyn DesignCriterion, w: &[f64]) -> Result<f64> {
        Ok(0.5 * criterion.evaluate(w)?.objective)
    }

    /// KL divergence from posterior to prior for observed data.
    pub fn kl_estimate(&self, w: &[f64], y_obs: &[f64], method: &KlMethod, cg_tol: f64) -> Result<KlEstimate> {
        let map = map_estimate(&self.g, &self.noise, w, y_obs, cg_tol, 10 * self.g.n_obs().max(50))?;
        let eigenvalues = match method {
            KlMethod::Eig { k, lanczos } => top_eigenpairs(&self.hessian(w)?, *k, lanczos)?.values,
            KlMethod::Rand(cfg) => {
                let s = subspace_iteration(&self.hessian(w)?, cfg)?;
                let (ev, _) = sorted_symmetric_eigen(&s.t);
                ev.iter().map(|v| v.max(0.0)).collect()
            }
            KlMethod::Exact => self.gram()?.evaluate(w)?.eigenvalues,
        };
        let norm = self.g.prior().prior_weighted_norm_sq(&difference(&map.theta_post, self.g.prior().mean()))?;
        Ok(KlEstimate::from_parts(&eigenvalues, norm))
    }
}

fn difference(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

#[derive(Debug, Clone)]
pub enum KlMethod {
    Eig { k: usize, lanczos: LanczosOptions },
    Rand(SketchConfig),
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlEstimate {
    pub value: f64,
    pub logdet: f64,
    pub trace_term: f64,
    pub norm_term: f64,
}

impl KlEstimate {
    /// `½[Σ log(1+λ) − Σ λ/(1+λ) + c]`.
    pub fn from_parts(eigenvalues: &[f64], norm_term: f64) -> Self {
        let logdet: f64 = eigenvalues.iter().map(|l| l.max(0.0).ln_1p()).sum();
        let trace_term: f64 = eigenvalues.iter().map(|l| l.max(0.0) / (1.0 + l.max(0.0))).sum();
        Self {
            value: 0.5 * (logdet - trace_term + norm_term),
            logdet,
            trace_term,
            norm_term,
        }
    }
}

/// Materialized factor, Hessian and forward map for oracle checks.
#[derive(Debug, Clone)]
pub struct DenseReference {
    pub objective: f64,
    pub gradient: Vec<f64>,
    /// All `n` eigenvalues, descending, clipped at zero.
    pub spectrum: Vec<f64>,
    pub hessian: DMatrix<f64>,
    /// Whitened forward map, `n_y × n`.
    pub g: DMatrix<f64>,
    n_sensors: usize,
    precisions: Vec<f64>,
}

impl DenseReference {
    /// `g` is the dense whitened map (`n_y × n`) before noise scaling. The
    /// spectrum comes from the SVD of `(W^σ)^{1/2} G`, so eigenvalues far
    /// below `‖ℍ_m‖` keep their accuracy.
    pub fn from_forward_map(g: DMatrix<f64>, w: &[f64], noise: &NoiseModel) -> Result<Self> {
        let ns = noise.n_sensors();
        check_len(ns, w.len())?;
        if g.nrows() % ns != 0 {
            return Err(Error::Dimension { expected: ns, got: g.nrows() });
        }
        let precisions: Vec<f64> = (0..ns).map(|j| noise.precision(j)).collect();
        let scale: Vec<f64> = (0..g.nrows()).map(|r| (w[r % ns] * precisions[r % ns]).sqrt()).collect();
        let b = DMatrix::from_fn(g.nrows(), g.ncols(), |r, c| g[(r, c)] * scale[r]);
        let hessian = b.tr_mul(&b);
        let hessian = (&hessian + hessian.transpose()) * 0.5;
        let (values, vectors) = gram_eigen_from_factor(&b);
        let spectrum: Vec<f64> = values.iter().map(|v| v.max(0.0)).collect();
        let objective = spectrum.iter().map(|l| l.ln_1p()).sum();
        // tr((I+H)⁻¹ Z_j) = σ_j⁻² Σ_m Σ_i (g_r·v_i)² / (1 + λ_i), a sum of
        // nonnegative terms that stays accurate for ill-conditioned H.
        let proj = &g * &vectors;
        let gradient = damped_row_sums(&proj, &spectrum, &precisions);
        Ok(Self {
            objective,
            gradient,
            spectrum,
            hessian,
            g,
            n_sensors: ns,
            precisions,
        })
    }

    /// Dense `Z_j = σ_j⁻² Gᵀ E_j G`.
    pub fn z_matrix(&self, j: usize) -> DMatrix<f64> {
        let n = self.g.ncols();
        let mut z = DMatrix::zeros(n, n);
        for r in (j..self.g.nrows()).step_by(self.n_sensors) {
            let row = self.g.row(r).transpose();
            z += &row * row.transpose();
        }
        z * self.precisions[j]
    }

    /// `‖Z_j‖₂`; equal to `σ_j⁻²` times the largest eigenvalue of the small
    /// Gram matrix of the rows belonging to sensor `j`.
    pub fn z_norms(&self) -> Vec<f64> {
        (0..self.n_sensors)
            .map(|j| {
                let rows: Vec<usize> = (j..self.g.nrows()).step_by(self.n_sensors).collect();
                let sub = DMatrix::from_fn(rows.len(), self.g.ncols(), |a, c| self.g[(rows[a], c)]);
                let gram = &sub * sub.transpose();
                sorted_symmetric_eigen(&gram).0[0].max(0.0) * self.precisions[j]
            })
            .collect()
    }
}

/// Exact `J` and `∇J` from the full-rank SVD of the noise-whitened map,
/// built once from `n_y` adjoint solves. No rank truncation is applied, so
/// this is exact for any `n`.
#[derive(Debug, Clone)]
pub struct GramReference {
    svd: FrozenSvd,
}

impl GramReference {
    /// `g` is the dense whitened map (`n_y × n`) before noise scaling.
    pub fn new(g: DMatrix<f64>, noise: NoiseModel) -> Result<Self> {
        let ns = noise.n_sensors();
        if g.nrows() % ns != 0 {
            return Err(Error::Dimension { expected: ns, got: g.nrows() });
        }
        let mut gs = g;
        for r in 0..gs.nrows() {
            gs.row_mut(r).scale_mut(1.0 / noise.sigma()[r % ns]);
        }
        let full = gs.nrows().min(gs.ncols());
        Ok(Self {
            svd: FrozenSvd::from_dense(gs, ns, full)?,
        })
    }

    pub fn n_sensors(&self) -> usize {
        self.svd.n_sensors
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.svd.singular_values
    }

    pub fn evaluate(&self, w: &[f64]) -> Result<Evaluation> {
        self.svd.evaluate(w)
    }
}

/// Gradient from approximate eigenpairs: `z_j − Σ_i λ_i/(1+λ_i) p_j Σ_m
/// q_i[(m, j)]²`, where `q_i = G û_i` are the columns of `gu` (`n_y × r`),
/// rows time-major, and `p_j` are the sensor precisions.
pub fn woodbury_gradient(z: &[f64], precisions: &[f64], values: &[f64], gu: &DMatrix<f64>) -> Vec<f64> {
    let ns = z.len();
    let mut grad = z.to_vec();
    for (i, &l) in values.iter().enumerate() {
        let d = l / (1.0 + l);
        if d == 0.0 {
            continue;
        }
        for (r, v) in gu.column(i).iter().enumerate() {
            let j = r % ns;
            grad[j] -= d * precisions[j] * v * v;
        }
    }
    grad
}

/// `out_j = p_j Σ_{r ≡ j} Σ_i proj[r,i]² / (1 + λ_i)`.
fn damped_row_sums(proj: &DMatrix<f64>, values: &[f64], precisions: &[f64]) -> Vec<f64> {
    let ns = precisions.len();
    let damp: Vec<f64> = values.iter().map(|l| 1.0 / (1.0 + l.max(0.0))).collect();
    let mut out = vec![0.0; ns];
    for r in 0..proj.nrows() {
        let mut acc = 0.0;
        for (i, d) in damp.iter().enumerate() {
            acc += proj[(r, i)] * proj[(r, i)] * d;
        }
        out[r % ns] += acc;
    }
    out.iter_mut().zip(precisions).for_each(|(o, p)| *o *= p);
    out
}

/// Truncated SVD `Û Σ̂ V̂ᵀ` of the noise-whitened map `diag(σ⁻¹) G`.
#[derive(Debug, Clone)]
pub struct FrozenSvd {
    /// `Û Σ̂`, `n_y × k_f`.
    factor: DMatrix<f64>,
    pub singular_values: Vec<f64>,
    /// Singular values not kept, when the full SVD was computed.
    pub discarded: Option<Vec<f64>>,
    n_sensors: usize,
}

impl FrozenSvd {
    fn noise_scaled(g: &WhitenedForwardMap, noise: &NoiseModel) -> Vec<f64> {
        let ns = noise.n_sensors();
        (0..g.n_obs()).map(|r| 1.0 / noise.sigma()[r % ns]).collect()
    }

    /// Exact truncated SVD from the dense map (`n_y` adjoint solves).
    pub fn exact(g: &WhitenedForwardMap, noise: &NoiseModel, k_f: usize) -> Result<Self> {
        check_len(g.n_sensors(), noise.n_sensors())?;
        let scale = Self::noise_scaled(g, noise);
        let mut gs = g.to_dense()?;
        for (r, s) in scale.iter().enumerate() {
            gs.row_mut(r).scale_mut(*s);
        }
        Self::from_dense(gs, noise.n_sensors(), k_f)
    }

    /// Truncated SVD of an already noise-whitened dense map.
    pub fn from_dense(gs: DMatrix<f64>, n_sensors: usize, k_f: usize) -> Result<Self> {
        let cap = gs.nrows().min(gs.ncols());
        if k_f == 0 || k_f > cap {
            return Err(Error::InvalidArgument(format!("frozen rank must lie in 1..={cap}, got {k_f}")));
        }
        let svd = gs.svd(true, false);
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        let u = svd.u.as_ref().expect("requested");
        let singular_values: Vec<f64> = order[..k_f].iter().map(|&i| svd.singular_values[i]).collect();
        let factor = DMatrix::from_fn(u.nrows(), k_f, |r, c| u[(r, order[c])] * singular_values[c]);
        Ok(Self {
            factor,
            singular_values,
            discarded: Some(order[k_f..].iter().map(|&i| svd.singular_values[i]).collect()),
            n_sensors,
        })
    }

    /// Randomized SVD: range of `diag(σ⁻¹)G Ω` refined by `q` power steps,
    /// then the exact SVD of the projection. Costs `ℓ(q+1)` forward and
    /// `ℓ(q+1)` adjoint solves with `ℓ = k_f + p`.
    pub fn randomized(g: &WhitenedForwardMap, noise: &NoiseModel, k_f: usize, cfg: &SketchConfig) -> Result<Self> {
        check_len(g.n_sensors(), noise.n_sensors())?;
        let (n, ny) = (g.n(), g.n_obs());
        let ell = (k_f + cfg.p).min(n).min(ny);
        if k_f == 0 || k_f > ell {
            return Err(Error::InvalidArgument(format!("frozen rank must lie in 1..={}", n.min(ny))));
        }
        let scale = Self::noise_scaled(g, noise);
        let fwd = |x: &DMatrix<f64>| -> Result<DMatrix<f64>> {
            let cols: Vec<Vec<f64>> = (0..x.ncols())
                .into_par_iter()
                .map(|c| {
                    let mut y = g.apply(&x.as_slice()[c * n..(c + 1) * n])?;
                    y.iter_mut().zip(&scale).for_each(|(v, s)| *v *= s);
                    Ok(y)
                })
                .collect::<Result<_>>()?;
            Ok(DMatrix::from_fn(ny, x.ncols(), |r, c| cols[c][r]))
        };
        let adj = |y: &DMatrix<f64>| -> Result<DMatrix<f64>> {
            let cols: Vec<Vec<f64>> = (0..y.ncols())
                .into_par_iter()
                .map(|c| {
                    let s: Vec<f64> = y.as_slice()[c * ny..(c + 1) * ny].iter().zip(&scale).map(|(v, s)| v * s).collect();
                    g.apply_transpose(&s)
                })
                .collect::<Result<_>>()?;
            Ok(DMatrix::from_fn(n, y.ncols(), |r, c| cols[c][r]))
        };
        let mut y = fwd(&gaussian_matrix(n, ell, cfg.seed))?;
        for _ in 0..cfg.q {
            let (qy, _) = orthonormalize(y);
            let (qx, _) = orthonormalize(adj(&qy)?);
            y = fwd(&qx)?;
        }
        let (q, _) = orthonormalize(y);
        let bt = adj(&q)?;
        let b = bt.transpose();
        let small = Self::from_dense(b, noise.n_sensors(), k_f)?;
        Ok(Self {
            factor: q * small.factor,
            singular_values: small.singular_values,
            discarded: None,
            n_sensors: noise.n_sensors(),
        })
    }

    pub fn rank(&self) -> usize {
        self.singular_values.len()
    }

    /// `z` of the frozen model: `Σ_m ‖row (m, j) of ÛΣ̂‖²`.
    pub fn z(&self) -> SensorDerivConstants {
        let mut z = vec![0.0; self.n_sensors];
        for r in 0..self.factor.nrows() {
            z[r % self.n_sensors] += self.factor.row(r).norm_squared();
        }
        SensorDerivConstants { z, source: ZSource::Frozen }
    }

    /// `Ĵ = log det(I + Σ̂ÛᵀWÛΣ̂)` and its exact gradient; no PDE solves.
    pub fn evaluate(&self, w: &[f64]) -> Result<Evaluation> {
        check_len(self.n_sensors, w.len())?;
        let start = Instant::now();
        let c = &self.factor;
        let scaled = DMatrix::from_fn(c.nrows(), c.ncols(), |r, i| c[(r, i)] * w[r % self.n_sensors].sqrt());
        let (values, vectors) = gram_eigen_from_factor(&scaled);
        let eigenvalues: Vec<f64> = values.iter().map(|v| v.max(0.0)).collect();
        let objective = eigenvalues.iter().map(|l| l.ln_1p()).sum();
        let proj = c * vectors;
        let gradient = damped_row_sums(&proj, &eigenvalues, &vec![1.0; self.n_sensors]);
        Ok(Evaluation {
            objective,
            gradient,
            eigenvalues,
            solves: SolveCounts::default(),
            wall_time: start.elapsed().as_secs_f64(),
        })
    }
}

pub struct DenseCriterion<'a> {
    problem: &'a OedProblem,
}

pub struct GramCriterion {
    gram: GramReference,
}

pub struct EigCriterion<'a> {
    problem: &'a OedProblem,
    k: usize,
    lanczos: LanczosOptions,
}

pub struct RandCriterion<'a> {
    problem: &'a OedProblem,
    cfg: SketchConfig,
    reuse_forward_products: bool,
}

pub struct FrozenCriterion {
    svd: FrozenSvd,
}

impl<'a> DenseCriterion<'a> {
    pub fn new(problem: &'a OedProblem) -> Self {
        Self { problem }
    }
}

impl GramCriterion {
    pub fn new(problem: &OedProblem) -> Result<Self> {
        Ok(Self { gram: problem.gram()? })
    }

    pub fn from_reference(gram: GramReference) -> Self {
        Self { gram }
    }
}

impl<'a> EigCriterion<'a> {
    pub fn new(problem: &'a OedProblem, k: usize, lanczos: LanczosOptions) -> Self {
        Self { problem, k, lanczos }
    }
}

impl<'a> RandCriterion<'a> {
    /// Every evaluation reuses `cfg.seed`, so the sketch varies smoothly
    /// with the design.
    pub fn new(problem: &'a OedProblem, cfg: SketchConfig, reuse_forward_products: bool) -> Self {
        Self {
            problem,
            cfg,
            reuse_forward_products,
        }
    }
}

impl FrozenCriterion {
    pub fn new(svd: FrozenSvd) -> Self {
        Self { svd }
    }

    pub fn svd(&self) -> &FrozenSvd {
        &self.svd
    }
}

impl DesignCriterion for DenseCriterion<'_> {
    fn n_sensors(&self) -> usize {
        self.problem.n_sensors()
    }

    fn evaluate(&self, w: &[f64]) -> Result<Evaluation> {
        self.problem.timed(|| {
            let r = self.problem.dense_reference(w)?;
            Ok((r.objective, r.gradient, r.spectrum))
        })
    }

    fn name(&self) -> &'static str {
        "dense"
    }
}

impl DesignCriterion for GramCriterion {
    fn n_sensors(&self) -> usize {
        self.gram.n_sensors()
    }

    fn evaluate(&self, w: &[f64]) -> Result<Evaluation> {
        self.gram.evaluate(w)
    }

    fn name(&self) -> &'static str {
        "dense"
    }
}

impl DesignCriterion for EigCriterion<'_> {
    fn n_sensors(&self) -> usize {
        self.problem.n_sensors()
    }

    fn evaluate(&self, w: &[f64]) -> Result<Evaluation> {
        self.problem.objective_grad_eig(w, self.k, &self.lanczos)
    }

    fn name(&self) -> &'static str {
        "eig"
    }
}

impl DesignCriterion for RandCriterion<'_> {
    fn n_sensors(&self) -> usize {
        self.problem.n_sensors()
    }

    fn evaluate(&self, w: &[f64]) -> Result<Evaluation> {
        self.problem.objective_grad_rand(w, &self.cfg, self.reuse_forward_products)
    }

    fn line_search_window(&self) -> usize {
        5
    }

    fn name(&self) -> &'static str {
        "rand"
    }
}

impl DesignCriterion for FrozenCriterion {
    fn n_sensors(&self) -> usize {
        self.svd.n_sensors
    }

    fn evaluate(&self, w: &[f64]) -> Result<Evaluation> {
        self.svd.evaluate(w)
    }

    fn name(&self) -> &'static str {
        "frozen"
    }
}
