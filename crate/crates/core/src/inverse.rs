//! MAP point, pointwise posterior variance and posterior samples for a fixed
//! design.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{check_len, Result};
use crate::linalg::conjugate_gradient;
use crate::oed::NoiseModel;
use crate::prior::{PriorOperator, WhitenedForwardMap};
use crate::sketch::LowRankEig;

pub const DEFAULT_CG_TOL: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct MapSolveReport {
    pub theta_post: Vec<f64>,
    /// Whitened MAP coordinates.
    pub x: Vec<f64>,
    pub iterations: usize,
    pub relative_residual: f64,
    pub residual_history: Vec<f64>,
}

/// Solves `(I + Gᵀ W^σ G) x = Gᵀ W^σ (y − F θ_pr)` by conjugate gradients
/// and returns `θ_post = θ_pr + L⁻¹ R x`.
pub fn map_estimate(
    g: &WhitenedForwardMap,
    noise: &NoiseModel,
    w: &[f64],
    y_obs: &[f64],
    tol: f64,
    max_iters: usize,
) -> Result<MapSolveReport> {
    check_len(g.n_sensors(), w.len())?;
    check_len(g.n_obs(), y_obs.len())?;
    let d = noise.weighted_precisions(w, g.n_times());
    let prior = g.prior();
    let mut residual_data = y_obs.to_vec();
    if prior.mean().iter().any(|&m| m != 0.0) {
        let shift = g.model().solve_forward(prior.mean())?;
        residual_data.iter_mut().zip(&shift).for_each(|(a, b)| *a -= b);
    }
    let weighted: Vec<f64> = residual_data.iter().zip(&d).map(|(a, b)| a * b).collect();
    let b = DVector::from_vec(g.apply_transpose(&weighted)?);

    let apply = |x: &DVector<f64>| -> DVector<f64> {
        let mut gx = g.apply(x.as_slice()).expect("length checked");
        gx.iter_mut().zip(&d).for_each(|(a, b)| *a *= b);
        let h = g.apply_transpose(&gx).expect("length checked");
        DVector::from_iterator(x.len(), x.iter().zip(h).map(|(a, b)| a + b))
    };
    let out = conjugate_gradient(apply, &b, tol, max_iters)?;
    let mut theta_post = prior.to_field(out.x.as_slice())?;
    theta_post.iter_mut().zip(prior.mean()).for_each(|(t, m)| *t += m);
    Ok(MapSolveReport {
        theta_post,
        x: out.x.data.into(),
        iterations: out.iterations,
        relative_residual: out.relative_residual,
        residual_history: out.residual_history,
    })
}

/// `(I + ÛΛ̂Ûᵀ)⁻¹ x = x − Û D̂ Ûᵀ x` with `D̂ = Λ̂(I+Λ̂)⁻¹`.
pub fn posterior_inverse_apply(lr: &LowRankEig, x: &DVector<f64>) -> DVector<f64> {
    spectral_update(lr, x, |l| l / (1.0 + l))
}

/// `(I + ÛΛ̂Ûᵀ)^{-1/2} x = x − Û (I − (I+Λ̂)^{-1/2}) Ûᵀ x`.
pub fn posterior_half_power_apply(lr: &LowRankEig, x: &DVector<f64>) -> DVector<f64> {
    spectral_update(lr, x, |l| 1.0 - 1.0 / (1.0 + l).sqrt())
}

fn spectral_update(lr: &LowRankEig, x: &DVector<f64>, f: impl Fn(f64) -> f64) -> DVector<f64> {
    let c = lr.vectors.tr_mul(x);
    let scaled = DVector::from_iterator(c.len(), c.iter().zip(&lr.values).map(|(a, &l)| a * f(l)));
    x - &lr.vectors * scaled
}

/// Prior variance minus the low-rank correction
/// `Σ_m λ̂_m/(1+λ̂_m) (L⁻¹ R û_m)_i²`, floored at zero.
pub fn posterior_pointwise_variance(prior: &PriorOperator, lr: &LowRankEig) -> Result<Vec<f64>> {
    check_len(prior.n(), lr.vectors.nrows())?;
    let mut var = prior.pointwise_variance();
    let n = prior.n();
    let fields: Vec<Vec<f64>> = (0..lr.rank())
        .into_par_iter()
        .map(|m| prior.to_field(&lr.vectors.as_slice()[m * n..(m + 1) * n]))
        .collect::<Result<_>>()?;
    for (field, &l) in fields.iter().zip(&lr.values) {
        let d = l / (1.0 + l);
        for (v, f) in var.iter_mut().zip(field) {
            *v -= d * f * f;
        }
    }
    var.iter_mut().for_each(|v| *v = v.max(0.0));
    Ok(var)
}

/// `θ_post + L⁻¹ R (I + ÛΛ̂Ûᵀ)^{-1/2} ξ`.
pub fn sample_posterior(prior: &PriorOperator, lr: &LowRankEig, theta_post: &[f64], xi: &[f64]) -> Result<Vec<f64>> {
    check_len(prior.n(), xi.len())?;
    check_len(prior.n(), theta_post.len())?;
    let z = posterior_half_power_apply(lr, &DVector::from_column_slice(xi));
    let mut s = prior.to_field(z.as_slice())?;
    s.iter_mut().zip(theta_post).for_each(|(a, b)| *a += b);
    Ok(s)
}

/// Dense nodal posterior covariance `L⁻¹R (I + H)⁻¹ RᵀL⁻¹` for oracle checks.
pub fn dense_posterior_covariance(prior: &PriorOperator, hessian: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = prior.n();
    check_len(n, hessian.nrows())?;
    let mut s = DMatrix::zeros(n, n);
    for i in 0..n {
        let mut e = vec![0.0; n];
        e[i] = 1.0;
        s.set_column(i, &DVector::from_vec(prior.to_field(&e)?));
    }
    let inv = (DMatrix::identity(n, n) + hessian)
        .try_inverse()
        .ok_or(crate::error::Error::Singular(0))?;
    Ok(&s * inv * s.transpose())
}
