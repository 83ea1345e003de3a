//! Gaussian prior with precision square root `L = αK + βM` and the whitened
//! forward map `G = F L⁻¹ R`, where `M = R Rᵀ`.
//!
//! In whitened coordinates the prior is standard normal, a nodal field is
//! recovered as `θ = θ_pr + L⁻¹ R x`, and the prior-preconditioned misfit
//! Hessian is the Euclidean-symmetric `Gᵀ W G`.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{check_len, Error, Result};
use crate::fem::{AssembledOperators, MassFactor, MassMode};
use crate::linalg::{BandedCholesky, CsrMatrix};
use crate::transport::{AdvectionDiffusion, SolveCounter};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorParams {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for PriorParams {
    fn default() -> Self {
        Self { alpha: 2e-3, beta: 0.1 }
    }
}

#[derive(Debug, Clone)]
pub struct PriorOperator {
    params: PriorParams,
    mass: CsrMatrix,
    precision_sqrt: CsrMatrix,
    factor: BandedCholesky,
    mass_factor: MassFactor,
    mean: Vec<f64>,
}

impl PriorOperator {
    pub fn new(ops: &AssembledOperators, mass_mode: MassMode, params: PriorParams) -> Result<Self> {
        if !(params.alpha >= 0.0 && params.beta > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "prior requires alpha >= 0 and beta > 0, got {params:?}"
            )));
        }
        let mass = ops.mass_for(mass_mode);
        let precision_sqrt = ops.stiffness.linear_combination(params.alpha, &mass, params.beta);
        let factor = BandedCholesky::factor(&precision_sqrt)?;
        let mass_factor = MassFactor::new(&mass, mass_mode)?;
        let n = mass.nrows();
        Ok(Self {
            params,
            mass,
            precision_sqrt,
            factor,
            mass_factor,
            mean: vec![0.0; n],
        })
    }

    /// Replaces the zero prior mean.
    pub fn with_mean(mut self, mean: Vec<f64>) -> Result<Self> {
        check_len(self.n(), mean.len())?;
        self.mean = mean;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.mass.nrows()
    }

    pub fn params(&self) -> PriorParams {
        self.params
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn mass(&self) -> &CsrMatrix {
        &self.mass
    }

    pub fn mass_factor(&self) -> &MassFactor {
        &self.mass_factor
    }

    pub fn precision_sqrt(&self) -> &CsrMatrix {
        &self.precision_sqrt
    }

    /// `L⁻¹ b`.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        check_len(self.n(), b.len())?;
        Ok(self.factor.solve(b))
    }

    /// `Γ_prior^{1/2} v = L⁻¹ M v`.
    pub fn apply_prior_sqrt(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_len(self.n(), v.len())?;
        Ok(self.factor.solve(&self.mass.mul_vec(v)))
    }

    /// `θᵀ L M⁻¹ L θ = ‖R⁻¹ L θ‖²`.
    pub fn prior_weighted_norm_sq(&self, theta: &[f64]) -> Result<f64> {
        check_len(self.n(), theta.len())?;
        let lt = self.precision_sqrt.mul_vec(theta);
        let r = self.mass_factor.solve(&lt);
        Ok(r.iter().map(|v| v * v).sum())
    }

    /// Whitened coordinates to a nodal perturbation: `L⁻¹ R x`.
    pub fn to_field(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len(self.n(), x.len())?;
        Ok(self.factor.solve(&self.mass_factor.apply(x)))
    }

    /// Transpose of [`to_field`](Self::to_field): `Rᵀ L⁻¹ v`.
    pub fn to_field_transpose(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_len(self.n(), v.len())?;
        Ok(self.mass_factor.apply_transpose(&self.factor.solve(v)))
    }

    /// Nodal field minus the prior mean, mapped to whitened coordinates:
    /// `R⁻¹ L (θ − θ_pr)`.
    pub fn to_whitened(&self, theta: &[f64]) -> Result<Vec<f64>> {
        check_len(self.n(), theta.len())?;
        let d: Vec<f64> = theta.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        Ok(self.mass_factor.solve(&self.precision_sqrt.mul_vec(&d)))
    }

    /// `θ_pr + L⁻¹ R ξ` for a standard normal `ξ`.
    pub fn sample(&self, xi: &[f64]) -> Result<Vec<f64>> {
        let mut theta = self.to_field(xi)?;
        for (t, m) in theta.iter_mut().zip(&self.mean) {
            *t += m;
        }
        Ok(theta)
    }

    /// Diagonal of the nodal prior covariance `L⁻¹ M L⁻¹`, one solve per node.
    pub fn pointwise_variance(&self) -> Vec<f64> {
        let n = self.n();
        (0..n)
            .into_par_iter()
            .map(|i| {
                let mut e = vec![0.0; n];
                e[i] = 1.0;
                let col = self.to_field_transpose(&e).expect("length checked");
                col.iter().map(|v| v * v).sum()
            })
            .collect()
    }
}

/// `G = F L⁻¹ R` and `Gᵀ = Rᵀ L⁻¹ Fᵀ`.
#[derive(Debug, Clone)]
pub struct WhitenedForwardMap {
    model: AdvectionDiffusion,
    prior: PriorOperator,
}

impl WhitenedForwardMap {
    pub fn new(model: AdvectionDiffusion, prior: PriorOperator) -> Result<Self> {
        check_len(model.n(), prior.n())?;
        Ok(Self { model, prior })
    }

    pub fn n(&self) -> usize {
        self.prior.n()
    }

    pub fn n_obs(&self) -> usize {
        self.model.n_obs()
    }

    pub fn n_sensors(&self) -> usize {
        self.model.setup().n_sensors()
    }

    pub fn n_times(&self) -> usize {
        self.model.setup().n_times()
    }

    pub fn model(&self) -> &AdvectionDiffusion {
        &self.model
    }

    pub fn prior(&self) -> &PriorOperator {
        &self.prior
    }

    pub fn counter(&self) -> &SolveCounter {
        self.model.counter()
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let theta = self.prior.to_field(x)?;
        self.model.solve_forward(&theta)
    }

    pub fn apply_transpose(&self, y: &[f64]) -> Result<Vec<f64>> {
        let p = self.model.apply_transpose(y)?;
        self.prior.to_field_transpose(&p)
    }

    /// Dense `G` (n_y × n) assembled column by column from `n` forward solves.
    pub fn to_dense_forward(&self) -> Result<DMatrix<f64>> {
        let (ny, n) = (self.n_obs(), self.n());
        let cols: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|c| {
                let mut e = vec![0.0; n];
                e[c] = 1.0;
                self.apply(&e)
            })
            .collect::<Result<_>>()?;
        Ok(DMatrix::from_fn(ny, n, |r, c| cols[c][r]))
    }

    /// Dense `G` (n_y × n) assembled row by row from `n_y` adjoint solves.
    pub fn to_dense(&self) -> Result<DMatrix<f64>> {
        let (ny, n) = (self.n_obs(), self.n());
        let rows: Vec<Vec<f64>> = (0..ny)
            .into_par_iter()
            .map(|r| {
                let mut e = vec![0.0; ny];
                e[r] = 1.0;
                self.apply_transpose(&e)
            })
            .collect::<Result<_>>()?;
        Ok(DMatrix::from_fn(ny, n, |r, c| rows[r][c]))
    }
}
