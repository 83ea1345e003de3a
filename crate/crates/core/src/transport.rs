//! Time-dependent advection–diffusion: forward map `F`, its exact discrete
//! transpose, point observations and synthetic data.
//!
//! Implicit Euler on `(M + Δt(κK + N)) uᵐ = M uᵐ⁻¹`. The step matrix is
//! constant for a uniform grid, so it is factored once and shared by every
//! forward and adjoint solve.

use std::f64::consts::PI;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_len, Error, Result};
use crate::fem::{AssembledOperators, Hole, MassMode, Mesh};
use crate::linalg::{BandedLu, CsrMatrix};

pub trait VelocityField: Sync {
    fn velocity(&self, x: f64, y: f64) -> [f64; 2];
}

/// Divergence-free double gyre from `ψ = (V₀/π) sin(πx) sin(πy)`,
/// `v = (∂ψ/∂y, −∂ψ/∂x)`. Zero inside holes.
#[derive(Debug, Clone)]
pub struct DoubleGyre {
    pub amplitude: f64,
    pub holes: Vec<Hole>,
}

impl DoubleGyre {
    pub fn new(amplitude: f64, holes: Vec<Hole>) -> Self {
        Self { amplitude, holes }
    }
}

impl VelocityField for DoubleGyre {
    fn velocity(&self, x: f64, y: f64) -> [f64; 2] {
        if self.holes.iter().any(|h| h.contains_interior(x, y)) {
            return [0.0, 0.0];
        }
        let a = self.amplitude;
        [
            a * (PI * x).sin() * (PI * y).cos(),
            -a * (PI * x).cos() * (PI * y).sin(),
        ]
    }
}

/// Mesh Péclet number `V h / (2κ)`.
pub fn mesh_peclet(speed: f64, h: f64, kappa: f64) -> f64 {
    speed * h / (2.0 * kappa)
}

/// Logs a warning when the unstabilized Galerkin scheme is likely to
/// oscillate. Returns the mesh Péclet number.
pub fn check_peclet(mesh: &Mesh, velocity: &dyn VelocityField, kappa: f64) -> f64 {
    let speed = mesh
        .nodes
        .iter()
        .map(|p| {
            let v = velocity.velocity(p[0], p[1]);
            v[0].hypot(v[1])
        })
        .fold(0.0, f64::max);
    let pe = mesh_peclet(speed, mesh.spacing(), kappa);
    if pe > 20.0 {
        log::warn!("mesh Péclet number {pe:.1} exceeds 20; expect oscillations (no stabilization)");
    }
    pe
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PdeParams {
    pub kappa: f64,
    pub final_time: f64,
    pub n_steps: usize,
}

impl Default for PdeParams {
    fn default() -> Self {
        Self {
            kappa: 1e-3,
            final_time: 5.0,
            n_steps: 50,
        }
    }
}

impl PdeParams {
    pub fn dt(&self) -> f64 {
        self.final_time / self.n_steps as f64
    }
}

/// Sensors snapped to mesh nodes and observation times snapped to time steps.
#[derive(Debug, Clone)]
pub struct ObservationSetup {
    pub sensor_nodes: Vec<usize>,
    pub sensor_coords: Vec<[f64; 2]>,
    /// Time-step index (1-based) of each observation time.
    pub obs_steps: Vec<usize>,
    pub obs_times: Vec<f64>,
}

impl ObservationSetup {
    pub fn new(mesh: &Mesh, sensors: &[[f64; 2]], times: &[f64], pde: &PdeParams) -> Result<Self> {
        if sensors.is_empty() {
            return Err(Error::InvalidArgument("no candidate sensors".into()));
        }
        if times.is_empty() {
            return Err(Error::InvalidArgument("no observation times".into()));
        }
        for &[x, y] in sensors {
            if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) || mesh.in_hole(x, y) {
                return Err(Error::InvalidArgument(format!("sensor ({x}, {y}) lies outside the domain")));
            }
        }
        let sensor_nodes: Vec<usize> = sensors.iter().map(|&p| mesh.nearest_node(p)).collect();
        let mut seen = sensor_nodes.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != sensor_nodes.len() {
            return Err(Error::InvalidArgument(
                "two sensors snap to the same mesh node; refine the mesh or thin the grid".into(),
            ));
        }
        let dt = pde.dt();
        let mut obs_steps = Vec::with_capacity(times.len());
        for &t in times {
            let step = (t / dt).round() as i64;
            if step < 1 || step as usize > pde.n_steps {
                return Err(Error::InvalidArgument(format!(
                    "observation time {t} is outside (0, T = {}]",
                    pde.final_time
                )));
            }
            obs_steps.push(step as usize);
        }
        if obs_steps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(
                "observation times must be strictly increasing after snapping to the time grid".into(),
            ));
        }
        Ok(Self {
            sensor_coords: sensor_nodes.iter().map(|&i| mesh.nodes[i]).collect(),
            obs_times: obs_steps.iter().map(|&s| s as f64 * dt).collect(),
            sensor_nodes,
            obs_steps,
        })
    }

    pub fn n_sensors(&self) -> usize {
        self.sensor_nodes.len()
    }

    pub fn n_times(&self) -> usize {
        self.obs_steps.len()
    }

    pub fn n_obs(&self) -> usize {
        self.n_sensors() * self.n_times()
    }

    /// Position of the observation of sensor `j` at time `m` (time-major).
    #[inline]
    pub fn obs_index(&self, m: usize, j: usize) -> usize {
        m * self.n_sensors() + j
    }
}

/// Forward/adjoint PDE solve tally.
#[derive(Debug, Default)]
pub struct SolveCounter {
    forward: AtomicU64,
    adjoint: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SolveCounts {
    pub forward: u64,
    pub adjoint: u64,
}

impl std::ops::Sub for SolveCounts {
    type Output = SolveCounts;
    fn sub(self, rhs: Self) -> Self {
        SolveCounts {
            forward: self.forward - rhs.forward,
            adjoint: self.adjoint - rhs.adjoint,
        }
    }
}

impl SolveCounter {
    pub fn snapshot(&self) -> SolveCounts {
        SolveCounts {
            forward: self.forward.load(Ordering::SeqCst),
            adjoint: self.adjoint.load(Ordering::SeqCst),
        }
    }
}

/// The discrete parameter-to-observable map `F` of the advection–diffusion
/// model: initial state to point values at sensors and observation times.
#[derive(Debug, Clone)]
pub struct AdvectionDiffusion {
    mass: CsrMatrix,
    step: BandedLu,
    setup: ObservationSetup,
    pde: PdeParams,
    counter: Arc<SolveCounter>,
}

impl AdvectionDiffusion {
    pub fn new(ops: &AssembledOperators, mass_mode: MassMode, pde: PdeParams, setup: ObservationSetup) -> Result<Self> {
        if !(pde.kappa >= 0.0) || !(pde.final_time > 0.0) || pde.n_steps == 0 {
            return Err(Error::InvalidArgument(format!("invalid PDE parameters {pde:?}")));
        }
        let mass = ops.mass_for(mass_mode);
        let dt = pde.dt();
        let operator = ops.stiffness.linear_combination(pde.kappa, &ops.advection, 1.0);
        let step_matrix = mass.linear_combination(1.0, &operator, dt);
        let step = BandedLu::factor(&step_matrix)?;
        Ok(Self {
            mass,
            step,
            setup,
            pde,
            counter: Arc::new(SolveCounter::default()),
        })
    }

    pub fn n(&self) -> usize {
        self.mass.nrows()
    }

    pub fn n_obs(&self) -> usize {
        self.setup.n_obs()
    }

    pub fn setup(&self) -> &ObservationSetup {
        &self.setup
    }

    pub fn pde(&self) -> &PdeParams {
        &self.pde
    }

    /// The mass matrix used in time stepping (lumped or consistent).
    pub fn mass(&self) -> &CsrMatrix {
        &self.mass
    }

    pub fn counter(&self) -> &SolveCounter {
        &self.counter
    }

    fn last_step(&self) -> usize {
        *self.setup.obs_steps.last().unwrap()
    }

    /// Full trajectory `u⁰..u^{last observation step}` and observations.
    pub fn solve_trajectory(&self, theta0: &[f64], steps: usize) -> Result<Vec<Vec<f64>>> {
        check_len(self.n(), theta0.len())?;
        self.counter.forward.fetch_add(1, Ordering::Relaxed);
        let mut traj = Vec::with_capacity(steps + 1);
        traj.push(theta0.to_vec());
        for s in 1..=steps {
            let mut u = self.mass.mul_vec(&traj[s - 1]);
            self.step.solve_in_place(&mut u);
            traj.push(u);
        }
        Ok(traj)
    }

    /// `y = F θ₀`.
    pub fn solve_forward(&self, theta0: &[f64]) -> Result<Vec<f64>> {
        check_len(self.n(), theta0.len())?;
        self.counter.forward.fetch_add(1, Ordering::Relaxed);
        let ns = self.setup.n_sensors();
        let mut y = vec![0.0; self.n_obs()];
        let mut u = theta0.to_vec();
        let mut m = 0;
        for s in 1..=self.last_step() {
            let mut next = self.mass.mul_vec(&u);
            self.step.solve_in_place(&mut next);
            u = next;
            if self.setup.obs_steps[m] == s {
                for (j, &node) in self.setup.sensor_nodes.iter().enumerate() {
                    y[m * ns + j] = u[node];
                }
                m += 1;
            }
        }
        Ok(y)
    }

    /// Extracts observations from a trajectory produced by [`solve_trajectory`].
    pub fn observe(&self, trajectory: &[Vec<f64>]) -> Vec<f64> {
        let ns = self.setup.n_sensors();
        let mut y = vec![0.0; self.n_obs()];
        for (m, &s) in self.setup.obs_steps.iter().enumerate() {
            for (j, &node) in self.setup.sensor_nodes.iter().enumerate() {
                y[m * ns + j] = trajectory[s][node];
            }
        }
        y
    }

    /// `Fᵀ ȳ` by a reverse sweep with transposed step solves.
    pub fn apply_transpose(&self, ybar: &[f64]) -> Result<Vec<f64>> {
        check_len(self.n_obs(), ybar.len())?;
        self.counter.adjoint.fetch_add(1, Ordering::Relaxed);
        let ns = self.setup.n_sensors();
        let mut p = vec![0.0; self.n()];
        let mut m = self.setup.n_times();
        for s in (1..=self.last_step()).rev() {
            if m > 0 && self.setup.obs_steps[m - 1] == s {
                m -= 1;
                for (j, &node) in self.setup.sensor_nodes.iter().enumerate() {
                    p[node] += ybar[m * ns + j];
                }
            }
            self.step.solve_transpose_in_place(&mut p);
            p = self.mass.transpose_mul_vec(&p);
        }
        Ok(p)
    }
}

/// Synthetic observations with the per-sensor noise level used in the
/// experiments: `σ = pct · max|y_clean|` for every sensor.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub y_clean: Vec<f64>,
    pub y_obs: Vec<f64>,
    pub sigma: Vec<f64>,
}

pub fn synthesize_data(model: &AdvectionDiffusion, theta_true: &[f64], noise_pct: f64, seed: u64) -> Result<SyntheticData> {
    if !(0.0..1.0).contains(&noise_pct) {
        return Err(Error::InvalidArgument(format!("noise fraction must lie in [0, 1), got {noise_pct}")));
    }
    let y_clean = model.solve_forward(theta_true)?;
    let peak = y_clean.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak == 0.0 {
        return Err(Error::InvalidArgument(
            "clean observations are identically zero; noise level undefined".into(),
        ));
    }
    let ns = model.setup().n_sensors();
    let level = noise_pct * peak;
    let (sigma, y_obs) = if noise_pct == 0.0 {
        // Zero noise: σ keeps the scale of the measurements so the likelihood stays defined.
        (vec![peak; ns], y_clean.clone())
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = y_clean
            .iter()
            .map(|&v| {
                let e: f64 = StandardNormal.sample(&mut rng);
                v + level * e
            })
            .collect();
        (vec![level; ns], y)
    };
    Ok(SyntheticData { y_clean, y_obs, sigma })
}

/// Sum of isotropic Gaussian bumps `a · exp(−|x − c|² / (2 w²))` at the nodes.
pub fn gaussian_bumps(mesh: &Mesh, bumps: &[(f64, [f64; 2], f64)]) -> Vec<f64> {
    mesh.nodes
        .iter()
        .map(|p| {
            bumps
                .iter()
                .map(|&(a, c, w)| a * (-((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)) / (2.0 * w * w)).exp())
                .sum()
        })
        .collect()
}
