//! One-call assembly of the full operator stack from plain parameters.

use crate::error::Result;
use crate::fem::{assemble, build_mesh, AssembledOperators, Hole, MassMode, Mesh};
use crate::prior::{PriorOperator, PriorParams, WhitenedForwardMap};
use crate::transport::{check_peclet, AdvectionDiffusion, DoubleGyre, ObservationSetup, PdeParams};

#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSpec {
    pub nx: usize,
    pub holes: Vec<Hole>,
    pub amplitude: f64,
    pub pde: PdeParams,
    pub prior: PriorParams,
    pub mass_mode: MassMode,
    pub sensors: Vec<[f64; 2]>,
    pub obs_times: Vec<f64>,
}

impl Default for ProblemSpec {
    fn default() -> Self {
        Self {
            nx: 16,
            holes: Vec::new(),
            amplitude: 1.0,
            pde: PdeParams::default(),
            prior: PriorParams::default(),
            mass_mode: MassMode::Lumped,
            sensors: sensor_grid(&[0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8], &[0.1, 0.3, 0.5, 0.7, 0.9]),
            obs_times: vec![1.0, 2.0, 3.5],
        }
    }
}

#[derive(Debug, Clone)]
pub struct BuiltProblem {
    pub mesh: Mesh,
    pub ops: AssembledOperators,
    pub g: WhitenedForwardMap,
    pub peclet: f64,
}

impl ProblemSpec {
    pub fn build(&self) -> Result<BuiltProblem> {
        let mesh = build_mesh(self.nx, &self.holes)?;
        let velocity = DoubleGyre::new(self.amplitude, self.holes.clone());
        let ops = assemble(&mesh, &velocity)?;
        let peclet = check_peclet(&mesh, &velocity, self.pde.kappa);
        let setup = ObservationSetup::new(&mesh, &self.sensors, &self.obs_times, &self.pde)?;
        let model = AdvectionDiffusion::new(&ops, self.mass_mode, self.pde, setup)?;
        let prior = PriorOperator::new(&ops, self.mass_mode, self.prior)?;
        let g = WhitenedForwardMap::new(model, prior)?;
        Ok(BuiltProblem { mesh, ops, g, peclet })
    }
}

/// Tensor grid of candidate locations, `x` varying fastest.
pub fn sensor_grid(xs: &[f64], ys: &[f64]) -> Vec<[f64; 2]> {
    ys.iter().flat_map(|&y| xs.iter().map(move |&x| [x, y])).collect()
}
