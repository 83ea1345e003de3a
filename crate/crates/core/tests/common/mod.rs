#![allow(dead_code)]

use oed_core::fem::MassMode;
use oed_core::oed::{NoiseModel, OedProblem};
use oed_core::prior::PriorParams;
use oed_core::transport::{gaussian_bumps, synthesize_data, PdeParams, SyntheticData};
use oed_core::{sensor_grid, BuiltProblem, ProblemSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Two-bump initial state used to set the noise level.
pub fn truth(p: &BuiltProblem) -> Vec<f64> {
    gaussian_bumps(&p.mesh, &[(1.0, [0.35, 0.7], 0.1), (0.6, [0.6, 0.3], 0.08)])
}

pub fn desk_spec(nx: usize) -> ProblemSpec {
    ProblemSpec {
        nx,
        amplitude: 1.0,
        pde: PdeParams {
            kappa: 0.01,
            final_time: 5.0,
            n_steps: 50,
        },
        prior: PriorParams::default(),
        mass_mode: MassMode::Lumped,
        sensors: sensor_grid(&[0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8], &[0.1, 0.3, 0.5, 0.7, 0.9]),
        obs_times: vec![1.0, 2.0, 3.5],
        ..ProblemSpec::default()
    }
}

/// Small instance for dense oracles: nx = 4 (25 nodes), 4 sensors, 2 times.
pub fn tiny_spec(mode: MassMode) -> ProblemSpec {
    ProblemSpec {
        nx: 4,
        pde: PdeParams {
            kappa: 0.05,
            final_time: 1.0,
            n_steps: 6,
        },
        mass_mode: mode,
        sensors: vec![[0.25, 0.25], [0.75, 0.25], [0.5, 0.5], [0.25, 0.75]],
        obs_times: vec![0.5, 1.0],
        ..ProblemSpec::default()
    }
}

pub struct Instance {
    pub built: BuiltProblem,
    pub problem: OedProblem,
    pub data: SyntheticData,
}

pub fn instance(spec: &ProblemSpec, noise_pct: f64, seed: u64) -> Instance {
    let built = spec.build().expect("problem builds");
    let data = synthesize_data(built.g.model(), &truth(&built), noise_pct, seed).expect("data");
    let noise = NoiseModel::new(data.sigma.clone()).expect("noise");
    let problem = OedProblem::new(built.g.clone(), noise).expect("z");
    Instance { built, problem, data }
}

pub fn random_weights(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(0.0..1.0)).collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

pub fn vec_rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-300)
}
