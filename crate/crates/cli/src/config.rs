//! Experiment configuration. Every section has explicit defaults and unknown
//! keys are rejected.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use oed_core::fem::{Hole, MassMode};
use oed_core::prior::PriorParams;
use oed_core::transport::PdeParams;
use oed_core::{sensor_grid, ProblemSpec, SketchConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub mesh: MeshConfig,
    pub pde: PdeConfig,
    pub velocity: VelocityConfig,
    pub prior: PriorConfig,
    pub sensors: SensorConfig,
    pub obs: ObsConfig,
    pub noise: NoiseConfig,
    pub truth: TruthConfig,
    pub sketch: SketchSection,
    pub opt: OptConfig,
    pub compare: CompareConfig,
    pub bench: BenchConfig,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mesh: MeshConfig::default(),
            pde: PdeConfig::default(),
            velocity: VelocityConfig::default(),
            prior: PriorConfig::default(),
            sensors: SensorConfig::default(),
            obs: ObsConfig::default(),
            noise: NoiseConfig::default(),
            truth: TruthConfig::default(),
            sketch: SketchSection::default(),
            opt: OptConfig::default(),
            compare: CompareConfig::default(),
            bench: BenchConfig::default(),
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MassModeConfig {
    Lumped,
    Cholesky,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeshConfig {
    /// Cells per side of the unit square.
    pub nx: usize,
    /// Axis-aligned rectangles `[x0, y0, x1, y1]` removed from the domain.
    pub holes: Vec<[f64; 4]>,
    pub mass_mode: MassModeConfig,
}

impl Default for MeshConfig {
    fn default() -> Self {
        Self {
            nx: 32,
            holes: Vec::new(),
            mass_mode: MassModeConfig::Lumped,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PdeConfig {
    pub kappa: f64,
    #[serde(rename = "T")]
    pub final_time: f64,
    pub n_steps: usize,
}

impl Default for PdeConfig {
    fn default() -> Self {
        let p = PdeParams::default();
        Self {
            kappa: p.kappa,
            final_time: p.final_time,
            n_steps: p.n_steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VelocityConfig {
    pub amplitude: f64,
}

impl Default for VelocityConfig {
    fn default() -> Self {
        Self { amplitude: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorConfig {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        let p = PriorParams::default();
        Self {
            alpha: p.alpha,
            beta: p.beta,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensorConfig {
    /// Tensor grid of candidate locations.
    pub grid: GridConfig,
    /// Extra candidate locations.
    pub points: Vec<[f64; 2]>,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            grid: GridConfig {
                xs: vec![0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8],
                ys: vec![0.1, 0.3, 0.5, 0.7, 0.9],
            },
            points: Vec::new(),
        }
    }
}

impl SensorConfig {
    pub fn candidates(&self) -> Vec<[f64; 2]> {
        let mut all = if self.grid.xs.is_empty() || self.grid.ys.is_empty() {
            Vec::new()
        } else {
            sensor_grid(&self.grid.xs, &self.grid.ys)
        };
        all.extend_from_slice(&self.points);
        all
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObsConfig {
    pub times: Vec<f64>,
}

impl Default for ObsConfig {
    fn default() -> Self {
        Self {
            times: vec![1.0, 2.0, 3.5],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    /// Noise standard deviation as a fraction of the peak clean observation.
    pub pct: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { pct: 0.02 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bump {
    pub amplitude: f64,
    pub center: [f64; 2],
    pub width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TruthConfig {
    pub bumps: Vec<Bump>,
}

impl Default for TruthConfig {
    fn default() -> Self {
        Self {
            bumps: vec![
                Bump {
                    amplitude: 1.0,
                    center: [0.35, 0.7],
                    width: 0.1,
                },
                Bump {
                    amplitude: 0.6,
                    center: [0.6, 0.3],
                    width: 0.08,
                },
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SketchSection {
    pub k: usize,
    pub p: usize,
    pub q: usize,
    pub reuse_forward_products: bool,
}

impl Default for SketchSection {
    fn default() -> Self {
        Self {
            k: 80,
            p: 5,
            q: 1,
            reuse_forward_products: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Dense,
    Eig,
    Rand,
    Frozen,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PenaltyKind {
    L1,
    Cont,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptConfig {
    pub method: Method,
    pub penalty: PenaltyKind,
    pub gamma: f64,
    pub cont_stages: usize,
    pub tol: f64,
    pub max_iters: usize,
    pub threshold: f64,
}

impl Default for OptConfig {
    fn default() -> Self {
        Self {
            method: Method::Rand,
            penalty: PenaltyKind::L1,
            gamma: 3.0,
            cont_stages: 6,
            tol: 1e-5,
            max_iters: 200,
            threshold: 3e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareConfig {
    pub n_designs: usize,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self { n_designs: 200 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    /// Target ranks of the sweep; empty means 5, 10, … up to full rank.
    pub ranks: Vec<usize>,
    /// Sketch seeds averaged per rank.
    pub seeds: usize,
    /// Cells per side of the mesh-refinement levels.
    pub mesh_levels: Vec<usize>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            ranks: Vec::new(),
            seeds: 5,
            mesh_levels: vec![16, 32, 64],
        }
    }
}

/// Rejection of a configuration before any computation.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| ConfigError(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |msg: String| Err(ConfigError(msg));
        if self.sensors.candidates().is_empty() {
            return bad("sensors: the candidate grid is empty".into());
        }
        if self.obs.times.is_empty() {
            return bad("obs.times is empty".into());
        }
        if !(0.0..1.0).contains(&self.noise.pct) {
            return bad(format!("noise.pct must lie in [0, 1), got {}", self.noise.pct));
        }
        if self.truth.bumps.is_empty() {
            return bad("truth.bumps is empty".into());
        }
        if !(self.opt.gamma >= 0.0) {
            return bad(format!("opt.gamma must be nonnegative, got {}", self.opt.gamma));
        }
        if self.opt.penalty == PenaltyKind::Cont && self.opt.cont_stages == 0 {
            return bad("opt.cont_stages must be at least 1".into());
        }
        if !(self.opt.threshold > 0.0 && self.opt.threshold < 1.0) {
            return bad(format!("opt.threshold must lie in (0, 1), got {}", self.opt.threshold));
        }
        if self.sketch.k == 0 || self.sketch.q == 0 {
            return bad("sketch.k and sketch.q must be at least 1".into());
        }
        if self.compare.n_designs == 0 {
            return bad("compare.n_designs must be at least 1".into());
        }
        if self.bench.seeds == 0 {
            return bad("bench.seeds must be at least 1".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON serialization.
    pub fn content_hash(&self) -> String {
        hash_json(&serde_json::to_value(self).expect("config serializes"))
    }

    /// Hash of the parts that determine `z`: mesh, physics, prior, sensors
    /// and noise (including the data seed that fixes σ through the truth).
    pub fn z_cache_key(&self) -> String {
        let v = serde_json::json!({
            "mesh": self.mesh,
            "pde": self.pde,
            "velocity": self.velocity,
            "prior": self.prior,
            "sensors": self.sensors,
            "obs": self.obs,
            "noise": self.noise,
            "truth": self.truth,
        });
        hash_json(&v)
    }

    pub fn problem_spec_at(&self, nx: usize) -> ProblemSpec {
        ProblemSpec {
            nx,
            holes: self.mesh.holes.iter().map(|h| Hole::new(h[0], h[1], h[2], h[3])).collect(),
            amplitude: self.velocity.amplitude,
            pde: PdeParams {
                kappa: self.pde.kappa,
                final_time: self.pde.final_time,
                n_steps: self.pde.n_steps,
            },
            prior: PriorParams {
                alpha: self.prior.alpha,
                beta: self.prior.beta,
            },
            mass_mode: match self.mesh.mass_mode {
                MassModeConfig::Lumped => MassMode::Lumped,
                MassModeConfig::Cholesky => MassMode::Cholesky,
            },
            sensors: self.sensors.candidates(),
            obs_times: self.obs.times.clone(),
        }
    }

    pub fn sketch_config(&self, seed: u64) -> SketchConfig {
        SketchConfig::new(self.sketch.k, self.sketch.p, self.sketch.q, seed)
    }

    pub fn bumps(&self) -> Vec<(f64, [f64; 2], f64)> {
        self.truth.bumps.iter().map(|b| (b.amplitude, b.center, b.width)).collect()
    }
}

fn hash_json(v: &serde_json::Value) -> String {
    let text = serde_json::to_string(v).expect("json serializes");
    hex::encode(Sha256::digest(text.as_bytes()))
}
