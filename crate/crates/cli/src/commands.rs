//! Experiment drivers behind the subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use oed_core::fem::Mesh;
use oed_core::inverse::map_estimate;
use oed_core::oed::{
    precompute_z_cached, DenseCriterion, EigCriterion, FrozenCriterion, FrozenSvd, GramCriterion, KlEstimate,
    RandCriterion, DENSE_GUARD,
};
use oed_core::optimize::{default_schedule, solve_continuation, solve_l1, threshold, DesignResult, OptimizerOptions};
use oed_core::sketch::LanczosOptions;
use oed_core::transport::{gaussian_bumps, synthesize_data, SyntheticData};
use oed_core::{DesignCriterion, Evaluation, NoiseModel, OedProblem};

use crate::config::{ExperimentConfig, Method, PenaltyKind};
use crate::error::{CliError, CliResult};
use crate::io::{read_weights, write_csv, write_json, write_resolved_config};

const CG_TOL: f64 = 1e-8;
const CG_ITERS_PER_OBS: usize = 20;

/// A built problem with its synthetic data and noise model.
struct Experiment {
    mesh: Mesh,
    peclet: f64,
    theta_true: Vec<f64>,
    data: SyntheticData,
    problem: OedProblem,
    candidates: Vec<[f64; 2]>,
}

impl Experiment {
    fn build(cfg: &ExperimentConfig, out: &Path, nx: usize) -> CliResult<Self> {
        let built = cfg.problem_spec_at(nx).build()?;
        let theta_true = gaussian_bumps(&built.mesh, &cfg.bumps());
        let data = synthesize_data(built.g.model(), &theta_true, cfg.noise.pct, cfg.seed)?;
        let noise = NoiseModel::new(data.sigma.clone())?;
        let key = format!("{}-nx{nx}", cfg.z_cache_key());
        let cache = out.join("cache").join(format!("z-{}-nx{nx}.bin", &key[..16]));
        let z = precompute_z_cached(&built.g, &noise, &cache, &key)?;
        log::info!(
            "n = {}, {} sensors × {} times, mesh Péclet {:.2}",
            built.g.n(),
            built.g.n_sensors(),
            built.g.n_times(),
            built.peclet
        );
        Ok(Self {
            mesh: built.mesh,
            peclet: built.peclet,
            theta_true,
            data,
            problem: OedProblem::with_z(built.g, noise, z)?,
            candidates: cfg.sensors.candidates(),
        })
    }

    fn n(&self) -> usize {
        self.problem.g.n()
    }

    fn full_rank(&self) -> usize {
        self.problem.g.n().min(self.problem.g.n_obs())
    }

    /// `‖θ_post − θ_pr‖²` in the prior-weighted norm for design `w`.
    fn posterior_norm(&self, w: &[f64]) -> CliResult<f64> {
        let g = &self.problem.g;
        let map = map_estimate(g, &self.problem.noise, w, &self.data.y_obs, CG_TOL, CG_ITERS_PER_OBS * g.n_obs().max(50))?;
        let diff: Vec<f64> = map.theta_post.iter().zip(g.prior().mean()).map(|(a, b)| a - b).collect();
        Ok(g.prior().prior_weighted_norm_sq(&diff)?)
    }

    /// Estimator named by `method` with the configured sketch parameters.
    fn criterion(&self, cfg: &ExperimentConfig, method: Method) -> CliResult<Box<dyn DesignCriterion + '_>> {
        let k = cfg.sketch.k.min(self.full_rank());
        let sketch = cfg.sketch_config(cfg.seed);
        Ok(match method {
            Method::Dense => {
                if self.n() > DENSE_GUARD {
                    return Err(CliError::Validation(format!(
                        "method dense needs n <= {DENSE_GUARD}, the mesh has n = {}",
                        self.n()
                    )));
                }
                Box::new(DenseCriterion::new(&self.problem))
            }
            Method::Eig => Box::new(EigCriterion::new(&self.problem, k, LanczosOptions::default())),
            Method::Rand => Box::new(RandCriterion::new(&self.problem, sketch, cfg.sketch.reuse_forward_products)),
            Method::Frozen => Box::new(FrozenCriterion::new(FrozenSvd::randomized(
                &self.problem.g,
                &self.problem.noise,
                k,
                &sketch,
            )?)),
        })
    }
}

fn relative(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        (a - b).abs()
    } else {
        (a - b).abs() / b.abs()
    }
}

fn relative_vec(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn prepare_out(out: &Path, cfg: &ExperimentConfig) -> CliResult<()> {
    fs::create_dir_all(out)?;
    write_resolved_config(out, cfg)
}

#[derive(Serialize)]
struct ObsRow {
    index: usize,
    time_id: usize,
    sensor_id: usize,
    value: f64,
}

#[derive(Serialize)]
struct SigmaRow {
    sensor_id: usize,
    sigma: f64,
}

#[derive(Serialize)]
struct FieldRow {
    node_id: usize,
    x: f64,
    y: f64,
    value: f64,
}

#[derive(Serialize)]
struct SynthesizeSummary {
    n: usize,
    n_sensors: usize,
    n_times: usize,
    n_obs: usize,
    mesh_peclet: f64,
    /// MAP from the noisy data, all sensors active.
    map_relative_error: f64,
    /// MAP from the noise-free data under the same noise model.
    map_relative_error_clean: f64,
    map_cg_iterations: usize,
}

pub fn synthesize(cfg: &ExperimentConfig, out: &Path) -> CliResult<()> {
    prepare_out(out, cfg)?;
    let ex = Experiment::build(cfg, out, cfg.mesh.nx)?;
    let g = &ex.problem.g;
    let ns = g.n_sensors();
    let obs_rows = |values: &[f64]| -> Vec<ObsRow> {
        values
            .iter()
            .enumerate()
            .map(|(index, &value)| ObsRow {
                index,
                time_id: index / ns,
                sensor_id: index % ns,
                value,
            })
            .collect()
    };
    write_csv(&out.join("y_obs.csv"), obs_rows(&ex.data.y_obs))?;
    write_csv(&out.join("y_clean.csv"), obs_rows(&ex.data.y_clean))?;
    write_csv(
        &out.join("sigma.csv"),
        ex.data.sigma.iter().enumerate().map(|(sensor_id, &sigma)| SigmaRow { sensor_id, sigma }),
    )?;
    let field_rows = |values: &[f64]| -> Vec<FieldRow> {
        values
            .iter()
            .zip(&ex.mesh.nodes)
            .enumerate()
            .map(|(node_id, (&value, p))| FieldRow {
                node_id,
                x: p[0],
                y: p[1],
                value,
            })
            .collect()
    };
    write_csv(&out.join("theta_true.csv"), field_rows(&ex.theta_true))?;

    let ones = vec![1.0; ns];
    let solve = |y: &[f64]| map_estimate(g, &ex.problem.noise, &ones, y, CG_TOL, CG_ITERS_PER_OBS * g.n_obs().max(50));
    let map = solve(&ex.data.y_obs)?;
    let map_clean = solve(&ex.data.y_clean)?;
    write_csv(&out.join("theta_map.csv"), field_rows(&map.theta_post))?;
    let mass = g.model().mass();
    let m_norm = |v: &[f64]| -> f64 { v.iter().zip(mass.mul_vec(v)).map(|(a, b)| a * b).sum::<f64>().sqrt() };
    let rel_err = |est: &[f64]| -> f64 {
        let err: Vec<f64> = est.iter().zip(&ex.theta_true).map(|(a, b)| a - b).collect();
        m_norm(&err) / m_norm(&ex.theta_true)
    };
    write_json(
        &out.join("summary.json"),
        &SynthesizeSummary {
            n: g.n(),
            n_sensors: ns,
            n_times: g.n_times(),
            n_obs: g.n_obs(),
            mesh_peclet: ex.peclet,
            map_relative_error: rel_err(&map.theta_post),
            map_relative_error_clean: rel_err(&map_clean.theta_post),
            map_cg_iterations: map.iterations,
        },
    )
}

#[derive(Serialize)]
struct WeightRow {
    sensor_id: usize,
    x: f64,
    y: f64,
    weight: f64,
    active: bool,
}

#[derive(Serialize)]
struct IterationRow {
    iter: usize,
    objective: f64,
    grad_norm: f64,
    wall_time: f64,
    pde_solves: u64,
}

#[derive(Serialize)]
struct StageRow {
    stage: usize,
    eps: f64,
    iterations: usize,
    objective: f64,
    distance_to_binary: f64,
    converged: bool,
}

#[derive(Serialize)]
struct OedSummary {
    method: Method,
    penalty: PenaltyKind,
    gamma: f64,
    n_candidates: usize,
    n_active: usize,
    active_sensors: Vec<usize>,
    iterations: usize,
    converged: bool,
    binary_reached: bool,
    /// `J` of the binary design from the exact reference.
    binary_objective: f64,
    pde_solves: u64,
}

pub fn oed(cfg: &ExperimentConfig, out: &Path) -> CliResult<()> {
    prepare_out(out, cfg)?;
    let ex = Experiment::build(cfg, out, cfg.mesh.nx)?;
    let ns = ex.problem.n_sensors();
    let criterion = ex.criterion(cfg, cfg.opt.method)?;
    let opts = OptimizerOptions {
        tol: cfg.opt.tol,
        max_iters: cfg.opt.max_iters,
        threshold: cfg.opt.threshold,
        ..OptimizerOptions::default()
    };
    let w0 = vec![0.5; ns];
    let result: DesignResult = match cfg.opt.penalty {
        PenaltyKind::L1 => solve_l1(criterion.as_ref(), cfg.opt.gamma, &w0, &opts)?,
        PenaltyKind::Cont => solve_continuation(
            criterion.as_ref(),
            cfg.opt.gamma,
            &default_schedule(cfg.opt.cont_stages),
            &w0,
            &opts,
        )?,
    };
    log::info!(
        "{} of {ns} sensors active after {} iterations",
        result.active_count(),
        result.history.len().saturating_sub(1)
    );
    write_csv(
        &out.join("weights.csv"),
        (0..ns).map(|j| WeightRow {
            sensor_id: j,
            x: ex.candidates[j][0],
            y: ex.candidates[j][1],
            weight: result.w_opt[j],
            active: result.binary[j],
        }),
    )?;
    write_csv(
        &out.join("iterations.csv"),
        result.history.iter().map(|r| IterationRow {
            iter: r.iter,
            objective: r.objective,
            grad_norm: r.grad_norm,
            wall_time: r.wall_time,
            pde_solves: r.pde_solves,
        }),
    )?;
    if !result.stages.is_empty() {
        write_csv(
            &out.join("stages.csv"),
            result.stages.iter().enumerate().map(|(i, s)| StageRow {
                stage: i + 1,
                eps: s.eps,
                iterations: s.iterations,
                objective: s.objective,
                distance_to_binary: s.distance_to_binary,
                converged: s.converged,
            }),
        )?;
    }
    let indicator: Vec<f64> = result.binary.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let exact = GramCriterion::new(&ex.problem)?;
    write_json(
        &out.join("summary.json"),
        &OedSummary {
            method: cfg.opt.method,
            penalty: cfg.opt.penalty,
            gamma: cfg.opt.gamma,
            n_candidates: ns,
            n_active: result.active_count(),
            active_sensors: (0..ns).filter(|&j| result.binary[j]).collect(),
            iterations: result.history.len().saturating_sub(1),
            converged: result.converged,
            binary_reached: result.binary_reached,
            binary_objective: exact.evaluate(&indicator)?.objective,
            pde_solves: result.history.last().map_or(0, |r| r.pde_solves),
        },
    )
}

#[derive(Serialize)]
struct MethodErrors {
    objective: f64,
    objective_rel_err: f64,
    gradient_rel_err: f64,
}

#[derive(Serialize)]
struct Metrics {
    method: Method,
    #[serde(rename = "J")]
    objective: f64,
    info_gain: f64,
    #[serde(rename = "D_KL")]
    kl: f64,
    /// Present when the dense reference is affordable.
    errors_vs_dense: Option<std::collections::BTreeMap<&'static str, MethodErrors>>,
}

pub fn evaluate(cfg: &ExperimentConfig, out: &Path, weights: &Path) -> CliResult<()> {
    prepare_out(out, cfg)?;
    let ex = Experiment::build(cfg, out, cfg.mesh.nx)?;
    let w = read_weights(weights, ex.problem.n_sensors())?.weights;
    let e = ex.criterion(cfg, cfg.opt.method)?.evaluate(&w)?;
    let norm = ex.posterior_norm(&w)?;
    let kl = KlEstimate::from_parts(&e.eigenvalues, norm).value;
    let errors_vs_dense = if ex.n() <= DENSE_GUARD {
        let dense = DenseCriterion::new(&ex.problem).evaluate(&w)?;
        let mut table = std::collections::BTreeMap::new();
        for (name, method) in [
            ("dense", Method::Dense),
            ("eig", Method::Eig),
            ("rand", Method::Rand),
            ("frozen", Method::Frozen),
        ] {
            let est: Evaluation = ex.criterion(cfg, method)?.evaluate(&w)?;
            table.insert(
                name,
                MethodErrors {
                    objective: est.objective,
                    objective_rel_err: relative(est.objective, dense.objective),
                    gradient_rel_err: relative_vec(&est.gradient, &dense.gradient),
                },
            );
        }
        Some(table)
    } else {
        None
    };
    write_json(
        &out.join("metrics.json"),
        &Metrics {
            method: cfg.opt.method,
            objective: e.objective,
            info_gain: 0.5 * e.objective,
            kl,
            errors_vs_dense,
        },
    )
}

#[derive(Serialize)]
struct CloudRow {
    design_id: usize,
    #[serde(rename = "neg_J")]
    neg_j: f64,
    info_gain_from_data: f64,
}

#[derive(Serialize)]
struct CompareSummary {
    cardinality: usize,
    n_designs: usize,
    optimum_neg_j: f64,
    best_random_neg_j: f64,
    optimum_below_all: bool,
}

pub fn compare_random(cfg: &ExperimentConfig, out: &Path, weights: &Path) -> CliResult<()> {
    prepare_out(out, cfg)?;
    let ex = Experiment::build(cfg, out, cfg.mesh.nx)?;
    let ns = ex.problem.n_sensors();
    let file = read_weights(weights, ns)?;
    let active = file.active.unwrap_or_else(|| threshold(&file.weights, cfg.opt.threshold));
    let card = active.iter().filter(|&&a| a).count();
    if card == 0 {
        return Err(CliError::Validation("the optimal design has no active sensors".into()));
    }
    let indicator = |idx: &[usize]| -> Vec<f64> {
        let mut w = vec![0.0; ns];
        idx.iter().for_each(|&i| w[i] = 1.0);
        w
    };
    let optimum: Vec<usize> = (0..ns).filter(|&j| active[j]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut designs = vec![indicator(&optimum)];
    for _ in 0..cfg.compare.n_designs {
        let mut idx = rand::seq::index::sample(&mut rng, ns, card).into_vec();
        idx.sort_unstable();
        designs.push(indicator(&idx));
    }
    let exact = GramCriterion::new(&ex.problem)?;
    let rows: Vec<CloudRow> = designs
        .par_iter()
        .enumerate()
        .map(|(design_id, w)| {
            let e = exact.evaluate(w)?;
            let kl = KlEstimate::from_parts(&e.eigenvalues, ex.posterior_norm(w)?).value;
            Ok(CloudRow {
                design_id,
                neg_j: -e.objective,
                info_gain_from_data: kl,
            })
        })
        .collect::<CliResult<_>>()?;
    let best_random = rows[1..].iter().map(|r| r.neg_j).fold(f64::INFINITY, f64::min);
    let summary = CompareSummary {
        cardinality: card,
        n_designs: cfg.compare.n_designs,
        optimum_neg_j: rows[0].neg_j,
        best_random_neg_j: best_random,
        optimum_below_all: rows[0].neg_j <= best_random,
    };
    write_csv(&out.join("cloud.csv"), rows)?;
    write_json(&out.join("summary.json"), &summary)
}

#[derive(Serialize)]
struct RankRow {
    k: usize,
    method: &'static str,
    kl_rel_err: f64,
    j_rel_err: f64,
    grad_rel_err: f64,
}

#[derive(Serialize)]
struct MeshRow {
    nx: usize,
    n: usize,
    mean_j_rel_err: f64,
    mean_grad_rel_err: f64,
}

#[derive(Serialize)]
struct BenchSummary {
    full_rank: usize,
    full_rank_max_rel_err: f64,
    mesh_error_ratio: Option<f64>,
}

pub fn bench(cfg: &ExperimentConfig, out: &Path) -> CliResult<()> {
    prepare_out(out, cfg)?;
    let ex = Experiment::build(cfg, out, cfg.mesh.nx)?;
    let p = &ex.problem;
    let n = p.g.n();
    let full = ex.full_rank();
    let w = vec![1.0; p.n_sensors()];
    let norm = ex.posterior_norm(&w)?;
    let reference = GramCriterion::new(p)?.evaluate(&w)?;
    let kl_ref = KlEstimate::from_parts(&reference.eigenvalues, norm).value;
    let errors = |e: &Evaluation| -> [f64; 3] {
        [
            relative(KlEstimate::from_parts(&e.eigenvalues, norm).value, kl_ref),
            relative(e.objective, reference.objective),
            relative_vec(&e.gradient, &reference.gradient),
        ]
    };
    let mut ranks: Vec<usize> = if cfg.bench.ranks.is_empty() {
        (1..).map(|i| 5 * i).take_while(|&k| k < full).collect()
    } else {
        cfg.bench.ranks.iter().map(|&k| k.min(full)).filter(|&k| k > 0).collect()
    };
    if cfg.bench.ranks.is_empty() {
        ranks.push(full);
    }
    let mut rows = Vec::new();
    let mut full_err = 0.0f64;
    for &k in &ranks {
        let eig = errors(&EigCriterion::new(p, k, LanczosOptions::default()).evaluate(&w)?);
        let mut rand = [0.0; 3];
        for s in 0..cfg.bench.seeds {
            let sketch = oed_core::SketchConfig::new(k, cfg.sketch.p.min(n - k), cfg.sketch.q, cfg.seed + s as u64);
            let e = errors(&RandCriterion::new(p, sketch, cfg.sketch.reuse_forward_products).evaluate(&w)?);
            rand.iter_mut().zip(e).for_each(|(a, b)| *a += b / cfg.bench.seeds as f64);
        }
        if k == full {
            full_err = eig.into_iter().chain(rand).fold(full_err, f64::max);
        }
        log::info!("k = {k}: eig J error {:.2e}, rand J error {:.2e}", eig[1], rand[1]);
        for (method, e) in [("eig", eig), ("rand", rand)] {
            rows.push(RankRow {
                k,
                method,
                kl_rel_err: e[0],
                j_rel_err: e[1],
                grad_rel_err: e[2],
            });
        }
    }
    write_csv(&out.join("rank_sweep.csv"), rows)?;

    let mut mesh_rows = Vec::new();
    for &nx in &cfg.bench.mesh_levels {
        let level = Experiment::build(cfg, out, nx)?;
        let lp = &level.problem;
        let lw = vec![1.0; lp.n_sensors()];
        let reference = GramCriterion::new(lp)?.evaluate(&lw)?;
        let k = cfg.sketch.k.min(level.full_rank());
        let (mut ej, mut eg) = (0.0, 0.0);
        for s in 0..cfg.bench.seeds {
            let sketch = oed_core::SketchConfig::new(k, cfg.sketch.p.min(lp.g.n() - k), cfg.sketch.q, cfg.seed + s as u64);
            let e = RandCriterion::new(lp, sketch, cfg.sketch.reuse_forward_products).evaluate(&lw)?;
            ej += relative(e.objective, reference.objective) / cfg.bench.seeds as f64;
            eg += relative_vec(&e.gradient, &reference.gradient) / cfg.bench.seeds as f64;
        }
        log::info!("nx = {nx}: mean J error {ej:.3e}");
        mesh_rows.push(MeshRow {
            nx,
            n: lp.g.n(),
            mean_j_rel_err: ej,
            mean_grad_rel_err: eg,
        });
    }
    let mesh_error_ratio = (!mesh_rows.is_empty()).then(|| {
        let max = mesh_rows.iter().map(|r| r.mean_j_rel_err).fold(0.0, f64::max);
        let min = mesh_rows.iter().map(|r| r.mean_j_rel_err).fold(f64::INFINITY, f64::min);
        max / min
    });
    write_csv(&out.join("mesh_sweep.csv"), mesh_rows)?;
    write_json(
        &out.join("summary.json"),
        &BenchSummary {
            full_rank: full,
            full_rank_max_rel_err: full_err,
            mesh_error_ratio,
        },
    )
}

/// Default output directory for a command.
pub fn default_out(command: &str) -> PathBuf {
    PathBuf::from("out").join(command)
}
