mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use oed_core::fem::MassMode;
use oed_core::inverse::{
    dense_posterior_covariance, map_estimate, posterior_pointwise_variance, sample_posterior, DEFAULT_CG_TOL,
};
use oed_core::oed::{KlMethod, NoiseModel};
use oed_core::sketch::{exact_eigs, LanczosOptions, LowRankEig};
use oed_core::SketchConfig;
use rand::Rng;
use rand_distr::StandardNormal;

struct Dense {
    f: DMatrix<f64>,
    prior_prec: DMatrix<f64>,
}

fn dense_parts(inst: &Instance) -> Dense {
    let model = inst.problem.g.model();
    let n = model.n();
    let mut f = DMatrix::zeros(model.n_obs(), n);
    for c in 0..n {
        let mut e = vec![0.0; n];
        e[c] = 1.0;
        f.set_column(c, &DVector::from_vec(model.solve_forward(&e).unwrap()));
    }
    let params = inst.problem.g.prior().params();
    let m = inst.problem.g.prior().mass().to_dense();
    let l = inst.built.ops.stiffness.to_dense() * params.alpha + &m * params.beta;
    let prior_prec = &l * m.try_inverse().unwrap() * &l;
    Dense { f, prior_prec }
}

fn dense_map(d: &Dense, precisions: &[f64], y: &[f64]) -> DVector<f64> {
    let wd = DMatrix::from_diagonal(&DVector::from_column_slice(precisions));
    let a = d.f.transpose() * &wd * &d.f + &d.prior_prec;
    a.lu().solve(&(d.f.transpose() * wd * DVector::from_column_slice(y))).unwrap()
}

fn full_lr(inst: &Instance, w: &[f64]) -> LowRankEig {
    let p = &inst.problem;
    exact_eigs(&p.hessian(w).unwrap(), p.g.n().min(p.g.n_obs()), &LanczosOptions::default()).unwrap()
}

#[test]
fn map_point_matches_dense_normal_equations() {
    for mode in [MassMode::Lumped, MassMode::Cholesky] {
        let inst = instance(&tiny_spec(mode), 0.05, 4);
        let d = dense_parts(&inst);
        let p = &inst.problem;
        let mut r = rng(1);
        for w in [vec![1.0; p.n_sensors()], random_weights(p.n_sensors(), &mut r)] {
            let rep = map_estimate(&p.g, &p.noise, &w, &inst.data.y_obs, 1e-12, 500).unwrap();
            let oracle = dense_map(&d, &p.noise.weighted_precisions(&w, p.g.n_times()), &inst.data.y_obs);
            assert!(vec_rel_err(&rep.theta_post, oracle.as_slice()) < 1e-8, "{mode:?}");
        }
    }
}

#[test]
fn data_misfit_grows_with_noise_level() {
    let inst = instance(&tiny_spec(MassMode::Cholesky), 0.05, 5);
    let p = &inst.problem;
    let w = vec![1.0; p.n_sensors()];
    let model = p.g.model();
    let mut last = 0.0;
    for scale in [0.1, 0.3, 1.0, 3.0, 10.0, 100.0] {
        let sigma: Vec<f64> = inst.data.sigma.iter().map(|s| s * scale).collect();
        let noise = NoiseModel::new(sigma).unwrap();
        let rep = map_estimate(&p.g, &noise, &w, &inst.data.y_obs, 1e-12, 500).unwrap();
        let fit = model.solve_forward(&rep.theta_post).unwrap();
        let misfit: f64 = fit.iter().zip(&inst.data.y_obs).map(|(a, b)| (a - b).powi(2)).sum();
        assert!(misfit >= last * (1.0 - 1e-9), "misfit decreased at scale {scale}");
        last = misfit;
    }
    // Very large noise leaves the prior mean.
    let noise = NoiseModel::new(inst.data.sigma.iter().map(|s| s * 1e8).collect()).unwrap();
    let rep = map_estimate(&p.g, &noise, &w, &inst.data.y_obs, 1e-12, 500).unwrap();
    assert!(rep.theta_post.iter().all(|v| v.abs() < 1e-6));
}

#[test]
fn cg_reports_consistent_diagnostics() {
    let inst = instance(&desk_spec(10), 0.3, 6);
    let p = &inst.problem;
    let w = vec![1.0; p.n_sensors()];
    let rep = map_estimate(&p.g, &p.noise, &w, &inst.data.y_obs, DEFAULT_CG_TOL, 2000).unwrap();
    assert!(rep.relative_residual <= DEFAULT_CG_TOL);
    assert_eq!(rep.residual_history.len(), rep.iterations + 1);
    assert!(rep.residual_history.last().unwrap() <= &DEFAULT_CG_TOL);
    assert!(rep.iterations > 0);
    let whitened = p.g.prior().to_whitened(&rep.theta_post).unwrap();
    assert!(vec_rel_err(&whitened, &rep.x) < 1e-9);
}

#[test]
fn pointwise_variance_matches_dense_posterior() {
    let inst = instance(&tiny_spec(MassMode::Cholesky), 0.1, 7);
    let p = &inst.problem;
    let mut r = rng(2);
    let w = random_weights(p.n_sensors(), &mut r);
    let lr = full_lr(&inst, &w);
    let dense_h = p.dense_reference(&w).unwrap().hessian;
    let cov = dense_posterior_covariance(p.g.prior(), &dense_h).unwrap();
    let var = posterior_pointwise_variance(p.g.prior(), &lr).unwrap();
    for (i, v) in var.iter().enumerate() {
        assert!(rel_err(*v, cov[(i, i)]) < 1e-8, "node {i}");
    }
    let prior_var = p.g.prior().pointwise_variance();
    assert!(var.iter().zip(&prior_var).all(|(a, b)| a <= b));
}

#[test]
fn dense_posterior_covariance_is_inverse_of_textbook_precision() {
    let inst = instance(&tiny_spec(MassMode::Lumped), 0.1, 8);
    let d = dense_parts(&inst);
    let p = &inst.problem;
    let w = vec![0.6; p.n_sensors()];
    let wd = DMatrix::from_diagonal(&DVector::from_vec(p.noise.weighted_precisions(&w, p.g.n_times())));
    let prec = d.f.transpose() * wd * &d.f + &d.prior_prec;
    let cov = dense_posterior_covariance(p.g.prior(), &p.dense_reference(&w).unwrap().hessian).unwrap();
    let n = cov.nrows();
    assert!((prec * cov - DMatrix::identity(n, n)).norm() < 1e-8 * (n as f64).sqrt());
}

#[test]
fn posterior_samples_have_posterior_moments() {
    const N: usize = 20_000;
    let inst = instance(&tiny_spec(MassMode::Cholesky), 0.1, 9);
    let p = &inst.problem;
    let w = vec![1.0; p.n_sensors()];
    let lr = full_lr(&inst, &w);
    let map = map_estimate(&p.g, &p.noise, &w, &inst.data.y_obs, 1e-12, 500).unwrap();
    let cov = dense_posterior_covariance(p.g.prior(), &p.dense_reference(&w).unwrap().hessian).unwrap();
    let n = p.g.n();
    let mut r = rng(3);
    let mut mean = DVector::<f64>::zeros(n);
    let mut second = DMatrix::<f64>::zeros(n, n);
    for _ in 0..N {
        let xi: Vec<f64> = (0..n).map(|_| r.sample(StandardNormal)).collect();
        let s = DVector::from_vec(sample_posterior(p.g.prior(), &lr, &map.theta_post, &xi).unwrap());
        let d = &s - DVector::from_column_slice(&map.theta_post);
        mean += &d;
        second += &d * d.transpose();
    }
    mean /= N as f64;
    second /= N as f64;
    let mut worst = 0.0f64;
    for i in 0..n {
        worst = worst.max(mean[i].abs() / (cov[(i, i)] / N as f64).sqrt());
        for j in 0..n {
            let se = ((cov[(i, i)] * cov[(j, j)] + cov[(i, j)].powi(2)) / N as f64).sqrt();
            worst = worst.max((second[(i, j)] - cov[(i, j)]).abs() / se);
        }
    }
    assert!(worst < 5.0, "worst deviation {worst} standard errors");
}

#[test]
fn kl_estimators_agree_at_full_rank() {
    let inst = instance(&desk_spec(10), 0.9, 10);
    let p = &inst.problem;
    let mut r = rng(4);
    let w = random_weights(p.n_sensors(), &mut r);
    let k = p.g.n().min(p.g.n_obs());
    let y = &inst.data.y_obs;
    let exact = p.kl_estimate(&w, y, &KlMethod::Exact, 1e-12).unwrap();
    let eig = p.kl_estimate(&w, y, &KlMethod::Eig { k, lanczos: LanczosOptions::default() }, 1e-12).unwrap();
    let rand = p.kl_estimate(&w, y, &KlMethod::Rand(SketchConfig::new(k, 0, 1, 2)), 1e-12).unwrap();
    assert!(rel_err(eig.value, exact.value) < 1e-8);
    assert!(rel_err(rand.value, exact.value) < 1e-8);
    assert_eq!(exact.norm_term, eig.norm_term);
    // Truncation only drops nonnegative tail terms of the log-determinant.
    let short = p.kl_estimate(&w, y, &KlMethod::Eig { k: 10, lanczos: LanczosOptions::default() }, 1e-12).unwrap();
    assert!(short.logdet <= exact.logdet);
}
