mod common;

use std::sync::OnceLock;

use common::*;
use oed_core::fem::MassMode;
use oed_core::oed::{EigCriterion, FrozenCriterion, FrozenSvd, GramCriterion, RandCriterion};
use oed_core::optimize::{
    default_schedule, distance_to_binary, minimize, solve_continuation, solve_l1, threshold, OptimizerOptions, Penalty,
};
use oed_core::sketch::LanczosOptions;
use oed_core::{DesignCriterion, SketchConfig};
use proptest::prelude::*;

fn tiny() -> &'static (Instance, GramCriterion) {
    static CELL: OnceLock<(Instance, GramCriterion)> = OnceLock::new();
    CELL.get_or_init(|| {
        let inst = instance(&tiny_spec(MassMode::Lumped), 0.3, 1);
        let crit = GramCriterion::new(&inst.problem).unwrap();
        (inst, crit)
    })
}

fn small() -> &'static Instance {
    static CELL: OnceLock<Instance> = OnceLock::new();
    CELL.get_or_init(|| instance(&desk_spec(10), 0.9, 1))
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s[s.len() / 2]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn iterates_stay_feasible_and_descend(seed in any::<u64>(), gamma_frac in 0.0f64..1.5) {
        let (inst, crit) = tiny();
        let ns = crit.n_sensors();
        let gamma = gamma_frac * median(&inst.problem.z.z);
        let mut r = rng(seed);
        let w0 = random_weights(ns, &mut r);
        let res = solve_l1(crit, gamma, &w0, &OptimizerOptions::default()).unwrap();
        prop_assert!(res.w_opt.iter().all(|w| (0.0..=1.0).contains(w)));
        let f0 = res.history[0].objective;
        prop_assert!(res.history.last().unwrap().objective <= f0 + 1e-12 * f0.abs());
        prop_assert!(res.history.windows(2).all(|p| p[1].objective <= p[0].objective + 1e-9 * p[0].objective.abs()));
        prop_assert_eq!(res.binary.clone(), threshold(&res.w_opt, 0.03));
    }
}

#[test]
fn no_penalty_selects_every_sensor() {
    let (_, crit) = tiny();
    let res = solve_l1(crit, 0.0, &vec![0.5; crit.n_sensors()], &OptimizerOptions::default()).unwrap();
    assert!(res.converged);
    assert!(res.w_opt.iter().all(|&w| w == 1.0), "{:?}", res.w_opt);
}

#[test]
fn penalty_above_largest_z_selects_nothing() {
    let (inst, crit) = tiny();
    let gamma = inst.problem.z.z.iter().cloned().fold(0.0, f64::max) * 1.01;
    let res = solve_l1(crit, gamma, &vec![0.5; crit.n_sensors()], &OptimizerOptions::default()).unwrap();
    assert!(res.converged);
    assert!(res.w_opt.iter().all(|&w| w == 0.0), "{:?}", res.w_opt);
    assert_eq!(res.active_count(), 0);
}

#[test]
fn wide_smoothing_reduces_to_scaled_l1() {
    // For ε ≫ 1, γ P_ε(w) = γ Σ w/(w+ε) ≈ (γ/ε) Σ w.
    let (inst, crit) = tiny();
    let gamma = 0.5 * median(&inst.problem.z.z);
    let eps = 1e6;
    let opts = OptimizerOptions {
        tol: 1e-9,
        ..OptimizerOptions::default()
    };
    let w0 = vec![0.5; crit.n_sensors()];
    let l1 = solve_l1(crit, gamma, &w0, &opts).unwrap();
    let smooth = minimize(crit, Penalty::Smoothed { eps }, gamma * eps, &w0, &opts).unwrap();
    let diff = l1.w_opt.iter().zip(&smooth.w_opt).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-4, "max weight difference {diff}");
}

#[test]
fn continuation_drives_weights_to_binary() {
    let (inst, crit) = tiny();
    let gamma = 0.3 * median(&inst.problem.z.z);
    let res = solve_continuation(crit, gamma, &default_schedule(6), &vec![0.5; crit.n_sensors()], &OptimizerOptions::default())
        .unwrap();
    assert_eq!(res.stages.len(), 6);
    assert!(res.binary_reached);
    assert!(distance_to_binary(&res.w_opt) == 0.0);
    assert!(res.stages.windows(2).all(|s| s[1].eps < s[0].eps));
    let last_iter: Vec<usize> = res.history.iter().map(|h| h.iter).collect();
    assert!(last_iter.windows(2).all(|p| p[1] == p[0] + 1));
}

#[test]
fn estimators_at_full_rank_reach_the_dense_optimum() {
    let inst = small();
    let p = &inst.problem;
    let ns = p.n_sensors();
    let k = p.g.n().min(p.g.n_obs());
    let dense = GramCriterion::new(p).unwrap();
    let gamma = 0.5 * median(&dense.evaluate(&vec![0.5; ns]).unwrap().gradient);
    let opts = OptimizerOptions::default();
    let w0 = vec![0.5; ns];
    let reference = solve_l1(&dense, gamma, &w0, &opts).unwrap();
    assert!(reference.converged);
    let eig = EigCriterion::new(p, k, LanczosOptions::default());
    let rand = RandCriterion::new(p, SketchConfig::new(k, 0, 1, 3), false);
    let frozen = FrozenCriterion::new(FrozenSvd::exact(&p.g, &p.noise, k).unwrap());
    for crit in [&eig as &dyn DesignCriterion, &rand, &frozen] {
        let res = solve_l1(crit, gamma, &w0, &opts).unwrap();
        let diff = res.w_opt.iter().zip(&reference.w_opt).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-3, "{}: max weight difference {diff}", crit.name());
    }
}

#[test]
fn bad_inputs_are_rejected() {
    let (_, crit) = tiny();
    let ns = crit.n_sensors();
    let opts = OptimizerOptions::default();
    assert!(solve_l1(crit, -1.0, &vec![0.5; ns], &opts).is_err());
    assert!(solve_l1(crit, 1.0, &vec![1.5; ns], &opts).is_err());
    assert!(solve_l1(crit, 1.0, &vec![0.5; ns + 1], &opts).is_err());
    assert!(solve_continuation(crit, 1.0, &[0.5, 0.5], &vec![0.5; ns], &opts).is_err());
    assert!(solve_continuation(crit, 1.0, &[], &vec![0.5; ns], &opts).is_err());
}
