mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use oed_core::linalg::{logdet_identity_plus, sorted_symmetric_eigen};
use oed_core::sketch::{
    cge_constant, error_bound, exact_eigs, exact_eigs_factored, gaussian_matrix, low_rank_eig, orthonormalize,
    subspace_iteration, BoundKind, DenseFactor, DenseOperator, LanczosOptions, SpectrumSplit,
};
use oed_core::SketchConfig;
use proptest::prelude::*;

/// `A = U diag(spectrum) Uᵀ` with a seeded random orthogonal `U`.
fn psd_with_spectrum(spectrum: &[f64], seed: u64) -> DMatrix<f64> {
    let n = spectrum.len();
    let (u, _) = orthonormalize(gaussian_matrix(n, n, seed ^ 0x9e37));
    &u * DMatrix::from_diagonal(&DVector::from_column_slice(spectrum)) * u.transpose()
}

fn random_psd(n: usize, rank: usize, seed: u64) -> DMatrix<f64> {
    let b = gaussian_matrix(n, rank, seed);
    &b * b.transpose()
}

fn decaying(n: usize, rate: f64) -> Vec<f64> {
    (0..n).map(|i| rate.powi(i as i32 + 1)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn sketch_eigenvalues_interlace(seed in any::<u64>(), n in 12usize..40, k in 1usize..8, p in 0usize..4, q in 1usize..3) {
        let a = random_psd(n, n / 2 + 1, seed);
        let truth = sorted_symmetric_eigen(&a).0;
        let s = subspace_iteration(&DenseOperator(a), &SketchConfig::new(k, p, q, seed)).unwrap();
        let t = sorted_symmetric_eigen(&s.t).0;
        for i in 0..t.len() {
            prop_assert!(t[i] <= truth[i] * (1.0 + 1e-10) + 1e-10);
        }
    }

    #[test]
    fn trace_of_product_bound(seed in any::<u64>(), n in 2usize..20) {
        // |tr(AB)| ≤ ‖A‖₂ tr(B) for general A and PSD B.
        let a = gaussian_matrix(n, n, seed);
        let b = random_psd(n, (n / 3).max(1), seed.wrapping_add(7));
        let lhs = (&a * &b).trace().abs();
        let a_norm = a.clone().svd(false, false).singular_values.max();
        prop_assert!(lhs <= a_norm * b.trace() * (1.0 + 1e-12));
    }

    #[test]
    fn logdet_ordering(seed in any::<u64>(), n in 2usize..20) {
        // N ≤ M in the Loewner order ⇒ 0 ≤ ld(I+M) − ld(I+N) ≤ ld(I+M−N).
        let nmat = random_psd(n, (n / 2).max(1), seed);
        let e = random_psd(n, (n / 4).max(1), !seed);
        let m = &nmat + &e;
        let diff = logdet_identity_plus(&m) - logdet_identity_plus(&nmat);
        prop_assert!(diff >= -1e-10);
        prop_assert!(diff <= logdet_identity_plus(&e) + 1e-10 * (1.0 + diff.abs()));
    }

    #[test]
    fn full_width_sketch_is_exact(seed in any::<u64>(), n in 8usize..30, rank in 1usize..5) {
        let a = random_psd(n, rank, seed);
        let truth = logdet_identity_plus(&a);
        let s = subspace_iteration(&DenseOperator(a), &SketchConfig::new(rank, 2, 1, seed)).unwrap();
        prop_assert!(rel_err(logdet_identity_plus(&s.t), truth) <= 1e-10);
    }
}

#[test]
fn sketches_are_reproducible_per_seed() {
    let a = DenseOperator(psd_with_spectrum(&decaying(60, 0.7), 3));
    let cfg = SketchConfig::new(8, 4, 1, 42);
    let s1 = subspace_iteration(&a, &cfg).unwrap();
    let s2 = subspace_iteration(&a, &cfg).unwrap();
    assert_eq!(s1.t, s2.t);
    assert_eq!(s1.q, s2.q);
    let s3 = subspace_iteration(&a, &SketchConfig { seed: 43, ..cfg }).unwrap();
    assert_ne!(s1.t, s3.t);
}

#[test]
fn gaussian_constant_matches_high_precision_values() {
    // Reference values evaluated with 40 significant digits.
    assert!(rel_err(cge_constant(20, 5, 1018).unwrap(), 3315.610703692000273) < 1e-13);
    assert!(rel_err(cge_constant(10, 5, 100).unwrap(), 300.6237040278215581) < 1e-13);
}

#[test]
fn gaussian_constant_by_logarithms() {
    for (k, p, n) in [(1, 2, 3), (5, 3, 50), (30, 10, 4000), (100, 20, 100_000)] {
        let (kf, pf) = (k as f64, p as f64);
        let mu = ((n - k) as f64).sqrt() + (kf + pf).sqrt();
        let log_c = 2.0 + (kf + pf).ln() - 2.0 * (pf + 1.0).ln()
            - 2.0 / (pf + 1.0) * (2.0 * std::f64::consts::PI * (pf + 1.0)).ln()
            + 2.0 * (mu + 2f64.sqrt()).ln()
            + (pf + 1.0).ln()
            - (pf - 1.0).ln();
        assert!(rel_err(cge_constant(k, p, n).unwrap(), log_c.exp()) < 1e-12);
    }
}

#[test]
fn truncated_eig_error_is_tail_logdet() {
    let spectrum = decaying(50, 0.6);
    let a = DenseOperator(psd_with_spectrum(&spectrum, 8));
    let total: f64 = spectrum.iter().map(|l| l.ln_1p()).sum();
    for k in [1, 5, 12, 30] {
        let lr = exact_eigs(&a, k, &LanczosOptions::default()).unwrap();
        let split = SpectrumSplit::new(&spectrum, k).unwrap();
        let err = total - lr.logdet_identity_plus();
        assert!((err - split.tail_logdet()).abs() <= 1e-12 * total);
        assert!(split.tail_logdet() <= split.tail_trace());
    }
}

#[test]
fn reconstruction_matches_operator_on_its_range() {
    let a = random_psd(30, 4, 5);
    let s = subspace_iteration(&DenseOperator(a.clone()), &SketchConfig::new(4, 3, 1, 5)).unwrap();
    let lr = low_rank_eig(&s.q, &s.t);
    let x = DVector::from_fn(30, |i, _| (i as f64 * 0.3).sin());
    let err = (lr.reconstruct_apply(&x) - &a * &x).norm();
    assert!(err <= 1e-10 * (&a * &x).norm());
}

#[test]
fn expected_errors_obey_bounds_on_a_geometric_spectrum() {
    let n = 80;
    let spectrum: Vec<f64> = (1..=n).map(|i| 0.5f64.powi(i)).collect();
    let a = DenseOperator(psd_with_spectrum(&spectrum, 21));
    let exact: f64 = spectrum.iter().map(|l| l.ln_1p()).sum();
    let exact_trace: f64 = spectrum.iter().map(|l| l / (1.0 + l)).sum();
    let cfg = SketchConfig::new(6, 4, 1, 0);
    let split = SpectrumSplit::new(&spectrum, cfg.k).unwrap();
    let (mut ld, mut kl) = (0.0, 0.0);
    let trials = 40;
    for seed in 0..trials {
        let s = subspace_iteration(&a, &SketchConfig { seed, ..cfg }).unwrap();
        let t = sorted_symmetric_eigen(&s.t).0;
        let est: f64 = t.iter().map(|l| l.max(0.0).ln_1p()).sum();
        let est_trace: f64 = t.iter().map(|l| l.max(0.0) / (1.0 + l.max(0.0))).sum();
        ld += (exact - est).abs();
        // Same data misfit on both sides, so it cancels in the KL error.
        kl += 0.5 * ((exact - est) - (exact_trace - est_trace)).abs();
    }
    let trials = trials as f64;
    assert!(ld / trials <= error_bound(&split, &cfg, BoundKind::LogdetRand).unwrap());
    assert!(kl / trials <= error_bound(&split, &cfg, BoundKind::KlRand).unwrap());
}

#[test]
fn factored_eigensolver_resolves_small_eigenvalues() {
    // Singular values from 1e4 down to 1e-4: eigenvalues span 16 decades.
    let (rows, n) = (40, 60);
    let sv: Vec<f64> = (0..rows).map(|i| 10f64.powf(4.0 - 8.0 * i as f64 / (rows - 1) as f64)).collect();
    let (left, _) = orthonormalize(gaussian_matrix(rows, rows, 1));
    let (right, _) = orthonormalize(gaussian_matrix(n, rows, 2));
    let b = &left * DMatrix::from_diagonal(&DVector::from_column_slice(&sv)) * right.transpose();
    let lr = exact_eigs_factored(&DenseFactor(b.clone()), rows, &LanczosOptions::default()).unwrap();
    for (i, s) in sv.iter().enumerate() {
        assert!(rel_err(lr.values[i], s * s) < 1e-6, "eigenvalue {i}: {} vs {}", lr.values[i], s * s);
    }
    let exact: f64 = sv.iter().map(|s| (s * s).ln_1p()).sum();
    assert!(rel_err(lr.logdet_identity_plus(), exact) < 1e-13);
    let gram = b.transpose() * &b;
    let residual = &gram * &lr.vectors - &lr.vectors * DMatrix::from_diagonal(&DVector::from_column_slice(&lr.values));
    assert!(residual.norm() <= 1e-8 * sv[0] * sv[0]);
    let ortho = lr.vectors.transpose() * &lr.vectors - DMatrix::identity(rows, rows);
    assert!(ortho.norm() < 1e-10);
}

#[test]
fn factored_and_symmetric_eigensolvers_agree() {
    let b = gaussian_matrix(30, 50, 4);
    let a = b.transpose() * &b;
    let opts = LanczosOptions::default();
    let f = exact_eigs_factored(&DenseFactor(b), 12, &opts).unwrap();
    let s = exact_eigs(&DenseOperator(a.clone()), 12, &opts).unwrap();
    let truth = sorted_symmetric_eigen(&a).0;
    for i in 0..12 {
        assert!(rel_err(f.values[i], truth[i]) < 1e-10);
        assert!(rel_err(s.values[i], truth[i]) < 1e-8);
    }
}
