use approx::assert_abs_diff_eq;
use ndarray::{array, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn identity_problem(y: Array1<f64>, lambda: f64, gamma: f64, eta: f64) -> HqsProblem {
    let d = y.len();
    HqsProblem::new(y, Array2::eye(d), Array2::eye(d), lambda, gamma, eta).unwrap()
}

fn random_problem(seed: u64, m: usize, d: usize) -> HqsProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = Array2::from_shape_fn((m, d), |_| rng.gen_range(-1.0..1.0));
    let phi = Array2::from_shape_fn((d, d), |_| rng.gen_range(-1.0..1.0));
    let y = Array1::from_shape_fn(m, |_| rng.gen_range(-1.0..1.0));
    HqsProblem::new(y, h, phi, 0.3, 0.2, 0.7).unwrap()
}

#[test]
fn soft_threshold_examples() {
    let out = soft_threshold(&array![0.5, -0.3, 0.1], 0.2).unwrap();
    assert_abs_diff_eq!(out, array![0.3, -0.1, 0.0], epsilon = 1e-15);
    let x = array![1.5, -2.0, 0.0, 3e-9];
    assert_eq!(soft_threshold(&x, 0.0).unwrap(), x);
    assert_eq!(soft_threshold(&array![1.0], 2.0).unwrap(), array![0.0]);
}

#[test]
fn soft_threshold_rejects_negative_tau() {
    assert!(matches!(
        soft_threshold(&array![1.0], -0.1),
        Err(Error::InvalidArgument(_))
    ));
}

#[test]
fn problem_rejects_inconsistent_shapes_and_weights() {
    let y = Array1::zeros(3);
    assert!(HqsProblem::new(y.clone(), Array2::eye(4), Array2::eye(4), 0.1, 0.1, 1.0).is_err());
    assert!(HqsProblem::new(y.clone(), Array2::zeros((3, 4)), Array2::eye(3), 0.1, 0.1, 1.0).is_err());
    assert!(HqsProblem::new(y.clone(), Array2::eye(3), Array2::eye(3), -0.1, 0.1, 1.0).is_err());
    assert!(HqsProblem::new(y.clone(), Array2::eye(3), Array2::eye(3), 0.1, -0.1, 1.0).is_err());
    assert!(HqsProblem::new(y, Array2::eye(3), Array2::eye(3), 0.1, 0.1, 0.0).is_err());
}

#[test]
fn objective_reduces_to_sparsity_on_exact_fit() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let h = Array2::from_shape_fn((5, 4), |_| rng.gen_range(-1.0..1.0));
    let phi = Array2::from_shape_fn((4, 6), |_| rng.gen_range(-1.0..1.0));
    let alpha = array![0.5, 0.0, -1.25, 0.0, 2.0, 0.1];
    let y = h.dot(&phi).dot(&alpha);
    let p = HqsProblem::new(y, h, phi, 0.7, 3.0, 5.0).unwrap();
    let v = objective(&p, &alpha, &alpha, &alpha).unwrap();
    assert_abs_diff_eq!(v, 0.7 * 3.85, epsilon = 1e-12);
}

#[test]
fn objective_at_zero_is_observation_energy() {
    let y = array![1.0, -2.0, 0.5];
    let p = identity_problem(y, 0.4, 0.4, 0.4);
    let z = Array1::zeros(3);
    assert_abs_diff_eq!(objective(&p, &z, &z, &z).unwrap(), 5.25, epsilon = 1e-15);
}

#[test]
fn objective_matches_scalar_loop() {
    let p = random_problem(7, 6, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut v = || Array1::from_shape_fn(5, |_| rng.gen_range(-1.0..1.0));
    let (a, b, z) = (v(), v(), v());

    let (hm, phi) = (&p.h, &p.phi);
    let mut fidelity = 0.0;
    for i in 0..6 {
        let mut ka = 0.0;
        for k in 0..5 {
            let mut atom = 0.0;
            for j in 0..5 {
                atom += hm[[i, j]] * phi[[j, k]];
            }
            ka += atom * a[k];
        }
        fidelity += (p.y[i] - ka) * (p.y[i] - ka);
    }
    let mut l1z = 0.0;
    let mut l1ab = 0.0;
    let mut l2 = 0.0;
    for k in 0..5 {
        l1z += z[k].abs();
        l1ab += (a[k] - b[k]).abs();
        l2 += (z[k] - a[k]) * (z[k] - a[k]);
    }
    let expected = fidelity + 0.3 * l1z + 0.2 * l1ab + 0.7 * l2.sqrt();
    assert_abs_diff_eq!(objective(&p, &a, &b, &z).unwrap(), expected, epsilon = 1e-12);
}

#[test]
fn objective_rejects_shape_mismatch() {
    let p = identity_problem(array![1.0, 2.0], 0.1, 0.1, 0.1);
    let ok = Array1::zeros(2);
    let bad = Array1::zeros(3);
    assert!(objective(&p, &bad, &ok, &ok).is_err());
    assert!(objective(&p, &ok, &bad, &ok).is_err());
    assert!(objective(&p, &ok, &ok, &bad).is_err());
}

fn plain_params(c: f64) -> HqsParams {
    HqsParams {
        tau1: 0.0,
        tau2: 0.0,
        tau3: 0.0,
        omega1: 0.0,
        omega2: 1.0,
        c,
        beta_estimator: BetaEstimator::SoftThreshold,
        max_iters: 10,
        tol: 1e-8,
    }
}

#[test]
fn step_without_thresholds_is_a_gradient_step() {
    let p = random_problem(3, 7, 4);
    let params = plain_params(1.05 * spectral_norm_sq(p.k(), 200));
    let alpha = array![0.3, -0.2, 0.9, 0.0];
    let state = HqsState::initial(&p, alpha.clone()).unwrap();
    let next = hqs_step(&p, &params, &state).unwrap();
    let expected = &alpha + &(p.k().t().dot(&(&p.y - &p.k().dot(&alpha))) / params.c);
    assert_abs_diff_eq!(next.alpha, expected, epsilon = 1e-12);
    assert_eq!(next.iteration, 1);
}

#[test]
fn zero_state_is_a_fixed_point_for_zero_observation() {
    let p = identity_problem(Array1::zeros(3), 0.1, 0.1, 0.1);
    let params = HqsParams::defaults_for(&p);
    let state = HqsState::initial(&p, Array1::zeros(3)).unwrap();
    let next = hqs_step(&p, &params, &state).unwrap();
    assert_eq!(next.alpha, state.alpha);
    assert_eq!(next.beta, state.beta);
    assert_eq!(next.z, state.z);
    assert_eq!(next.v, state.v);
    assert_eq!(next.objective, state.objective);
    assert_eq!(next.iteration, 1);
}

#[test]
fn step_matches_hand_trace_on_orthonormal_instance() {
    let p = identity_problem(array![1.0, 0.5, -0.2], 0.1, 0.2, 0.3);
    let params = HqsParams {
        tau1: 0.1,
        tau2: 0.05,
        tau3: 0.02,
        omega1: 0.5,
        omega2: 1.0,
        c: 1.0,
        beta_estimator: BetaEstimator::SoftThreshold,
        max_iters: 1,
        tol: 1e-8,
    };
    let state = HqsState::initial(&p, array![0.2, -0.1, 0.05]).unwrap();
    let next = hqs_step(&p, &params, &state).unwrap();
    // z' = S_0.1(α) = (0.1, 0, 0); β' = S_0.05(α) = (0.15, -0.05, 0)
    // v' = 0.5 z' + (y - α) + α = (1.05, 0.5, -0.2)
    // α' = S_0.02(v' - β') + β' = (0.88, 0.53, -0.18) + β'
    assert_abs_diff_eq!(next.z, array![0.1, 0.0, 0.0], epsilon = 1e-15);
    assert_abs_diff_eq!(next.beta, array![0.15, -0.05, 0.0], epsilon = 1e-15);
    assert_abs_diff_eq!(next.v, array![1.05, 0.5, -0.2], epsilon = 1e-15);
    assert_abs_diff_eq!(next.alpha, array![1.03, 0.48, -0.18], epsilon = 1e-15);
    let expected = 0.0017 + 0.1 * 0.1 + 0.2 * 1.59 + 0.3 * (0.93f64 * 0.93 + 0.48 * 0.48 + 0.18 * 0.18).sqrt();
    assert_abs_diff_eq!(next.objective, expected, epsilon = 1e-12);
}

#[test]
fn solve_matches_orthonormal_lasso_closed_form() {
    // y lies along the second atom; K = I is orthonormal.
    let y = array![0.0, 2.5, 0.0, 0.0];
    let lam = 0.6;
    let p = identity_problem(y.clone(), lam, 0.0, 1.0);
    let mut params = HqsParams::defaults_for(&p);
    params.omega1 = 0.0;
    params.tau1 = 0.0;
    params.tau2 = f64::INFINITY;
    params.tau3 = lam / (2.0 * params.c);
    params.max_iters = 10_000;
    params.tol = 1e-14;
    let (state, trace) = hqs_solve(&p, &params, &Array1::zeros(4)).unwrap();
    let closed = soft_threshold(&y, lam / 2.0).unwrap();
    assert_abs_diff_eq!(state.alpha, closed, epsilon = 1e-9);
    let oracle = lasso_cd(p.k(), &p.y, lam).unwrap();
    assert_abs_diff_eq!(state.alpha, oracle, epsilon = 1e-9);
    assert!(trace.iter().all(|v| v.is_finite()));
}

#[test]
fn similarity_weight_pulls_toward_constant_beta() {
    let p0 = random_problem(11, 8, 6);
    let beta0 = array![0.5, -0.5, 0.0, 1.0, 0.0, -1.0];
    let distance = |gamma: f64| {
        let p = HqsProblem::new(p0.y.clone(), p0.h.clone(), p0.phi.clone(), 0.1, gamma, 1.0).unwrap();
        let mut params = HqsParams::defaults_for(&p);
        params.beta_estimator = BetaEstimator::Constant(beta0.clone());
        params.omega1 = 0.0;
        // γ enters the α-update as the proximal threshold of γ‖α − β‖₁.
        params.tau3 = gamma / (2.0 * params.c);
        params.max_iters = 2000;
        let (state, _) = hqs_solve(&p, &params, &Array1::zeros(6)).unwrap();
        (&state.alpha - &beta0).iter().map(|v| v.abs()).sum::<f64>()
    };
    let free = distance(0.0);
    let pulled = distance(50.0);
    assert!(pulled < free, "pulled {pulled} free {free}");
    assert!(pulled < 1e-9, "large gamma should pin alpha to beta0, got {pulled}");
}

#[test]
fn infinite_tolerance_stops_after_one_iteration() {
    let p = random_problem(5, 6, 6);
    let mut params = HqsParams::defaults_for(&p);
    params.tol = f64::INFINITY;
    let (state, trace) = hqs_solve(&p, &params, &Array1::zeros(6)).unwrap();
    assert_eq!(state.iteration, 1);
    assert_eq!(trace.len(), 1);
}

#[test]
fn solve_reports_iteration_of_numerical_failure() {
    let p = random_problem(5, 6, 6);
    let mut params = HqsParams::defaults_for(&p);
    params.c = 1e-300;
    params.max_iters = 100;
    match hqs_solve(&p, &params, &Array1::ones(6)) {
        Err(Error::NumericalFailure { iteration, .. }) => assert!(iteration >= 1),
        other => panic!("expected numerical failure, got {other:?}"),
    }
}

#[test]
fn solve_rejects_wrong_initial_length() {
    let p = random_problem(5, 6, 6);
    let params = HqsParams::defaults_for(&p);
    assert!(hqs_solve(&p, &params, &Array1::zeros(5)).is_err());
}

#[test]
fn defaults_follow_data_scale() {
    let p = random_problem(9, 10, 7);
    let params = HqsParams::defaults_for(&p);
    let kty = p.k().t().dot(&p.y).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert_abs_diff_eq!(params.tau1, 0.01 * kty, epsilon = 1e-15);
    assert_eq!(params.tau1, params.tau2);
    assert_eq!(params.tau2, params.tau3);
    assert_eq!((params.omega1, params.omega2), (0.5, 1.0));
    assert_eq!((params.max_iters, params.tol), (500, 1e-8));
    // Compare against the exact top eigenvalue of KᵀK from a long power run.
    let exact = spectral_norm_sq(p.k(), 5000);
    assert!(params.c >= exact, "c {} below sigma_max^2 {}", params.c, exact);
    assert!(params.c <= 1.06 * exact);
}

#[test]
fn lasso_unregularized_solves_square_system() {
    let k = array![[2.0, 1.0, 0.0], [0.5, 3.0, -1.0], [0.0, 1.0, 4.0]];
    let x = array![1.0, -2.0, 0.5];
    let y = k.dot(&x);
    let a = lasso_cd(&k, &y, 0.0).unwrap();
    assert_abs_diff_eq!(a, x, epsilon = 1e-9);
}

#[test]
fn lasso_orthonormal_design_is_soft_threshold() {
    let (c, s) = (0.6f64, 0.8f64);
    let k = array![[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]];
    let y = array![1.0, -0.4, 0.2];
    let lam = 0.5;
    let a = lasso_cd(&k, &y, lam).unwrap();
    let expected = soft_threshold(&k.t().dot(&y), lam / 2.0).unwrap();
    assert_abs_diff_eq!(a, expected, epsilon = 1e-10);
}

#[test]
fn lasso_satisfies_subgradient_conditions() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let k = Array2::from_shape_fn((8, 16), |_| rng.gen_range(-1.0..1.0));
    let y = Array1::from_shape_fn(8, |_| rng.gen_range(-1.0..1.0));
    let lam = 0.3;
    let a = lasso_cd(&k, &y, lam).unwrap();
    // 2Kᵀ(y − Ka) ∈ lam·∂‖a‖₁
    let g = k.t().dot(&(&y - &k.dot(&a))) * 2.0;
    for j in 0..16 {
        if a[j] != 0.0 {
            assert!((g[j] - lam * a[j].signum()).abs() <= 1e-8, "active {j}: {}", g[j]);
        } else {
            assert!(g[j].abs() <= lam + 1e-8, "inactive {j}: {}", g[j]);
        }
    }
}

#[test]
fn lasso_rejects_negative_weight() {
    assert!(lasso_cd(&Array2::eye(2), &Array1::zeros(2), -1.0).is_err());
}
