//! Seeded agreement suite: HQS with `γ = 0`, `ω1 = 0`, `β = 0` is ISTA on
//! `‖y − Kα‖² + lam‖α‖₁`, so its fixed point must match coordinate descent.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{hqs_solve, lasso_cd, lasso_objective, BetaEstimator, HqsParams, HqsProblem};
use crate::error::Result;

pub const OBSERVATIONS: usize = 16;
pub const MAX_DIM: usize = 32;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_INSTANCES: usize = 20;

#[derive(Clone, Debug)]
pub struct Instance {
    pub seed: u64,
    pub problem: HqsProblem,
    /// Weight of `‖α‖₁` in the reference LASSO objective.
    pub lam: f64,
}

/// `m = 16` observations, `n = d ∈ [8, 32]`, Gaussian `H` and `Φ`, a
/// 3-sparse ground truth plus 1% noise, and `lam = 0.2·‖Kᵀy‖∞` (a tenth of
/// the value that zeroes the solution).
pub fn instance(seed: u64) -> Result<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = OBSERVATIONS;
    let d = rng.gen_range(8..=MAX_DIM);
    let gauss = |r: usize, c: usize, scale: f64, rng: &mut ChaCha8Rng| {
        Array2::from_shape_fn((r, c), |_| rng.sample::<f64, _>(StandardNormal) * scale)
    };
    let h = gauss(m, d, 1.0 / (m as f64).sqrt(), &mut rng);
    let phi = gauss(d, d, 1.0 / (d as f64).sqrt(), &mut rng);
    let mut truth = Array1::<f64>::zeros(d);
    for _ in 0..3 {
        let j = rng.gen_range(0..d);
        truth[j] = rng.sample::<f64, _>(StandardNormal);
    }
    let k = h.dot(&phi);
    let noise = Array1::from_shape_fn(m, |_| 0.01 * rng.sample::<f64, _>(StandardNormal));
    let y = k.dot(&truth) + noise;
    let kty_inf = k.t().dot(&y).iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let lam = 0.2 * kty_inf;
    let problem = HqsProblem::new(y, h, phi, lam, 0.0, 1.0)?;
    Ok(Instance { seed, problem, lam })
}

/// Solver settings under which one HQS sweep is an ISTA step with
/// threshold `lam / (2c)`.
pub fn ista_params(problem: &HqsProblem, lam: f64) -> HqsParams {
    let mut p = HqsParams::defaults_for(problem);
    p.tau1 = 0.0;
    p.tau2 = f64::INFINITY;
    p.tau3 = lam / (2.0 * p.c);
    p.omega1 = 0.0;
    p.omega2 = 1.0;
    p.beta_estimator = BetaEstimator::SoftThreshold;
    p.max_iters = 500_000;
    p.tol = 1e-13;
    p
}

pub fn instance_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

#[derive(Clone, Debug)]
pub struct InstanceReport {
    pub index: usize,
    pub seed: u64,
    pub dim: usize,
    pub iterations: usize,
    pub hqs_objective: f64,
    pub oracle_objective: f64,
    pub max_abs_diff: f64,
    pub trace_finite: bool,
    pub error: Option<String>,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub tolerance: f64,
    pub rows: Vec<InstanceReport>,
}

impl SuiteReport {
    pub fn all_passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &InstanceReport> {
        self.rows.iter().filter(|r| !r.passed)
    }

    /// Plain-text table, one row per instance.
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:>4} {:>20} {:>4} {:>8} {:>14} {:>14} {:>10}  status\n",
            "#", "seed", "d", "iters", "hqs_obj", "oracle_obj", "linf"
        );
        for r in &self.rows {
            let status = match (&r.error, r.passed) {
                (Some(e), _) => format!("FAIL ({e})"),
                (None, true) => "pass".to_string(),
                (None, false) if !r.trace_finite => "FAIL (non-finite trace)".to_string(),
                (None, false) => format!("FAIL (linf > {:e})", self.tolerance),
            };
            s.push_str(&format!(
                "{:>4} {:>20} {:>4} {:>8} {:>14.8} {:>14.8} {:>10.3e}  {}\n",
                r.index, r.seed, r.dim, r.iterations, r.hqs_objective, r.oracle_objective,
                r.max_abs_diff, status
            ));
        }
        let passed = self.rows.iter().filter(|r| r.passed).count();
        s.push_str(&format!("{passed}/{} instances passed\n", self.rows.len()));
        s
    }
}

pub fn run_instance(index: usize, seed: u64, tolerance: f64) -> InstanceReport {
    let mut report = InstanceReport {
        index,
        seed,
        dim: 0,
        iterations: 0,
        hqs_objective: f64::NAN,
        oracle_objective: f64::NAN,
        max_abs_diff: f64::NAN,
        trace_finite: false,
        error: None,
        passed: false,
    };
    let inst = match instance(seed) {
        Ok(i) => i,
        Err(e) => {
            report.error = Some(e.to_string());
            return report;
        }
    };
    let p = &inst.problem;
    report.dim = p.dim();
    let params = ista_params(p, inst.lam);
    let alpha0 = Array1::zeros(p.dim());
    let oracle = lasso_cd(p.k(), &p.y, inst.lam);
    let solved = hqs_solve(p, &params, &alpha0);
    match (solved, oracle) {
        (Ok((state, trace)), Ok(reference)) => {
            report.iterations = state.iteration;
            report.trace_finite = trace.iter().all(|v| v.is_finite());
            report.hqs_objective = lasso_objective(p.k(), &p.y, inst.lam, &state.alpha);
            report.oracle_objective = lasso_objective(p.k(), &p.y, inst.lam, &reference);
            report.max_abs_diff = (&state.alpha - &reference)
                .iter()
                .fold(0.0f64, |a, v| a.max(v.abs()));
            report.passed = report.trace_finite && report.max_abs_diff <= tolerance;
        }
        (Err(e), _) | (_, Err(e)) => report.error = Some(e.to_string()),
    }
    report
}

pub fn run_suite(seed: u64, n_instances: usize, tolerance: f64) -> SuiteReport {
    let rows = (0..n_instances)
        .map(|i| run_instance(i, instance_seed(seed, i), tolerance))
        .collect();
    SuiteReport { tolerance, rows }
}
