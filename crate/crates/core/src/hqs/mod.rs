//! Half-quadratic-splitting solver for
//!
//! ```text
//! min_α ‖y − HΦα‖₂² + λ‖z‖₁ + γ‖α − β‖₁ + η‖z − α‖₂
//! ```
//!
//! alternating `z = S_τ1(α)`, `β = S_τ2(α)`,
//! `v = ω1·z + ω2·Kᵀ(y − Kα)/c + α` and `α = S_τ3(v − β) + β`, with
//! `K = HΦ`. Serves as the reference for what each unfolded stage mimics.

mod lasso;
pub mod suite;

use ndarray::{Array1, Array2};

pub use lasso::{lasso_cd, lasso_objective};

use crate::error::{Error, Result};

/// Elementwise `sign(x)·max(|x| − τ, 0)`.
pub fn soft_threshold(x: &Array1<f64>, tau: f64) -> Result<Array1<f64>> {
    if tau.is_nan() || tau < 0.0 {
        return Err(Error::invalid(format!("threshold must be >= 0, got {tau}")));
    }
    Ok(x.mapv(|v| shrink(v, tau)))
}

#[inline]
pub(crate) fn shrink(v: f64, tau: f64) -> f64 {
    let m = v.abs() - tau;
    if m > 0.0 {
        m.copysign(v)
    } else {
        0.0
    }
}

#[derive(Clone, Debug)]
pub struct HqsProblem {
    pub y: Array1<f64>,
    pub h: Array2<f64>,
    pub phi: Array2<f64>,
    pub lambda: f64,
    pub gamma: f64,
    pub eta: f64,
    k: Array2<f64>,
}

impl HqsProblem {
    pub fn new(
        y: Array1<f64>,
        h: Array2<f64>,
        phi: Array2<f64>,
        lambda: f64,
        gamma: f64,
        eta: f64,
    ) -> Result<Self> {
        if h.nrows() != y.len() {
            return Err(Error::invalid(format!(
                "H has {} rows but y has length {}",
                h.nrows(),
                y.len()
            )));
        }
        if h.ncols() != phi.nrows() {
            return Err(Error::invalid(format!(
                "H is {}x{} but Phi is {}x{}",
                h.nrows(),
                h.ncols(),
                phi.nrows(),
                phi.ncols()
            )));
        }
        if !(lambda >= 0.0 && gamma >= 0.0) {
            return Err(Error::invalid("lambda and gamma must be >= 0"));
        }
        if !(eta > 0.0) {
            return Err(Error::invalid("eta must be > 0"));
        }
        let k = h.dot(&phi);
        Ok(HqsProblem {
            y,
            h,
            phi,
            lambda,
            gamma,
            eta,
            k,
        })
    }

    /// The effective operator `K = HΦ`.
    pub fn k(&self) -> &Array2<f64> {
        &self.k
    }

    pub fn dim(&self) -> usize {
        self.k.ncols()
    }

    fn check_len(&self, v: &Array1<f64>, what: &str) -> Result<()> {
        if v.len() != self.dim() {
            return Err(Error::invalid(format!(
                "{what} has length {} but the dictionary has {} atoms",
                v.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// `Kᵀ(y − Kα)`.
    pub fn gradient_term(&self, alpha: &Array1<f64>) -> Array1<f64> {
        let r = &self.y - &self.k.dot(alpha);
        self.k.t().dot(&r)
    }
}

/// Largest squared singular value of `k`, by power iteration on `KᵀK`.
pub fn spectral_norm_sq(k: &Array2<f64>, iters: usize) -> f64 {
    let d = k.ncols();
    if d == 0 {
        return 0.0;
    }
    let mut v = Array1::from_elem(d, 1.0 / (d as f64).sqrt());
    let mut est = 0.0;
    for _ in 0..iters {
        let w = k.t().dot(&k.dot(&v));
        let n = w.dot(&w).sqrt();
        if n == 0.0 {
            return 0.0;
        }
        est = v.dot(&w);
        v = w / n;
    }
    let w = k.t().dot(&k.dot(&v));
    est.max(v.dot(&w))
}

/// How `β` is obtained from the current `α`.
#[derive(Clone, Debug, PartialEq)]
pub enum BetaEstimator {
    /// `β = S_τ2(α)`.
    SoftThreshold,
    /// A fixed similarity target independent of `α`.
    Constant(Array1<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct HqsParams {
    pub tau1: f64,
    pub tau2: f64,
    pub tau3: f64,
    pub omega1: f64,
    pub omega2: f64,
    pub c: f64,
    pub beta_estimator: BetaEstimator,
    pub max_iters: usize,
    pub tol: f64,
}

impl HqsParams {
    /// `c = 1.05·σ_max(K)²` (50 power iterations), `ω = (0.5, 1.0)`,
    /// `τ1 = τ2 = τ3 = 0.01·‖Kᵀy‖∞`, `tol = 1e-8`, 500 iterations.
    pub fn defaults_for(problem: &HqsProblem) -> Self {
        let c = 1.05 * spectral_norm_sq(problem.k(), 50);
        let kty = problem.k().t().dot(&problem.y);
        let tau = 0.01 * kty.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        HqsParams {
            tau1: tau,
            tau2: tau,
            tau3: tau,
            omega1: 0.5,
            omega2: 1.0,
            c: if c > 0.0 { c } else { 1.0 },
            beta_estimator: BetaEstimator::SoftThreshold,
            max_iters: 500,
            tol: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, t) in [("tau1", self.tau1), ("tau2", self.tau2), ("tau3", self.tau3)] {
            if t.is_nan() || t < 0.0 {
                return Err(Error::invalid(format!("{name} must be >= 0")));
            }
        }
        if !(self.c > 0.0) {
            return Err(Error::invalid("c must be > 0"));
        }
        if self.max_iters == 0 {
            return Err(Error::invalid("max_iters must be positive"));
        }
        if !(self.tol > 0.0) {
            return Err(Error::invalid("tol must be > 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HqsState {
    pub alpha: Array1<f64>,
    pub beta: Array1<f64>,
    pub z: Array1<f64>,
    pub v: Array1<f64>,
    pub iteration: usize,
    pub objective: f64,
}

impl HqsState {
    /// Starting point with `β = z = v = α₀`.
    pub fn initial(problem: &HqsProblem, alpha0: Array1<f64>) -> Result<Self> {
        problem.check_len(&alpha0, "alpha0")?;
        let objective = objective(problem, &alpha0, &alpha0, &alpha0)?;
        Ok(HqsState {
            beta: alpha0.clone(),
            z: alpha0.clone(),
            v: alpha0.clone(),
            alpha: alpha0,
            iteration: 0,
            objective,
        })
    }
}

/// `‖y − Kα‖₂² + λ‖z‖₁ + γ‖α − β‖₁ + η‖z − α‖₂`.
pub fn objective(
    problem: &HqsProblem,
    alpha: &Array1<f64>,
    beta: &Array1<f64>,
    z: &Array1<f64>,
) -> Result<f64> {
    problem.check_len(alpha, "alpha")?;
    problem.check_len(beta, "beta")?;
    problem.check_len(z, "z")?;
    let r = &problem.y - &problem.k.dot(alpha);
    let fidelity = r.dot(&r);
    let sparsity = z.iter().map(|v| v.abs()).sum::<f64>();
    let similarity = (alpha - beta).iter().map(|v| v.abs()).sum::<f64>();
    let coupling = (z - alpha).iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(fidelity
        + problem.lambda * sparsity
        + problem.gamma * similarity
        + problem.eta * coupling)
}

/// One sweep of the four updates.
pub fn hqs_step(problem: &HqsProblem, params: &HqsParams, state: &HqsState) -> Result<HqsState> {
    problem.check_len(&state.alpha, "alpha")?;
    let alpha = &state.alpha;
    let z = soft_threshold(alpha, params.tau1)?;
    let beta = match &params.beta_estimator {
        BetaEstimator::SoftThreshold => soft_threshold(alpha, params.tau2)?,
        BetaEstimator::Constant(b) => {
            problem.check_len(b, "constant beta")?;
            b.clone()
        }
    };
    let grad = problem.gradient_term(alpha);
    let v = &z * params.omega1 + &grad * (params.omega2 / params.c) + alpha;
    let shifted = soft_threshold(&(&v - &beta), params.tau3)?;
    let alpha_next = shifted + &beta;
    let objective = objective(problem, &alpha_next, &beta, &z)?;
    Ok(HqsState {
        alpha: alpha_next,
        beta,
        z,
        v,
        iteration: state.iteration + 1,
        objective,
    })
}

/// Iterates [`hqs_step`] until `‖Δα‖₂ < tol` or `max_iters`; returns the
/// final state and the objective after every step.
pub fn hqs_solve(
    problem: &HqsProblem,
    params: &HqsParams,
    alpha0: &Array1<f64>,
) -> Result<(HqsState, Vec<f64>)> {
    params.validate()?;
    let mut state = HqsState::initial(problem, alpha0.clone())?;
    let mut trace = Vec::new();
    for _ in 0..params.max_iters {
        let next = hqs_step(problem, params, &state)?;
        if !next.objective.is_finite() || next.alpha.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalFailure {
                iteration: next.iteration,
                message: "non-finite iterate".into(),
            });
        }
        let delta = (&next.alpha - &state.alpha)
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        trace.push(next.objective);
        state = next;
        if delta < params.tol {
            break;
        }
    }
    Ok((state, trace))
}

#[cfg(test)]
mod tests;
