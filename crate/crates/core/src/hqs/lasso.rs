use ndarray::{Array1, Array2};

use super::shrink;
use crate::error::{Error, Result};

const GAP_TOL: f64 = 1e-10;
const MAX_SWEEPS: usize = 1_000_000;

/// `‖y − Kα‖₂² + lam·‖α‖₁`.
pub fn lasso_objective(k: &Array2<f64>, y: &Array1<f64>, lam: f64, alpha: &Array1<f64>) -> f64 {
    let r = y - &k.dot(alpha);
    r.dot(&r) + lam * alpha.iter().map(|v| v.abs()).sum::<f64>()
}

/// Cyclic coordinate descent for `min ‖y − Kα‖₂² + lam‖α‖₁`, stopped on a
/// duality gap of at most 1e-10 (or, for `lam = 0`, on `‖Kᵀr‖∞ ≤ 1e-10`).
pub fn lasso_cd(k: &Array2<f64>, y: &Array1<f64>, lam: f64) -> Result<Array1<f64>> {
    if lam.is_nan() || lam < 0.0 {
        return Err(Error::invalid(format!("lam must be >= 0, got {lam}")));
    }
    if k.nrows() != y.len() {
        return Err(Error::invalid("K rows must match y length"));
    }
    let d = k.ncols();
    let col_sq: Vec<f64> = (0..d).map(|j| k.column(j).dot(&k.column(j))).collect();
    let mut alpha = Array1::<f64>::zeros(d);
    let mut r = y.clone();
    // In the ½-scaled form the soft threshold is lam/2.
    let mu = lam / 2.0;
    for sweep in 0..MAX_SWEEPS {
        for j in 0..d {
            if col_sq[j] == 0.0 {
                continue;
            }
            let col = k.column(j);
            let old = alpha[j];
            let rho = col.dot(&r) + col_sq[j] * old;
            let new = shrink(rho, mu) / col_sq[j];
            if new != old {
                r.scaled_add(old - new, &col);
                alpha[j] = new;
            }
        }
        if sweep % 4 == 0 && converged(k, y, &r, &alpha, mu) {
            return Ok(alpha);
        }
    }
    Err(Error::NumericalFailure {
        iteration: MAX_SWEEPS,
        message: "coordinate descent did not reach the duality-gap tolerance".into(),
    })
}

fn converged(k: &Array2<f64>, y: &Array1<f64>, r: &Array1<f64>, alpha: &Array1<f64>, mu: f64) -> bool {
    let ktr = k.t().dot(r);
    let ktr_inf = ktr.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if mu == 0.0 {
        return ktr_inf <= GAP_TOL;
    }
    let primal = 0.5 * r.dot(r) + mu * alpha.iter().map(|v| v.abs()).sum::<f64>();
    let theta = r / (ktr_inf / mu).max(1.0);
    let diff = y - &theta;
    let dual = 0.5 * y.dot(y) - 0.5 * diff.dot(&diff);
    // Gap in the unscaled objective is twice the ½-scaled one.
    2.0 * (primal - dual) <= GAP_TOL
}
