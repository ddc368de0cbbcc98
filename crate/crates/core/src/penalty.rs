//! SCAD penalty derivative and its local quadratic approximation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::system::ScoreVector;
use crate::types::NuisanceParams;

/// Diagonal of the LQA matrix, `q_λ(|ω_j|) / (ε + |ω_j|)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LqaDiagonal {
    pub diag: Vec<f64>,
}

#[inline]
pub(crate) fn scad_q_unchecked(u_abs: f64, lambda: f64, a: f64) -> f64 {
    if lambda == 0.0 {
        0.0
    } else if u_abs < lambda {
        lambda
    } else {
        (a * lambda - u_abs).max(0.0) / (a - 1.0)
    }
}

/// SCAD derivative `q_λ(|u|)`.
pub fn scad_q(u_abs: f64, lambda: f64, a: f64) -> Result<f64> {
    if lambda < 0.0 {
        return Err(Error::NegativeLambda(lambda));
    }
    Ok(scad_q_unchecked(u_abs.abs(), lambda, a))
}

#[inline]
fn sgn(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `Ū^p(ω)`: each score entry plus the penalty of the coefficient at the same position.
///
/// Positions follow the score order `(β, γ, α, τ)` against `ω = (α, τ, β, γ)`,
/// so `λ_η` acts through the first `2d` entries and `λ_μ` through the rest.
/// Intercepts are never penalized.
pub fn penalized_score(u: &ScoreVector, omega: &NuisanceParams, lambda_eta: f64, lambda_mu: f64, a: f64) -> Result<Vec<f64>> {
    let d = omega.d();
    if u.u_beta.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: u.u_beta.len() });
    }
    if lambda_eta < 0.0 || lambda_mu < 0.0 {
        return Err(Error::NegativeLambda(lambda_eta.min(lambda_mu)));
    }
    let ubar = u.concat();
    let w = omega.omega();
    Ok(ubar
        .iter()
        .zip(&w)
        .enumerate()
        .map(|(j, (&uj, &wj))| {
            if j % d == 0 {
                return uj;
            }
            let lam = if j < 2 * d { lambda_eta } else { lambda_mu };
            uj + scad_q_unchecked(wj.abs(), lam, a) * sgn(wj)
        })
        .collect())
}

/// LQA diagonal for one parameter block.
pub fn lqa_diag(omega_block: &[f64], lambda: f64, a: f64, epsilon: f64) -> LqaDiagonal {
    LqaDiagonal {
        diag: omega_block.iter().map(|w| scad_q_unchecked(w.abs(), lambda, a) / (epsilon + w.abs())).collect(),
    }
}

/// LQA diagonal with exempt (intercept) coordinates set to zero.
pub(crate) fn lqa_diag_masked(p: &[f64], lambda: f64, a: f64, epsilon: f64, exempt: &[bool]) -> Vec<f64> {
    p.iter()
        .zip(exempt)
        .map(|(w, &ex)| if ex { 0.0 } else { scad_q_unchecked(w.abs(), lambda, a) / (epsilon + w.abs()) })
        .collect()
}

/// Zeroes slope coefficients below `zero_threshold` in magnitude; intercepts are kept.
pub fn hard_threshold(omega: &NuisanceParams, zero_threshold: f64) -> NuisanceParams {
    let cut = |b: &Vec<f64>| -> Vec<f64> {
        b.iter()
            .enumerate()
            .map(|(j, &v)| if j > 0 && v.abs() < zero_threshold { 0.0 } else { v })
            .collect()
    };
    NuisanceParams { alpha: cut(&omega.alpha), tau: cut(&omega.tau), beta: cut(&omega.beta), gamma: cut(&omega.gamma) }
}

/// Residual of the penalized equation at a thresholded point.
///
/// Nonzero coordinates contribute `|F_j + q(|p_j|) sgn(p_j)|`; a coordinate
/// held at exactly zero solves the equation when `|F_j| <= q(0) = λ`, so it
/// contributes only the excess.
pub(crate) fn zero_crossing_residual(f: &[f64], p: &[f64], lambda: f64, a: f64, exempt: &[bool]) -> Vec<f64> {
    f.iter()
        .zip(p)
        .zip(exempt)
        .map(|((&fj, &pj), &ex)| {
            if ex {
                fj.abs()
            } else if pj == 0.0 {
                (fj.abs() - lambda).max(0.0)
            } else {
                (fj + scad_q_unchecked(pj.abs(), lambda, a) * sgn(pj)).abs()
            }
        })
        .collect()
}
