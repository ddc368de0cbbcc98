//! Standard errors: the `V̂1 + V̂2` decomposition for the bias-reduced DR
//! estimator and sandwich variances for stacked estimating equations.
//!
//! Every variance here estimates `Var(θ̂)` directly.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{EstimatorKind, StackFit};
use crate::linalg::{ksum, solve_with_jitter, x_b};
use crate::models::link_eval_clipped;
use crate::penalty::lqa_diag_masked;
use crate::solver::Support;
use crate::system::{weights, Prepared, DEFAULT_CLIP};
use crate::types::{CombinedDataset, ModelSpec, NuisanceParams, PenaltyConfig};

/// Pieces of the DR variance, each on the `Var(θ̂)` scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceParts {
    pub v1: f64,
    pub v2: f64,
    pub s1: f64,
    pub s2: f64,
    pub s3: f64,
    pub s5: f64,
    pub s6: f64,
}

/// Solver summary attached to a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub lambdas: Option<(f64, f64)>,
    pub support: Option<Support>,
    pub iterations: usize,
    pub converged: bool,
    pub residual_inf: f64,
    /// Fitted nuisance coefficients, when the fit produces a full `ω̂`.
    pub coefficients: Option<NuisanceParams>,
}

/// Point estimate with a 95% Wald interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AteReport {
    pub estimator: EstimatorKind,
    pub penalized: bool,
    pub theta_hat: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub variance_parts: Option<VarianceParts>,
    pub n_used: usize,
    #[serde(rename = "N")]
    pub n_pop: u64,
    pub diagnostics: Option<FitDiagnostics>,
}

pub const Z_95: f64 = 1.96;

impl AteReport {
    pub fn new(estimator: EstimatorKind, theta_hat: f64, se: f64, n_used: usize, n_pop: f64) -> Self {
        AteReport {
            estimator,
            penalized: false,
            theta_hat,
            se,
            ci_low: theta_hat - Z_95 * se,
            ci_high: theta_hat + Z_95 * se,
            variance_parts: None,
            n_used,
            n_pop: n_pop.round() as u64,
            diagnostics: None,
        }
    }

    pub(crate) fn from_fit(fit: &StackFit, kind: EstimatorKind, se: f64, penalized: bool) -> Self {
        let mut r = AteReport::new(kind, fit.theta, se, fit.prep.n_units(), fit.prep.n_pop);
        r.penalized = penalized;
        r.diagnostics = Some(fit.diagnostics.clone());
        r
    }

    pub fn covers(&self, truth: f64) -> bool {
        self.ci_low <= truth && truth <= self.ci_high
    }
}

fn outcome_means(prep: &Prepared, x: &DMatrix<f64>, coef: &[f64], spec: &ModelSpec) -> Vec<f64> {
    x_b(x, coef).into_iter().map(|l| link_eval_clipped(spec.outcome_link, l, prep.clip).value).collect()
}

pub(crate) fn v1_prepared(prep: &Prepared, w: &NuisanceParams, spec: &ModelSpec) -> f64 {
    let g1 = outcome_means(prep, &prep.a.x, &w.beta, spec);
    let g0 = outcome_means(prep, &prep.a.x, &w.gamma, spec);
    let s = ksum((0..prep.n_a()).map(|i| {
        let d = prep.a.d_a[i];
        d * (d - 1.0) * (g1[i] - g0[i]).powi(2)
    }));
    (s / (prep.n_pop * prep.n_pop)).max(0.0)
}

/// Design-based variance of the sample-A Horvitz-Thompson part.
pub fn v1_hat(ds: &CombinedDataset, mu_hat: &[f64], spec: &ModelSpec) -> Result<f64> {
    if mu_hat.len() != 2 * ds.d {
        return Err(Error::DimensionMismatch { expected: 2 * ds.d, got: mu_hat.len() });
    }
    let prep = Prepared::new(ds, DEFAULT_CLIP)?;
    let mut w = NuisanceParams::zeros(ds.d);
    w.set_mu(mu_hat);
    Ok(v1_prepared(&prep, &w, spec))
}

/// `V̂2` and its parts; the total is floored at zero.
pub(crate) fn v2_prepared(prep: &Prepared, w: &NuisanceParams, theta: f64, spec: &ModelSpec) -> VarianceParts {
    let n2 = prep.n_pop * prep.n_pop;
    let g1a = outcome_means(prep, &prep.a.x, &w.beta, spec);
    let g0a = outcome_means(prep, &prep.a.x, &w.gamma, spec);
    let s3 = ksum((0..prep.n_a()).map(|i| prep.a.d_a[i] * (g1a[i] - g0a[i] - theta).powi(2))) / n2;
    let arm_parts = |treated: bool| -> (f64, f64) {
        let arm = if treated { &prep.b1 } else { &prep.b0 };
        let g1 = outcome_means(prep, &arm.x, &w.beta, spec);
        let g0 = outcome_means(prep, &arm.x, &w.gamma, spec);
        let la = x_b(&arm.x, &w.alpha);
        let lb = x_b(&arm.x, &w.tau);
        let mut sq = Vec::with_capacity(arm.y.len());
        let mut cross = Vec::with_capacity(arm.y.len());
        for i in 0..arm.y.len() {
            let wt = weights(spec.parameterization, la[i], lb[i], prep.clip);
            let e = if treated { wt.w1 * (arm.y[i] - g1[i]) } else { wt.w0 * (arm.y[i] - g0[i]) };
            sq.push(e * e);
            cross.push(e * (g1[i] - g0[i] - theta));
        }
        (ksum(sq) / n2, 2.0 * ksum(cross) / n2)
    };
    let (s1, s5) = arm_parts(true);
    let (s2, c0) = arm_parts(false);
    let s6 = -c0;
    let total = s1 + s2 + s3 + s5 + s6;
    if total < 0.0 {
        log::warn!("negative V2 estimate {total:e} floored at 0");
    }
    VarianceParts { v1: 0.0, v2: total.max(0.0), s1, s2, s3, s5, s6 }
}

/// `V̂2` parts at the fitted `ω̂` and `θ̂`.
pub fn v2_hat(ds: &CombinedDataset, omega_hat: &NuisanceParams, theta_hat: f64, spec: &ModelSpec) -> Result<VarianceParts> {
    omega_hat.check_dims(ds.d)?;
    let prep = Prepared::new(ds, DEFAULT_CLIP)?;
    Ok(v2_prepared(&prep, omega_hat, theta_hat, spec))
}

pub(crate) fn dr_se_prepared(prep: &Prepared, w: &NuisanceParams, theta: f64, spec: &ModelSpec, kind: EstimatorKind) -> AteReport {
    let mut parts = v2_prepared(prep, w, theta, spec);
    parts.v1 = v1_prepared(prep, w, spec);
    let se = (parts.v1 + parts.v2).sqrt();
    let mut r = AteReport::new(kind, theta, se, prep.n_units(), prep.n_pop);
    r.variance_parts = Some(parts);
    r
}

/// Standard error `√(V̂1 + V̂2)` of the bias-reduced DR estimator, with its Wald interval.
pub fn dr_se(ds: &CombinedDataset, omega_hat: &NuisanceParams, theta_hat: f64, spec: &ModelSpec) -> Result<AteReport> {
    omega_hat.check_dims(ds.d)?;
    let prep = Prepared::new(ds, DEFAULT_CLIP)?;
    let kind = if spec.is_joint() { EstimatorKind::DrJoint } else { EstimatorKind::DrCombined };
    Ok(dr_se_prepared(&prep, omega_hat, theta_hat, spec, kind))
}

/// Sandwich covariance of `(θ̂, ω̂)` and the standard error of `θ̂`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sandwich {
    pub cov: DMatrix<f64>,
    pub se: f64,
}

/// Gradient of `N⁻¹ Σ terms` in the nuisance coordinates, by central differences.
fn theta_gradient(fit: &StackFit) -> Vec<f64> {
    let n = fit.prep.n_pop;
    let mut q = fit.p.clone();
    (0..q.len())
        .map(|j| {
            let h = 1e-6 * fit.p[j].abs().max(1.0);
            q[j] = fit.p[j] + h;
            let up = ksum(fit.terms(&q)) / n;
            q[j] = fit.p[j] - h;
            let dn = ksum(fit.terms(&q)) / n;
            q[j] = fit.p[j];
            (up - dn) / (2.0 * h)
        })
        .collect()
}

fn phantoms(prep: &Prepared) -> f64 {
    (prep.n_pop - prep.n_units() as f64).max(0.0)
}

/// `N⁻¹ A⁻¹ B A⁻ᵀ` for the stack `ψ = (o_i − θ, U_i)`.
///
/// Units outside both samples contribute `ψ = (−θ, 0, …)` to `B`.
pub fn sandwich_unpenalized(fit: &StackFit) -> Result<Sandwich> {
    let prep = &fit.prep;
    let n = prep.n_pop;
    let sys = fit.system();
    let u = sys.unit_scores(&fit.p)?;
    let k = u.ncols();
    let terms = fit.terms(&fit.p);
    let mut psi = DMatrix::zeros(u.nrows(), k + 1);
    for i in 0..u.nrows() {
        psi[(i, 0)] = terms[i] - fit.theta;
    }
    psi.view_mut((0, 1), (u.nrows(), k)).copy_from(&u);
    let mut b = psi.tr_mul(&psi);
    b[(0, 0)] += phantoms(prep) * fit.theta * fit.theta;
    b /= n;
    let mut a = DMatrix::zeros(k + 1, k + 1);
    a[(0, 0)] = -1.0;
    for (j, g) in theta_gradient(fit).into_iter().enumerate() {
        a[(0, j + 1)] = g;
    }
    a.view_mut((1, 1), (k, k)).copy_from(&sys.jacobian(&fit.p)?);
    let sv = a.clone().singular_values();
    let (smax, smin) = (sv.max(), sv.min());
    let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !(cond < 1e14) {
        return Err(Error::SingularSandwich { cond });
    }
    let ainv = a.try_inverse().ok_or(Error::SingularSandwich { cond })?;
    let v = &ainv * b * ainv.transpose() / n;
    let cov = (&v + v.transpose()) * 0.5;
    let se = cov[(0, 0)].max(0.0).sqrt();
    Ok(Sandwich { cov, se })
}

/// Penalized sandwich: `N⁻² Σ [φ_i − aᵀ(J + E_N)⁻¹ U_i]²` with the LQA
/// diagonal `E_N` over the penalized coordinates.
pub fn sandwich_penalized(fit: &StackFit, config: &PenaltyConfig) -> Result<f64> {
    let prep = &fit.prep;
    let n = prep.n_pop;
    let sys = fit.system();
    let u = sys.unit_scores(&fit.p)?;
    let mut m = sys.jacobian(&fit.p)?;
    let e = lqa_diag_masked(&fit.p, fit.lambda, config.a, config.epsilon, sys.exempt());
    for (j, ej) in e.iter().enumerate() {
        m[(j, j)] += ej;
    }
    let a = DVector::from_vec(theta_gradient(fit));
    let b = solve_with_jitter(&m.transpose(), &a)?;
    let corr = &u * &b;
    let terms = fit.terms(&fit.p);
    let s = ksum((0..terms.len()).map(|i| (terms[i] - fit.theta - corr[i]).powi(2)));
    let var = (s + phantoms(prep) * fit.theta * fit.theta) / (n * n);
    Ok(var.max(0.0).sqrt())
}
