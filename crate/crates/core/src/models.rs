//! Additive working models: inverse links and their derivatives.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Link, ModelSpec};

/// Model prediction and derivative of the inverse link at the linear predictor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkEval {
    pub value: f64,
    pub dvalue: f64,
}

/// Which of the working models a coefficient vector belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelRole {
    Selection,
    Treatment,
    Outcome1,
    Outcome0,
    Joint1,
    Joint0,
}

#[inline]
pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Inverse link and derivative at `lp`, probabilities clamped into `[clip, 1-clip]`.
///
/// `clip = 0` disables clamping. No finiteness check; callers on hot paths
/// validate once per dataset.
#[inline]
pub(crate) fn link_eval_clipped(link: Link, lp: f64, clip: f64) -> LinkEval {
    match link {
        Link::Identity => LinkEval { value: lp, dvalue: 1.0 },
        Link::Logit => {
            let p = expit(lp);
            LinkEval { value: p.clamp(clip, 1.0 - clip), dvalue: p * (1.0 - p) }
        }
    }
}

/// Evaluates the inverse link and its derivative.
pub fn eval_link(link: Link, lp: f64) -> Result<LinkEval> {
    if !lp.is_finite() {
        return Err(Error::NonFiniteLinearPredictor);
    }
    Ok(link_eval_clipped(link, lp, 0.0))
}

pub fn link_for(spec: &ModelSpec, which: ModelRole) -> Link {
    match which {
        ModelRole::Selection => spec.selection_link,
        ModelRole::Treatment => spec.treatment_link,
        ModelRole::Outcome1 | ModelRole::Outcome0 => spec.outcome_link,
        ModelRole::Joint1 | ModelRole::Joint0 => Link::Logit,
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Prediction of one working model at covariates `x`.
pub fn predict(spec: &ModelSpec, which: ModelRole, coef: &[f64], x: &[f64], clip: f64) -> Result<LinkEval> {
    if coef.len() != x.len() {
        return Err(Error::DimensionMismatch { expected: x.len(), got: coef.len() });
    }
    let lp = dot(coef, x);
    if !lp.is_finite() {
        return Err(Error::NonFiniteLinearPredictor);
    }
    Ok(link_eval_clipped(link_for(spec, which), lp, clip))
}
