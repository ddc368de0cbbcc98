//! Data model shared by every stage of the pipeline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Outcome measurement scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeKind {
    Continuous,
    Binary,
}

/// Inverse link of an additive working model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    Identity,
    Logit,
}

/// How the sample-B weights are modelled.
///
/// `Conditional` factors the weight as `P(I_B=1|X) P(T|X, I_B=1)`; `Joint`
/// models `P(I_B=1, T=t|X)` directly for each arm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Parameterization {
    #[default]
    Conditional,
    Joint,
}

/// Link choices for the four working models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub selection_link: Link,
    pub treatment_link: Link,
    pub outcome_link: Link,
    #[serde(default)]
    pub parameterization: Parameterization,
}

impl ModelSpec {
    /// Conditional parameterization with the outcome link implied by `kind`.
    pub fn for_outcome(kind: OutcomeKind) -> Self {
        ModelSpec {
            selection_link: Link::Logit,
            treatment_link: Link::Logit,
            outcome_link: match kind {
                OutcomeKind::Continuous => Link::Identity,
                OutcomeKind::Binary => Link::Logit,
            },
            parameterization: Parameterization::Conditional,
        }
    }

    pub fn joint(kind: OutcomeKind) -> Self {
        ModelSpec {
            parameterization: Parameterization::Joint,
            ..Self::for_outcome(kind)
        }
    }

    pub fn is_joint(&self) -> bool {
        self.parameterization == Parameterization::Joint
    }

    /// Checks the outcome link against the outcome kind.
    pub fn check(&self, kind: OutcomeKind) -> Result<()> {
        let want = Self::for_outcome(kind).outcome_link;
        if self.outcome_link != want {
            return Err(Error::Config(format!(
                "outcome link {:?} does not match {:?} outcome",
                self.outcome_link, kind
            )));
        }
        if self.selection_link != Link::Logit || self.treatment_link != Link::Logit {
            return Err(Error::Config("selection and treatment links must be logit".into()));
        }
        Ok(())
    }
}

/// One unit of the target-population frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitRecord {
    pub i_a: bool,
    pub i_b: bool,
    pub weight_a: Option<f64>,
    /// Covariates with the leading intercept column.
    pub x: Vec<f64>,
    pub t: Option<bool>,
    pub y: Option<f64>,
}

impl UnitRecord {
    pub fn sample_a(weight: f64, x: Vec<f64>) -> Self {
        UnitRecord { i_a: true, i_b: false, weight_a: Some(weight), x, t: None, y: None }
    }

    pub fn sample_b(x: Vec<f64>, t: bool, y: f64) -> Self {
        UnitRecord { i_a: false, i_b: true, weight_a: None, x, t: Some(t), y: Some(y) }
    }

    pub fn with_outcome(mut self, t: bool, y: f64) -> Self {
        self.t = Some(t);
        self.y = Some(y);
        self
    }

    /// Survey weight, zero outside sample A.
    #[inline]
    pub fn d_a(&self) -> f64 {
        if self.i_a {
            self.weight_a.unwrap_or(0.0)
        } else {
            0.0
        }
    }

    #[inline]
    pub fn t_f64(&self) -> f64 {
        match self.t {
            Some(true) => 1.0,
            _ => 0.0,
        }
    }
}

/// A rule broken by a record or by the dataset as a whole.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub index: Option<usize>,
    pub rule: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.index {
            Some(k) if self.rule == "overlap" => write!(f, "overlap at index {k}"),
            Some(k) => write!(f, "{} at index {k}", self.rule),
            None => write!(f, "{}", self.rule),
        }
    }
}

/// Units from sample A and sample B plus the target-population size.
///
/// Units outside both samples never enter a sum, so they need not be
/// materialized; `pop_size` carries them implicitly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CombinedDataset {
    pub records: Vec<UnitRecord>,
    pub pop_size: Option<usize>,
    pub d: usize,
    pub outcome_kind: OutcomeKind,
}

impl CombinedDataset {
    pub fn new(records: Vec<UnitRecord>, pop_size: Option<usize>, outcome_kind: OutcomeKind) -> Self {
        let d = records.first().map_or(0, |r| r.x.len());
        CombinedDataset { records, pop_size, d, outcome_kind }
    }

    pub fn n_a(&self) -> usize {
        self.records.iter().filter(|r| r.i_a).count()
    }

    pub fn n_b(&self) -> usize {
        self.records.iter().filter(|r| r.i_b).count()
    }

    /// Population size used as the divisor of every mean.
    pub fn n_pop(&self) -> Result<f64> {
        derive_pop_size(self).map(|n| n as f64)
    }

    pub fn validate(&self) -> Vec<Violation> {
        validate(self)
    }
}

/// Lists every broken record or dataset invariant; empty when the dataset is well formed.
pub fn validate(ds: &CombinedDataset) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |index: Option<usize>, rule: &str| out.push(Violation { index, rule: rule.to_string() });
    for (k, r) in ds.records.iter().enumerate() {
        let at = Some(k);
        if r.i_a && r.i_b {
            push(at, "overlap");
        }
        match (r.i_a, r.weight_a) {
            (true, None) => push(at, "missing weight in sample A"),
            (true, Some(w)) if !(w >= 1.0) || !w.is_finite() => push(at, "weight below 1 in sample A"),
            (false, Some(_)) => push(at, "weight present outside sample A"),
            _ => {}
        }
        if r.i_b {
            if r.t.is_none() {
                push(at, "missing treatment in sample B");
            }
            if r.y.is_none() {
                push(at, "missing outcome in sample B");
            }
        }
        if let Some(y) = r.y {
            if !y.is_finite() {
                push(at, "non-finite outcome");
            } else if ds.outcome_kind == OutcomeKind::Binary && y != 0.0 && y != 1.0 {
                push(at, "non-binary outcome");
            }
        }
        if r.x.len() != ds.d {
            push(at, "dimension mismatch");
        } else if r.x.first() != Some(&1.0) {
            push(at, "intercept column not 1");
        }
        if r.x.iter().any(|v| !v.is_finite()) {
            push(at, "non-finite covariate");
        }
    }
    if let Some(n) = ds.pop_size {
        if n == 0 || n < ds.n_a() + ds.n_b() {
            push(None, "population size smaller than combined sample size");
        }
    }
    out
}

/// Supplied N, or the rounded sum of sample-A weights.
pub fn derive_pop_size(ds: &CombinedDataset) -> Result<usize> {
    let sum: f64 = ds.records.iter().filter(|r| r.i_a).map(|r| r.weight_a.unwrap_or(0.0)).sum();
    let has_a = ds.records.iter().any(|r| r.i_a);
    if let Some(n) = ds.pop_size {
        if has_a && sum > 0.0 && ((sum - n as f64).abs() / n as f64) > 0.05 {
            log::warn!("supplied N = {n} differs from weight-derived {sum:.1} by more than 5%");
        }
        return Ok(n);
    }
    if !has_a {
        return Err(Error::CannotEstimateN);
    }
    Ok(sum.round() as usize)
}

/// Nuisance coefficients `ω = (α, τ, β, γ)`.
///
/// Under the joint parameterization the `alpha` slot holds `δ1` and the
/// `tau` slot holds `δ0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceParams {
    pub alpha: Vec<f64>,
    pub tau: Vec<f64>,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
}

impl NuisanceParams {
    pub fn zeros(d: usize) -> Self {
        NuisanceParams { alpha: vec![0.0; d], tau: vec![0.0; d], beta: vec![0.0; d], gamma: vec![0.0; d] }
    }

    pub fn d(&self) -> usize {
        self.alpha.len()
    }

    pub fn check_dims(&self, d: usize) -> Result<()> {
        for b in [&self.alpha, &self.tau, &self.beta, &self.gamma] {
            if b.len() != d {
                return Err(Error::DimensionMismatch { expected: d, got: b.len() });
            }
        }
        Ok(())
    }

    pub fn delta1(&self) -> &[f64] {
        &self.alpha
    }

    pub fn delta0(&self) -> &[f64] {
        &self.tau
    }

    /// `η = (α, τ)`.
    pub fn eta(&self) -> Vec<f64> {
        [self.alpha.as_slice(), &self.tau].concat()
    }

    /// `μ = (β, γ)`.
    pub fn mu(&self) -> Vec<f64> {
        [self.beta.as_slice(), &self.gamma].concat()
    }

    pub fn omega(&self) -> Vec<f64> {
        [self.alpha.as_slice(), &self.tau, &self.beta, &self.gamma].concat()
    }

    pub fn set_eta(&mut self, eta: &[f64]) {
        let d = self.d();
        self.alpha.copy_from_slice(&eta[..d]);
        self.tau.copy_from_slice(&eta[d..2 * d]);
    }

    pub fn set_mu(&mut self, mu: &[f64]) {
        let d = self.d();
        self.beta.copy_from_slice(&mu[..d]);
        self.gamma.copy_from_slice(&mu[d..2 * d]);
    }

    pub fn from_omega(omega: &[f64]) -> Self {
        let d = omega.len() / 4;
        NuisanceParams {
            alpha: omega[..d].to_vec(),
            tau: omega[d..2 * d].to_vec(),
            beta: omega[2 * d..3 * d].to_vec(),
            gamma: omega[3 * d..].to_vec(),
        }
    }
}

/// SCAD penalty and solver settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PenaltyConfig {
    pub lambda_eta: f64,
    pub lambda_mu: f64,
    pub a: f64,
    pub epsilon: f64,
    pub zero_threshold: f64,
    pub max_iter: usize,
    pub tol_xi: f64,
    pub prob_clip: f64,
    /// Inner Newton stops once the smoothed penalized residual drops below this.
    pub inner_tol: f64,
    pub inner_max_iter: usize,
    pub max_halvings: usize,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        PenaltyConfig {
            lambda_eta: 0.0,
            lambda_mu: 0.0,
            a: 3.7,
            epsilon: 1e-6,
            zero_threshold: 1e-4,
            max_iter: 50,
            tol_xi: 1e-2,
            prob_clip: 1e-6,
            inner_tol: 1e-6,
            inner_max_iter: 25,
            max_halvings: 10,
        }
    }
}

impl PenaltyConfig {
    pub fn with_lambdas(mut self, lambda_eta: f64, lambda_mu: f64) -> Self {
        self.lambda_eta = lambda_eta;
        self.lambda_mu = lambda_mu;
        self
    }

    /// `λ_ω = max(λ_η, λ_μ)`.
    pub fn lambda_omega(&self) -> f64 {
        self.lambda_eta.max(self.lambda_mu)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidPenalty(m.to_string()));
        if !(self.lambda_eta >= 0.0) || !(self.lambda_mu >= 0.0) {
            return bad("lambdas must be nonnegative");
        }
        if !(self.a > 2.0) {
            return bad("a must exceed 2");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        if !(self.tol_xi > 0.0) || !(self.inner_tol > 0.0) {
            return bad("tolerances must be positive");
        }
        if !(self.prob_clip > 0.0 && self.prob_clip < 0.5) {
            return bad("prob_clip must lie in (0, 0.5)");
        }
        if !(self.zero_threshold > 0.0) {
            return bad("zero_threshold must be positive");
        }
        if self.max_iter == 0 || self.inner_max_iter == 0 {
            return bad("iteration limits must be positive");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec_a(w: f64) -> UnitRecord {
        UnitRecord::sample_a(w, vec![1.0, 0.2])
    }

    #[test]
    fn overlap_is_reported_with_index() {
        let mut r = rec_a(2.0);
        r.i_b = true;
        r.t = Some(true);
        r.y = Some(1.0);
        let ds = CombinedDataset::new(vec![rec_a(2.0), r], Some(10), OutcomeKind::Continuous);
        let v = validate(&ds);
        assert!(v.iter().any(|v| v.to_string() == "overlap at index 1"), "{v:?}");
    }

    #[test]
    fn missing_outcome_in_b() {
        let mut r = UnitRecord::sample_b(vec![1.0, 0.0], true, 1.0);
        r.y = None;
        let ds = CombinedDataset::new(vec![r], Some(5), OutcomeKind::Continuous);
        let v = validate(&ds);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].rule, "missing outcome in sample B");
    }

    #[test]
    fn well_formed_is_clean() {
        let ds = CombinedDataset::new(
            vec![rec_a(3.0), UnitRecord::sample_b(vec![1.0, 1.5], false, 0.3), rec_a(4.0)],
            None,
            OutcomeKind::Continuous,
        );
        assert!(validate(&ds).is_empty());
    }

    #[test]
    fn pop_size_from_weights() {
        let mk = |ws: &[f64]| CombinedDataset::new(ws.iter().map(|&w| rec_a(w)).collect(), None, OutcomeKind::Continuous);
        assert_eq!(derive_pop_size(&mk(&[2.0, 3.0, 5.0])).unwrap(), 10);
        assert_eq!(derive_pop_size(&mk(&[1.0; 7])).unwrap(), 7);
        assert_eq!(derive_pop_size(&mk(&[50.4, 49.8])).unwrap(), 100);
        let mut ds = mk(&[2.0, 3.0]);
        ds.pop_size = Some(42);
        assert_eq!(derive_pop_size(&ds).unwrap(), 42);
        let empty = CombinedDataset::new(vec![UnitRecord::sample_b(vec![1.0], true, 0.0)], None, OutcomeKind::Continuous);
        assert_eq!(derive_pop_size(&empty).unwrap_err().to_string(), "cannot estimate N");
    }

    #[test]
    fn penalty_defaults_are_valid() {
        let c = PenaltyConfig::default();
        c.validate().unwrap();
        assert_eq!(c.a, 3.7);
        assert!(PenaltyConfig { a: 2.0, ..c }.validate().is_err());
        assert!(PenaltyConfig { prob_clip: 0.5, ..c }.validate().is_err());
    }

    #[test]
    fn omega_layout() {
        let p = NuisanceParams { alpha: vec![1.0], tau: vec![2.0], beta: vec![3.0], gamma: vec![4.0] };
        assert_eq!(p.eta(), vec![1.0, 2.0]);
        assert_eq!(p.mu(), vec![3.0, 4.0]);
        assert_eq!(NuisanceParams::from_omega(&p.omega()), p);
    }
}
