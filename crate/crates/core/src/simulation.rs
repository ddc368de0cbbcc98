//! Monte-Carlo designs: conditional Cases 1-8 (continuous and binary), the
//! joint-weighting Cases S1-S4, replication orchestration and metrics.
//!
//! Randomness comes from ChaCha8 streams keyed by a per-replicate seed, so a
//! replicate's output does not depend on how many run concurrently.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{estimate_set, EstimateConfig, EstimatorKind, OracleSupport};
use crate::models::expit;
use crate::solver::Support;
use crate::types::{CombinedDataset, NuisanceParams, OutcomeKind, UnitRecord};

/// Whether a generating model is linear in the covariates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Form {
    Linear,
    Nonlinear,
}

impl Form {
    fn from_flag(correct: bool) -> Self {
        if correct {
            Form::Linear
        } else {
            Form::Nonlinear
        }
    }

    pub fn is_linear(self) -> bool {
        self == Form::Linear
    }
}

/// Generating mechanism for membership and treatment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Design {
    /// Selection `P(I_B = 1 | X)` and treatment `P(T = 1 | X)` models, normal covariates.
    Conditional { om: Form, sm: Form, tm: Form },
    /// Joint weighting models `P(I_B = 1, T = t | X)`, gamma covariates.
    Joint { om: Form, wm: Form },
}

impl Design {
    pub fn is_joint(self) -> bool {
        matches!(self, Design::Joint { .. })
    }

    pub fn outcome_form(self) -> Form {
        match self {
            Design::Conditional { om, .. } | Design::Joint { om, .. } => om,
        }
    }

    /// Correct specification of the `(α, τ, β, γ)` working models.
    pub fn correct(self) -> [bool; 4] {
        match self {
            Design::Conditional { om, sm, tm } => [sm.is_linear(), tm.is_linear(), om.is_linear(), om.is_linear()],
            Design::Joint { om, wm } => [wm.is_linear(), wm.is_linear(), om.is_linear(), om.is_linear()],
        }
    }

    pub fn block_names(self) -> [&'static str; 4] {
        if self.is_joint() {
            ["delta1", "delta0", "beta", "gamma"]
        } else {
            ["alpha", "tau", "beta", "gamma"]
        }
    }
}

/// One simulation scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseSpec {
    pub case_id: String,
    pub outcome_kind: OutcomeKind,
    pub design: Design,
    /// Coefficients of the linear generating forms, full width.
    pub truth: NuisanceParams,
    /// True predictor columns per model (intercept included as column 0).
    pub support: OracleSupport,
    pub n_pop: usize,
    pub p_a: f64,
    /// Covariates excluding the intercept.
    pub d: usize,
    pub true_theta: f64,
    pub theta_source: String,
}

pub const CASE_IDS: [&str; 24] = [
    "1", "2", "3", "4", "5", "6", "7", "8", "1b", "2b", "3b", "4b", "5b", "6b", "7b", "8b", "S1", "S2", "S3", "S4", "S1b", "S2b", "S3b", "S4b",
];

pub const FULL_N: usize = 50_000;
pub const DESK_N: usize = 20_000;
pub const ORACLE_DRAWS: usize = 1_000_000;
const ORACLE_SEED: u64 = 0x5eed_0a7e;

fn padded(d: usize, head: &[f64]) -> Vec<f64> {
    let mut v = vec![0.0; d + 1];
    v[..head.len()].copy_from_slice(head);
    v
}

impl CaseSpec {
    /// Scenario by id: `1`..`8`, `1b`..`8b`, `S1`..`S4`, `S1b`..`S4b` (case-insensitive).
    pub fn from_id(id: &str) -> Result<Self> {
        let unknown = || Error::Config(format!("unknown case '{id}'; valid ids: {}", CASE_IDS.join(", ")));
        let norm = id.trim().to_ascii_lowercase();
        let (body, kind) = match norm.strip_suffix('b') {
            Some(b) => (b, OutcomeKind::Binary),
            None => (norm.as_str(), OutcomeKind::Continuous),
        };
        let (joint, num) = match body.strip_prefix('s') {
            Some(n) => (true, n),
            None => (false, body),
        };
        let k: usize = num.parse().map_err(|_| unknown())?;
        let design = if joint {
            if !(1..=4).contains(&k) {
                return Err(unknown());
            }
            Design::Joint { om: Form::from_flag(k <= 2), wm: Form::from_flag(k % 2 == 1) }
        } else {
            if !(1..=8).contains(&k) {
                return Err(unknown());
            }
            let (om, sm, tm) = [(1, 1, 1), (1, 0, 1), (1, 1, 0), (1, 0, 0), (0, 1, 1), (0, 0, 1), (0, 1, 0), (0, 0, 0)][k - 1];
            Design::Conditional { om: Form::from_flag(om == 1), sm: Form::from_flag(sm == 1), tm: Form::from_flag(tm == 1) }
        };
        let canonical = format!("{}{}{}", if joint { "S" } else { "" }, k, if kind == OutcomeKind::Binary { "b" } else { "" });
        Ok(Self::build(canonical, kind, design))
    }

    fn build(case_id: String, outcome_kind: OutcomeKind, design: Design) -> Self {
        let d = 50;
        let (truth, support) = true_models(d, outcome_kind, design);
        let (true_theta, theta_source) = true_theta(d, outcome_kind, design);
        CaseSpec { case_id, outcome_kind, design, truth, support, n_pop: FULL_N, p_a: 0.02, d, true_theta, theta_source }
    }

    pub fn with_n(mut self, n_pop: usize) -> Self {
        self.n_pop = n_pop;
        self
    }

    pub fn desk_scale(self) -> Self {
        self.with_n(DESK_N)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p_a > 0.0 && self.p_a < 1.0) {
            return Err(Error::Config(format!("p_A must lie in (0, 1), got {}", self.p_a)));
        }
        if self.n_pop == 0 {
            return Err(Error::Config("population size must be positive".into()));
        }
        Ok(())
    }

    /// Estimator whose fit supplies the selection and MSE metrics.
    pub fn primary_estimator(&self) -> EstimatorKind {
        if self.design.is_joint() {
            EstimatorKind::DrJoint
        } else {
            EstimatorKind::DrCombined
        }
    }

    /// Estimators compared in each replicate.
    pub fn default_estimators(&self) -> Vec<EstimatorKind> {
        use EstimatorKind::*;
        if self.design.is_joint() {
            vec![DrJoint, DrCombined, OrCombined, IpwCombined, NaiveNonprob]
        } else {
            vec![DrCombined, OrCombined, IpwCombined, NaiveNonprob, OracleDr]
        }
    }
}

impl FromStr for CaseSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        CaseSpec::from_id(s)
    }
}

impl fmt::Display for CaseSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "case {} (N = {}, p_A = {})", self.case_id, self.n_pop, self.p_a)
    }
}

fn true_models(d: usize, kind: OutcomeKind, design: Design) -> (NuisanceParams, OracleSupport) {
    let binary = kind == OutcomeKind::Binary;
    match design {
        Design::Conditional { .. } => {
            let (beta, gamma) = if binary {
                ([-0.5, 1.5, 0.5, 0.5, 0.5, 0.5], [-1.0, 0.5, 0.5, 0.5, 0.5, 0.5])
            } else {
                ([2.0, 3.0, 1.0, 1.0, 1.0, 1.0], [1.0, 1.0, 1.0, 1.0, 1.0, 1.0])
            };
            let truth = NuisanceParams {
                alpha: padded(d, &[-2.3, 0.5, 0.5, 0.5]),
                tau: padded(d, &[-1.0, -0.5, -0.5, -0.5]),
                beta: padded(d, &beta),
                gamma: padded(d, &gamma),
            };
            let support = OracleSupport { alpha: vec![0, 1, 2, 3], tau: vec![0, 1, 2, 3], beta: (0..6).collect(), gamma: (0..6).collect() };
            (truth, support)
        }
        Design::Joint { .. } => {
            let (beta, gamma): (&[f64], &[f64]) =
                if binary { (&JOINT_BETA_BIN, &JOINT_GAMMA_BIN) } else { (&JOINT_BETA_CONT, &JOINT_GAMMA_CONT) };
            let truth = NuisanceParams { alpha: padded(d, &DELTA1_A), tau: padded(d, &DELTA0_A), beta: padded(d, beta), gamma: padded(d, gamma) };
            let nz = |v: &[f64]| v.iter().enumerate().filter(|(_, c)| **c != 0.0).map(|(j, _)| j).collect::<Vec<_>>();
            let support = OracleSupport { alpha: vec![0, 1, 2, 3], tau: vec![0, 1, 2, 3], beta: nz(beta), gamma: nz(gamma) };
            (truth, support)
        }
    }
}

const DELTA1_A: [f64; 4] = [-3.4, 1.0, 0.5, -0.5];
const DELTA0_A: [f64; 4] = [-2.0, -1.0, -0.5, -0.5];
const DELTA1_B: [f64; 4] = [-1.0, 0.5, 0.5, -0.5];
const DELTA0_B: [f64; 4] = [-0.5, -0.5, -0.5, 0.5];
const JOINT_BETA_CONT: [f64; 6] = [-0.5, 1.3, 0.3, 0.0, 1.0, 1.0];
const JOINT_GAMMA_CONT: [f64; 6] = [-0.5, 0.3, 0.0, 0.0, 1.0, 1.0];
const JOINT_BETA_BIN: [f64; 5] = [-1.5, 0.5, 0.5, 0.5, 0.5];
const JOINT_GAMMA_BIN: [f64; 5] = [-2.0, 0.3, 0.3, 0.5, 0.5];

fn dot(x: &[f64], c: &[f64]) -> f64 {
    c.iter().zip(x).map(|(a, b)| a * b).sum()
}

fn indicator(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// Mean outcomes (or success probabilities) under control and treatment.
fn outcome_means(kind: OutcomeKind, design: Design, x: &[f64]) -> (f64, f64) {
    let linear = design.outcome_form().is_linear();
    match design {
        Design::Conditional { .. } => {
            let f = |v: f64| if linear { v } else { v.abs() };
            let rest: f64 = (2..=5).map(|j| f(x[j])).sum();
            match kind {
                OutcomeKind::Continuous => {
                    let m0 = 1.0 + f(x[1]) + rest;
                    (m0, m0 + 1.0 + 2.0 * f(x[1]))
                }
                OutcomeKind::Binary => {
                    let l0 = if linear { -1.0 } else { -3.0 } + 0.5 * f(x[1]) + 0.5 * rest;
                    (expit(l0), expit(l0 + 0.5 + f(x[1])))
                }
            }
        }
        Design::Joint { .. } => match kind {
            OutcomeKind::Continuous => {
                let (l1, l0) = (dot(x, &JOINT_BETA_CONT), dot(x, &JOINT_GAMMA_CONT));
                if linear {
                    (l0, l1)
                } else {
                    ((l0 * l0).ln(), (l1 * l1).ln())
                }
            }
            OutcomeKind::Binary => {
                let (l1, l0) = (dot(x, &JOINT_BETA_BIN), dot(x, &JOINT_GAMMA_BIN));
                if linear {
                    (expit(l0), expit(l1))
                } else {
                    (expit(l0 * l0), expit(l1 * l1))
                }
            }
        },
    }
}

fn treat_prob(tm: Form, x: &[f64]) -> f64 {
    let l = match tm {
        Form::Linear => -1.0 - 0.5 * (x[1] + x[2] + x[3]),
        Form::Nonlinear => -1.0 - 0.5 * x[1] * x[1] - 0.5 * x[2] * x[2] - 0.5 * indicator(x[3] > 0.5),
    };
    expit(l)
}

fn select_prob(sm: Form, x: &[f64]) -> f64 {
    let l = match sm {
        Form::Linear => -2.3 + 0.5 * (x[1] + x[2] + x[3]),
        Form::Nonlinear => {
            let k = indicator(x[1] > 1.0) + indicator(x[2] > 1.0) + indicator(x[3] > 1.0);
            -3.2 + k * k
        }
    };
    expit(l)
}

/// `(w1, w0)`: probabilities of entering B treated and untreated.
fn joint_probs(wm: Form, x: &[f64]) -> Result<(f64, f64)> {
    let (w1, w0) = match wm {
        Form::Linear => (expit(dot(x, &DELTA1_A)), expit(dot(x, &DELTA0_A))),
        Form::Nonlinear => {
            let (a, b) = (dot(x, &DELTA1_B), dot(x, &DELTA0_B));
            (expit(a * a - 4.2), expit(b * b - 4.0))
        }
    };
    let s = w1 + w0;
    if s > 1.0 {
        if wm == Form::Linear {
            return Err(Error::Numerical(format!("invalid joint probabilities: w1 + w0 = {s}")));
        }
        // the quadratic forms can exceed one jointly; rescale onto the simplex
        return Ok((w1 / s, w0 / s));
    }
    Ok((w1, w0))
}

fn covariate_row<R: Rng>(rng: &mut R, joint: bool, d: usize, gamma: &Gamma<f64>, row: &mut [f64]) {
    row[0] = 1.0;
    for v in row[1..=d].iter_mut() {
        *v = if joint { gamma.sample(rng) } else { rng.sample(StandardNormal) };
    }
}

fn true_theta(d: usize, kind: OutcomeKind, design: Design) -> (f64, String) {
    let linear = design.outcome_form().is_linear();
    match (kind, design.is_joint()) {
        (OutcomeKind::Continuous, false) if linear => (1.0, "analytic: E(1 + 2 X1) with X1 ~ N(0, 1)".into()),
        (OutcomeKind::Continuous, false) => {
            (1.0 + 2.0 * (2.0 / std::f64::consts::PI).sqrt(), "analytic: 1 + 2 E|X1| = 1 + 2 sqrt(2 / pi)".into())
        }
        (OutcomeKind::Continuous, true) if linear => (0.65, "analytic: E(X1) + 0.3 E(X2) with gamma(0.5, 1) covariates".into()),
        _ => {
            let v = oracle_theta(d, kind, design, ORACLE_DRAWS, ORACLE_SEED);
            (v, format!("Monte-Carlo oracle: mean of E(Y(1) - Y(0) | X) over {ORACLE_DRAWS} draws"))
        }
    }
}

/// Mean of `E(Y(1) − Y(0) | X)` over `draws` covariate vectors.
pub fn oracle_theta(d: usize, kind: OutcomeKind, design: Design, draws: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gamma = Gamma::new(0.5, 1.0).expect("valid gamma");
    // only the leading covariates enter the outcome models
    let used = 5.min(d);
    let mut row = vec![0.0; used + 1];
    let mut acc = crate::linalg::KahanSum::default();
    for _ in 0..draws {
        covariate_row(&mut rng, design.is_joint(), used, &gamma, &mut row);
        let (m0, m1) = outcome_means(kind, design, &row);
        acc.add(m1 - m0);
    }
    acc.value() / draws as f64
}

/// A finite population with both potential outcomes.
#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    /// Columns including the intercept.
    pub cols: usize,
    /// Row-major covariates.
    pub x: Vec<f64>,
    pub t: Vec<bool>,
    pub y: Vec<f64>,
    pub y1: Vec<f64>,
    pub y0: Vec<f64>,
    /// `P(I_B = 1 | X)` for units outside sample A.
    pub sel_prob: Vec<f64>,
}

impl Population {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.cols..(i + 1) * self.cols]
    }

    /// Finite-population ATE.
    pub fn ate(&self) -> f64 {
        crate::linalg::ksum(self.y1.iter().zip(&self.y0).map(|(a, b)| a - b)) / self.len() as f64
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Complete data for the population of `spec`.
///
/// In joint designs `T ~ Bernoulli(w1 / (w1 + w0))` and membership in B has
/// probability `w1 + w0` independently of `T`, which reproduces
/// `P(I_B = 1, T = t | X) = w_t`.
pub fn generate_population(spec: &CaseSpec, seed: u64) -> Result<Population> {
    spec.validate()?;
    let n = spec.n_pop;
    let cols = spec.d + 1;
    let mut rng = stream(seed, 0);
    let gamma = Gamma::new(0.5, 1.0).expect("valid gamma");
    let mut pop = Population {
        cols,
        x: vec![0.0; n * cols],
        t: Vec::with_capacity(n),
        y: Vec::with_capacity(n),
        y1: Vec::with_capacity(n),
        y0: Vec::with_capacity(n),
        sel_prob: Vec::with_capacity(n),
    };
    for i in 0..n {
        let row = &mut pop.x[i * cols..(i + 1) * cols];
        covariate_row(&mut rng, spec.design.is_joint(), spec.d, &gamma, row);
        let row = &pop.x[i * cols..(i + 1) * cols];
        let (p_t, p_b) = match spec.design {
            Design::Conditional { sm, tm, .. } => (treat_prob(tm, row), select_prob(sm, row)),
            Design::Joint { wm, .. } => {
                let (w1, w0) = joint_probs(wm, row)?;
                (w1 / (w1 + w0), w1 + w0)
            }
        };
        let t = rng.gen::<f64>() < p_t;
        let (m0, m1) = outcome_means(spec.outcome_kind, spec.design, row);
        let (y0, y1) = match spec.outcome_kind {
            OutcomeKind::Continuous => {
                let e: f64 = rng.sample(StandardNormal);
                (m0 + e, m1 + e)
            }
            OutcomeKind::Binary => {
                let u = rng.gen::<f64>();
                (indicator(u < m0), indicator(u < m1))
            }
        };
        pop.t.push(t);
        pop.y.push(if t { y1 } else { y0 });
        pop.y1.push(y1);
        pop.y0.push(y0);
        pop.sel_prob.push(p_b);
    }
    Ok(pop)
}

/// Poisson sample A at rate `p_A`, then sample B from the remainder.
pub fn draw_samples(pop: &Population, spec: &CaseSpec, seed: u64) -> CombinedDataset {
    let mut rng = stream(seed, 1);
    let weight = 1.0 / spec.p_a;
    let mut records = Vec::new();
    for i in 0..pop.len() {
        let in_a = rng.gen::<f64>() < spec.p_a;
        let in_b = rng.gen::<f64>() < pop.sel_prob[i];
        if in_a {
            records.push(UnitRecord::sample_a(weight, pop.row(i).to_vec()));
        } else if in_b {
            records.push(UnitRecord::sample_b(pop.row(i).to_vec(), pop.t[i], pop.y[i]));
        }
    }
    CombinedDataset::new(records, Some(pop.len()), spec.outcome_kind)
}

/// Population and samples for a joint-weighting case in one call.
pub fn generate_joint_case(spec: &CaseSpec, seed: u64) -> Result<CombinedDataset> {
    if !spec.design.is_joint() {
        return Err(Error::Config(format!("case {} is not a joint-weighting design", spec.case_id)));
    }
    Ok(draw_samples(&generate_population(spec, seed)?, spec, seed))
}

/// Dataset of one replicate.
pub fn generate_dataset(spec: &CaseSpec, seed: u64) -> Result<CombinedDataset> {
    Ok(draw_samples(&generate_population(spec, seed)?, spec, seed))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of replicate `r`.
pub fn replicate_seed(base_seed: u64, r: usize) -> u64 {
    splitmix64(base_seed ^ splitmix64(r as u64))
}

/// One estimator's output in one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRecord {
    pub estimator: EstimatorKind,
    pub theta_hat: Option<f64>,
    pub se: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub ci_covered: Option<bool>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationResult {
    pub replicate_id: usize,
    pub seed: u64,
    pub n_a: usize,
    pub n_b: usize,
    pub estimates: Vec<EstimateRecord>,
    /// Support and coefficients of the primary estimator's fit.
    pub support_hat: Option<Support>,
    pub coef_hat: Option<NuisanceParams>,
    pub lambdas: Option<(f64, f64)>,
    pub error: Option<String>,
    pub wall_time: f64,
}

impl ReplicationResult {
    pub fn estimate(&self, kind: EstimatorKind) -> Option<&EstimateRecord> {
        self.estimates.iter().find(|e| e.estimator == kind)
    }

    pub fn failed(&self) -> bool {
        self.error.is_some()
    }
}

/// Generates and analyses replicate `r`.
pub fn run_replicate(spec: &CaseSpec, r: usize, base_seed: u64, kinds: &[EstimatorKind], config: &EstimateConfig) -> ReplicationResult {
    let start = Instant::now();
    let seed = replicate_seed(base_seed, r);
    let mut out = ReplicationResult {
        replicate_id: r,
        seed,
        n_a: 0,
        n_b: 0,
        estimates: Vec::new(),
        support_hat: None,
        coef_hat: None,
        lambdas: None,
        error: None,
        wall_time: 0.0,
    };
    match generate_dataset(spec, seed) {
        Err(e) => out.error = Some(e.to_string()),
        Ok(ds) => {
            out.n_a = ds.n_a();
            out.n_b = ds.n_b();
            let mut cfg = config.clone();
            cfg.seed = seed;
            if cfg.oracle_support.is_none() {
                cfg.oracle_support = Some(spec.support.clone());
            }
            let primary = spec.primary_estimator();
            for (kind, res) in estimate_set(&ds, kinds, &cfg) {
                match res {
                    Ok(rep) => {
                        if kind == primary {
                            if let Some(diag) = &rep.diagnostics {
                                out.support_hat = diag.support.clone();
                                out.coef_hat = diag.coefficients.clone();
                                out.lambdas = diag.lambdas;
                            }
                        }
                        out.estimates.push(EstimateRecord {
                            estimator: kind,
                            theta_hat: Some(rep.theta_hat),
                            se: Some(rep.se),
                            ci_low: Some(rep.ci_low),
                            ci_high: Some(rep.ci_high),
                            ci_covered: Some(rep.covers(spec.true_theta)),
                            error: None,
                        });
                    }
                    Err(e) => {
                        log::warn!("replicate {r}: {kind} failed: {e}");
                        if kind == primary {
                            out.error = Some(format!("{kind}: {e}"));
                        }
                        out.estimates.push(EstimateRecord {
                            estimator: kind,
                            theta_hat: None,
                            se: None,
                            ci_low: None,
                            ci_high: None,
                            ci_covered: None,
                            error: Some(e.to_string()),
                        });
                    }
                }
            }
        }
    }
    out.wall_time = start.elapsed().as_secs_f64();
    out
}

/// Selection and estimation accuracy of one coefficient block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockMetrics {
    pub block: String,
    pub correctly_specified: bool,
    pub sensitivity: f64,
    pub specificity: f64,
    /// Only reported for correctly specified blocks.
    pub mse_nonnull: Option<f64>,
    pub mse_null: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorMetrics {
    pub estimator: EstimatorKind,
    pub successes: usize,
    pub mean: f64,
    pub bias: f64,
    pub sd: f64,
    pub mse: f64,
    pub mean_se: f64,
    pub coverage: f64,
    pub coverage_low: f64,
    pub coverage_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub case_id: String,
    pub true_theta: f64,
    pub replicates: usize,
    pub failures: usize,
    pub blocks: Vec<BlockMetrics>,
    pub estimators: Vec<EstimatorMetrics>,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    crate::linalg::ksum(v.iter().copied()) / v.len() as f64
}

/// Coverage and its `± 2 √(p(1 − p)/R)` band.
pub fn coverage_band(hits: usize, total: usize) -> (f64, f64, f64) {
    if total == 0 {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    let p = hits as f64 / total as f64;
    let h = 2.0 * (p * (1.0 - p) / total as f64).sqrt();
    (p, (p - h).max(0.0), (p + h).min(1.0))
}

fn block_metrics(name: &str, correct: bool, truth: &[f64], support: &[usize], fits: &[(&[usize], Option<&[f64]>)]) -> BlockMetrics {
    let d = truth.len();
    let true_nz: Vec<bool> = (0..d).map(|j| support.contains(&j)).collect();
    let nonnull: Vec<usize> = (1..d).filter(|&j| true_nz[j]).collect();
    let null: Vec<usize> = (1..d).filter(|&j| !true_nz[j]).collect();
    let mut sens = Vec::new();
    let mut spec = Vec::new();
    let mut mse_nn = Vec::new();
    let mut mse_n = Vec::new();
    for (sel, coef) in fits {
        let picked = |j: &usize| sel.contains(j);
        if !nonnull.is_empty() {
            sens.push(nonnull.iter().filter(|j| picked(j)).count() as f64 / nonnull.len() as f64);
        }
        if !null.is_empty() {
            spec.push(null.iter().filter(|j| !picked(j)).count() as f64 / null.len() as f64);
        }
        if let Some(c) = coef {
            let sq = |js: &[usize]| mean(&js.iter().map(|&j| (c[j] - truth[j]).powi(2)).collect::<Vec<_>>());
            if !nonnull.is_empty() {
                mse_nn.push(sq(&nonnull));
            }
            if !null.is_empty() {
                mse_n.push(sq(&null));
            }
        }
    }
    let opt = |v: &[f64]| if correct && !v.is_empty() { Some(mean(v)) } else { None };
    BlockMetrics {
        block: name.to_string(),
        correctly_specified: correct,
        sensitivity: mean(&sens),
        specificity: mean(&spec),
        mse_nonnull: opt(&mse_nn),
        mse_null: opt(&mse_n),
    }
}

/// Averages replicate results into the metric table.
pub fn compute_metrics(results: &[ReplicationResult], spec: &CaseSpec) -> Metrics {
    let ok: Vec<&ReplicationResult> = results.iter().filter(|r| !r.failed()).collect();
    let names = spec.design.block_names();
    let correct = spec.design.correct();
    let truths = [&spec.truth.alpha, &spec.truth.tau, &spec.truth.beta, &spec.truth.gamma];
    let supports = [&spec.support.alpha, &spec.support.tau, &spec.support.beta, &spec.support.gamma];
    let mut blocks = Vec::new();
    for b in 0..4 {
        let fits: Vec<(&[usize], Option<&[f64]>)> = ok
            .iter()
            .filter_map(|r| {
                let s = r.support_hat.as_ref()?;
                let sel = [&s.alpha, &s.tau, &s.beta, &s.gamma][b].as_slice();
                let coef = r.coef_hat.as_ref().map(|c| [&c.alpha, &c.tau, &c.beta, &c.gamma][b].as_slice());
                Some((sel, coef))
            })
            .collect();
        blocks.push(block_metrics(names[b], correct[b], truths[b], supports[b], &fits));
    }
    let mut kinds: Vec<EstimatorKind> = Vec::new();
    for r in results {
        for e in &r.estimates {
            if !kinds.contains(&e.estimator) {
                kinds.push(e.estimator);
            }
        }
    }
    let estimators = kinds
        .into_iter()
        .map(|kind| {
            let recs: Vec<&EstimateRecord> = results.iter().filter_map(|r| r.estimate(kind)).filter(|e| e.theta_hat.is_some_and(f64::is_finite)).collect();
            let th: Vec<f64> = recs.iter().filter_map(|e| e.theta_hat).collect();
            let m = mean(&th);
            let sd = if th.len() > 1 { (th.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (th.len() - 1) as f64).sqrt() } else { f64::NAN };
            let mse = mean(&th.iter().map(|v| (v - spec.true_theta).powi(2)).collect::<Vec<_>>());
            let ses: Vec<f64> = recs.iter().filter_map(|e| e.se).filter(|s| s.is_finite()).collect();
            let cov: Vec<bool> = recs.iter().filter(|e| e.se.is_some_and(f64::is_finite)).filter_map(|e| e.ci_covered).collect();
            let (coverage, lo, hi) = coverage_band(cov.iter().filter(|c| **c).count(), cov.len());
            EstimatorMetrics { estimator: kind, successes: th.len(), mean: m, bias: m - spec.true_theta, sd, mse, mean_se: mean(&ses), coverage, coverage_low: lo, coverage_high: hi }
        })
        .collect();
    Metrics { case_id: spec.case_id.clone(), true_theta: spec.true_theta, replicates: results.len(), failures: results.len() - ok.len(), blocks, estimators }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationOutput {
    pub metrics: Metrics,
    pub results: Vec<ReplicationResult>,
}

/// Runs `reps` replicates on `jobs` threads; results come back in replicate order.
pub fn run_replications(spec: &CaseSpec, reps: usize, kinds: &[EstimatorKind], base_seed: u64, jobs: usize, config: &EstimateConfig) -> Result<SimulationOutput> {
    spec.validate()?;
    if reps == 0 {
        return Err(Error::Config("at least one replicate is required".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build().map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let results: Vec<ReplicationResult> = pool.install(|| (0..reps).into_par_iter().map(|r| run_replicate(spec, r, base_seed, kinds, config)).collect());
    let metrics = compute_metrics(&results, spec);
    Ok(SimulationOutput { metrics, results })
}
