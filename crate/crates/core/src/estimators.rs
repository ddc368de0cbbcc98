//! ATE point estimators and the estimator roster.
//!
//! Unpenalized competitors are fitted through stacked estimating equations
//! (`StackFit`) so their sandwich variances share one code path.

use std::borrow::Cow;
use std::cell::OnceCell;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{gram, inf_norm, ksum, x_b, xt_v};
use crate::models::{link_eval_clipped, logit};
use crate::solver::{
    assign_folds, choose_lambda, cross_validate_prepared, cv_block_losses, fit_block, lambda_max, log_grid, make_folds, mean_over_folds, solve_block, solve_penalized_prepared, spec_init, Block,
    BlockSystem, CvResult, FitResult, FoldData, Support,
};
use crate::system::{weights, EtaSystem, Prepared};
use crate::types::{CombinedDataset, Link, ModelSpec, NuisanceParams, OutcomeKind, PenaltyConfig, UnitRecord};
use crate::variance::{dr_se_prepared, sandwich_penalized, sandwich_unpenalized, AteReport, FitDiagnostics};

/// Which ATE estimator to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    OrCombined,
    IpwCombined,
    DrCombined,
    DrJoint,
    OrProbonly,
    IpwProbonly,
    DrProbonly,
    OrNonprob,
    IpwNonprob,
    DrNonprob,
    MeanDiffNonprob,
    NaiveNonprob,
    OracleDr,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 13] = [
        EstimatorKind::OrCombined,
        EstimatorKind::IpwCombined,
        EstimatorKind::DrCombined,
        EstimatorKind::DrJoint,
        EstimatorKind::OrProbonly,
        EstimatorKind::IpwProbonly,
        EstimatorKind::DrProbonly,
        EstimatorKind::OrNonprob,
        EstimatorKind::IpwNonprob,
        EstimatorKind::DrNonprob,
        EstimatorKind::MeanDiffNonprob,
        EstimatorKind::NaiveNonprob,
        EstimatorKind::OracleDr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::OrCombined => "or_combined",
            EstimatorKind::IpwCombined => "ipw_combined",
            EstimatorKind::DrCombined => "dr_combined",
            EstimatorKind::DrJoint => "dr_joint",
            EstimatorKind::OrProbonly => "or_probonly",
            EstimatorKind::IpwProbonly => "ipw_probonly",
            EstimatorKind::DrProbonly => "dr_probonly",
            EstimatorKind::OrNonprob => "or_nonprob",
            EstimatorKind::IpwNonprob => "ipw_nonprob",
            EstimatorKind::DrNonprob => "dr_nonprob",
            EstimatorKind::MeanDiffNonprob => "mean_diff_nonprob",
            EstimatorKind::NaiveNonprob => "naive_nonprob",
            EstimatorKind::OracleDr => "oracle_dr",
        }
    }

    /// Kinds whose nuisance fit honours the penalized flag.
    pub fn penalizable(self) -> bool {
        matches!(self, EstimatorKind::OrCombined | EstimatorKind::IpwCombined | EstimatorKind::DrCombined | EstimatorKind::DrJoint)
    }

    pub fn is_probonly(self) -> bool {
        matches!(self, EstimatorKind::OrProbonly | EstimatorKind::IpwProbonly | EstimatorKind::DrProbonly)
    }

    pub fn is_nonprob(self) -> bool {
        matches!(self, EstimatorKind::OrNonprob | EstimatorKind::IpwNonprob | EstimatorKind::DrNonprob | EstimatorKind::MeanDiffNonprob | EstimatorKind::NaiveNonprob)
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        EstimatorKind::ALL.iter().copied().find(|k| k.name() == s.trim()).ok_or_else(|| {
            let names: Vec<&str> = EstimatorKind::ALL.iter().map(|k| k.name()).collect();
            Error::Config(format!("unknown estimator '{s}'; valid: {}", names.join(", ")))
        })
    }
}

/// Covariate columns (intercept = 0) of the true working models.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleSupport {
    pub alpha: Vec<usize>,
    pub tau: Vec<usize>,
    pub beta: Vec<usize>,
    pub gamma: Vec<usize>,
}

/// Settings shared by every roster estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimateConfig {
    pub penalized: bool,
    pub penalty: PenaltyConfig,
    /// Link choices for the combined fits; `dr_joint` switches to the joint parameterization.
    pub spec: Option<ModelSpec>,
    pub folds: usize,
    pub grid_size: usize,
    pub seed: u64,
    /// Fixed `(λ_η, λ_μ)`; skips cross-validation.
    pub lambdas: Option<(f64, f64)>,
    pub oracle_support: Option<OracleSupport>,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        EstimateConfig { penalized: true, penalty: PenaltyConfig::default(), spec: None, folds: 5, grid_size: 20, seed: 0, lambdas: None, oracle_support: None }
    }
}

impl EstimateConfig {
    pub fn model_spec(&self, kind: OutcomeKind) -> ModelSpec {
        self.spec.unwrap_or_else(|| ModelSpec::for_outcome(kind))
    }
}

/// Per-unit integrand of each point estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThetaForm {
    /// `I_A d_A (g1 − g0)`.
    Or,
    /// `I_B T Y W1 − I_B (1−T) Y W0`.
    Ipw,
    /// `φ + θ`.
    Dr,
    /// Sample-A-only versions with tilde models.
    OrA,
    IpwA,
    DrA,
    /// Sample-B-only versions, averaged over `n_B`.
    OrB,
    IpwB,
    DrB,
}

fn means(prep: &Prepared, x: &DMatrix<f64>, coef: &[f64], link: Link) -> Vec<f64> {
    x_b(x, coef).into_iter().map(|l| link_eval_clipped(link, l, prep.clip).value).collect()
}

/// Per-unit contributions `N·θ̂ = Σ terms` in canonical unit order.
pub fn theta_terms(prep: &Prepared, form: ThetaForm, w: &NuisanceParams, spec: &ModelSpec) -> Vec<f64> {
    let link = spec.outcome_link;
    let (na, n1, n0) = (prep.n_a(), prep.b1.y.len(), prep.b0.y.len());
    let mut out = Vec::with_capacity(na + n1 + n0);
    let a = &prep.a;
    match form {
        ThetaForm::Dr => return prep.phi_terms(w, spec),
        ThetaForm::Or => {
            let g1 = means(prep, &a.x, &w.beta, link);
            let g0 = means(prep, &a.x, &w.gamma, link);
            out.extend((0..na).map(|i| a.d_a[i] * (g1[i] - g0[i])));
            out.resize(na + n1 + n0, 0.0);
        }
        ThetaForm::Ipw => {
            out.resize(na, 0.0);
            for (treated, arm) in [(true, &prep.b1), (false, &prep.b0)] {
                let la = x_b(&arm.x, &w.alpha);
                let lb = x_b(&arm.x, &w.tau);
                for i in 0..arm.y.len() {
                    let wt = weights(spec.parameterization, la[i], lb[i], prep.clip);
                    out.push(if treated { wt.w1 * arm.y[i] } else { -wt.w0 * arm.y[i] });
                }
            }
        }
        ThetaForm::OrA | ThetaForm::IpwA | ThetaForm::DrA => {
            let g1 = means(prep, &a.x, &w.beta, link);
            let g0 = means(prep, &a.x, &w.gamma, link);
            let pt = means(prep, &a.x, &w.tau, Link::Logit);
            for i in 0..na {
                let t = if a.t[i] == Some(true) { 1.0 } else { 0.0 };
                let y = a.y[i].unwrap_or(f64::NAN);
                let v = match form {
                    ThetaForm::OrA => g1[i] - g0[i],
                    ThetaForm::IpwA => t * y / pt[i] - (1.0 - t) * y / (1.0 - pt[i]),
                    _ => (g1[i] + t * (y - g1[i]) / pt[i]) - (g0[i] + (1.0 - t) * (y - g0[i]) / (1.0 - pt[i])),
                };
                out.push(a.d_a[i] * v);
            }
            out.resize(na + n1 + n0, 0.0);
        }
        ThetaForm::OrB | ThetaForm::IpwB | ThetaForm::DrB => {
            out.resize(na, 0.0);
            for (treated, arm) in [(true, &prep.b1), (false, &prep.b0)] {
                let g1 = means(prep, &arm.x, &w.beta, link);
                let g0 = means(prep, &arm.x, &w.gamma, link);
                let pt = means(prep, &arm.x, &w.tau, Link::Logit);
                for i in 0..arm.y.len() {
                    let y = arm.y[i];
                    out.push(match (form, treated) {
                        (ThetaForm::OrB, _) => g1[i] - g0[i],
                        (ThetaForm::IpwB, true) => y / pt[i],
                        (ThetaForm::IpwB, false) => -y / (1.0 - pt[i]),
                        (_, true) => g1[i] - g0[i] + (y - g1[i]) / pt[i],
                        (_, false) => g1[i] - g0[i] - (y - g0[i]) / (1.0 - pt[i]),
                    });
                }
            }
        }
    }
    out
}

pub(crate) fn mean_terms(prep: &Prepared, form: ThetaForm, w: &NuisanceParams, spec: &ModelSpec) -> Result<f64> {
    let v = ksum(theta_terms(prep, form, w, spec)) / prep.n_pop;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numerical("non-finite point estimate".into()))
    }
}

fn need_a(ds: &CombinedDataset) -> Result<()> {
    if ds.n_a() == 0 {
        return Err(Error::EmptySample("A"));
    }
    Ok(())
}

fn half(v: &[f64], d: usize, what: &str) -> Result<()> {
    if v.len() != 2 * d {
        log::debug!("{what} has length {}", v.len());
        return Err(Error::DimensionMismatch { expected: 2 * d, got: v.len() });
    }
    Ok(())
}

/// OR estimator at fitted outcome coefficients `μ̂ = (β̂, γ̂)`.
pub fn estimate_or(ds: &CombinedDataset, mu_hat: &[f64], spec: &ModelSpec) -> Result<f64> {
    half(mu_hat, ds.d, "mu_hat")?;
    need_a(ds)?;
    let prep = Prepared::new(ds, crate::system::DEFAULT_CLIP)?;
    let mut w = NuisanceParams::zeros(ds.d);
    w.set_mu(mu_hat);
    mean_terms(&prep, ThetaForm::Or, &w, spec)
}

/// IPW estimator at fitted weighting coefficients `η̂ = (α̂, τ̂)`.
pub fn estimate_ipw(ds: &CombinedDataset, eta_hat: &[f64], spec: &ModelSpec) -> Result<f64> {
    half(eta_hat, ds.d, "eta_hat")?;
    if ds.n_b() == 0 {
        return Err(Error::EmptySample("B"));
    }
    let prep = Prepared::new(ds, crate::system::DEFAULT_CLIP)?;
    let mut w = NuisanceParams::zeros(ds.d);
    w.set_eta(eta_hat);
    mean_terms(&prep, ThetaForm::Ipw, &w, spec)
}

/// DR estimator: the `θ` that zeroes `N⁻¹ Σ φ(Z; θ, ω̂)`.
pub fn estimate_dr(ds: &CombinedDataset, omega_hat: &NuisanceParams, spec: &ModelSpec) -> Result<f64> {
    omega_hat.check_dims(ds.d)?;
    need_a(ds)?;
    let prep = Prepared::new(ds, crate::system::DEFAULT_CLIP)?;
    mean_terms(&prep, ThetaForm::Dr, omega_hat, spec)
}

/// DR estimator under the joint parameterization (`alpha` = `δ1`, `tau` = `δ0`).
pub fn estimate_dr_joint(ds: &CombinedDataset, params_joint: &NuisanceParams, spec: &ModelSpec) -> Result<f64> {
    if !spec.is_joint() {
        return Err(Error::Config("estimate_dr_joint requires the joint parameterization".into()));
    }
    estimate_dr(ds, params_joint, spec)
}

/// One working model inside a stacked estimating system.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Piece {
    /// GLM score for one arm, fitted on sample B (or sample A with `on_a`).
    Outcome { treated: bool, on_a: bool },
    /// Calibration of `1/π_B` on sample B to the design-weighted totals of A.
    Selection,
    /// Logistic score for `T`, fitted on sample B (or sample A).
    Treatment { on_a: bool },
}

/// A working model restricted to a set of covariate columns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackBlock {
    pub piece: Piece,
    pub cols: Vec<usize>,
}

impl StackBlock {
    pub fn full(piece: Piece, d: usize) -> Self {
        StackBlock { piece, cols: (0..d).collect() }
    }
}

fn select<'a>(x: &'a DMatrix<f64>, cols: &[usize]) -> Cow<'a, DMatrix<f64>> {
    if cols.len() == x.ncols() && cols.iter().enumerate().all(|(j, &c)| j == c) {
        Cow::Borrowed(x)
    } else {
        Cow::Owned(x.select_columns(cols))
    }
}

struct BlockData<'a> {
    block: StackBlock,
    mats: [Cow<'a, DMatrix<f64>>; 3],
    cached: OnceCell<DMatrix<f64>>,
}

/// Block-diagonal system of independent working-model scores.
///
/// Rows are oriented so each diagonal block has a positive semi-definite
/// Jacobian.
pub struct StackSystem<'a> {
    prep: &'a Prepared,
    link: Link,
    blocks: Vec<BlockData<'a>>,
    offsets: Vec<usize>,
    exempt: Vec<bool>,
}

/// Per-group `(c, dc)` with unit rows `c_i x_i` and Jacobian `Σ dc_i x_i x_iᵀ`.
type Group = (Vec<f64>, Vec<f64>);

impl<'a> StackSystem<'a> {
    pub fn new(prep: &'a Prepared, blocks: &[StackBlock], link: Link) -> Self {
        let mut offsets = Vec::new();
        let mut exempt = Vec::new();
        let mut off = 0;
        let data = blocks
            .iter()
            .map(|b| {
                offsets.push(off);
                off += b.cols.len();
                exempt.extend(b.cols.iter().map(|&c| c == 0));
                BlockData {
                    block: b.clone(),
                    mats: [select(&prep.a.x, &b.cols), select(&prep.b1.x, &b.cols), select(&prep.b0.x, &b.cols)],
                    cached: OnceCell::new(),
                }
            })
            .collect();
        StackSystem { prep, link, blocks: data, offsets, exempt }
    }

    fn coef<'p>(&self, k: usize, p: &'p [f64]) -> &'p [f64] {
        &p[self.offsets[k]..self.offsets[k] + self.blocks[k].block.cols.len()]
    }

    fn groups(&self, k: usize, coef: &[f64]) -> [Group; 3] {
        let pr = self.prep;
        let b = &self.blocks[k];
        let clip = pr.clip;
        let empty = || (Vec::new(), Vec::new());
        let evals = |m: &DMatrix<f64>, link: Link| -> Vec<(f64, f64)> {
            x_b(m, coef)
                .into_iter()
                .map(|l| {
                    let e = link_eval_clipped(link, l, clip);
                    (e.value, e.dvalue)
                })
                .collect()
        };
        match b.block.piece {
            Piece::Outcome { treated, on_a: false } => {
                let (g, arm) = if treated { (1, &pr.b1) } else { (2, &pr.b0) };
                let e = evals(&b.mats[g], self.link);
                let grp = (e.iter().zip(&arm.y).map(|((v, _), y)| v - y).collect(), e.iter().map(|(_, dv)| *dv).collect());
                let mut out = [empty(), empty(), empty()];
                out[g] = grp;
                out
            }
            Piece::Outcome { treated, on_a: true } => {
                let e = evals(&b.mats[0], self.link);
                let on = |i: usize| pr.a.t[i] == Some(treated);
                let c = (0..e.len()).map(|i| if on(i) { e[i].0 - pr.a.y[i].unwrap_or(f64::NAN) } else { 0.0 }).collect();
                let dc = (0..e.len()).map(|i| if on(i) { e[i].1 } else { 0.0 }).collect();
                [(c, dc), empty(), empty()]
            }
            Piece::Selection => {
                let ga = (pr.a.d_a.clone(), vec![0.0; pr.n_a()]);
                let sel = |m: &DMatrix<f64>| -> Group {
                    let e = evals(m, Link::Logit);
                    (e.iter().map(|(p, _)| -1.0 / p).collect(), e.iter().map(|(p, dp)| dp / (p * p)).collect())
                };
                [ga, sel(&b.mats[1]), sel(&b.mats[2])]
            }
            Piece::Treatment { on_a: false } => {
                let e1 = evals(&b.mats[1], Link::Logit);
                let e0 = evals(&b.mats[2], Link::Logit);
                [
                    empty(),
                    (e1.iter().map(|(p, _)| p - 1.0).collect(), e1.iter().map(|(_, dp)| *dp).collect()),
                    (e0.iter().map(|(p, _)| *p).collect(), e0.iter().map(|(_, dp)| *dp).collect()),
                ]
            }
            Piece::Treatment { on_a: true } => {
                let e = evals(&b.mats[0], Link::Logit);
                let c = (0..e.len()).map(|i| pr.a.t[i].map_or(0.0, |t| e[i].0 - if t { 1.0 } else { 0.0 })).collect();
                let dc = (0..e.len()).map(|i| if pr.a.t[i].is_some() { e[i].1 } else { 0.0 }).collect();
                [(c, dc), empty(), empty()]
            }
        }
    }

    fn block_jacobian(&self, k: usize, coef: &[f64]) -> DMatrix<f64> {
        let b = &self.blocks[k];
        let n = self.prep.n_pop;
        let compute = || {
            let q = b.block.cols.len();
            let mut j = DMatrix::zeros(q, q);
            for (g, (_, dc)) in self.groups(k, coef).iter().enumerate() {
                if !dc.is_empty() && dc.iter().any(|v| *v != 0.0) {
                    let w: Vec<f64> = dc.iter().map(|v| v / n).collect();
                    j += gram(&b.mats[g], &w);
                }
            }
            j
        };
        let constant = matches!(b.block.piece, Piece::Outcome { .. }) && self.link == Link::Identity;
        if constant {
            b.cached.get_or_init(compute).clone()
        } else {
            compute()
        }
    }

    /// Starting point: intercepts at marginal values, slopes at zero.
    pub fn start(&self) -> Vec<f64> {
        let pr = self.prep;
        let mut p = vec![0.0; self.exempt.len()];
        let clip = 1e-3;
        let avg = |v: &mut dyn Iterator<Item = f64>| {
            let (s, c) = v.fold((0.0, 0usize), |(s, c), x| (s + x, c + 1));
            if c == 0 {
                0.5
            } else {
                s / c as f64
            }
        };
        for (k, b) in self.blocks.iter().enumerate() {
            let Some(pos) = b.block.cols.iter().position(|&c| c == 0) else { continue };
            let v = match b.block.piece {
                Piece::Outcome { treated, on_a } => {
                    let m = if on_a {
                        avg(&mut (0..pr.n_a()).filter(|&i| pr.a.t[i] == Some(treated)).filter_map(|i| pr.a.y[i]))
                    } else {
                        avg(&mut (if treated { &pr.b1.y } else { &pr.b0.y }).iter().copied())
                    };
                    match self.link {
                        Link::Identity => m,
                        Link::Logit => logit(m.clamp(clip, 1.0 - clip)),
                    }
                }
                Piece::Selection => logit((pr.n_b() as f64 / pr.n_pop.max(1.0)).clamp(clip, 1.0 - clip)),
                Piece::Treatment { on_a } => {
                    let m = if on_a {
                        avg(&mut pr.a.t.iter().filter_map(|t| t.map(|t| if t { 1.0 } else { 0.0 })))
                    } else {
                        pr.b1.y.len() as f64 / pr.n_b().max(1) as f64
                    };
                    logit(m.clamp(clip, 1.0 - clip))
                }
            };
            p[self.offsets[k] + pos] = v;
        }
        p
    }

    /// Maps stacked coefficients onto full-width `(α, τ, β, γ)`.
    pub fn expand(&self, p: &[f64]) -> NuisanceParams {
        let mut w = NuisanceParams::zeros(self.prep.d);
        for (k, b) in self.blocks.iter().enumerate() {
            let target = match b.block.piece {
                Piece::Outcome { treated: true, .. } => &mut w.beta,
                Piece::Outcome { treated: false, .. } => &mut w.gamma,
                Piece::Selection => &mut w.alpha,
                Piece::Treatment { .. } => &mut w.tau,
            };
            for (j, &c) in b.block.cols.iter().enumerate() {
                target[c] = p[self.offsets[k] + j];
            }
        }
        w
    }
}

impl BlockSystem for StackSystem<'_> {
    fn dim(&self) -> usize {
        self.exempt.len()
    }
    fn exempt(&self) -> &[bool] {
        &self.exempt
    }
    fn residual(&self, p: &[f64]) -> Result<DVector<f64>> {
        let n = self.prep.n_pop;
        let mut out = Vec::with_capacity(p.len());
        for k in 0..self.blocks.len() {
            let q = self.blocks[k].block.cols.len();
            let mut acc = vec![0.0; q];
            for (g, (c, _)) in self.groups(k, self.coef(k, p)).iter().enumerate() {
                if !c.is_empty() {
                    for (a, v) in acc.iter_mut().zip(xt_v(&self.blocks[k].mats[g], c, 1.0 / n)) {
                        *a += v;
                    }
                }
            }
            out.extend(acc);
        }
        crate::system::finite(out)
    }
    fn jacobian(&self, p: &[f64]) -> Result<DMatrix<f64>> {
        let mut j = DMatrix::zeros(p.len(), p.len());
        for k in 0..self.blocks.len() {
            let off = self.offsets[k];
            let bj = self.block_jacobian(k, self.coef(k, p));
            j.view_mut((off, off), bj.shape()).copy_from(&bj);
        }
        Ok(j)
    }
    fn constant_jacobian(&self) -> bool {
        self.link == Link::Identity && self.blocks.iter().all(|b| matches!(b.block.piece, Piece::Outcome { .. }))
    }
    fn unit_scores(&self, p: &[f64]) -> Result<DMatrix<f64>> {
        let pr = self.prep;
        let starts = [0, pr.n_a(), pr.n_a() + pr.b1.y.len()];
        let mut m = DMatrix::zeros(pr.n_units(), p.len());
        for k in 0..self.blocks.len() {
            let off = self.offsets[k];
            for (g, (c, _)) in self.groups(k, self.coef(k, p)).iter().enumerate() {
                let x = &self.blocks[k].mats[g];
                for (i, ci) in c.iter().enumerate() {
                    for j in 0..x.ncols() {
                        m[(starts[g] + i, off + j)] = ci * x[(i, j)];
                    }
                }
            }
        }
        Ok(m)
    }
}

/// Nuisance system behind a fitted estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Nuisance {
    Blocks(Vec<StackBlock>),
    /// The calibration equations for `(α, τ)` used by the penalized IPW estimator.
    Calibration,
}

/// A fitted point estimator together with its nuisance estimating system.
#[derive(Debug, Clone)]
pub struct StackFit {
    pub prep: Prepared,
    pub spec: ModelSpec,
    pub nuisance: Nuisance,
    pub form: ThetaForm,
    pub p: Vec<f64>,
    pub theta: f64,
    /// Penalty level on the non-intercept coordinates of `p`.
    pub lambda: f64,
    pub diagnostics: FitDiagnostics,
}

impl StackFit {
    pub fn system(&self) -> Box<dyn BlockSystem + '_> {
        match &self.nuisance {
            Nuisance::Blocks(b) => Box::new(StackSystem::new(&self.prep, b, self.spec.outcome_link)),
            Nuisance::Calibration => Box::new(EtaSystem::calibration(&self.prep, &self.spec)),
        }
    }

    pub fn expand(&self, p: &[f64]) -> NuisanceParams {
        match &self.nuisance {
            Nuisance::Blocks(b) => StackSystem::new(&self.prep, b, self.spec.outcome_link).expand(p),
            Nuisance::Calibration => {
                let mut w = NuisanceParams::zeros(self.prep.d);
                w.set_eta(p);
                w
            }
        }
    }

    /// Per-unit estimator contributions at nuisance coordinates `p`.
    pub fn terms(&self, p: &[f64]) -> Vec<f64> {
        theta_terms(&self.prep, self.form, &self.expand(p), &self.spec)
    }

    pub fn params(&self) -> NuisanceParams {
        self.expand(&self.p)
    }
}

fn unpenalized_cfg(cfg: &PenaltyConfig) -> PenaltyConfig {
    PenaltyConfig { inner_tol: cfg.inner_tol.min(1e-10), inner_max_iter: cfg.inner_max_iter.max(100), ..*cfg }
}

/// Fits every block of an unpenalized stack by Newton-Raphson and evaluates `θ̂`.
pub fn fit_stack(prep: Prepared, spec: &ModelSpec, blocks: Vec<StackBlock>, form: ThetaForm, cfg: &PenaltyConfig) -> Result<StackFit> {
    let (p, diagnostics) = {
        let sys = StackSystem::new(&prep, &blocks, spec.outcome_link);
        let fit = solve_block(&sys, &sys.start(), 0.0, &unpenalized_cfg(cfg), None)?;
        if fit.residual_inf > 1e-6 {
            return Err(Error::Numerical(format!("nuisance fit did not converge (residual {:.3e})", fit.residual_inf)));
        }
        let d = FitDiagnostics { lambdas: None, support: None, iterations: fit.steps, converged: fit.converged, residual_inf: fit.residual_inf, coefficients: None };
        (fit.p, d)
    };
    let mut out = StackFit { prep, spec: *spec, nuisance: Nuisance::Blocks(blocks), form, p, theta: 0.0, lambda: 0.0, diagnostics };
    out.theta = mean_terms(&out.prep, form, &out.params(), spec)?;
    Ok(out)
}

/// Held-out CV of a single penalized block system.
fn cv_single<B>(fd: &[FoldData], grid: &[f64], start: &[f64], cfg: &PenaltyConfig, build: B) -> Result<f64>
where
    B: for<'p> Fn(&'p Prepared) -> Box<dyn BlockSystem + 'p>,
{
    if grid.len() == 1 {
        return Ok(grid[0]);
    }
    let losses = mean_over_folds(&cv_block_losses(fd, grid, start, cfg, build)?);
    Ok(choose_lambda(grid, &losses))
}

fn slope_inf(sys: &dyn BlockSystem, p: &[f64]) -> f64 {
    let m = sys.residual(p).map(|r| r.iter().zip(sys.exempt()).filter(|(_, &ex)| !ex).fold(0.0f64, |m, (v, _)| m.max(v.abs()))).unwrap_or(0.0);
    if m.is_finite() && m > 0.0 {
        m
    } else {
        1.0
    }
}

/// Shared state for computing several roster estimators on one dataset.
pub struct Roster<'a> {
    ds: &'a CombinedDataset,
    config: &'a EstimateConfig,
    prep: Option<Prepared>,
    folds: Option<Vec<FoldData>>,
    dr_fit: Option<(FitResult, Option<CvResult>)>,
}

impl<'a> Roster<'a> {
    pub fn new(ds: &'a CombinedDataset, config: &'a EstimateConfig) -> Self {
        Roster { ds, config, prep: None, folds: None, dr_fit: None }
    }

    fn ensure_prep(&mut self) -> Result<()> {
        if self.prep.is_none() {
            self.prep = Some(Prepared::new(self.ds, self.config.penalty.prob_clip)?);
        }
        Ok(())
    }

    fn prep(&mut self) -> Result<&Prepared> {
        self.ensure_prep()?;
        Ok(self.prep.as_ref().expect("prepared above"))
    }

    fn folds(&mut self) -> Result<()> {
        self.ensure_prep()?;
        if self.folds.is_none() {
            let n = self.prep.as_ref().expect("prepared above").n_pop;
            let k = self.config.folds;
            if k < 2 {
                return Err(Error::Config("cross-validation needs at least 2 folds".into()));
            }
            self.folds = Some(make_folds(self.ds, n, &assign_folds(self.ds, k, self.config.seed), k, self.config.penalty.prob_clip)?);
        }
        Ok(())
    }

    fn unavailable(kind: EstimatorKind, reason: &str) -> Error {
        Error::Unavailable { kind: kind.name().into(), reason: reason.into() }
    }

    fn check(&self, kind: EstimatorKind) -> Result<()> {
        let ds = self.ds;
        if kind.is_nonprob() {
            if ds.n_b() == 0 {
                return Err(Self::unavailable(kind, "sample B is empty"));
            }
        } else if kind.is_probonly() {
            if ds.n_a() == 0 {
                return Err(Self::unavailable(kind, "sample A is empty"));
            }
            if ds.records.iter().any(|r| r.i_a && (r.t.is_none() || r.y.is_none())) {
                return Err(Self::unavailable(kind, "treatment and outcome must be observed for every sample-A unit"));
            }
            let treated = ds.records.iter().filter(|r| r.i_a && r.t == Some(true)).count();
            if treated == 0 || treated == ds.n_a() {
                return Err(Self::unavailable(kind, "sample A needs both treated and control units"));
            }
        } else {
            if ds.n_a() == 0 {
                return Err(Self::unavailable(kind, "sample A is empty"));
            }
            if ds.n_b() == 0 {
                return Err(Self::unavailable(kind, "sample B is empty"));
            }
            if kind == EstimatorKind::OracleDr && self.config.oracle_support.is_none() {
                return Err(Self::unavailable(kind, "true supports are not known"));
            }
        }
        if ds.records.iter().any(|r| r.i_b) && !kind.is_probonly() {
            let treated = ds.records.iter().filter(|r| r.i_b && r.t == Some(true)).count();
            if treated == 0 || treated == ds.n_b() {
                return Err(Self::unavailable(kind, "sample B needs both treated and control units"));
            }
        }
        Ok(())
    }

    fn penalized(&self, kind: EstimatorKind) -> bool {
        self.config.penalized && kind.penalizable()
    }

    /// Bias-reduced fit for `dr_combined` (conditional) or `dr_joint`.
    fn dr_fit(&mut self, spec: &ModelSpec, penalized: bool) -> Result<(FitResult, Option<CvResult>)> {
        let cfg = self.config.penalty;
        let fixed = if penalized { self.config.lambdas } else { Some((0.0, 0.0)) };
        let grid_size = self.config.grid_size;
        if fixed.is_none() {
            self.folds()?;
        }
        self.ensure_prep()?;
        let prep = self.prep.as_ref().expect("prepared above");
        let init = spec_init(prep, spec);
        let (lambdas, cv) = match fixed {
            Some(l) => (l, None),
            None => {
                let ge = log_grid(lambda_max(prep, spec, &init, Block::Eta), grid_size);
                let gm = log_grid(lambda_max(prep, spec, &init, Block::Mu), grid_size);
                let fd = self.folds.as_ref().expect("folds built above");
                let cv = cross_validate_prepared(prep, fd, spec, &ge, &gm, &cfg)?;
                (cv.chosen, Some(cv))
            }
        };
        let fit = solve_penalized_prepared(prep, spec, lambdas, &cfg, &init)?;
        Ok((fit, cv))
    }

    fn report_dr(&mut self, kind: EstimatorKind) -> Result<AteReport> {
        let base = self.config.model_spec(self.ds.outcome_kind);
        let spec = if kind == EstimatorKind::DrJoint { ModelSpec { parameterization: crate::types::Parameterization::Joint, ..base } } else { base };
        let penalized = self.penalized(kind);
        let (fit, _) = if kind == EstimatorKind::DrCombined && penalized {
            if self.dr_fit.is_none() {
                self.dr_fit = Some(self.dr_fit(&spec, true)?);
            }
            self.dr_fit.clone().expect("fitted above")
        } else {
            self.dr_fit(&spec, penalized)?
        };
        let prep = self.prep()?;
        let theta = mean_terms(prep, ThetaForm::Dr, &fit.omega_hat, &spec)?;
        let mut r = dr_se_prepared(prep, &fit.omega_hat, theta, &spec, kind);
        r.penalized = penalized;
        r.diagnostics = Some(FitDiagnostics {
            lambdas: Some(fit.lambdas),
            support: Some(fit.support.clone()),
            iterations: fit.iterations,
            converged: fit.converged,
            residual_inf: fit.residual_inf,
            coefficients: Some(fit.omega_hat.clone()),
        });
        Ok(r)
    }

    fn report_or_penalized(&mut self) -> Result<AteReport> {
        let kind = EstimatorKind::OrCombined;
        let spec = self.config.model_spec(self.ds.outcome_kind);
        let cfg = self.config.penalty;
        let d = self.ds.d;
        let blocks = vec![StackBlock::full(Piece::Outcome { treated: true, on_a: false }, d), StackBlock::full(Piece::Outcome { treated: false, on_a: false }, d)];
        let fixed = self.config.lambdas.map(|l| l.1);
        if fixed.is_none() {
            self.folds()?;
        }
        let prep = self.prep()?.clone();
        let (p, lam, diag) = {
            let sys = StackSystem::new(&prep, &blocks, spec.outcome_link);
            let start = sys.start();
            let lam = match fixed {
                Some(l) => l,
                None => {
                    let grid = log_grid(slope_inf(&sys, &start), self.config.grid_size);
                    let fd = self.folds.as_ref().expect("folds built above");
                    cv_single(fd, &grid, &start, &cfg, |p| Box::new(StackSystem::new(p, &blocks, spec.outcome_link)))?
                }
            };
            let root = solve_block(&sys, &start, 0.0, &cfg, None)?;
            let fit = fit_block(&sys, &root.p, lam, &cfg)?;
            let w = sys.expand(&fit.p);
            let diag = FitDiagnostics { lambdas: Some((0.0, lam)), support: Some(Support::of(&w)), iterations: fit.steps, converged: fit.converged, residual_inf: fit.residual_inf, coefficients: Some(w.clone()) };
            (fit.p, lam, diag)
        };
        let mut sf = StackFit { prep, spec, nuisance: Nuisance::Blocks(blocks), form: ThetaForm::Or, p, theta: 0.0, lambda: lam, diagnostics: diag };
        sf.theta = mean_terms(&sf.prep, ThetaForm::Or, &sf.params(), &spec)?;
        let se = sandwich_penalized(&sf, &cfg)?;
        Ok(AteReport::from_fit(&sf, kind, se, true))
    }

    fn report_ipw_penalized(&mut self) -> Result<AteReport> {
        let kind = EstimatorKind::IpwCombined;
        let spec = self.config.model_spec(self.ds.outcome_kind);
        let cfg = self.config.penalty;
        // with linear outcome models the calibration system is the η-system of the DR fit
        let reuse = spec.outcome_link == Link::Identity && self.config.penalized && self.dr_fit.is_some();
        let (p, lam, diag) = if reuse {
            let (fit, _) = self.dr_fit.as_ref().expect("checked");
            let d = self.ds.d;
            let eta = fit.omega_hat.eta();
            let mut w = NuisanceParams::zeros(d);
            w.set_eta(&eta);
            let diag = FitDiagnostics { lambdas: Some((fit.lambdas.0, 0.0)), support: Some(Support::of(&w)), iterations: fit.iterations, converged: fit.converged, residual_inf: fit.residual_inf, coefficients: Some(w.clone()) };
            (eta, fit.lambdas.0, diag)
        } else {
            let fixed = self.config.lambdas.map(|l| l.0);
            if fixed.is_none() {
                self.folds()?;
            }
            self.ensure_prep()?;
            let prep = self.prep.as_ref().expect("prepared above");
            let sys = EtaSystem::calibration(prep, &spec);
            let start = spec_init(prep, &spec).eta();
            let lam = match fixed {
                Some(l) => l,
                None => {
                    let grid = log_grid(slope_inf(&sys, &start), self.config.grid_size);
                    let fd = self.folds.as_ref().expect("folds built above");
                    cv_single(fd, &grid, &start, &cfg, |p| Box::new(EtaSystem::calibration(p, &spec)))?
                }
            };
            let root = solve_block(&sys, &start, 0.0, &cfg, None)?;
            let fit = fit_block(&sys, &root.p, lam, &cfg)?;
            let mut w = NuisanceParams::zeros(prep.d);
            w.set_eta(&fit.p);
            let diag = FitDiagnostics { lambdas: Some((lam, 0.0)), support: Some(Support::of(&w)), iterations: fit.steps, converged: fit.converged, residual_inf: fit.residual_inf, coefficients: Some(w.clone()) };
            (fit.p, lam, diag)
        };
        let prep = self.prep()?.clone();
        let mut sf = StackFit { prep, spec, nuisance: Nuisance::Calibration, form: ThetaForm::Ipw, p, theta: 0.0, lambda: lam, diagnostics: diag };
        sf.theta = mean_terms(&sf.prep, ThetaForm::Ipw, &sf.params(), &spec)?;
        let se = sandwich_penalized(&sf, &cfg)?;
        Ok(AteReport::from_fit(&sf, kind, se, true))
    }

    fn report_stack(&mut self, kind: EstimatorKind) -> Result<AteReport> {
        let spec = self.config.model_spec(self.ds.outcome_kind);
        let cfg = self.config.penalty;
        let d = self.ds.d;
        let full = |p: Piece| StackBlock::full(p, d);
        let out1 = Piece::Outcome { treated: true, on_a: false };
        let out0 = Piece::Outcome { treated: false, on_a: false };
        let tb = Piece::Treatment { on_a: false };
        let (blocks, form) = match kind {
            EstimatorKind::OrCombined => (vec![full(out1), full(out0)], ThetaForm::Or),
            EstimatorKind::IpwCombined => (vec![full(Piece::Selection), full(tb)], ThetaForm::Ipw),
            EstimatorKind::DrCombined => (vec![full(Piece::Selection), full(tb), full(out1), full(out0)], ThetaForm::Dr),
            EstimatorKind::OracleDr => {
                let s = self.config.oracle_support.as_ref().expect("checked");
                let b = |piece, cols: &Vec<usize>| StackBlock { piece, cols: cols.clone() };
                (vec![b(Piece::Selection, &s.alpha), b(tb, &s.tau), b(out1, &s.beta), b(out0, &s.gamma)], ThetaForm::Dr)
            }
            EstimatorKind::OrProbonly => {
                let a1 = Piece::Outcome { treated: true, on_a: true };
                let a0 = Piece::Outcome { treated: false, on_a: true };
                (vec![full(a1), full(a0)], ThetaForm::OrA)
            }
            EstimatorKind::IpwProbonly => (vec![full(Piece::Treatment { on_a: true })], ThetaForm::IpwA),
            EstimatorKind::DrProbonly => {
                let a1 = Piece::Outcome { treated: true, on_a: true };
                let a0 = Piece::Outcome { treated: false, on_a: true };
                (vec![full(Piece::Treatment { on_a: true }), full(a1), full(a0)], ThetaForm::DrA)
            }
            EstimatorKind::OrNonprob | EstimatorKind::NaiveNonprob => (vec![full(out1), full(out0)], ThetaForm::OrB),
            EstimatorKind::IpwNonprob => (vec![full(tb)], ThetaForm::IpwB),
            EstimatorKind::DrNonprob => (vec![full(tb), full(out1), full(out0)], ThetaForm::DrB),
            EstimatorKind::MeanDiffNonprob => {
                let b = |piece| StackBlock { piece, cols: vec![0] };
                (vec![b(out1), b(out0)], ThetaForm::OrB)
            }
            EstimatorKind::DrJoint => unreachable!("dr_joint uses the bias-reduced system"),
        };
        let prep = if kind.is_nonprob() { nonprob_prepared(self.ds, cfg.prob_clip)? } else { self.prep()?.clone() };
        let fit = fit_stack(prep, &spec, blocks, form, &cfg)?;
        let s = sandwich_unpenalized(&fit)?;
        Ok(AteReport::from_fit(&fit, kind, s.se, false))
    }

    /// Fits and reports one estimator.
    pub fn estimate(&mut self, kind: EstimatorKind) -> Result<AteReport> {
        self.check(kind)?;
        let spec = self.config.model_spec(self.ds.outcome_kind);
        spec.check(self.ds.outcome_kind)?;
        self.config.penalty.validate()?;
        match kind {
            EstimatorKind::DrJoint => self.report_dr(kind),
            EstimatorKind::DrCombined if self.penalized(kind) => self.report_dr(kind),
            EstimatorKind::OrCombined if self.penalized(kind) => self.report_or_penalized(),
            EstimatorKind::IpwCombined if self.penalized(kind) => self.report_ipw_penalized(),
            _ => self.report_stack(kind),
        }
    }
}

/// Sample B alone, treated as its own population of size `n_B`.
pub fn nonprob_dataset(ds: &CombinedDataset) -> CombinedDataset {
    let records: Vec<UnitRecord> = ds.records.iter().filter(|r| r.i_b).map(|r| UnitRecord { i_a: false, weight_a: None, ..r.clone() }).collect();
    CombinedDataset { pop_size: Some(records.len()), records, d: ds.d, outcome_kind: ds.outcome_kind }
}

fn nonprob_prepared(ds: &CombinedDataset, clip: f64) -> Result<Prepared> {
    let b = nonprob_dataset(ds);
    Prepared::build(&b, None, b.records.len() as f64, clip)
}

/// Fits the nuisance models the kind prescribes and returns its point estimate and standard error.
pub fn estimate_roster(ds: &CombinedDataset, kind: EstimatorKind, config: &EstimateConfig) -> Result<AteReport> {
    Roster::new(ds, config).estimate(kind)
}

/// Several estimators on one dataset, sharing folds and the bias-reduced fit.
pub fn estimate_set(ds: &CombinedDataset, kinds: &[EstimatorKind], config: &EstimateConfig) -> Vec<(EstimatorKind, Result<AteReport>)> {
    let mut roster = Roster::new(ds, config);
    let mut order: Vec<EstimatorKind> = kinds.to_vec();
    // the DR fit first so the IPW calibration can reuse its η̂
    order.sort_by_key(|k| *k != EstimatorKind::DrCombined);
    let mut out: Vec<(EstimatorKind, Result<AteReport>)> = order.into_iter().map(|k| (k, roster.estimate(k))).collect();
    out.sort_by_key(|(k, _)| kinds.iter().position(|q| q == k));
    out
}

/// Largest residual entry of a fitted stack (diagnostic).
pub fn stack_residual_inf(fit: &StackFit) -> Result<f64> {
    Ok(inf_norm(fit.system().residual(&fit.p)?.as_slice()))
}
