//! The DR influence function `φ`, the bias-reduced score `Ū(ω)`, its partial
//! systems `Ō(η)` and `Q̄(μ)`, and their Jacobians.

use std::cell::OnceCell;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{gram, ksum, x_b, xt_v};
use crate::models::{dot, expit, link_eval_clipped};
use crate::solver::BlockSystem;
use crate::types::{CombinedDataset, Link, ModelSpec, NuisanceParams, OutcomeKind, Parameterization, UnitRecord};

/// Probability clip used by the dataset-level convenience functions.
pub const DEFAULT_CLIP: f64 = 1e-6;

/// `Ū(ω)` split into its four blocks, in `(β, γ, α, τ)` order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector {
    pub u_beta: Vec<f64>,
    pub u_gamma: Vec<f64>,
    pub u_alpha: Vec<f64>,
    pub u_tau: Vec<f64>,
}

impl ScoreVector {
    pub fn zeros(d: usize) -> Self {
        ScoreVector { u_beta: vec![0.0; d], u_gamma: vec![0.0; d], u_alpha: vec![0.0; d], u_tau: vec![0.0; d] }
    }

    pub fn concat(&self) -> Vec<f64> {
        [self.u_beta.as_slice(), &self.u_gamma, &self.u_alpha, &self.u_tau].concat()
    }
}

/// A `2d × 2d` Jacobian with its row and column block labels.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockJacobian {
    pub matrix: DMatrix<f64>,
    pub row_blocks: [&'static str; 2],
    pub col_blocks: [&'static str; 2],
}

/// Inverse weights of a sample-B unit and their derivatives with respect to
/// the selection-slot (`a`) and treatment-slot (`b`) linear predictors.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Wts {
    pub w1: f64,
    pub w1a: f64,
    pub w1b: f64,
    pub w0: f64,
    pub w0a: f64,
    pub w0b: f64,
}

#[inline]
pub(crate) fn weights(param: Parameterization, la: f64, lb: f64, clip: f64) -> Wts {
    let pa = expit(la);
    let da = pa * (1.0 - pa);
    let pa = pa.clamp(clip, 1.0 - clip);
    let pb = expit(lb);
    let db = pb * (1.0 - pb);
    let pb = pb.clamp(clip, 1.0 - clip);
    match param {
        Parameterization::Conditional => {
            let q = 1.0 - pb;
            Wts {
                w1: 1.0 / (pa * pb),
                w1a: -da / (pa * pa * pb),
                w1b: -db / (pa * pb * pb),
                w0: 1.0 / (pa * q),
                w0a: -da / (pa * pa * q),
                w0b: db / (pa * q * q),
            }
        }
        Parameterization::Joint => Wts {
            w1: 1.0 / pa,
            w1a: -da / (pa * pa),
            w1b: 0.0,
            w0: 1.0 / pb,
            w0a: 0.0,
            w0b: -db / (pb * pb),
        },
    }
}

/// Sign applied to the `γ`/`τ`-paired rows so every diagonal Jacobian block is
/// positive definite; the joint control-arm weight decreases in `δ0`.
pub(crate) fn orientation(spec: &ModelSpec) -> f64 {
    if spec.is_joint() {
        -1.0
    } else {
        1.0
    }
}

fn need_tb(r: &UnitRecord, index: usize) -> Result<(f64, f64)> {
    let t = r.t.ok_or(Error::MissingField { index, what: "missing treatment in sample B" })?;
    let y = r.y.ok_or(Error::MissingField { index, what: "missing outcome in sample B" })?;
    Ok((if t { 1.0 } else { 0.0 }, y))
}

/// `φ(Z; θ, ω)` for one unit.
pub fn phi(record: &UnitRecord, theta: f64, omega: &NuisanceParams, spec: &ModelSpec) -> Result<f64> {
    phi_clipped(record, 0, theta, omega, spec, DEFAULT_CLIP)
}

pub(crate) fn phi_clipped(r: &UnitRecord, index: usize, theta: f64, omega: &NuisanceParams, spec: &ModelSpec, clip: f64) -> Result<f64> {
    let d = r.x.len();
    omega.check_dims(d)?;
    if !r.i_a && !r.i_b {
        return Ok(-theta);
    }
    let g1 = link_eval_clipped(spec.outcome_link, dot(&omega.beta, &r.x), clip).value;
    let g0 = link_eval_clipped(spec.outcome_link, dot(&omega.gamma, &r.x), clip).value;
    let mut v = r.d_a() * (g1 - g0);
    if r.i_b {
        let (t, y) = need_tb(r, index)?;
        let w = weights(spec.parameterization, dot(&omega.alpha, &r.x), dot(&omega.tau, &r.x), clip);
        v += t * w.w1 * (y - g1) - (1.0 - t) * w.w0 * (y - g0);
    }
    if !v.is_finite() {
        return Err(Error::NonFiniteLinearPredictor);
    }
    Ok(v - theta)
}

/// Sample-B units of one treatment arm.
#[derive(Debug, Clone)]
pub struct ArmData {
    pub x: DMatrix<f64>,
    pub y: Vec<f64>,
    /// Record index of each row.
    pub idx: Vec<usize>,
}

/// Sample-A units.
#[derive(Debug, Clone)]
pub struct SampleAData {
    pub x: DMatrix<f64>,
    pub d_a: Vec<f64>,
    pub t: Vec<Option<bool>>,
    pub y: Vec<Option<f64>>,
    pub idx: Vec<usize>,
}

/// Column-major copies of the A and B designs, split by treatment arm in B.
///
/// The canonical unit order used for per-unit contributions is: sample A,
/// then treated B units, then control B units.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub n_pop: f64,
    pub d: usize,
    pub clip: f64,
    pub outcome_kind: OutcomeKind,
    pub a: SampleAData,
    pub b1: ArmData,
    pub b0: ArmData,
}

fn to_matrix(rows: &[&[f64]], d: usize) -> DMatrix<f64> {
    let n = rows.len();
    DMatrix::from_fn(n, d, |i, j| rows[i][j])
}

impl Prepared {
    /// Prepares every record, with N taken from the dataset.
    pub fn new(ds: &CombinedDataset, clip: f64) -> Result<Self> {
        Self::build(ds, None, ds.n_pop()?, clip)
    }

    /// Prepares the records flagged in `keep` with an explicit population size.
    pub fn build(ds: &CombinedDataset, keep: Option<&[bool]>, n_pop: f64, clip: f64) -> Result<Self> {
        let d = ds.d;
        let (mut xa, mut da, mut ta, mut ya, mut ia) = (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let (mut x1, mut y1, mut i1) = (Vec::new(), Vec::new(), Vec::new());
        let (mut x0, mut y0, mut i0) = (Vec::new(), Vec::new(), Vec::new());
        for (k, r) in ds.records.iter().enumerate() {
            if keep.is_some_and(|m| !m[k]) {
                continue;
            }
            if r.x.len() != d {
                return Err(Error::DimensionMismatch { expected: d, got: r.x.len() });
            }
            if r.x.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteLinearPredictor);
            }
            if r.i_a && r.i_b {
                return Err(Error::InvalidData(format!("overlap at index {k}")));
            }
            if r.i_a {
                xa.push(r.x.as_slice());
                da.push(r.d_a());
                ta.push(r.t);
                ya.push(r.y);
                ia.push(k);
            } else if r.i_b {
                let (t, y) = need_tb(r, k)?;
                if t == 1.0 {
                    x1.push(r.x.as_slice());
                    y1.push(y);
                    i1.push(k);
                } else {
                    x0.push(r.x.as_slice());
                    y0.push(y);
                    i0.push(k);
                }
            }
        }
        // canonical row order makes every sum independent of record order
        let order = |rows: &[&[f64]], extra: &dyn Fn(usize) -> [u64; 2]| -> Vec<usize> {
            let mut o: Vec<usize> = (0..rows.len()).collect();
            o.sort_by(|&i, &j| {
                let ki = rows[i].iter().map(|v| v.to_bits());
                let kj = rows[j].iter().map(|v| v.to_bits());
                ki.cmp(kj).then(extra(i).cmp(&extra(j)))
            });
            o
        };
        let oa = order(&xa, &|i| [da[i].to_bits(), ya[i].map_or(0, |v: f64| v.to_bits()) ^ (ta[i] == Some(true)) as u64]);
        let (xa, da, ta, ya, ia) = (
            oa.iter().map(|&i| xa[i]).collect::<Vec<_>>(),
            oa.iter().map(|&i| da[i]).collect::<Vec<_>>(),
            oa.iter().map(|&i| ta[i]).collect::<Vec<_>>(),
            oa.iter().map(|&i| ya[i]).collect::<Vec<_>>(),
            oa.iter().map(|&i| ia[i]).collect::<Vec<_>>(),
        );
        let o1 = order(&x1, &|i| [y1[i].to_bits(), 0]);
        let (x1, y1, i1) = (o1.iter().map(|&i| x1[i]).collect::<Vec<_>>(), o1.iter().map(|&i| y1[i]).collect::<Vec<_>>(), o1.iter().map(|&i| i1[i]).collect::<Vec<_>>());
        let o0 = order(&x0, &|i| [y0[i].to_bits(), 0]);
        let (x0, y0, i0) = (o0.iter().map(|&i| x0[i]).collect::<Vec<_>>(), o0.iter().map(|&i| y0[i]).collect::<Vec<_>>(), o0.iter().map(|&i| i0[i]).collect::<Vec<_>>());
        Ok(Prepared {
            n_pop,
            d,
            clip,
            outcome_kind: ds.outcome_kind,
            a: SampleAData { x: to_matrix(&xa, d), d_a: da, t: ta, y: ya, idx: ia },
            b1: ArmData { x: to_matrix(&x1, d), y: y1, idx: i1 },
            b0: ArmData { x: to_matrix(&x0, d), y: y0, idx: i0 },
        })
    }

    pub fn n_a(&self) -> usize {
        self.a.d_a.len()
    }

    pub fn n_b(&self) -> usize {
        self.b1.y.len() + self.b0.y.len()
    }

    pub fn n_units(&self) -> usize {
        self.n_a() + self.n_b()
    }

    fn arm(&self, treated: bool) -> &ArmData {
        if treated {
            &self.b1
        } else {
            &self.b0
        }
    }

    /// Per-unit `φ + θ` in canonical order.
    pub fn phi_terms(&self, omega: &NuisanceParams, spec: &ModelSpec) -> Vec<f64> {
        let link = spec.outcome_link;
        let mut out = Vec::with_capacity(self.n_units());
        let g1a = x_b(&self.a.x, &omega.beta);
        let g0a = x_b(&self.a.x, &omega.gamma);
        for i in 0..self.n_a() {
            let g1 = link_eval_clipped(link, g1a[i], self.clip).value;
            let g0 = link_eval_clipped(link, g0a[i], self.clip).value;
            out.push(self.a.d_a[i] * (g1 - g0));
        }
        for treated in [true, false] {
            let arm = self.arm(treated);
            let la = x_b(&arm.x, &omega.alpha);
            let lb = x_b(&arm.x, &omega.tau);
            let own = x_b(&arm.x, if treated { &omega.beta } else { &omega.gamma });
            for i in 0..arm.y.len() {
                let w = weights(spec.parameterization, la[i], lb[i], self.clip);
                let g = link_eval_clipped(link, own[i], self.clip).value;
                out.push(if treated { w.w1 * (arm.y[i] - g) } else { -w.w0 * (arm.y[i] - g) });
            }
        }
        out
    }

    /// `N⁻¹ Σ φ(Z; θ, ω)`.
    pub fn mean_phi(&self, theta: f64, omega: &NuisanceParams, spec: &ModelSpec) -> f64 {
        ksum(self.phi_terms(omega, spec)) / self.n_pop - theta
    }

    /// The full bias-reduced score `Ū(ω)`.
    pub fn score(&self, omega: &NuisanceParams, spec: &ModelSpec) -> ScoreVector {
        let o = EtaSystem::new(self, spec, &omega.mu()).with_orientation(1.0).eval_residual(&omega.eta());
        let q = MuSystem::new(self, spec, &omega.eta()).with_orientation(1.0).eval_residual(&omega.mu());
        let d = self.d;
        ScoreVector { u_beta: o[..d].to_vec(), u_gamma: o[d..].to_vec(), u_alpha: q[..d].to_vec(), u_tau: q[d..].to_vec() }
    }
}

fn outcome_derivs(x: &DMatrix<f64>, coef: &[f64], link: Link, clip: f64) -> Vec<f64> {
    match link {
        Link::Identity => vec![1.0; x.nrows()],
        Link::Logit => x_b(x, coef).into_iter().map(|l| link_eval_clipped(link, l, clip).dvalue).collect(),
    }
}

/// `Ō(η) = (∂_β φ̄, ∂_γ φ̄)` as a function of `η = (α, τ)` with `μ` frozen.
///
/// With `calibration` the outcome derivative factors are replaced by 1, which
/// gives the calibration equations used by the penalized IPW estimator.
pub struct EtaSystem<'a> {
    prep: &'a Prepared,
    param: Parameterization,
    a_beta: Vec<f64>,
    a_gamma: Vec<f64>,
    a_g1p: Vec<f64>,
    a_g0p: Vec<f64>,
    g1p: Vec<f64>,
    g0p: Vec<f64>,
    orient: f64,
    exempt: Vec<bool>,
}

fn intercept_mask(d: usize, blocks: usize) -> Vec<bool> {
    (0..d * blocks).map(|j| j % d == 0).collect()
}

impl<'a> EtaSystem<'a> {
    pub fn new(prep: &'a Prepared, spec: &ModelSpec, mu: &[f64]) -> Self {
        let d = prep.d;
        let link = spec.outcome_link;
        let a_g1p = outcome_derivs(&prep.a.x, &mu[..d], link, prep.clip);
        let a_g0p = outcome_derivs(&prep.a.x, &mu[d..], link, prep.clip);
        let g1p = outcome_derivs(&prep.b1.x, &mu[..d], link, prep.clip);
        let g0p = outcome_derivs(&prep.b0.x, &mu[d..], link, prep.clip);
        Self::assemble(prep, spec, a_g1p, a_g0p, g1p, g0p)
    }

    /// Calibration variant with unit outcome derivatives.
    pub fn calibration(prep: &'a Prepared, spec: &ModelSpec) -> Self {
        Self::assemble(prep, spec, vec![1.0; prep.n_a()], vec![1.0; prep.n_a()], vec![1.0; prep.b1.y.len()], vec![1.0; prep.b0.y.len()])
    }

    fn assemble(prep: &'a Prepared, spec: &ModelSpec, a_g1p: Vec<f64>, a_g0p: Vec<f64>, g1p: Vec<f64>, g0p: Vec<f64>) -> Self {
        let n = prep.n_pop;
        let w1: Vec<f64> = prep.a.d_a.iter().zip(&a_g1p).map(|(d, g)| d * g).collect();
        let w0: Vec<f64> = prep.a.d_a.iter().zip(&a_g0p).map(|(d, g)| d * g).collect();
        EtaSystem {
            prep,
            param: spec.parameterization,
            a_beta: xt_v(&prep.a.x, &w1, 1.0 / n),
            a_gamma: xt_v(&prep.a.x, &w0, 1.0 / n),
            a_g1p,
            a_g0p,
            g1p,
            g0p,
            orient: orientation(spec),
            exempt: intercept_mask(prep.d, 2),
        }
    }

    pub fn with_orientation(mut self, s: f64) -> Self {
        self.orient = s;
        self
    }

    fn arm_weights(&self, treated: bool, eta: &[f64]) -> Vec<Wts> {
        let d = self.prep.d;
        let arm = self.prep.arm(treated);
        let la = x_b(&arm.x, &eta[..d]);
        let lb = x_b(&arm.x, &eta[d..]);
        la.iter().zip(&lb).map(|(&a, &b)| weights(self.param, a, b, self.prep.clip)).collect()
    }

    pub(crate) fn eval_residual(&self, eta: &[f64]) -> Vec<f64> {
        let n = self.prep.n_pop;
        let w1 = self.arm_weights(true, eta);
        let v1: Vec<f64> = w1.iter().zip(&self.g1p).map(|(w, g)| w.w1 * g).collect();
        let b1 = xt_v(&self.prep.b1.x, &v1, 1.0 / n);
        let w0 = self.arm_weights(false, eta);
        let v0: Vec<f64> = w0.iter().zip(&self.g0p).map(|(w, g)| w.w0 * g).collect();
        let b0 = xt_v(&self.prep.b0.x, &v0, 1.0 / n);
        let mut out: Vec<f64> = self.a_beta.iter().zip(&b1).map(|(a, b)| a - b).collect();
        out.extend(self.a_gamma.iter().zip(&b0).map(|(a, b)| self.orient * (b - a)));
        out
    }

    pub(crate) fn eval_jacobian(&self, eta: &[f64]) -> DMatrix<f64> {
        let d = self.prep.d;
        let n = self.prep.n_pop;
        let joint = self.param == Parameterization::Joint;
        let mut j = DMatrix::zeros(2 * d, 2 * d);
        let w1 = self.arm_weights(true, eta);
        let ca: Vec<f64> = w1.iter().zip(&self.g1p).map(|(w, g)| -g * w.w1a / n).collect();
        j.view_mut((0, 0), (d, d)).copy_from(&gram(&self.prep.b1.x, &ca));
        if !joint {
            let cb: Vec<f64> = w1.iter().zip(&self.g1p).map(|(w, g)| -g * w.w1b / n).collect();
            j.view_mut((0, d), (d, d)).copy_from(&gram(&self.prep.b1.x, &cb));
        }
        let w0 = self.arm_weights(false, eta);
        if !joint {
            let ca: Vec<f64> = w0.iter().zip(&self.g0p).map(|(w, g)| self.orient * g * w.w0a / n).collect();
            j.view_mut((d, 0), (d, d)).copy_from(&gram(&self.prep.b0.x, &ca));
        }
        let cb: Vec<f64> = w0.iter().zip(&self.g0p).map(|(w, g)| self.orient * g * w.w0b / n).collect();
        j.view_mut((d, d), (d, d)).copy_from(&gram(&self.prep.b0.x, &cb));
        j
    }

    /// Per-unit rows of `N · Ō(η)` in canonical order.
    pub(crate) fn eval_unit_scores(&self, eta: &[f64]) -> DMatrix<f64> {
        let p = self.prep;
        let d = p.d;
        let mut m = DMatrix::zeros(p.n_units(), 2 * d);
        for i in 0..p.n_a() {
            for k in 0..d {
                let x = p.a.x[(i, k)];
                m[(i, k)] = p.a.d_a[i] * self.a_g1p[i] * x;
                m[(i, d + k)] = -self.orient * p.a.d_a[i] * self.a_g0p[i] * x;
            }
        }
        let off = p.n_a();
        for (i, w) in self.arm_weights(true, eta).iter().enumerate() {
            for k in 0..d {
                m[(off + i, k)] = -w.w1 * self.g1p[i] * p.b1.x[(i, k)];
            }
        }
        let off = off + p.b1.y.len();
        for (i, w) in self.arm_weights(false, eta).iter().enumerate() {
            for k in 0..d {
                m[(off + i, d + k)] = self.orient * w.w0 * self.g0p[i] * p.b0.x[(i, k)];
            }
        }
        m
    }
}

impl BlockSystem for EtaSystem<'_> {
    fn dim(&self) -> usize {
        2 * self.prep.d
    }
    fn exempt(&self) -> &[bool] {
        &self.exempt
    }
    fn residual(&self, p: &[f64]) -> Result<DVector<f64>> {
        finite(self.eval_residual(p))
    }
    fn jacobian(&self, p: &[f64]) -> Result<DMatrix<f64>> {
        Ok(self.eval_jacobian(p))
    }
    fn unit_scores(&self, p: &[f64]) -> Result<DMatrix<f64>> {
        Ok(self.eval_unit_scores(p))
    }
}

pub(crate) fn finite(v: Vec<f64>) -> Result<DVector<f64>> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(DVector::from_vec(v))
    } else {
        Err(Error::Numerical("non-finite estimating-equation residual".into()))
    }
}

/// `Q̄(μ) = (∂_α φ̄, ∂_τ φ̄)` as a function of `μ = (β, γ)` with `η` frozen.
pub struct MuSystem<'a> {
    prep: &'a Prepared,
    link: Link,
    w1: Vec<Wts>,
    w0: Vec<Wts>,
    orient: f64,
    exempt: Vec<bool>,
    cached: OnceCell<DMatrix<f64>>,
}

impl<'a> MuSystem<'a> {
    pub fn new(prep: &'a Prepared, spec: &ModelSpec, eta: &[f64]) -> Self {
        let d = prep.d;
        let ws = |arm: &ArmData| -> Vec<Wts> {
            let la = x_b(&arm.x, &eta[..d]);
            let lb = x_b(&arm.x, &eta[d..]);
            la.iter().zip(&lb).map(|(&a, &b)| weights(spec.parameterization, a, b, prep.clip)).collect()
        };
        MuSystem {
            prep,
            link: spec.outcome_link,
            w1: ws(&prep.b1),
            w0: ws(&prep.b0),
            orient: orientation(spec),
            exempt: intercept_mask(d, 2),
            cached: OnceCell::new(),
        }
    }

    pub fn with_orientation(mut self, s: f64) -> Self {
        self.orient = s;
        self
    }

    fn residuals(&self, treated: bool, coef: &[f64]) -> Vec<f64> {
        let arm = self.prep.arm(treated);
        x_b(&arm.x, coef)
            .into_iter()
            .zip(&arm.y)
            .map(|(l, y)| y - link_eval_clipped(self.link, l, self.prep.clip).value)
            .collect()
    }

    pub(crate) fn eval_residual(&self, mu: &[f64]) -> Vec<f64> {
        let d = self.prep.d;
        let n = self.prep.n_pop;
        let r1 = self.residuals(true, &mu[..d]);
        let r0 = self.residuals(false, &mu[d..]);
        let pick = |w: &[Wts], r: &[f64], f: fn(&Wts) -> f64| -> Vec<f64> { w.iter().zip(r).map(|(w, r)| f(w) * r).collect() };
        let ua1 = xt_v(&self.prep.b1.x, &pick(&self.w1, &r1, |w| w.w1a), 1.0 / n);
        let ua0 = xt_v(&self.prep.b0.x, &pick(&self.w0, &r0, |w| w.w0a), 1.0 / n);
        let ub1 = xt_v(&self.prep.b1.x, &pick(&self.w1, &r1, |w| w.w1b), 1.0 / n);
        let ub0 = xt_v(&self.prep.b0.x, &pick(&self.w0, &r0, |w| w.w0b), 1.0 / n);
        let mut out: Vec<f64> = ua1.iter().zip(&ua0).map(|(a, b)| a - b).collect();
        out.extend(ub1.iter().zip(&ub0).map(|(a, b)| self.orient * (a - b)));
        out
    }

    fn compute_jacobian(&self, mu: &[f64]) -> DMatrix<f64> {
        let d = self.prep.d;
        let n = self.prep.n_pop;
        let g1p = outcome_derivs(&self.prep.b1.x, &mu[..d], self.link, self.prep.clip);
        let g0p = outcome_derivs(&self.prep.b0.x, &mu[d..], self.link, self.prep.clip);
        let s = self.orient;
        let mut j = DMatrix::zeros(2 * d, 2 * d);
        let c: Vec<f64> = self.w1.iter().zip(&g1p).map(|(w, g)| -g * w.w1a / n).collect();
        j.view_mut((0, 0), (d, d)).copy_from(&gram(&self.prep.b1.x, &c));
        let c: Vec<f64> = self.w0.iter().zip(&g0p).map(|(w, g)| g * w.w0a / n).collect();
        if c.iter().any(|v| *v != 0.0) {
            j.view_mut((0, d), (d, d)).copy_from(&gram(&self.prep.b0.x, &c));
        }
        let c: Vec<f64> = self.w1.iter().zip(&g1p).map(|(w, g)| -s * g * w.w1b / n).collect();
        if c.iter().any(|v| *v != 0.0) {
            j.view_mut((d, 0), (d, d)).copy_from(&gram(&self.prep.b1.x, &c));
        }
        let c: Vec<f64> = self.w0.iter().zip(&g0p).map(|(w, g)| s * g * w.w0b / n).collect();
        j.view_mut((d, d), (d, d)).copy_from(&gram(&self.prep.b0.x, &c));
        j
    }

    pub(crate) fn eval_jacobian(&self, mu: &[f64]) -> DMatrix<f64> {
        if self.link == Link::Identity {
            // constant in μ for linear outcome models
            return self.cached.get_or_init(|| self.compute_jacobian(mu)).clone();
        }
        self.compute_jacobian(mu)
    }
}

impl BlockSystem for MuSystem<'_> {
    fn dim(&self) -> usize {
        2 * self.prep.d
    }
    fn exempt(&self) -> &[bool] {
        &self.exempt
    }
    fn residual(&self, p: &[f64]) -> Result<DVector<f64>> {
        finite(self.eval_residual(p))
    }
    fn jacobian(&self, p: &[f64]) -> Result<DMatrix<f64>> {
        Ok(self.eval_jacobian(p))
    }
    fn constant_jacobian(&self) -> bool {
        self.link == Link::Identity
    }
    fn unit_scores(&self, p: &[f64]) -> Result<DMatrix<f64>> {
        let pr = self.prep;
        let d = pr.d;
        let mut m = DMatrix::zeros(pr.n_units(), 2 * d);
        let r1 = self.residuals(true, &p[..d]);
        let r0 = self.residuals(false, &p[d..]);
        let off = pr.n_a();
        for (i, w) in self.w1.iter().enumerate() {
            for k in 0..d {
                let x = pr.b1.x[(i, k)];
                m[(off + i, k)] = r1[i] * w.w1a * x;
                m[(off + i, d + k)] = self.orient * r1[i] * w.w1b * x;
            }
        }
        let off = off + pr.b1.y.len();
        for (i, w) in self.w0.iter().enumerate() {
            for k in 0..d {
                let x = pr.b0.x[(i, k)];
                m[(off + i, k)] = -r0[i] * w.w0a * x;
                m[(off + i, d + k)] = -self.orient * r0[i] * w.w0b * x;
            }
        }
        Ok(m)
    }
}

/// The whole system `(Ō, Q̄)` in the unknown `(η, μ)`, solved jointly by the
/// unpenalized reference solver.
pub struct FullSystem<'a> {
    pub prep: &'a Prepared,
    pub spec: ModelSpec,
    exempt: Vec<bool>,
}

impl<'a> FullSystem<'a> {
    pub fn new(prep: &'a Prepared, spec: &ModelSpec) -> Self {
        FullSystem { prep, spec: *spec, exempt: intercept_mask(prep.d, 4) }
    }

    fn eval(&self, p: &[f64]) -> Vec<f64> {
        let h = 2 * self.prep.d;
        let mut o = EtaSystem::new(self.prep, &self.spec, &p[h..]).eval_residual(&p[..h]);
        o.extend(MuSystem::new(self.prep, &self.spec, &p[..h]).eval_residual(&p[h..]));
        o
    }
}

impl BlockSystem for FullSystem<'_> {
    fn dim(&self) -> usize {
        4 * self.prep.d
    }
    fn exempt(&self) -> &[bool] {
        &self.exempt
    }
    fn residual(&self, p: &[f64]) -> Result<DVector<f64>> {
        finite(self.eval(p))
    }
    fn jacobian(&self, p: &[f64]) -> Result<DMatrix<f64>> {
        let h = 2 * self.prep.d;
        let mut j = crate::solver::fd_jacobian(|q| Ok(DVector::from_vec(self.eval(q))), p)?;
        let je = EtaSystem::new(self.prep, &self.spec, &p[h..]).eval_jacobian(&p[..h]);
        let jm = MuSystem::new(self.prep, &self.spec, &p[..h]).eval_jacobian(&p[h..]);
        j.view_mut((0, 0), (h, h)).copy_from(&je);
        j.view_mut((h, h), (h, h)).copy_from(&jm);
        Ok(j)
    }
}

fn prepared(ds: &CombinedDataset) -> Result<Prepared> {
    Prepared::new(ds, DEFAULT_CLIP)
}

fn check_block(v: &[f64], d: usize) -> Result<()> {
    if v.len() != 2 * d {
        return Err(Error::DimensionMismatch { expected: 2 * d, got: v.len() });
    }
    Ok(())
}

/// `Ū(ω)` averaged over the population.
pub fn score_u(ds: &CombinedDataset, omega: &NuisanceParams, spec: &ModelSpec) -> Result<ScoreVector> {
    omega.check_dims(ds.d)?;
    let s = prepared(ds)?.score(omega, spec);
    if s.concat().iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite score".into()));
    }
    Ok(s)
}

/// Score under the joint parameterization; `params.alpha` holds `δ1` and `params.tau` holds `δ0`.
pub fn score_u_joint(ds: &CombinedDataset, params: &NuisanceParams, spec: &ModelSpec) -> Result<ScoreVector> {
    if !spec.is_joint() {
        return Err(Error::Config("score_u_joint requires the joint parameterization".into()));
    }
    score_u(ds, params, spec)
}

/// `Ō(η)` at frozen `μ`.
pub fn partial_o(ds: &CombinedDataset, eta: &[f64], mu_fixed: &[f64], spec: &ModelSpec) -> Result<Vec<f64>> {
    check_block(eta, ds.d)?;
    check_block(mu_fixed, ds.d)?;
    let p = prepared(ds)?;
    Ok(EtaSystem::new(&p, spec, mu_fixed).with_orientation(1.0).eval_residual(eta))
}

/// `Q̄(μ)` at frozen `η`.
pub fn partial_q(ds: &CombinedDataset, eta_fixed: &[f64], mu: &[f64], spec: &ModelSpec) -> Result<Vec<f64>> {
    check_block(eta_fixed, ds.d)?;
    check_block(mu, ds.d)?;
    let p = prepared(ds)?;
    Ok(MuSystem::new(&p, spec, eta_fixed).with_orientation(1.0).eval_residual(mu))
}

/// `∇(η) = ∂Ō/∂η`.
pub fn jacobian_eta(ds: &CombinedDataset, eta: &[f64], mu_fixed: &[f64], spec: &ModelSpec) -> Result<BlockJacobian> {
    check_block(eta, ds.d)?;
    check_block(mu_fixed, ds.d)?;
    let p = prepared(ds)?;
    Ok(BlockJacobian {
        matrix: EtaSystem::new(&p, spec, mu_fixed).with_orientation(1.0).eval_jacobian(eta),
        row_blocks: ["u_beta", "u_gamma"],
        col_blocks: ["alpha", "tau"],
    })
}

/// `∇(μ) = ∂Q̄/∂μ`.
pub fn jacobian_mu(ds: &CombinedDataset, eta_fixed: &[f64], mu: &[f64], spec: &ModelSpec) -> Result<BlockJacobian> {
    check_block(eta_fixed, ds.d)?;
    check_block(mu, ds.d)?;
    let p = prepared(ds)?;
    Ok(BlockJacobian {
        matrix: MuSystem::new(&p, spec, eta_fixed).with_orientation(1.0).eval_jacobian(mu),
        row_blocks: ["u_alpha", "u_tau"],
        col_blocks: ["beta", "gamma"],
    })
}

/// `N⁻¹ Σ φ(Z; θ, ω)` over the dataset.
pub fn mean_phi(ds: &CombinedDataset, theta: f64, omega: &NuisanceParams, spec: &ModelSpec) -> Result<f64> {
    omega.check_dims(ds.d)?;
    Ok(prepared(ds)?.mean_phi(theta, omega, spec))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> ModelSpec {
        ModelSpec::for_outcome(OutcomeKind::Continuous)
    }

    #[test]
    fn phi_examples() {
        let r = UnitRecord::sample_a(1.0, vec![1.0]);
        let w = NuisanceParams { alpha: vec![0.0], tau: vec![0.0], beta: vec![0.5], gamma: vec![0.2] };
        assert!((phi(&r, 0.0, &w, &spec()).unwrap() - 0.3).abs() < 1e-15);
        let r = UnitRecord { i_a: true, i_b: true, weight_a: Some(2.0), x: vec![1.0], t: Some(true), y: Some(1.0) };
        assert!((phi(&r, 0.0, &w, &spec()).unwrap() - 2.6).abs() < 1e-12);
        assert!(phi(&r, 2.6, &w, &spec()).unwrap().abs() < 1e-12);
        let mut bad = r.clone();
        bad.y = None;
        assert!(phi(&bad, 0.0, &w, &spec()).is_err());
    }

    #[test]
    fn single_a_unit_score() {
        let ds = CombinedDataset::new(vec![UnitRecord::sample_a(1.0, vec![1.0])], Some(1), OutcomeKind::Continuous);
        let s = score_u(&ds, &NuisanceParams::zeros(1), &spec()).unwrap();
        assert_eq!(s.u_beta, vec![1.0]);
        assert_eq!(s.u_gamma, vec![-1.0]);
        assert_eq!(s.u_alpha, vec![0.0]);
        assert_eq!(s.u_tau, vec![0.0]);
    }

    #[test]
    fn empty_dataset_gives_zero() {
        let ds = CombinedDataset { records: vec![], pop_size: Some(1), d: 3, outcome_kind: OutcomeKind::Continuous };
        let w = NuisanceParams::zeros(3);
        assert_eq!(score_u(&ds, &w, &spec()).unwrap(), ScoreVector::zeros(3));
        assert_eq!(partial_o(&ds, &w.eta(), &w.mu(), &spec()).unwrap(), vec![0.0; 6]);
        assert_eq!(partial_q(&ds, &w.eta(), &w.mu(), &spec()).unwrap(), vec![0.0; 6]);
        assert_eq!(jacobian_eta(&ds, &w.eta(), &w.mu(), &spec()).unwrap().matrix, DMatrix::zeros(6, 6));
    }

    #[test]
    fn single_unit_jacobian_eta_by_hand() {
        let ds = CombinedDataset::new(vec![UnitRecord::sample_b(vec![1.0], true, 1.0)], Some(1), OutcomeKind::Continuous);
        let j = jacobian_eta(&ds, &[0.0, 0.0], &[0.5, 0.2], &spec()).unwrap().matrix;
        assert!((j[(0, 0)] - 2.0).abs() < 1e-12);
        assert!((j[(0, 1)] - 2.0).abs() < 1e-12);
        assert_eq!(j[(1, 0)], 0.0);
        assert_eq!(j[(1, 1)], 0.0);
        // ∇(μ) rows (u_alpha, u_tau), cols (β, γ): mirrored entries
        let jm = jacobian_mu(&ds, &[0.0, 0.0], &[0.5, 0.2], &spec()).unwrap().matrix;
        assert!((jm[(0, 0)] - 2.0).abs() < 1e-12);
        assert!((jm[(1, 0)] - 2.0).abs() < 1e-12);
        assert_eq!(jm[(0, 1)], 0.0);
    }
}
