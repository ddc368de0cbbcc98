//! LQA Newton-Raphson block solves, Algorithm-1 alternation and
//! cross-validation of the penalty levels.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{inf_norm, solve_with_jitter, two_norm};
use crate::models::logit;
use crate::penalty::{lqa_diag_masked, zero_crossing_residual};
use crate::system::{EtaSystem, MuSystem, Prepared};
use crate::types::{CombinedDataset, Link, ModelSpec, NuisanceParams, PenaltyConfig};

/// A square estimating system `F(p) = 0` with an analytic or numeric Jacobian.
///
/// Rows are oriented so the Jacobian diagonal is positive, which is what makes
/// adding the LQA penalty `Σ p` shrink coefficients toward zero.
pub trait BlockSystem {
    fn dim(&self) -> usize;
    /// Coordinates exempt from penalization (intercepts).
    fn exempt(&self) -> &[bool];
    fn residual(&self, p: &[f64]) -> Result<DVector<f64>>;
    fn jacobian(&self, p: &[f64]) -> Result<DMatrix<f64>>;
    /// True when the Jacobian does not depend on `p`.
    fn constant_jacobian(&self) -> bool {
        false
    }
    /// Per-unit rows in canonical unit order; `residual = N⁻¹ Σ rows`.
    fn unit_scores(&self, _p: &[f64]) -> Result<DMatrix<f64>> {
        Err(Error::Numerical("per-unit scores unavailable for this system".into()))
    }
}

/// Central-difference Jacobian, step `1e-6 · max(1, |p_j|)`.
pub fn fd_jacobian<F>(f: F, p: &[f64]) -> Result<DMatrix<f64>>
where
    F: Fn(&[f64]) -> Result<DVector<f64>>,
{
    let n = p.len();
    let mut cols = Vec::with_capacity(n);
    let mut q = p.to_vec();
    for j in 0..n {
        let h = 1e-6 * p[j].abs().max(1.0);
        q[j] = p[j] + h;
        let up = f(&q)?;
        q[j] = p[j] - h;
        let dn = f(&q)?;
        q[j] = p[j];
        cols.push((up - dn) / (2.0 * h));
    }
    let m = cols.first().map_or(0, |c| c.len());
    Ok(DMatrix::from_fn(m, n, |i, j| cols[j][i]))
}

/// Which half of `ω` a penalty level applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Block {
    Eta,
    Mu,
}

/// State of an inner solve.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockFit {
    pub p: Vec<f64>,
    pub steps: usize,
    pub converged: bool,
    /// Smoothed penalized residual norm (2-norm) after each accepted step.
    pub trace: Vec<f64>,
    /// `‖Ū^p‖∞` with zero coordinates judged by the zero-crossing rule.
    pub residual_inf: f64,
}

fn free_mask(n: usize, free: Option<&[bool]>) -> Vec<bool> {
    free.map_or_else(|| vec![true; n], |f| f.to_vec())
}

fn smoothed(f: &DVector<f64>, p: &[f64], sig: &[f64], free: &[bool]) -> Vec<f64> {
    (0..p.len()).filter(|&j| free[j]).map(|j| f[j] + sig[j] * p[j]).collect()
}

fn lqa(sys: &dyn BlockSystem, p: &[f64], lambda: f64, cfg: &PenaltyConfig) -> Vec<f64> {
    lqa_diag_masked(p, lambda, cfg.a, cfg.epsilon, sys.exempt())
}

/// Outcome of one damped LQA Newton step.
#[derive(Debug, Clone)]
struct Step {
    p: Vec<f64>,
    f: DVector<f64>,
    g_norm: f64,
    moved: bool,
    /// Accepted without halving.
    full: bool,
    max_move: f64,
}

fn lqa_step(sys: &dyn BlockSystem, p: &[f64], f: &DVector<f64>, lambda: f64, cfg: &PenaltyConfig, free: &[bool], jac: &DMatrix<f64>) -> Result<Step> {
    let sig = lqa(sys, p, lambda, cfg);
    let g = smoothed(f, p, &sig, free);
    let g_norm = two_norm(&g);
    let idx: Vec<usize> = (0..p.len()).filter(|&j| free[j]).collect();
    let m = DMatrix::from_fn(idx.len(), idx.len(), |a, b| jac[(idx[a], idx[b])] + if a == b { sig[idx[a]] } else { 0.0 });
    let rhs = DVector::from_iterator(idx.len(), g.iter().map(|v| -v));
    let delta = solve_with_jitter(&m, &rhs)?;
    let mut t = 1.0;
    for k in 0..=cfg.max_halvings {
        let mut q = p.to_vec();
        for (c, &j) in idx.iter().enumerate() {
            q[j] = p[j] + t * delta[c];
        }
        if let Ok(fq) = sys.residual(&q) {
            let sq = lqa(sys, &q, lambda, cfg);
            let gq = two_norm(&smoothed(&fq, &q, &sq, free));
            if gq < g_norm {
                return Ok(Step { p: q, f: fq, g_norm: gq, moved: true, full: k == 0, max_move: t * inf_norm(delta.as_slice()) });
            }
        }
        t *= 0.5;
    }
    Ok(Step { p: p.to_vec(), f: f.clone(), g_norm, moved: false, full: false, max_move: 0.0 })
}

/// Steps longer than this (∞-norm) trigger a fresh Jacobian.
const JACOBIAN_REUSE_STEP: f64 = 1e-1;

/// One damped Newton step `p − (∇ + Σ_λ)⁻¹ (F + Σ_λ p)` on a block system.
///
/// Step-halving (at most `max_halvings` times) enforces a decrease of the
/// smoothed penalized residual; if no trial point decreases it the current
/// point is returned unchanged.
pub fn newton_block_update(sys: &dyn BlockSystem, current: &[f64], lambda: f64, config: &PenaltyConfig) -> Result<Vec<f64>> {
    let f = sys.residual(current)?;
    let free = vec![true; current.len()];
    let jac = sys.jacobian(current)?;
    Ok(lqa_step(sys, current, &f, lambda, config, &free, &jac)?.p)
}

/// Stopping measure of an inner solve.
///
/// Slopes below `zero_threshold` are judged by the zero-crossing rule
/// `|F_j| <= λ`; the smoothed LQA residual is nearly vertical there, so
/// insisting on it would only chase those coordinates toward zero.
fn stop_residual(sys: &dyn BlockSystem, f: &DVector<f64>, p: &[f64], lambda: f64, cfg: &PenaltyConfig, free: &[bool]) -> f64 {
    let sig = lqa(sys, p, lambda, cfg);
    let ex = sys.exempt();
    (0..p.len())
        .filter(|&j| free[j])
        .map(|j| {
            if lambda > 0.0 && !ex[j] && p[j].abs() < cfg.zero_threshold {
                (f[j].abs() - lambda).max(0.0)
            } else {
                (f[j] + sig[j] * p[j]).abs()
            }
        })
        .fold(0.0, f64::max)
}

/// Iterates LQA Newton steps until the penalized residual's ∞-norm drops below
/// `inner_tol`, the step stalls, or `inner_max_iter` steps are taken.
///
/// Coordinates outside `free` are held fixed and their equations dropped.
/// After short full steps the previous Jacobian is reused; a fresh one is
/// computed whenever a stale one fails to give a full decreasing step.
pub fn solve_block(sys: &dyn BlockSystem, init: &[f64], lambda: f64, cfg: &PenaltyConfig, free: Option<&[bool]>) -> Result<BlockFit> {
    let free = free_mask(init.len(), free);
    let constant = sys.constant_jacobian();
    let mut p = init.to_vec();
    let mut f = sys.residual(&p)?;
    let mut trace = Vec::new();
    let mut converged = false;
    let mut steps = 0;
    let mut jac: Option<DMatrix<f64>> = None;
    let mut fresh = false;
    loop {
        if stop_residual(sys, &f, &p, lambda, cfg, &free) < cfg.inner_tol {
            converged = true;
            break;
        }
        if steps >= cfg.inner_max_iter {
            break;
        }
        let j = match jac.take() {
            Some(j) => j,
            None => {
                fresh = true;
                sys.jacobian(&p)?
            }
        };
        let mut s = lqa_step(sys, &p, &f, lambda, cfg, &free, &j)?;
        let j = if !fresh && !constant && !(s.moved && s.full) {
            let j = sys.jacobian(&p)?;
            s = lqa_step(sys, &p, &f, lambda, cfg, &free, &j)?;
            j
        } else {
            j
        };
        steps += 1;
        if !s.moved {
            break;
        }
        trace.push(s.g_norm);
        if constant || (s.full && s.max_move <= JACOBIAN_REUSE_STEP) {
            jac = Some(j);
            fresh = constant;
        }
        p = s.p;
        f = s.f;
    }
    let res = zero_crossing_residual(f.as_slice(), &p, lambda, cfg.a, sys.exempt());
    let residual_inf = (0..p.len()).filter(|&j| free[j] || p[j] == 0.0).map(|j| res[j]).fold(0.0, f64::max);
    Ok(BlockFit { p, steps, converged, trace, residual_inf })
}

fn threshold_block(p: &mut [f64], exempt: &[bool], thr: f64) {
    for (v, &ex) in p.iter_mut().zip(exempt) {
        if !ex && v.abs() < thr {
            *v = 0.0;
        }
    }
}

/// Penalized fit of one block starting from `start` (normally the λ = 0 root).
///
/// After the LQA solve, slopes below `zero_threshold` are set to zero and the
/// remaining coordinates are re-solved with the zeros held fixed.
pub fn fit_block(sys: &dyn BlockSystem, start: &[f64], lambda: f64, cfg: &PenaltyConfig) -> Result<BlockFit> {
    if lambda == 0.0 {
        return solve_block(sys, start, 0.0, cfg, None);
    }
    let first = solve_block(sys, start, lambda, cfg, None)?;
    let mut p = first.p;
    threshold_block(&mut p, sys.exempt(), cfg.zero_threshold);
    let active: Vec<bool> = p.iter().zip(sys.exempt()).map(|(v, &ex)| ex || *v != 0.0).collect();
    let mut polish = solve_block(sys, &p, lambda, cfg, Some(&active))?;
    threshold_block(&mut polish.p, sys.exempt(), cfg.zero_threshold);
    let f = sys.residual(&polish.p)?;
    let res = zero_crossing_residual(f.as_slice(), &polish.p, lambda, cfg.a, sys.exempt());
    polish.residual_inf = inf_norm(&res);
    polish.steps += first.steps;
    let mut trace = first.trace;
    trace.extend(polish.trace);
    polish.trace = trace;
    polish.converged = first.converged || polish.converged;
    Ok(polish)
}

/// LQA solve plus thresholding without the active-set polish; used for
/// the many training fits of cross-validation.
pub fn screen_block(sys: &dyn BlockSystem, start: &[f64], lambda: f64, cfg: &PenaltyConfig) -> Result<BlockFit> {
    let mut fit = solve_block(sys, start, lambda, cfg, None)?;
    if lambda > 0.0 {
        threshold_block(&mut fit.p, sys.exempt(), cfg.zero_threshold);
    }
    Ok(fit)
}

/// Nonzero coefficient indices of each block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Support {
    pub alpha: Vec<usize>,
    pub tau: Vec<usize>,
    pub beta: Vec<usize>,
    pub gamma: Vec<usize>,
}

impl Support {
    pub fn of(w: &NuisanceParams) -> Self {
        let nz = |b: &[f64]| b.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(j, _)| j).collect();
        Support { alpha: nz(&w.alpha), tau: nz(&w.tau), beta: nz(&w.beta), gamma: nz(&w.gamma) }
    }

    pub fn slope_count(&self) -> usize {
        [&self.alpha, &self.tau, &self.beta, &self.gamma].iter().map(|b| b.iter().filter(|&&j| j > 0).count()).sum()
    }
}

/// Result of Algorithm 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub omega_hat: NuisanceParams,
    pub support: Support,
    pub lambdas: (f64, f64),
    pub iterations: usize,
    pub final_xi: f64,
    pub converged: bool,
    pub per_iteration_trace: Vec<(usize, f64)>,
    /// `‖Ū^p(ω̂)‖∞` under the zero-crossing rule.
    pub residual_inf: f64,
    pub inner_steps: usize,
}

/// Deterministic starting point: arm means, sample-B share and treated share.
pub fn spec_init(prep: &Prepared, spec: &ModelSpec) -> NuisanceParams {
    let d = prep.d;
    let clip = 1e-3;
    let mean = |v: &[f64]| if v.is_empty() { 0.5 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let link = |m: f64| match spec.outcome_link {
        Link::Identity => m,
        Link::Logit => logit(m.clamp(clip, 1.0 - clip)),
    };
    let nb1 = prep.b1.y.len() as f64;
    let nb0 = prep.b0.y.len() as f64;
    let n = prep.n_pop.max(1.0);
    let mut w = NuisanceParams::zeros(d);
    if d == 0 {
        return w;
    }
    w.beta[0] = link(mean(&prep.b1.y));
    w.gamma[0] = link(mean(&prep.b0.y));
    let p = |v: f64| logit(v.clamp(clip, 1.0 - clip));
    if spec.is_joint() {
        w.alpha[0] = p(nb1 / n);
        w.tau[0] = p(nb0 / n);
    } else {
        w.alpha[0] = p((nb1 + nb0) / n);
        w.tau[0] = p(if nb1 + nb0 > 0.0 { nb1 / (nb1 + nb0) } else { 0.5 });
    }
    w
}

/// Spec initialization for a dataset.
pub fn initial_params(ds: &CombinedDataset, spec: &ModelSpec, clip: f64) -> Result<NuisanceParams> {
    Ok(spec_init(&Prepared::new(ds, clip)?, spec))
}

/// Runs Algorithm 1 on prepared data.
pub fn solve_penalized_prepared(prep: &Prepared, spec: &ModelSpec, lambdas: (f64, f64), cfg: &PenaltyConfig, init: &NuisanceParams) -> Result<FitResult> {
    let (lam_eta, lam_mu) = lambdas;
    let mut eta = init.eta();
    let mut mu = init.mu();
    let mut trace = Vec::new();
    let mut xi = f64::INFINITY;
    let mut iterations = 0;
    let mut inner_steps = 0;
    let mut residual_inf = 0.0;
    let linear = spec.outcome_link == Link::Identity;
    while iterations < cfg.max_iter {
        let esys = EtaSystem::new(prep, spec, &mu);
        let eta_start = if iterations == 0 {
            let root = solve_block(&esys, &eta, 0.0, cfg, None)?;
            inner_steps += root.steps;
            root.p
        } else {
            eta.clone()
        };
        let ef = fit_block(&esys, &eta_start, lam_eta, cfg)?;
        let msys = MuSystem::new(prep, spec, &ef.p);
        let mu_start = if iterations == 0 {
            let root = solve_block(&msys, &mu, 0.0, cfg, None)?;
            inner_steps += root.steps;
            root.p
        } else {
            mu.clone()
        };
        let mf = fit_block(&msys, &mu_start, lam_mu, cfg)?;
        inner_steps += ef.steps + mf.steps;
        let d_eta = two_norm(&ef.p.iter().zip(&eta).map(|(a, b)| a - b).collect::<Vec<_>>());
        let d_mu = two_norm(&mf.p.iter().zip(&mu).map(|(a, b)| a - b).collect::<Vec<_>>());
        eta = ef.p;
        mu = mf.p;
        iterations += 1;
        // Ō does not involve μ for identity outcome links: one pass is exact
        xi = if linear { 0.0 } else { d_eta.max(d_mu) };
        trace.push((iterations, xi));
        residual_inf = ef.residual_inf.max(mf.residual_inf);
        if xi < cfg.tol_xi {
            break;
        }
    }
    if !linear {
        // the μ step moved after the last η step; report the joint residual
        let esys = EtaSystem::new(prep, spec, &mu);
        let f = esys.residual(&eta)?;
        let r = zero_crossing_residual(f.as_slice(), &eta, lam_eta, cfg.a, esys.exempt());
        residual_inf = residual_inf.max(inf_norm(&r));
    }
    let mut omega_hat = NuisanceParams::zeros(prep.d);
    omega_hat.set_eta(&eta);
    omega_hat.set_mu(&mu);
    Ok(FitResult {
        support: Support::of(&omega_hat),
        omega_hat,
        lambdas,
        iterations,
        final_xi: xi,
        converged: xi < cfg.tol_xi,
        per_iteration_trace: trace,
        residual_inf,
        inner_steps,
    })
}

/// Solves `Ū^p(ω) = 0` by Algorithm 1 at fixed penalty levels.
pub fn solve_penalized(ds: &CombinedDataset, spec: &ModelSpec, lambdas: (f64, f64), config: &PenaltyConfig, init: Option<&NuisanceParams>) -> Result<FitResult> {
    config.validate()?;
    spec.check(ds.outcome_kind)?;
    if lambdas.0 < 0.0 || lambdas.1 < 0.0 {
        return Err(Error::NegativeLambda(lambdas.0.min(lambdas.1)));
    }
    let prep = Prepared::new(ds, config.prob_clip)?;
    if prep.n_b() == 0 {
        return Err(Error::EmptySample("B"));
    }
    let init = match init {
        Some(w) => {
            w.check_dims(ds.d)?;
            w.clone()
        }
        None => spec_init(&prep, spec),
    };
    solve_penalized_prepared(&prep, spec, lambdas, config, &init)
}

/// Plain Newton solve of `Ū(ω) = 0` over all `4d` coordinates at once.
///
/// Reference for the λ = 0 reduction; off-diagonal Jacobian blocks are
/// obtained by finite differences.
pub fn solve_unpenalized(ds: &CombinedDataset, spec: &ModelSpec, config: &PenaltyConfig, init: Option<&NuisanceParams>) -> Result<(NuisanceParams, BlockFit)> {
    let prep = Prepared::new(ds, config.prob_clip)?;
    let init = init.cloned().unwrap_or_else(|| spec_init(&prep, spec));
    let sys = crate::system::FullSystem::new(&prep, spec);
    let start = [init.eta(), init.mu()].concat();
    let cfg = PenaltyConfig { inner_max_iter: config.inner_max_iter.max(100), ..*config };
    let fit = solve_block(&sys, &start, 0.0, &cfg, None)?;
    let h = 2 * ds.d;
    let mut w = NuisanceParams::zeros(ds.d);
    w.set_eta(&fit.p[..h]);
    w.set_mu(&fit.p[h..]);
    Ok((w, fit))
}

/// Seeded fold labels, stratified on `(i_a, i_b, t)` and dealt round-robin.
pub fn assign_folds(ds: &CombinedDataset, folds: usize, seed: u64) -> Vec<usize> {
    let key = |r: &crate::types::UnitRecord| (r.i_a as u8) << 2 | (r.i_b as u8) << 1 | (r.t == Some(true)) as u8;
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); 8];
    for (k, r) in ds.records.iter().enumerate() {
        groups[key(r) as usize].push(k);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![0; ds.records.len()];
    let mut next = 0usize;
    for g in groups.iter_mut() {
        g.shuffle(&mut rng);
        for &k in g.iter() {
            out[k] = next % folds;
            next += 1;
        }
    }
    out
}

/// One training/held-out split with population sizes scaled to the fold share.
pub struct FoldData {
    pub train: Prepared,
    pub test: Prepared,
}

pub fn make_folds(ds: &CombinedDataset, n_pop: f64, labels: &[usize], folds: usize, clip: f64) -> Result<Vec<FoldData>> {
    let k = folds as f64;
    (0..folds)
        .map(|f| {
            let test_mask: Vec<bool> = labels.iter().map(|&l| l == f).collect();
            let train_mask: Vec<bool> = test_mask.iter().map(|b| !b).collect();
            let train = Prepared::build(ds, Some(&train_mask), n_pop * (k - 1.0) / k, clip)?;
            let test = Prepared::build(ds, Some(&test_mask), n_pop / k, clip)?;
            if train.n_b() == 0 || test.n_b() == 0 {
                return Err(Error::DegenerateFold);
            }
            Ok(FoldData { train, test })
        })
        .collect()
}

/// Cross-validation outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub grid_eta: Vec<f64>,
    pub grid_mu: Vec<f64>,
    /// Mean held-out loss per grid point.
    pub losses_eta: Vec<f64>,
    pub losses_mu: Vec<f64>,
    /// Held-out loss per fold (rows) and grid point (columns).
    pub fold_losses_eta: Vec<Vec<f64>>,
    pub fold_losses_mu: Vec<Vec<f64>>,
    pub chosen: (f64, f64),
    pub folds: usize,
}

/// Minimizer of `losses`, ties resolved toward the larger λ.
pub fn choose_lambda(grid: &[f64], losses: &[f64]) -> f64 {
    let mut best = 0;
    for i in 1..grid.len() {
        let tol = 1e-12 * losses[best].abs().max(1e-300);
        let better = losses[i] < losses[best] - tol;
        let tie = (losses[i] - losses[best]).abs() <= tol && grid[i] > grid[best];
        if better || tie {
            best = i;
        }
    }
    grid[best]
}

/// Held-out losses of a one-block penalized fit over a λ grid.
///
/// `build` constructs the block system on a prepared subset; the training
/// system is solved from `start` (its λ = 0 root is computed first) and the
/// held-out loss is the squared norm of the held-out system's residual.
pub fn cv_block_losses<B>(folds: &[FoldData], grid: &[f64], start: &[f64], cfg: &PenaltyConfig, build: B) -> Result<Vec<Vec<f64>>>
where
    B: for<'p> Fn(&'p Prepared) -> Box<dyn BlockSystem + 'p>,
{
    folds
        .iter()
        .map(|fold| {
            let train = build(&fold.train);
            let test = build(&fold.test);
            let root = solve_block(train.as_ref(), start, 0.0, cfg, None)?.p;
            grid.iter()
                .map(|&lam| {
                    let fit = screen_block(train.as_ref(), &root, lam, cfg)?;
                    let r = test.residual(&fit.p)?;
                    Ok(r.norm_squared())
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect()
}

pub(crate) fn mean_over_folds(fold_losses: &[Vec<f64>]) -> Vec<f64> {
    let k = fold_losses.len() as f64;
    (0..fold_losses.first().map_or(0, |r| r.len())).map(|j| fold_losses.iter().map(|r| r[j]).sum::<f64>() / k).collect()
}

/// λ_max for a block: the largest slope entry of its unpenalized residual at `w`.
pub(crate) fn lambda_max(prep: &Prepared, spec: &ModelSpec, w: &NuisanceParams, block: Block) -> f64 {
    let r = match block {
        Block::Eta => EtaSystem::new(prep, spec, &w.mu()).residual(&w.eta()),
        Block::Mu => MuSystem::new(prep, spec, &w.eta()).residual(&w.mu()),
    };
    let d = prep.d;
    let m = r.map(|r| r.iter().enumerate().filter(|(j, _)| j % d != 0).fold(0.0f64, |m, (_, v)| m.max(v.abs()))).unwrap_or(0.0);
    if m.is_finite() && m > 0.0 {
        m
    } else {
        1.0
    }
}

/// `count` log-spaced values from `λ_max / 1000` to `λ_max`.
pub fn log_grid(lambda_max: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![lambda_max];
    }
    let lo = (lambda_max / 1000.0).ln();
    let hi = lambda_max.ln();
    (0..count)
        .map(|i| if i + 1 == count { lambda_max } else { (lo + (hi - lo) * i as f64 / (count - 1) as f64).exp() })
        .collect()
}

/// Default 20-point grid for a block, scaled by its score at the initialization.
pub fn default_grid(ds: &CombinedDataset, spec: &ModelSpec, block: Block) -> Result<Vec<f64>> {
    let prep = Prepared::new(ds, crate::system::DEFAULT_CLIP)?;
    let init = spec_init(&prep, spec);
    Ok(log_grid(lambda_max(&prep, spec, &init, block), 20))
}

/// Tunes `λ_η` with `μ` at its initial value, refits `η`, then tunes `λ_μ`.
pub fn cross_validate(ds: &CombinedDataset, spec: &ModelSpec, grid_eta: &[f64], grid_mu: &[f64], config: &PenaltyConfig, seed: u64) -> Result<CvResult> {
    cross_validate_k(ds, spec, grid_eta, grid_mu, config, seed, 5)
}

pub fn cross_validate_k(ds: &CombinedDataset, spec: &ModelSpec, grid_eta: &[f64], grid_mu: &[f64], config: &PenaltyConfig, seed: u64, folds: usize) -> Result<CvResult> {
    config.validate()?;
    let prep = Prepared::new(ds, config.prob_clip)?;
    let fd = make_folds(ds, prep.n_pop, &assign_folds(ds, folds, seed), folds, config.prob_clip)?;
    cross_validate_prepared(&prep, &fd, spec, grid_eta, grid_mu, config)
}

/// Cross-validation on already prepared data and folds.
pub fn cross_validate_prepared(prep: &Prepared, fd: &[FoldData], spec: &ModelSpec, grid_eta: &[f64], grid_mu: &[f64], config: &PenaltyConfig) -> Result<CvResult> {
    if grid_eta.is_empty() || grid_mu.is_empty() {
        return Err(Error::Config("empty λ grid".into()));
    }
    let folds = fd.len();
    let init = spec_init(prep, spec);
    let mu0 = init.mu();
    let fold_losses_eta = if grid_eta.len() == 1 {
        vec![vec![0.0]; folds]
    } else {
        cv_block_losses(fd, grid_eta, &init.eta(), config, |p| Box::new(EtaSystem::new(p, spec, &mu0)))?
    };
    let losses_eta = mean_over_folds(&fold_losses_eta);
    let lam_eta = choose_lambda(grid_eta, &losses_eta);
    let esys = EtaSystem::new(prep, spec, &mu0);
    let root = solve_block(&esys, &init.eta(), 0.0, config, None)?;
    let eta_hat = fit_block(&esys, &root.p, lam_eta, config)?.p;
    let fold_losses_mu = if grid_mu.len() == 1 {
        vec![vec![0.0]; folds]
    } else {
        cv_block_losses(fd, grid_mu, &mu0, config, |p| Box::new(MuSystem::new(p, spec, &eta_hat)))?
    };
    let losses_mu = mean_over_folds(&fold_losses_mu);
    let lam_mu = choose_lambda(grid_mu, &losses_mu);
    Ok(CvResult {
        grid_eta: grid_eta.to_vec(),
        grid_mu: grid_mu.to_vec(),
        losses_eta,
        losses_mu,
        fold_losses_eta,
        fold_losses_mu,
        chosen: (lam_eta, lam_mu),
        folds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `F(p) = p² − 2` on one coordinate.
    struct Quad {
        exempt: Vec<bool>,
    }

    impl BlockSystem for Quad {
        fn dim(&self) -> usize {
            1
        }
        fn exempt(&self) -> &[bool] {
            &self.exempt
        }
        fn residual(&self, p: &[f64]) -> Result<DVector<f64>> {
            Ok(DVector::from_vec(vec![p[0] * p[0] - 2.0]))
        }
        fn jacobian(&self, p: &[f64]) -> Result<DMatrix<f64>> {
            Ok(DMatrix::from_element(1, 1, 2.0 * p[0]))
        }
    }

    #[test]
    fn hand_newton_step() {
        let q = Quad { exempt: vec![false] };
        let cfg = PenaltyConfig::default();
        // λ = 0: 1 − (1 − 2)/2 = 1.5
        assert_eq!(newton_block_update(&q, &[1.0], 0.0, &cfg).unwrap(), vec![1.5]);
        // λ = 0.5 at p = 1 sits on the middle SCAD branch
        let lam = 0.5;
        let qv = (3.7 * lam - 1.0) / 2.7;
        let sig = qv / (1e-6 + 1.0);
        let expect = 1.0 - (-1.0 + sig) / (2.0 + sig);
        let got = newton_block_update(&q, &[1.0], lam, &cfg).unwrap()[0];
        assert!((got - expect).abs() < 1e-15, "{got} {expect}");
    }

    #[test]
    fn fixed_point_is_unchanged() {
        let q = Quad { exempt: vec![true] };
        let r = 2f64.sqrt();
        let p = newton_block_update(&q, &[r], 0.3, &PenaltyConfig::default()).unwrap();
        assert_eq!(p, vec![r]);
    }

    #[test]
    fn grid_shape() {
        let g = log_grid(1.0, 20);
        assert_eq!(g.len(), 20);
        assert!((g[0] - 0.001).abs() < 1e-15);
        assert_eq!(g[19], 1.0);
        assert!(g.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn ties_go_to_larger_lambda() {
        assert_eq!(choose_lambda(&[0.1, 0.2, 0.3], &[1.0, 0.5, 0.5]), 0.3);
        assert_eq!(choose_lambda(&[0.1, 0.2, 0.3], &[0.2, 0.5, 0.5]), 0.1);
        assert_eq!(choose_lambda(&[0.7], &[3.0]), 0.7);
    }
}
