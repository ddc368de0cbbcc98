mod common;

use common::*;
use drcombine::{jacobian_eta, jacobian_mu, partial_o, partial_q, score_u, score_u_joint, system::mean_phi, CombinedDataset, NuisanceParams, OutcomeKind};

const TRIALS: u64 = 100;
const TOL: f64 = 1e-6;

fn cases() -> impl Iterator<Item = (u64, OutcomeKind, bool)> {
    (0..TRIALS).map(|s| {
        let kind = if s % 2 == 0 { OutcomeKind::Continuous } else { OutcomeKind::Binary };
        (s, kind, s % 4 >= 2)
    })
}

fn setup(seed: u64, kind: OutcomeKind) -> (CombinedDataset, NuisanceParams) {
    let mut r = rng(1000 + seed);
    let ds = random_dataset(&mut r, 50, 3, kind);
    let w = random_params(&mut r, ds.d, 0.5);
    (ds, w)
}

#[test]
fn score_is_the_gradient_of_mean_phi() {
    for (seed, kind, joint) in cases() {
        let spec = spec_for(kind, joint);
        let (ds, w) = setup(seed, kind);
        let s = score_u(&ds, &w, &spec).unwrap();
        let d = ds.d;
        // ScoreVector lists (β, γ, α, τ); omega() lists (α, τ, β, γ)
        let g = fd_grad(|p| mean_phi(&ds, 0.0, &NuisanceParams::from_omega(p), &spec).unwrap(), &w.omega());
        let g = [&g[2 * d..], &g[..2 * d]].concat();
        let e = rel_err(&s.concat(), &g);
        assert!(e <= TOL, "seed {seed} {kind:?} joint={joint}: rel err {e:e}");
    }
}

#[test]
fn joint_score_matches_generic_score() {
    for (seed, kind, _) in cases().take(20) {
        let spec = spec_for(kind, true);
        let (ds, w) = setup(seed, kind);
        assert_eq!(score_u_joint(&ds, &w, &spec).unwrap(), score_u(&ds, &w, &spec).unwrap());
        let d = ds.d;
        let g = fd_grad(|p| mean_phi(&ds, 0.0, &NuisanceParams::from_omega(p), &spec).unwrap(), &w.omega());
        let s = score_u_joint(&ds, &w, &spec).unwrap();
        assert!(rel_err(&s.u_alpha, &g[..d]) <= TOL);
        assert!(rel_err(&s.u_tau, &g[d..2 * d]) <= TOL);
        assert!(score_u_joint(&ds, &w, &spec_for(kind, false)).is_err());
    }
}

fn flatten(m: &nalgebra::DMatrix<f64>) -> Vec<f64> {
    (0..m.nrows()).flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)])).collect()
}

#[test]
fn jacobians_match_finite_differences() {
    for (seed, kind, joint) in cases() {
        let spec = spec_for(kind, joint);
        let (ds, w) = setup(seed, kind);
        let (eta, mu) = (w.eta(), w.mu());

        let je = jacobian_eta(&ds, &eta, &mu, &spec).unwrap();
        let fd = fd_jac(|e| partial_o(&ds, e, &mu, &spec).unwrap(), &eta).concat();
        let e = rel_err(&flatten(&je.matrix), &fd);
        assert!(e <= TOL, "eta seed {seed}: {e:e}");

        let jm = jacobian_mu(&ds, &eta, &mu, &spec).unwrap();
        let fd = fd_jac(|m| partial_q(&ds, &eta, m, &spec).unwrap(), &mu).concat();
        let e = rel_err(&flatten(&jm.matrix), &fd);
        assert!(e <= TOL, "mu seed {seed}: {e:e}");
    }
}

#[test]
fn partial_blocks_agree_with_score() {
    for (seed, kind, joint) in cases().take(20) {
        let spec = spec_for(kind, joint);
        let (ds, w) = setup(seed, kind);
        let s = score_u(&ds, &w, &spec).unwrap();
        assert_eq!(partial_o(&ds, &w.eta(), &w.mu(), &spec).unwrap(), [s.u_beta.clone(), s.u_gamma.clone()].concat());
        assert_eq!(partial_q(&ds, &w.eta(), &w.mu(), &spec).unwrap(), [s.u_alpha.clone(), s.u_tau.clone()].concat());
    }
}

#[test]
fn score_is_linear_in_records() {
    for (seed, kind, joint) in cases().take(30) {
        let spec = spec_for(kind, joint);
        let (ds, w) = setup(seed, kind);
        let n_pop = ds.pop_size;
        let half = ds.records.len() / 2;
        let part = |recs: &[drcombine::UnitRecord]| CombinedDataset::new(recs.to_vec(), n_pop, kind);
        let (lo, hi) = (part(&ds.records[..half]), part(&ds.records[half..]));
        let whole = score_u(&ds, &w, &spec).unwrap().concat();
        let a = score_u(&lo, &w, &spec).unwrap().concat();
        let b = score_u(&hi, &w, &spec).unwrap().concat();
        let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        assert!(rel_err(&sum, &whole) <= 1e-12, "seed {seed}");
    }
}

#[test]
fn score_does_not_depend_on_theta() {
    for (seed, kind, joint) in cases().take(20) {
        let spec = spec_for(kind, joint);
        let (ds, w) = setup(seed, kind);
        let om = w.omega();
        let d = ds.d;
        let g0 = fd_grad(|p| mean_phi(&ds, 0.0, &NuisanceParams::from_omega(p), &spec).unwrap(), &om);
        let g1 = fd_grad(|p| mean_phi(&ds, 3.5, &NuisanceParams::from_omega(p), &spec).unwrap(), &om);
        assert!(rel_err(&g1, &g0) <= TOL);
        let a = mean_phi(&ds, 0.0, &w, &spec).unwrap();
        let b = mean_phi(&ds, 3.5, &w, &spec).unwrap();
        assert!((a - b - 3.5).abs() < 1e-12);
        assert_eq!(g0.len(), 4 * d);
    }
}
