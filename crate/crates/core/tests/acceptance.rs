//! Acceptance suite. Each test prints one `PASS`/`FAIL` line per criterion
//! (with indented details) and fails when its criterion fails.
//!
//! Simulation criteria run at desk scale (N = 20,000). The full-scale check
//! is ignored by default; run it with
//! `DRCOMBINE_FULL=1 cargo test --release -p drcombine --test acceptance -- --ignored`.

mod common;

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};
use std::time::{Duration, Instant};

use common::*;
use drcombine::cli_io::{self, Mode, RunConfig};
use drcombine::estimators::{fit_stack, Piece, StackBlock, ThetaForm};
use drcombine::simulation::{BlockMetrics, EstimatorMetrics, Metrics};
use drcombine::system::{mean_phi, Prepared};
use drcombine::{
    estimate_dr, estimate_dr_joint, estimate_ipw, estimate_or, jacobian_eta, jacobian_mu, partial_o, partial_q, run_replications, sandwich_penalized, sandwich_unpenalized, scad_q,
    score_u, score_u_joint, solve_penalized, solve_unpenalized, v1_hat, CaseSpec, CombinedDataset, EstimateConfig, EstimatorKind, ModelSpec, NuisanceParams, OutcomeKind, PenaltyConfig,
    UnitRecord,
};
use rand::Rng;

const BASE_SEED: u64 = 20240601;
const DESK_REPS: usize = 100;
const JOINT_REPS: usize = 50;

struct Report {
    id: &'static str,
    lines: Vec<String>,
    ok: bool,
}

impl Report {
    fn new(id: &'static str) -> Self {
        Report { id, lines: Vec::new(), ok: true }
    }

    fn check(&mut self, what: &str, ok: bool) {
        self.ok &= ok;
        self.lines.push(format!("    {} {what}", if ok { "ok  " } else { "MISS" }));
    }

    fn finish(self, title: &str, elapsed: Duration) {
        let mut out = format!("{} criterion {}: {title} ({:.1}s)\n", if self.ok { "PASS" } else { "FAIL" }, self.id, elapsed.as_secs_f64());
        for l in &self.lines {
            out.push_str(l);
            out.push('\n');
        }
        // one write per criterion keeps parallel tests from interleaving lines
        print!("{out}");
        assert!(self.ok, "criterion {} failed", self.id);
    }
}

fn jobs() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

/// Simulation output and wall time per case, computed once per test binary.
fn simulate(id: &str, reps: usize, kinds: &[EstimatorKind]) -> (Metrics, Duration) {
    static CACHE: OnceLock<Mutex<HashMap<String, (Metrics, Duration)>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    // held across the run so concurrent tests do not compete for the CPUs
    let mut map = cache.lock().unwrap_or_else(|e| e.into_inner());
    if let Some(hit) = map.get(id) {
        return hit.clone();
    }
    let spec = CaseSpec::from_id(id).unwrap().desk_scale();
    let start = Instant::now();
    let out = run_replications(&spec, reps, kinds, BASE_SEED, jobs(), &EstimateConfig::default()).unwrap();
    let entry = (out.metrics, start.elapsed());
    map.insert(id.to_string(), entry.clone());
    entry
}

fn block<'a>(m: &'a Metrics, name: &str) -> &'a BlockMetrics {
    m.blocks.iter().find(|b| b.block == name).unwrap()
}

fn est(m: &Metrics, kind: EstimatorKind) -> &EstimatorMetrics {
    m.estimators.iter().find(|e| e.estimator == kind).unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

fn flatten(m: &nalgebra::DMatrix<f64>) -> Vec<f64> {
    (0..m.nrows()).flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)])).collect()
}

#[test]
fn criterion_1_gradient_oracles() {
    let start = Instant::now();
    let mut rep = Report::new("1");
    let (mut worst_u, mut worst_j, mut worst_joint) = (0.0f64, 0.0f64, 0.0f64);
    for seed in 0..100u64 {
        let kind = if seed % 2 == 0 { OutcomeKind::Continuous } else { OutcomeKind::Binary };
        let mut r = rng(50_000 + seed);
        let ds = random_dataset(&mut r, 50, 3, kind);
        let w = random_params(&mut r, ds.d, 0.5);
        let d = ds.d;
        for joint in [false, true] {
            let spec = spec_for(kind, joint);
            let s = if joint { score_u_joint(&ds, &w, &spec) } else { score_u(&ds, &w, &spec) }.unwrap();
            let g = fd_grad(|p| mean_phi(&ds, 0.0, &NuisanceParams::from_omega(p), &spec).unwrap(), &w.omega());
            let e = rel_err(&s.concat(), &[&g[2 * d..], &g[..2 * d]].concat());
            if joint {
                worst_joint = worst_joint.max(e);
            } else {
                worst_u = worst_u.max(e);
            }
            let (eta, mu) = (w.eta(), w.mu());
            let je = jacobian_eta(&ds, &eta, &mu, &spec).unwrap();
            let fe = fd_jac(|v| partial_o(&ds, v, &mu, &spec).unwrap(), &eta).concat();
            let jm = jacobian_mu(&ds, &eta, &mu, &spec).unwrap();
            let fm = fd_jac(|v| partial_q(&ds, &eta, v, &spec).unwrap(), &mu).concat();
            worst_j = worst_j.max(rel_err(&flatten(&je.matrix), &fe)).max(rel_err(&flatten(&jm.matrix), &fm));
        }
    }
    let elapsed = start.elapsed();
    rep.check(&format!("score_u vs FD gradient: worst rel err {worst_u:.2e} <= 1e-6"), worst_u <= 1e-6);
    rep.check(&format!("score_u_joint vs FD gradient: worst rel err {worst_joint:.2e} <= 1e-6"), worst_joint <= 1e-6);
    rep.check(&format!("jacobian_eta/mu vs FD of partial_o/q: worst rel err {worst_j:.2e} <= 1e-6"), worst_j <= 1e-6);
    rep.check(&format!("runtime {:.1}s < 60s", elapsed.as_secs_f64()), elapsed < Duration::from_secs(60));
    rep.finish("FD gradient/Jacobian oracles on 100 random 50-unit datasets", elapsed);
}

fn dr_stack(ds: &CombinedDataset) -> drcombine::estimators::StackFit {
    let d = ds.d;
    let blocks = vec![
        StackBlock::full(Piece::Selection, d),
        StackBlock::full(Piece::Treatment { on_a: false }, d),
        StackBlock::full(Piece::Outcome { treated: true, on_a: false }, d),
        StackBlock::full(Piece::Outcome { treated: false, on_a: false }, d),
    ];
    fit_stack(Prepared::new(ds, 1e-6).unwrap(), &ModelSpec::for_outcome(ds.outcome_kind), blocks, ThetaForm::Dr, &PenaltyConfig::default()).unwrap()
}

#[test]
fn criterion_2_reduction_identities() {
    let start = Instant::now();
    let mut rep = Report::new("2");

    let (mut gap_or, mut gap_ipw) = (0.0f64, 0.0f64);
    for seed in 0..50u64 {
        let kind = if seed % 2 == 0 { OutcomeKind::Continuous } else { OutcomeKind::Binary };
        let spec = ModelSpec::for_outcome(kind);
        let mut r = rng(60_000 + seed);
        let ds = random_dataset(&mut r, 50, 3, kind);
        let w = random_params(&mut r, ds.d, 0.7);
        let no_b = CombinedDataset::new(ds.records.iter().filter(|u| !u.i_b).cloned().collect(), ds.pop_size, kind);
        gap_or = gap_or.max((estimate_dr(&no_b, &w, &spec).unwrap() - estimate_or(&no_b, &w.mu(), &spec).unwrap()).abs());
        if kind == OutcomeKind::Continuous {
            let mut z = w.clone();
            z.beta.iter_mut().chain(z.gamma.iter_mut()).for_each(|v| *v = 0.0);
            gap_ipw = gap_ipw.max((estimate_dr(&ds, &z, &spec).unwrap() - estimate_ipw(&ds, &z.eta(), &spec).unwrap()).abs());
        }
    }
    rep.check(&format!("DR = OR without sample B: max gap {gap_or:.1e}"), gap_or <= 1e-12);
    rep.check(&format!("DR = IPW with zero outcome models: max gap {gap_ipw:.1e}"), gap_ipw <= 1e-12);

    let tight = PenaltyConfig { tol_xi: 1e-13, inner_tol: 1e-13, max_iter: 200, inner_max_iter: 100, ..PenaltyConfig::default() };
    let mut gap_solve = 0.0f64;
    for (id, seed) in [("1", 1u64), ("1b", 2)] {
        let ds = drcombine::simulation::generate_dataset(&CaseSpec::from_id(id).unwrap().desk_scale(), seed).unwrap();
        let spec = ModelSpec::for_outcome(ds.outcome_kind);
        let pen = solve_penalized(&ds, &spec, (0.0, 0.0), &tight, None).unwrap();
        let (plain, _) = solve_unpenalized(&ds, &spec, &tight, None).unwrap();
        gap_solve = gap_solve.max(max_abs_diff(&pen.omega_hat.omega(), &plain.omega()));
    }
    rep.check(&format!("penalized solver at lambda = 0 vs unpenalized Newton: {gap_solve:.1e} <= 1e-10"), gap_solve <= 1e-10);

    let mut r = rng(61);
    let mut gap_se = 0.0f64;
    for _ in 0..5 {
        let pop = synthetic_population(&mut r, 2000);
        let fit = dr_stack(&draw_a(&pop, &mut r, |_| 0.1));
        let a = sandwich_penalized(&fit, &PenaltyConfig::default()).unwrap();
        let b = sandwich_unpenalized(&fit).unwrap().se;
        gap_se = gap_se.max((a - b).abs() / b);
    }
    rep.check(&format!("penalized sandwich at lambda = 0 vs unpenalized: rel gap {gap_se:.1e} <= 1e-8"), gap_se <= 1e-8);

    let elapsed = start.elapsed();
    rep.check(&format!("runtime {:.1}s < 60s", elapsed.as_secs_f64()), elapsed < Duration::from_secs(60));
    rep.finish("reduction identities", elapsed);
}

#[test]
fn criterion_3_scad() {
    let start = Instant::now();
    let mut rep = Report::new("3");
    let mut worst = 0.0f64;
    for &(lambda, a) in &[(1.0, 3.7), (0.05, 3.7), (2.5, 2.5), (1e-3, 6.0)] {
        for knot in [lambda, a * lambda] {
            let at = scad_q(knot, lambda, a).unwrap();
            for side in [knot * (1.0 - 1e-15), knot * (1.0 + 1e-15), f64::from_bits(knot.to_bits() - 1), f64::from_bits(knot.to_bits() + 1)] {
                worst = worst.max((scad_q(side, lambda, a).unwrap() - at).abs());
            }
        }
    }
    rep.check(&format!("knot continuity at lambda and a*lambda: {worst:.1e} <= 1e-12"), worst <= 1e-12);
    let q0 = scad_q(0.0, 1.0, 3.7).unwrap();
    let q4 = scad_q(4.0, 1.0, 3.7).unwrap();
    let q2 = scad_q(2.0, 1.0, 3.7).unwrap();
    rep.check(&format!("q(0; 1, 3.7) = {q0}"), q0 == 1.0);
    rep.check(&format!("q(4; 1, 3.7) = {q4}"), q4 == 0.0);
    rep.check(&format!("q(2; 1, 3.7) = {q2:.6} = 1.7/2.7"), (q2 - 1.7 / 2.7).abs() <= f64::EPSILON);
    rep.finish("SCAD derivative", start.elapsed());
}

#[test]
fn criterion_4_case1_selection_and_coverage() {
    let (m, elapsed) = simulate("1", DESK_REPS, &[EstimatorKind::DrCombined]);
    let mut rep = Report::new("4");
    for name in ["alpha", "tau", "beta", "gamma"] {
        let b = block(&m, name);
        rep.check(&format!("{name}: sensitivity {:.3} >= 0.95", b.sensitivity), b.sensitivity >= 0.95);
        rep.check(&format!("{name}: specificity {:.3} >= 0.95", b.specificity), b.specificity >= 0.95);
    }
    let dr = est(&m, EstimatorKind::DrCombined);
    rep.check(&format!("mean DR {:.4}, |mean - {}| = {:.4} <= 0.05", dr.mean, m.true_theta, (dr.mean - m.true_theta).abs()), (dr.mean - m.true_theta).abs() <= 0.05);
    rep.check(&format!("coverage {:.3} in [0.89, 0.99]", dr.coverage), (0.89..=0.99).contains(&dr.coverage));
    rep.check(&format!("failed replicates {} of {}", m.failures, m.replicates), m.failures == 0);
    // the budget is 20 minutes on 8 workers; scale it to the workers available
    let budget = Duration::from_secs_f64(20.0 * 60.0 * 8.0 / jobs().min(8) as f64);
    rep.check(&format!("runtime {:.0}s on {} worker(s), budget {:.0}s", elapsed.as_secs_f64(), jobs(), budget.as_secs_f64()), elapsed <= budget);
    rep.finish("case 1 at desk scale, R = 100", elapsed);
}

#[test]
fn criterion_5_double_robustness() {
    let start = Instant::now();
    let mut rep = Report::new("5");
    use EstimatorKind::*;
    let c3 = simulate("3", DESK_REPS, &[DrCombined, IpwCombined]).0;
    let c4 = simulate("4", DESK_REPS, &[DrCombined]).0;
    let c5 = simulate("5", DESK_REPS, &[DrCombined, OrCombined]).0;
    let c7 = simulate("7", DESK_REPS, &[DrCombined]).0;
    for m in [&c3, &c4, &c5] {
        let b = est(m, DrCombined).bias;
        rep.check(&format!("case {} DR bias {b:+.4}, |bias| <= 0.05", m.case_id), b.abs() <= 0.05);
    }
    let b = est(&c5, OrCombined).bias;
    rep.check(&format!("case 5 OR bias {b:+.4}, |bias| > 0.1"), b.abs() > 0.1);
    let b = est(&c3, IpwCombined).bias;
    rep.check(&format!("case 3 IPW bias {b:+.4}, |bias| > 0.1"), b.abs() > 0.1);
    let c = est(&c7, DrCombined).coverage;
    rep.check(&format!("case 7 DR coverage {c:.3} < 0.5"), c < 0.5);
    rep.finish("double robustness pattern at desk scale, R = 100", start.elapsed());
}

#[test]
fn criterion_6_mse_magnitudes() {
    let (m, elapsed) = simulate("1", DESK_REPS, &[EstimatorKind::DrCombined]);
    let mut rep = Report::new("6");
    // published non-null MSE for case 1, continuous outcome
    let table = [("alpha", 1.13e-1), ("tau", 1.66e-2), ("beta", 1.03e-2), ("gamma", 1.86e-2)];
    for (name, paper) in table {
        let b = block(&m, name);
        let nn = b.mse_nonnull.unwrap();
        let ratio = nn / paper;
        rep.check(&format!("{name}: non-null MSE {nn:.3e} vs {paper:.2e}, ratio {ratio:.2} in [1/3, 3]"), (1.0 / 3.0..=3.0).contains(&ratio));
        let null = b.mse_null.unwrap();
        rep.check(&format!("{name}: null MSE {null:.3e} <= 5e-3"), null <= 5e-3);
    }
    rep.finish("coefficient MSE, case 1 at desk scale", elapsed);
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn expit(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Largest gap between the joint and conditional DR estimates when the joint
/// coefficients reproduce the conditional probabilities exactly. Dummy-coded
/// covariates let a logit model match any per-category probability.
fn joint_identity_gap() -> f64 {
    let k = 4;
    let mut r = rng(70);
    let mut worst = 0.0f64;
    for trial in 0..20 {
        let mut recs = Vec::new();
        for i in 0..80 {
            let mut x = vec![0.0; k];
            x[0] = 1.0;
            let c = r.gen_range(0..k);
            if c > 0 {
                x[c] = 1.0;
            }
            recs.push(if i % 3 == 0 {
                UnitRecord::sample_a(r.gen_range(2.0..9.0), x)
            } else {
                UnitRecord::sample_b(x, r.gen_bool(0.5), r.gen_range(-2.0..2.0))
            });
        }
        let kind = if trial % 2 == 0 { OutcomeKind::Continuous } else { OutcomeKind::Binary };
        if kind == OutcomeKind::Binary {
            recs.iter_mut().filter_map(|u| u.y.as_mut()).for_each(|y| *y = (*y > 0.0) as u8 as f64);
        }
        let ds = CombinedDataset::new(recs, Some(400), kind);
        let w = random_params(&mut r, k, 0.8);
        let lp = |coef: &[f64], c: usize| coef[0] + if c > 0 { coef[c] } else { 0.0 };
        let mut joint = w.clone();
        let d1: Vec<f64> = (0..k).map(|c| logit(expit(lp(&w.alpha, c)) * expit(lp(&w.tau, c)))).collect();
        let d0: Vec<f64> = (0..k).map(|c| logit(expit(lp(&w.alpha, c)) * (1.0 - expit(lp(&w.tau, c))))).collect();
        for (slot, v) in [(&mut joint.alpha, d1), (&mut joint.tau, d0)] {
            slot[0] = v[0];
            for c in 1..k {
                slot[c] = v[c] - v[0];
            }
        }
        let a = estimate_dr(&ds, &w, &ModelSpec::for_outcome(kind)).unwrap();
        let b = estimate_dr_joint(&ds, &joint, &ModelSpec::joint(kind)).unwrap();
        worst = worst.max((a - b).abs());
    }
    worst
}

#[test]
fn criterion_7_joint_models() {
    let (m, elapsed) = simulate("S1", JOINT_REPS, &[EstimatorKind::DrJoint]);
    let mut rep = Report::new("7");
    let dr = est(&m, EstimatorKind::DrJoint);
    rep.check(&format!("case S1 joint DR bias {:+.4} vs truth {:.4}, |bias| <= 0.07", dr.bias, m.true_theta), dr.bias.abs() <= 0.07);
    rep.check(&format!("coverage {:.3} in [0.88, 1.0]", dr.coverage), (0.88..=1.0).contains(&dr.coverage));
    let gap = joint_identity_gap();
    rep.check(&format!("joint DR = conditional DR under matched probabilities: {gap:.1e} <= 1e-10"), gap <= 1e-10);
    rep.finish("joint-model suite, case S1 at desk scale, R = 50", elapsed);
}

#[test]
fn criterion_8_variance_oracles() {
    let start = Instant::now();
    let mut rep = Report::new("8");

    let mut r = rng(2024);
    let pop = synthetic_population(&mut r, 500);
    let ds = draw_a(&pop, &mut r, |_| 0.3);
    let se = sandwich_unpenalized(&dr_stack(&ds)).unwrap().se;
    let n = pop.len();
    let mut thetas = Vec::new();
    while thetas.len() < 500 {
        let picked = (0..n).filter_map(|_| ds.records.get(r.gen_range(0..n)).cloned()).collect();
        let bs = CombinedDataset::new(picked, Some(n), OutcomeKind::Continuous);
        if bs.n_a() < 10 || bs.n_b() < 10 {
            continue;
        }
        thetas.push(dr_stack(&bs).theta);
    }
    let m = thetas.iter().sum::<f64>() / thetas.len() as f64;
    let sd = (thetas.iter().map(|t| (t - m).powi(2)).sum::<f64>() / (thetas.len() - 1) as f64).sqrt();
    let rel = (se / sd - 1.0).abs();
    rep.check(&format!("DR sandwich se {se:.4} vs 500-resample bootstrap sd {sd:.4}: rel diff {rel:.3} <= 0.15"), rel <= 0.15);

    let mut r = rng(77);
    let pop = synthetic_population(&mut r, 5000);
    let mu = [vec![1.0, 1.0, 0.5, 0.0], vec![0.0, 1.0, 0.0, -0.5]].concat();
    let pi = |x: &[f64]| 0.02 + 0.06 / (1.0 + (-x[1]).exp());
    let spec = ModelSpec::for_outcome(OutcomeKind::Continuous);
    let (mut ests, mut v1s) = (Vec::new(), Vec::new());
    for _ in 0..1000 {
        let ds = draw_a(&pop, &mut r, pi);
        ests.push(estimate_or(&ds, &mu, &spec).unwrap());
        v1s.push(v1_hat(&ds, &mu, &spec).unwrap());
    }
    let m = ests.iter().sum::<f64>() / ests.len() as f64;
    let var = ests.iter().map(|e| (e - m).powi(2)).sum::<f64>() / (ests.len() - 1) as f64;
    let mv1 = v1s.iter().sum::<f64>() / v1s.len() as f64;
    let rel = (mv1 / var - 1.0).abs();
    rep.check(&format!("mean v1_hat {mv1:.3e} vs Monte Carlo variance {var:.3e} over 1000 Poisson draws: rel diff {rel:.3} <= 0.10"), rel <= 0.10);
    rep.finish("variance oracles", start.elapsed());
}

#[test]
fn criterion_9_determinism_across_jobs() {
    let start = Instant::now();
    let mut rep = Report::new("9");
    let dir = tempfile::tempdir().unwrap();
    let mut files = Vec::new();
    for jobs in [1usize, 2, 4] {
        let out = dir.path().join(format!("jobs{jobs}"));
        let cfg = RunConfig {
            mode: Mode::Simulate,
            case: Some("1".into()),
            seed: Some(BASE_SEED),
            reps: Some(4),
            jobs,
            desk_scale: true,
            estimators: Some(vec!["dr_combined".into(), "ipw_combined".into()]),
            out: out.clone(),
            ..RunConfig::default()
        };
        cli_io::run_simulate(&cfg).unwrap();
        files.push((std::fs::read(out.join("metrics.csv")).unwrap(), std::fs::read(out.join("provenance.json")).unwrap()));
    }
    let same = files.windows(2).all(|w| w[0] == w[1]);
    rep.check("metrics.csv and provenance.json byte-identical for --jobs 1, 2, 4", same);
    rep.finish("determinism", start.elapsed());
}

/// Full scale: N = 50,000 and R = 500. Hours of CPU time.
#[test]
#[ignore]
fn criterion_10_full_scale() {
    if std::env::var("DRCOMBINE_FULL").is_err() {
        println!("SKIP criterion 10: set DRCOMBINE_FULL=1 to run");
        return;
    }
    let spec = CaseSpec::from_id("1").unwrap();
    let start = Instant::now();
    let m = run_replications(&spec, 500, &[EstimatorKind::DrCombined], BASE_SEED, jobs(), &EstimateConfig::default()).unwrap().metrics;
    let mut rep = Report::new("10");
    let table = [("alpha", 1.0, 0.995), ("tau", 1.0, 0.982), ("beta", 1.0, 0.992), ("gamma", 1.0, 0.998)];
    for (name, sens, spec_v) in table {
        let b = block(&m, name);
        rep.check(&format!("{name}: sensitivity {:.3} vs {sens}", b.sensitivity), (b.sensitivity - sens).abs() <= 0.02);
        rep.check(&format!("{name}: specificity {:.3} vs {spec_v}", b.specificity), (b.specificity - spec_v).abs() <= 0.02);
    }
    let c = est(&m, EstimatorKind::DrCombined).coverage;
    rep.check(&format!("coverage {c:.3} in [0.945, 0.979]"), (0.945..=0.979).contains(&c));
    rep.finish("case 1 at full scale, R = 500", start.elapsed());
}
