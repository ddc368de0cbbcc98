mod common;

use common::*;
use drcombine::simulation::generate_dataset;
use drcombine::{
    estimate_dr, estimate_dr_joint, estimate_ipw, estimate_or, estimate_set, CaseSpec, CombinedDataset, EstimateConfig, EstimatorKind, ModelSpec, NuisanceParams, OutcomeKind, UnitRecord,
};

fn without_b(ds: &CombinedDataset) -> CombinedDataset {
    let recs = ds.records.iter().filter(|r| !r.i_b).cloned().collect();
    CombinedDataset::new(recs, ds.pop_size, ds.outcome_kind)
}

#[test]
fn dr_equals_or_without_sample_b() {
    for seed in 0..20 {
        let kind = if seed % 2 == 0 { OutcomeKind::Continuous } else { OutcomeKind::Binary };
        let mut r = rng(seed);
        let ds = without_b(&random_dataset(&mut r, 50, 3, kind));
        let w = random_params(&mut r, ds.d, 0.7);
        let spec = ModelSpec::for_outcome(kind);
        assert_eq!(estimate_dr(&ds, &w, &spec).unwrap(), estimate_or(&ds, &w.mu(), &spec).unwrap());
    }
}

#[test]
fn dr_equals_ipw_with_zero_outcome_models() {
    for seed in 0..20 {
        let mut r = rng(100 + seed);
        let ds = random_dataset(&mut r, 50, 3, OutcomeKind::Continuous);
        let mut w = random_params(&mut r, ds.d, 0.7);
        w.beta.iter_mut().chain(w.gamma.iter_mut()).for_each(|v| *v = 0.0);
        let spec = ModelSpec::for_outcome(OutcomeKind::Continuous);
        let dr = estimate_dr(&ds, &w, &spec).unwrap();
        let ipw = estimate_ipw(&ds, &w.eta(), &spec).unwrap();
        assert!((dr - ipw).abs() <= 1e-12 * ipw.abs().max(1.0), "{dr} vs {ipw}");
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn expit(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Dummy-coded covariates let a logit model hit any per-category probability,
/// so joint coefficients can reproduce conditional weights exactly.
#[test]
fn joint_matches_conditional_under_matched_probabilities() {
    let k = 4;
    let mut r = rng(7);
    let mut recs = Vec::new();
    for i in 0..80 {
        let mut x = vec![0.0; k];
        x[0] = 1.0;
        if i % k > 0 {
            x[i % k] = 1.0;
        }
        recs.push(if i % 3 == 0 {
            UnitRecord::sample_a(5.0 + (i % 7) as f64, x)
        } else {
            UnitRecord::sample_b(x, i % 2 == 0, (i as f64).sin() * 2.0)
        });
    }
    let ds = CombinedDataset::new(recs, Some(400), OutcomeKind::Continuous);
    let w = random_params(&mut r, k, 0.8);
    let cat_lp = |coef: &[f64], c: usize| coef[0] + if c > 0 { coef[c] } else { 0.0 };
    let mut joint = w.clone();
    let d1: Vec<f64> = (0..k).map(|c| logit(expit(cat_lp(&w.alpha, c)) * expit(cat_lp(&w.tau, c)))).collect();
    let d0: Vec<f64> = (0..k).map(|c| logit(expit(cat_lp(&w.alpha, c)) * (1.0 - expit(cat_lp(&w.tau, c))))).collect();
    for (slot, v) in [(&mut joint.alpha, d1), (&mut joint.tau, d0)] {
        slot[0] = v[0];
        for c in 1..k {
            slot[c] = v[c] - v[0];
        }
    }
    let cond = estimate_dr(&ds, &w, &ModelSpec::for_outcome(OutcomeKind::Continuous)).unwrap();
    let j = estimate_dr_joint(&ds, &joint, &ModelSpec::joint(OutcomeKind::Continuous)).unwrap();
    assert!((cond - j).abs() <= 1e-10, "{cond} vs {j}");
    assert!(estimate_dr_joint(&ds, &joint, &ModelSpec::for_outcome(OutcomeKind::Continuous)).is_err());
}

fn shifted(ds: &CombinedDataset, c: f64) -> CombinedDataset {
    let mut out = ds.clone();
    for r in out.records.iter_mut() {
        if let Some(y) = r.y.as_mut() {
            *y += c;
        }
    }
    out
}

#[test]
fn estimates_shift_with_the_outcome_on_refit() {
    let spec = CaseSpec::from_id("1").unwrap().desk_scale();
    let ds = generate_dataset(&spec, 99).unwrap();
    let c = 2.5;
    let moved = shifted(&ds, c);
    for penalized in [false, true] {
        // the unpenalized IPW uses a logistic treatment score, whose weights do
        // not sum to the population size within each arm
        let kinds = if penalized {
            vec![EstimatorKind::OrCombined, EstimatorKind::IpwCombined, EstimatorKind::DrCombined]
        } else {
            vec![EstimatorKind::OrCombined, EstimatorKind::DrCombined]
        };
        let cfg = EstimateConfig { penalized, seed: 5, ..EstimateConfig::default() };
        let a = estimate_set(&ds, &kinds, &cfg);
        let b = estimate_set(&moved, &kinds, &cfg);
        for ((k, ra), (_, rb)) in a.iter().zip(&b) {
            let (ta, tb) = (ra.as_ref().unwrap().theta_hat, rb.as_ref().unwrap().theta_hat);
            // the ATE is a difference of arm means, so a common shift cancels
            assert!((tb - ta).abs() <= 1e-6, "{k} penalized={penalized}: {ta} vs {tb}");
        }
    }
}
