#![allow(dead_code)]

use drcombine::{CombinedDataset, ModelSpec, NuisanceParams, OutcomeKind, UnitRecord};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `n` units split between sample A and sample B, `p` covariates plus the intercept.
pub fn random_dataset(r: &mut ChaCha8Rng, n: usize, p: usize, kind: OutcomeKind) -> CombinedDataset {
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let mut x = vec![1.0];
        x.extend((0..p).map(|_| r.sample::<f64, _>(StandardNormal)));
        // at least two units of each kind and arm
        let in_a = if i < 4 { i < 2 } else { r.gen_bool(0.4) };
        if in_a {
            records.push(UnitRecord::sample_a(r.gen_range(2.0..12.0), x));
        } else {
            let t = if i < 4 { i == 2 } else { r.gen_bool(0.5) };
            let y = match kind {
                OutcomeKind::Continuous => x[1] + r.sample::<f64, _>(StandardNormal),
                OutcomeKind::Binary => r.gen_bool(0.4) as u8 as f64,
            };
            records.push(UnitRecord::sample_b(x, t, y));
        }
    }
    let total: f64 = records.iter().map(|u| u.d_a()).sum();
    CombinedDataset::new(records, Some(total.round() as usize + n), kind)
}

pub fn random_params(r: &mut ChaCha8Rng, d: usize, scale: f64) -> NuisanceParams {
    let mut v = || (0..d).map(|_| r.gen_range(-scale..scale)).collect::<Vec<f64>>();
    NuisanceParams { alpha: v(), tau: v(), beta: v(), gamma: v() }
}

pub fn spec_for(kind: OutcomeKind, joint: bool) -> ModelSpec {
    if joint {
        ModelSpec::joint(kind)
    } else {
        ModelSpec::for_outcome(kind)
    }
}

/// Largest entry of `|a − b|` relative to the largest entry of `|b|`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

/// Central difference of a scalar function.
pub fn fd_grad(f: impl Fn(&[f64]) -> f64, p: &[f64]) -> Vec<f64> {
    (0..p.len())
        .map(|j| {
            let h = 1e-5 * p[j].abs().max(1.0);
            let mut q = p.to_vec();
            q[j] = p[j] + h;
            let up = f(&q);
            q[j] = p[j] - h;
            (up - f(&q)) / (2.0 * h)
        })
        .collect()
}

/// Central-difference Jacobian, row-major `rows × p.len()`.
pub fn fd_jac(f: impl Fn(&[f64]) -> Vec<f64>, p: &[f64]) -> Vec<Vec<f64>> {
    let cols: Vec<Vec<f64>> = (0..p.len())
        .map(|j| {
            let h = 1e-5 * p[j].abs().max(1.0);
            let mut q = p.to_vec();
            q[j] = p[j] + h;
            let up = f(&q);
            q[j] = p[j] - h;
            let dn = f(&q);
            up.iter().zip(&dn).map(|(a, b)| (a - b) / (2.0 * h)).collect()
        })
        .collect();
    (0..cols[0].len()).map(|i| cols.iter().map(|c| c[i]).collect()).collect()
}

/// A finite population with both potential outcomes realised through `t`.
pub struct Unit {
    pub x: Vec<f64>,
    pub t: bool,
    pub y: f64,
    pub in_b: bool,
}

pub fn synthetic_population(r: &mut ChaCha8Rng, n: usize) -> Vec<Unit> {
    let expit = |v: f64| 1.0 / (1.0 + (-v).exp());
    (0..n)
        .map(|_| {
            let x: Vec<f64> = std::iter::once(1.0).chain((0..3).map(|_| r.sample::<f64, _>(StandardNormal))).collect();
            let t = r.gen_bool(expit(0.2 + 0.5 * x[2]));
            let e: f64 = r.sample(StandardNormal);
            let y = if t { 1.0 + x[1] + 0.5 * x[2] + e } else { x[1] - 0.5 * x[3] + e };
            let in_b = r.gen_bool(expit(-1.2 + 0.6 * x[1]));
            Unit { x, t, y, in_b }
        })
        .collect()
}

/// Poisson draw of sample A with inclusion probability `pi_a` among units outside B.
pub fn draw_a(pop: &[Unit], r: &mut ChaCha8Rng, pi_a: impl Fn(&[f64]) -> f64) -> CombinedDataset {
    let mut recs = Vec::new();
    for u in pop {
        if u.in_b {
            recs.push(UnitRecord::sample_b(u.x.clone(), u.t, u.y));
        } else {
            let p = pi_a(&u.x);
            if r.gen_bool(p) {
                recs.push(UnitRecord::sample_a(1.0 / p, u.x.clone()));
            }
        }
    }
    CombinedDataset::new(recs, Some(pop.len()), OutcomeKind::Continuous)
}
