//! Small dense helpers: compensated sums, weighted Gram matrices, jittered solves.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Neumaier-compensated accumulator.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum {
    sum: f64,
    c: f64,
}

impl KahanSum {
    #[inline]
    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.c += (self.sum - t) + v;
        } else {
            self.c += (v - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum + self.c
    }
}

pub fn ksum<I: IntoIterator<Item = f64>>(it: I) -> f64 {
    let mut k = KahanSum::default();
    for v in it {
        k.add(v);
    }
    k.value()
}

/// `scale * Xᵀ v`.
pub fn xt_v(x: &DMatrix<f64>, v: &[f64], scale: f64) -> Vec<f64> {
    let n = x.nrows();
    debug_assert_eq!(n, v.len());
    let data = x.as_slice();
    (0..x.ncols()).map(|j| dot(&data[j * n..(j + 1) * n], v) * scale).collect()
}

/// Dot product over eight interleaved partial sums.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (xa, xb) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += xa[k] * xb[k];
        }
    }
    acc.iter().sum::<f64>() + tail
}

/// Linear predictor `X b`.
pub fn x_b(x: &DMatrix<f64>, b: &[f64]) -> Vec<f64> {
    let n = x.nrows();
    let mut out = vec![0.0; n];
    let data = x.as_slice();
    for (j, &bj) in b.iter().enumerate() {
        if bj == 0.0 {
            continue;
        }
        let col = &data[j * n..(j + 1) * n];
        for (o, c) in out.iter_mut().zip(col) {
            *o += c * bj;
        }
    }
    out
}

/// `Xᵀ diag(w) X`.
pub fn gram(x: &DMatrix<f64>, w: &[f64]) -> DMatrix<f64> {
    let (n, d) = x.shape();
    if n == 0 {
        return DMatrix::zeros(d, d);
    }
    let mut wx = x.clone();
    for j in 0..d {
        let col = &mut wx.as_mut_slice()[j * n..(j + 1) * n];
        for (c, wi) in col.iter_mut().zip(w) {
            *c *= wi;
        }
    }
    // the blocked product is several times faster than tr_mul here
    let g = x.transpose() * wx;
    // exact symmetry keeps transposed Jacobian blocks bit-identical
    symmetrize(g)
}

fn symmetrize(mut g: DMatrix<f64>) -> DMatrix<f64> {
    let d = g.nrows();
    for i in 0..d {
        for j in 0..i {
            let v = 0.5 * (g[(i, j)] + g[(j, i)]);
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    g
}

/// Solves `(M + s I) x = rhs` for the first `s` in `{0, 1e-8, 1e-6, 1e-4}` that works.
pub fn solve_with_jitter(m: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    for &jit in &[0.0, 1e-8, 1e-6, 1e-4] {
        let mut a = m.clone();
        if jit > 0.0 {
            for i in 0..a.nrows() {
                a[(i, i)] += jit;
            }
        }
        let lu = a.lu();
        if let Some(sol) = lu.solve(rhs) {
            if sol.iter().all(|v| v.is_finite()) {
                if jit > 0.0 {
                    log::debug!("LQA system needed jitter {jit:e}");
                }
                return Ok(sol);
            }
        }
    }
    Err(Error::SingularLqa)
}

pub fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

pub fn two_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
