//! Test-side oracles that share no code with the estimator.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn laplace(a: f64, t: f64, h: f64) -> f64 {
    (-(a - t).abs() / h).exp()
}

/// A random closed-form instance with scalar exposures.
#[derive(Debug, Clone)]
pub struct Instance {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub h: f64,
    pub lambda: f64,
}

pub fn random_instance(n: usize, seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Instance {
        a: (0..n).map(|_| rng.random::<f64>()).collect(),
        b: (0..n).map(|_| rng.random::<f64>()).collect(),
        u: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        v: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        h: rng.random_range(0.1..1.0),
        lambda: 10f64.powf(rng.random_range(-3.0..0.0)),
    }
}

/// Minimizer of
/// `mean_i [theta(b_i)^2 + 2 v_i theta(b_i) + 2 u_i theta(a_i)] + lambda ||theta||_H^2`
/// over `theta = n^{-1/2} sum_j c_j k(., p_j)` with `p = (a, b)`, found by a
/// pseudo-inverse solve of the dense normal equations. Returns the curve as a
/// closure-ready coefficient vector over `p`.
pub fn dense_minimizer(inst: &Instance) -> Vec<f64> {
    let n = inst.a.len();
    let p: Vec<f64> = inst.a.iter().chain(&inst.b).copied().collect();
    let s = (n as f64).sqrt();
    let phi = |pts: &[f64]| DMatrix::from_fn(n, 2 * n, |i, j| laplace(pts[i], p[j], inst.h) / s);
    let phi_a = phi(&inst.a);
    let phi_b = phi(&inst.b);
    let k_raw = DMatrix::from_fn(2 * n, 2 * n, |i, j| laplace(p[i], p[j], inst.h));
    let nf = n as f64;
    let hess = (phi_b.transpose() * &phi_b + &k_raw * inst.lambda) / nf;
    let u = DVector::from_column_slice(&inst.u);
    let v = DVector::from_column_slice(&inst.v);
    let rhs = -(phi_b.transpose() * v + phi_a.transpose() * u) / nf;
    let svd = hess.svd(true, true);
    let tol = 1e-13 * svd.singular_values.max();
    svd.solve(&rhs, tol).expect("svd solve").iter().copied().collect()
}

pub fn eval_dense(inst: &Instance, coef: &[f64], t: f64) -> f64 {
    let n = inst.a.len();
    let s: f64 = inst
        .a
        .iter()
        .chain(&inst.b)
        .zip(coef)
        .map(|(p, c)| c * laplace(t, *p, inst.h))
        .sum();
    s / (n as f64).sqrt()
}

pub fn grid(points: usize) -> Vec<f64> {
    (0..points).map(|i| i as f64 / (points - 1) as f64).collect()
}
