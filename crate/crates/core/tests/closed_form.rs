mod common;

use cdrf_core::kernel::{gram, KernelSpec};
use cdrf_core::krr::{fit_closed_form, stationarity_residual, FittedCDRF};
use cdrf_core::loss::PseudoResiduals;
use common::Instance;
use proptest::prelude::*;

fn fit(inst: &Instance) -> FittedCDRF {
    let k = KernelSpec::laplace(inst.h).unwrap();
    let a: Vec<Vec<f64>> = inst.a.iter().map(|&x| vec![x]).collect();
    let b: Vec<Vec<f64>> = inst.b.iter().map(|&x| vec![x]).collect();
    let g = gram(&k, &a, &b).unwrap();
    let res = PseudoResiduals {
        u: inst.u.clone(),
        v: inst.v.clone(),
    };
    fit_closed_form(&res, &g, inst.lambda, &a, &b, &k).unwrap()
}

/// Dense objective evaluated on an arbitrary curve, used to probe optimality.
fn objective(inst: &Instance, theta: impl Fn(f64) -> f64, norm_sq: f64) -> f64 {
    let n = inst.a.len() as f64;
    let data: f64 = (0..inst.a.len())
        .map(|i| {
            let tb = theta(inst.b[i]);
            tb * tb + 2.0 * inst.v[i] * tb + 2.0 * inst.u[i] * theta(inst.a[i])
        })
        .sum();
    data / n + inst.lambda * norm_sq
}

/// RKHS norm of `n^{-1/2} sum_j c_j k(., p_j)`.
fn dense_norm_sq(inst: &Instance, c: &[f64]) -> f64 {
    let p: Vec<f64> = inst.a.iter().chain(&inst.b).copied().collect();
    let mut s = 0.0;
    for i in 0..p.len() {
        for j in 0..p.len() {
            s += c[i] * c[j] * common::laplace(p[i], p[j], inst.h);
        }
    }
    s / inst.a.len() as f64
}

#[test]
fn matches_dense_oracle_on_fixed_instances() {
    for seed in 0..40 {
        let inst = common::random_instance(1 + seed as usize % 6, seed);
        let model = fit(&inst);
        let dense = common::dense_minimizer(&inst);
        for t in common::grid(25) {
            let ours = model.predict(&[t]).unwrap();
            let theirs = common::eval_dense(&inst, &dense, t);
            assert!(
                (ours - theirs).abs() <= 1e-8 * (1.0 + theirs.abs()),
                "seed {seed} t {t}: {ours} vs {theirs}"
            );
        }
    }
}

#[test]
fn rkhs_norm_agrees_with_dense_expansion() {
    let inst = common::random_instance(5, 99);
    let model = fit(&inst);
    let c: Vec<f64> = model.beta.iter().chain(&model.gamma).copied().collect();
    let ours = model.rkhs_norm().unwrap();
    assert!((ours * ours - dense_norm_sq(&inst, &c)).abs() < 1e-10);
}

#[test]
fn oracle_objective_not_beaten_by_perturbations() {
    let inst = common::random_instance(4, 5);
    let dense = common::dense_minimizer(&inst);
    let best = objective(
        &inst,
        |t| common::eval_dense(&inst, &dense, t),
        dense_norm_sq(&inst, &dense),
    );
    for j in 0..dense.len() {
        for eps in [-1e-3, 1e-3] {
            let mut c = dense.clone();
            c[j] += eps;
            let val = objective(&inst, |t| common::eval_dense(&inst, &c, t), dense_norm_sq(&inst, &c));
            assert!(val >= best - 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn closed_form_is_the_dense_minimizer(n in 1usize..9, seed in any::<u64>()) {
        let inst = common::random_instance(n, seed);
        let model = fit(&inst);
        let dense = common::dense_minimizer(&inst);
        let grid = common::grid(20);
        let scale = grid.iter().map(|&t| common::eval_dense(&inst, &dense, t).abs()).fold(0.0, f64::max);
        for t in grid {
            let gap = (model.predict(&[t]).unwrap() - common::eval_dense(&inst, &dense, t)).abs();
            prop_assert!(gap <= 1e-8 * scale.max(1e-12));
        }
    }

    #[test]
    fn stationarity_holds(n in 1usize..12, seed in any::<u64>()) {
        let inst = common::random_instance(n, seed);
        let k = KernelSpec::laplace(inst.h).unwrap();
        let a: Vec<Vec<f64>> = inst.a.iter().map(|&x| vec![x]).collect();
        let b: Vec<Vec<f64>> = inst.b.iter().map(|&x| vec![x]).collect();
        let g = gram(&k, &a, &b).unwrap();
        let res = PseudoResiduals { u: inst.u.clone(), v: inst.v.clone() };
        let model = fit_closed_form(&res, &g, inst.lambda, &a, &b, &k).unwrap();
        let norm = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!(stationarity_residual(&model, &res, &g) <= 1e-10 * (1.0 + norm(&inst.u) + norm(&inst.v)));
    }

    #[test]
    fn beta_depends_only_on_u(n in 1usize..8, seed in any::<u64>()) {
        let inst = common::random_instance(n, seed);
        let model = fit(&inst);
        let s = (n as f64).sqrt();
        for (bj, uj) in model.beta.iter().zip(&inst.u) {
            prop_assert!((bj + uj / (inst.lambda * s)).abs() <= 1e-12 * (1.0 + bj.abs()));
        }
    }

    #[test]
    fn solution_is_linear_in_residuals(n in 1usize..7, seed in any::<u64>(), c in -3.0f64..3.0) {
        let inst = common::random_instance(n, seed);
        let scaled = Instance {
            u: inst.u.iter().map(|x| c * x).collect(),
            v: inst.v.iter().map(|x| c * x).collect(),
            ..inst.clone()
        };
        let m1 = fit(&inst);
        let m2 = fit(&scaled);
        for t in common::grid(7) {
            let p1 = m1.predict(&[t]).unwrap();
            let p2 = m2.predict(&[t]).unwrap();
            prop_assert!((c * p1 - p2).abs() <= 1e-9 * (1.0 + p2.abs()));
        }
    }
}
