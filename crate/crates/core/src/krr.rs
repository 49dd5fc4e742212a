//! Closed-form minimizer of the penalized empirical orthogonal risk over the
//! RKHS of a kernel on exposures.
//!
//! With target-fold size `n`, pseudo-residuals `(u, v)` and Gram blocks `K`
//! (entries divided by `n`), the estimate is
//!
//! ```text
//! theta(t) = n^{-1/2} sum_j [ beta_j k(t, a_j) + gamma_j k(t, b_j) ]
//! beta     = -u / (lambda sqrt(n))
//! gamma    = -(K22 + lambda I)^{-1} (v / sqrt(n) + K21 beta)
//! ```
//!
//! The gradient of the objective in `(beta, gamma)` is `2 K r` with inner
//! vector `r = (u/sqrt(n) + lambda beta ; K21 beta + K22 gamma + v/sqrt(n) + lambda gamma)`,
//! which the closed form sets to zero.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CdrfError, Result};
use crate::kernel::{gram, GramBlocks, KernelFamily, KernelSpec};
use crate::loss::PseudoResiduals;

/// Dual-coefficient representation of a fitted dose-response curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "FittedCdrfDoc", into = "FittedCdrfDoc")]
pub struct FittedCDRF {
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub a_anchors: Vec<Vec<f64>>,
    pub b_anchors: Vec<Vec<f64>>,
    pub kernel: KernelSpec,
    pub lambda: f64,
}

/// On-disk JSON layout.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct FittedCdrfDoc {
    kernel: KernelFamily,
    bandwidth: f64,
    lambda: f64,
    n2: usize,
    beta: Vec<f64>,
    gamma: Vec<f64>,
    a_anchors: Vec<Vec<f64>>,
    b_anchors: Vec<Vec<f64>>,
}

impl From<FittedCDRF> for FittedCdrfDoc {
    fn from(m: FittedCDRF) -> Self {
        FittedCdrfDoc {
            kernel: m.kernel.family,
            bandwidth: m.kernel.bandwidth,
            lambda: m.lambda,
            n2: m.beta.len(),
            beta: m.beta,
            gamma: m.gamma,
            a_anchors: m.a_anchors,
            b_anchors: m.b_anchors,
        }
    }
}

impl TryFrom<FittedCdrfDoc> for FittedCDRF {
    type Error = CdrfError;

    fn try_from(d: FittedCdrfDoc) -> Result<Self> {
        let n = d.n2;
        if [d.beta.len(), d.gamma.len(), d.a_anchors.len(), d.b_anchors.len()]
            .iter()
            .any(|&l| l != n)
            || n == 0
        {
            return Err(CdrfError::invalid("fitted model vectors do not match n2"));
        }
        if !(d.lambda > 0.0) {
            return Err(CdrfError::invalid("fitted model lambda must be positive"));
        }
        Ok(FittedCDRF {
            beta: d.beta,
            gamma: d.gamma,
            a_anchors: d.a_anchors,
            b_anchors: d.b_anchors,
            kernel: KernelSpec::new(d.kernel, d.bandwidth)?,
            lambda: d.lambda,
        })
    }
}

impl FittedCDRF {
    pub fn n2(&self) -> usize {
        self.beta.len()
    }

    pub fn exposure_dim(&self) -> usize {
        self.a_anchors[0].len()
    }

    pub fn predict(&self, t: &[f64]) -> Result<f64> {
        if t.len() != self.exposure_dim() {
            return Err(CdrfError::DimensionMismatch {
                expected: self.exposure_dim(),
                got: t.len(),
            });
        }
        Ok(self.predict_unchecked(t))
    }

    pub fn predict_unchecked(&self, t: &[f64]) -> f64 {
        let k = &self.kernel;
        let s: f64 = self
            .beta
            .iter()
            .zip(&self.a_anchors)
            .chain(self.gamma.iter().zip(&self.b_anchors))
            .map(|(c, p)| c * k.eval_unchecked(t, p))
            .sum();
        s / (self.n2() as f64).sqrt()
    }

    pub fn predict_many(&self, points: &[Vec<f64>]) -> Result<Vec<f64>> {
        points.par_iter().map(|t| self.predict(t)).collect()
    }

    /// Stacked coefficient vector `(beta, gamma)`.
    pub fn coefficients(&self) -> DVector<f64> {
        DVector::from_iterator(2 * self.n2(), self.beta.iter().chain(&self.gamma).copied())
    }

    /// `||theta||_H = sqrt(c^T K c)` with the `1/n`-scaled Gram.
    pub fn rkhs_norm_with(&self, gram: &GramBlocks) -> f64 {
        let c = self.coefficients();
        (c.transpose() * gram.assemble() * &c)[(0, 0)].max(0.0).sqrt()
    }

    pub fn rkhs_norm(&self) -> Result<f64> {
        let g = gram(&self.kernel, &self.a_anchors, &self.b_anchors)?;
        Ok(self.rkhs_norm_with(&g))
    }
}

pub fn fit_closed_form(
    residuals: &PseudoResiduals,
    gram: &GramBlocks,
    lambda: f64,
    a_points: &[Vec<f64>],
    b_points: &[Vec<f64>],
    kernel: &KernelSpec,
) -> Result<FittedCDRF> {
    let n = gram.n2();
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(CdrfError::invalid(format!("lambda must be positive, got {lambda}")));
    }
    for len in [residuals.u.len(), residuals.v.len(), a_points.len(), b_points.len()] {
        if len != n {
            return Err(CdrfError::DimensionMismatch { expected: n, got: len });
        }
    }
    let sqrt_n = (n as f64).sqrt();
    let beta = DVector::from_iterator(n, residuals.u.iter().map(|u| -u / (lambda * sqrt_n)));
    let v = DVector::from_column_slice(&residuals.v);
    let rhs = -(v / sqrt_n + &gram.k21 * &beta);
    let sys = &gram.k22 + DMatrix::identity(n, n) * lambda;
    let chol = sys
        .cholesky()
        .ok_or_else(|| CdrfError::numeric("K22 + lambda I is not positive definite"))?;
    let gamma = chol.solve(&rhs);
    if gamma.iter().any(|g| !g.is_finite()) {
        return Err(CdrfError::numeric("closed-form solve produced non-finite weights"));
    }
    Ok(FittedCDRF {
        beta: beta.iter().copied().collect(),
        gamma: gamma.iter().copied().collect(),
        a_anchors: a_points.to_vec(),
        b_anchors: b_points.to_vec(),
        kernel: *kernel,
        lambda,
    })
}

/// Inner vector `r` of the objective gradient `2 K r`.
pub fn stationarity_inner(model: &FittedCDRF, residuals: &PseudoResiduals, gram: &GramBlocks) -> DVector<f64> {
    let n = model.n2();
    let sqrt_n = (n as f64).sqrt();
    let lam = model.lambda;
    let beta = DVector::from_column_slice(&model.beta);
    let gamma = DVector::from_column_slice(&model.gamma);
    let u = DVector::from_column_slice(&residuals.u);
    let v = DVector::from_column_slice(&residuals.v);
    let top = u / sqrt_n + &beta * lam;
    let bottom = &gram.k21 * &beta + &gram.k22 * &gamma + v / sqrt_n + &gamma * lam;
    DVector::from_iterator(2 * n, top.iter().chain(bottom.iter()).copied())
}

/// Max-norm of the objective gradient `2 K r` at the model's coefficients.
pub fn stationarity_residual(model: &FittedCDRF, residuals: &PseudoResiduals, gram: &GramBlocks) -> f64 {
    let inner = stationarity_inner(model, residuals, gram);
    (gram.assemble() * inner * 2.0).amax()
}
