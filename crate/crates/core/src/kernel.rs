//! Kernels on exposure (or joint feature) vectors, the median-heuristic
//! bandwidth, and the scaled Gram blocks of the closed-form estimator.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{CdrfError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    /// `exp(-|a - t|_1 / h)`
    Laplace,
    /// `exp(-|a - t|_2^2 / (2 h^2))`
    Gaussian,
}

impl KernelFamily {
    /// Distance used both by the kernel and by the median heuristic.
    pub fn distance(&self, a: &[f64], t: &[f64]) -> f64 {
        match self {
            KernelFamily::Laplace => a.iter().zip(t).map(|(x, y)| (x - y).abs()).sum(),
            KernelFamily::Gaussian => a.iter().zip(t).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
        }
    }
}

impl FromStr for KernelFamily {
    type Err = CdrfError;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "laplace" => Ok(KernelFamily::Laplace),
            "gaussian" | "rbf" => Ok(KernelFamily::Gaussian),
            other => Err(CdrfError::Config(format!("unknown kernel `{other}`"))),
        }
    }
}

impl fmt::Display for KernelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KernelFamily::Laplace => "laplace",
            KernelFamily::Gaussian => "gaussian",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub bandwidth: f64,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, bandwidth: f64) -> Result<Self> {
        if !(bandwidth.is_finite() && bandwidth > 0.0) {
            return Err(CdrfError::invalid(format!(
                "bandwidth must be positive, got {bandwidth}"
            )));
        }
        Ok(KernelSpec { family, bandwidth })
    }

    pub fn laplace(bandwidth: f64) -> Result<Self> {
        Self::new(KernelFamily::Laplace, bandwidth)
    }

    pub fn gaussian(bandwidth: f64) -> Result<Self> {
        Self::new(KernelFamily::Gaussian, bandwidth)
    }

    pub fn eval(&self, a: &[f64], t: &[f64]) -> Result<f64> {
        if a.len() != t.len() {
            return Err(CdrfError::DimensionMismatch {
                expected: a.len(),
                got: t.len(),
            });
        }
        Ok(self.eval_unchecked(a, t))
    }

    /// Caller guarantees equal lengths.
    #[inline]
    pub fn eval_unchecked(&self, a: &[f64], t: &[f64]) -> f64 {
        let h = self.bandwidth;
        match self.family {
            KernelFamily::Laplace => {
                let d: f64 = a.iter().zip(t).map(|(x, y)| (x - y).abs()).sum();
                (-d / h).exp()
            }
            KernelFamily::Gaussian => {
                let d2: f64 = a.iter().zip(t).map(|(x, y)| (x - y) * (x - y)).sum();
                (-d2 / (2.0 * h * h)).exp()
            }
        }
    }

    /// Kernel value for one coordinate. Both families factor over
    /// coordinates: `k(a, t) = prod_j k1(a_j, t_j)`.
    #[inline]
    pub fn eval_coordinate(&self, a: f64, t: f64) -> f64 {
        let h = self.bandwidth;
        match self.family {
            KernelFamily::Laplace => (-(a - t).abs() / h).exp(),
            KernelFamily::Gaussian => (-(a - t) * (a - t) / (2.0 * h * h)).exp(),
        }
    }

    /// Unscaled kernel matrix `K(rows_i, cols_j)`.
    pub fn matrix(&self, rows: &[Vec<f64>], cols: &[Vec<f64>]) -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), cols.len(), |i, j| self.eval_unchecked(&rows[i], &cols[j]))
    }

    /// Unscaled symmetric kernel matrix; fills the upper triangle and mirrors.
    pub fn symmetric_matrix(&self, points: &[Vec<f64>]) -> DMatrix<f64> {
        let n = points.len();
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = self.eval_unchecked(&points[i], &points[i]);
            for j in (i + 1)..n {
                let v = self.eval_unchecked(&points[i], &points[j]);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        m
    }
}

/// Median of all pairwise distances `{dist(p_i, p_j) : i < j}`; the median of
/// an even count averages the two central order statistics.
pub fn median_heuristic(points: &[Vec<f64>], family: KernelFamily) -> Result<f64> {
    if points.len() < 2 {
        return Err(CdrfError::invalid("median heuristic needs at least 2 points"));
    }
    let mut dists = Vec::with_capacity(points.len() * (points.len() - 1) / 2);
    for i in 0..points.len() {
        for j in (i + 1)..points.len() {
            dists.push(family.distance(&points[i], &points[j]));
        }
    }
    if dists.iter().all(|&d| d == 0.0) {
        return Err(CdrfError::invalid("degenerate exposure set"));
    }
    let h = median(&mut dists);
    if h > 0.0 {
        Ok(h)
    } else {
        // more than half the pairs coincide; fall back to the positive part
        let mut pos: Vec<f64> = dists.into_iter().filter(|&d| d > 0.0).collect();
        Ok(median(&mut pos))
    }
}

pub(crate) fn median(values: &mut [f64]) -> f64 {
    let n = values.len();
    assert!(n > 0);
    let mid = n / 2;
    let (_, upper, _) = values.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    let upper = *upper;
    if n % 2 == 1 {
        upper
    } else {
        let lower = values[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    }
}

/// Blocks of the `2 n2 x 2 n2` Gram matrix over `(a_1..a_n2, b_1..b_n2)`,
/// every entry divided by `n2`.
#[derive(Debug, Clone, PartialEq)]
pub struct GramBlocks {
    pub k11: DMatrix<f64>,
    pub k12: DMatrix<f64>,
    pub k21: DMatrix<f64>,
    pub k22: DMatrix<f64>,
    pub scale: f64,
}

impl GramBlocks {
    pub fn n2(&self) -> usize {
        self.k11.nrows()
    }

    /// Full matrix `[[K11, K12], [K21, K22]]`.
    pub fn assemble(&self) -> DMatrix<f64> {
        let n = self.n2();
        let mut full = DMatrix::zeros(2 * n, 2 * n);
        full.view_mut((0, 0), (n, n)).copy_from(&self.k11);
        full.view_mut((0, n), (n, n)).copy_from(&self.k12);
        full.view_mut((n, 0), (n, n)).copy_from(&self.k21);
        full.view_mut((n, n), (n, n)).copy_from(&self.k22);
        full
    }
}

pub fn gram(kernel: &KernelSpec, a_points: &[Vec<f64>], b_points: &[Vec<f64>]) -> Result<GramBlocks> {
    let n = a_points.len();
    if n == 0 {
        return Err(CdrfError::invalid("gram needs at least one point"));
    }
    if b_points.len() != n {
        return Err(CdrfError::DimensionMismatch {
            expected: n,
            got: b_points.len(),
        });
    }
    let d = a_points[0].len();
    if let Some(p) = a_points.iter().chain(b_points).find(|p| p.len() != d) {
        return Err(CdrfError::DimensionMismatch {
            expected: d,
            got: p.len(),
        });
    }
    let scale = 1.0 / n as f64;
    let k11 = kernel.symmetric_matrix(a_points) * scale;
    let k22 = kernel.symmetric_matrix(b_points) * scale;
    let k12 = kernel.matrix(a_points, b_points) * scale;
    let k21 = k12.transpose();
    Ok(GramBlocks {
        k11,
        k12,
        k21,
        k22,
        scale,
    })
}
