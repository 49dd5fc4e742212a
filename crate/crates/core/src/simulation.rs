//! Synthetic two-indicator data-generating process with known dose-response
//! curves, and exact nuisance evaluation for it.
//!
//! Sources encode `(S_X, S_Y)` as `s = 2 S_X + S_Y`. Covariates are trivariate
//! normal with a source-dependent law, the exposure is a symmetric Beta whose
//! shape depends on the covariate row sum, and the outcome mean is
//! `theta(a) <x, 1>` with `theta` the true curve on outcome-aligned sources and
//! a misspecified curve elsewhere.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, Vector3};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, EstimationMode, FusionConfig, SampleRecord};
use crate::error::{CdrfError, Result};
use crate::measure::{beta_pdf, sample_beta, ReferenceMeasure};
use crate::nuisance::NuisanceEval;
use crate::seed::{rng_from_seed, Rng};

pub const COVARIATE_DIM: usize = 3;
pub const NOISE_SD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Gaussian,
    Trigonometric,
    Discontinuous,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Gaussian, Family::Trigonometric, Family::Discontinuous];

    pub fn as_str(&self) -> &'static str {
        match self {
            Family::Gaussian => "gaussian",
            Family::Trigonometric => "trigonometric",
            Family::Discontinuous => "discontinuous",
        }
    }

    /// True curve, without the domain check.
    pub fn theta(&self, a: f64) -> f64 {
        match self {
            Family::Gaussian => normal_pdf(a, 0.5, 0.25) - 1.0,
            Family::Trigonometric => 5.0 * (3.0 * a).sin() + 3.0 * (10.0 * a).cos(),
            Family::Discontinuous => {
                if a >= 0.5 {
                    0.5 * (a.powi(4) + 1.0)
                } else {
                    a.sqrt() + 0.1
                }
            }
        }
    }

    /// Curve generating outcomes on sources outside the outcome-aligned set.
    pub fn theta_misspecified(&self, a: f64) -> f64 {
        match self {
            Family::Gaussian => 0.5 * (normal_pdf(a, 1.0, 0.25) - 1.0),
            Family::Trigonometric => 0.5 * ((3.0 * a).cos() + (10.0 * a).sin()),
            Family::Discontinuous => {
                if a >= 0.3 {
                    0.1 * ((3.0 * a).cos() + 1.0)
                } else {
                    (1.0 + a).ln().sqrt()
                }
            }
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = CdrfError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gaussian" => Ok(Family::Gaussian),
            "trigonometric" | "trig" => Ok(Family::Trigonometric),
            "discontinuous" => Ok(Family::Discontinuous),
            other => Err(CdrfError::invalid(format!("unknown family '{other}'"))),
        }
    }
}

fn normal_pdf(a: f64, mean: f64, sd: f64) -> f64 {
    let z = (a - mean) / sd;
    (-0.5 * z * z).exp() / (sd * (2.0 * PI).sqrt())
}

fn check_unit(a: f64) -> Result<()> {
    if (0.0..=1.0).contains(&a) {
        Ok(())
    } else {
        Err(CdrfError::invalid(format!("exposure {a} outside [0,1]")))
    }
}

pub fn true_cdrf(family: Family, a: f64) -> Result<f64> {
    check_unit(a)?;
    Ok(family.theta(a))
}

pub fn misspecified_cdrf(family: Family, a: f64) -> Result<f64> {
    check_unit(a)?;
    Ok(family.theta_misspecified(a))
}

/// Fusion sets of the design: covariates aligned on `{2, 3}`, outcomes on `{1, 3}`.
pub fn scenario_fusion() -> FusionConfig {
    FusionConfig::new([2, 3], [1, 3]).expect("nonempty sets")
}

/// Trivariate normal with precomputed Cholesky factor and log normalizer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mvn {
    mean: Vector3<f64>,
    chol: Matrix3<f64>,
    precision: Matrix3<f64>,
    log_norm: f64,
}

impl Mvn {
    pub fn new(mean: Vector3<f64>, cov: Matrix3<f64>) -> Result<Self> {
        let c = cov
            .cholesky()
            .ok_or_else(|| CdrfError::numeric("covariance is not positive definite"))?;
        let chol = c.l();
        let log_det = 2.0 * chol.diagonal().iter().map(|d| d.ln()).sum::<f64>();
        Ok(Mvn {
            mean,
            precision: c.inverse(),
            chol,
            log_norm: -0.5 * (3.0 * (2.0 * PI).ln() + log_det),
        })
    }

    pub fn sample(&self, rng: &mut Rng) -> [f64; 3] {
        let z = Vector3::from_fn(|_, _| StandardNormal.sample(rng));
        let x = self.mean + self.chol * z;
        [x[0], x[1], x[2]]
    }

    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        let d = Vector3::new(x[0], x[1], x[2]) - self.mean;
        self.log_norm - 0.5 * (d.transpose() * self.precision * d)[(0, 0)]
    }
}

/// Fixed design constants of the simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub family: Family,
    /// Covariate law on `S_X = 1`.
    pub aligned: Mvn,
    /// Covariate law on `S_X = 0`.
    pub shifted: Mvn,
}

impl Scenario {
    pub fn new(family: Family) -> Self {
        let aligned = Mvn::new(Vector3::repeat(1.0 / 3.0), Matrix3::identity() * 0.09).expect("spd");
        let cov1 = Matrix3::from_fn(|i, j| if i == j { 0.25 } else { 0.1 });
        let shifted = Mvn::new(Vector3::repeat(1.0 / 6.0), cov1).expect("spd");
        Scenario {
            family,
            aligned,
            shifted,
        }
    }

    pub fn fusion(&self) -> FusionConfig {
        scenario_fusion()
    }

    /// Symmetric Beta shape `1 + 1 / (1 + exp(<x, 1>))`.
    pub fn exposure_shape(x: &[f64]) -> f64 {
        1.0 + 1.0 / (1.0 + x.iter().sum::<f64>().exp())
    }

    pub fn draw_record(&self, rng: &mut Rng) -> SampleRecord {
        let sx = rng.random::<f64>() < 0.5;
        let sy = rng.random::<f64>() < 0.5;
        let x = if sx {
            self.aligned.sample(rng)
        } else {
            self.shifted.sample(rng)
        };
        let c = Self::exposure_shape(&x);
        let a = sample_beta(c, c, rng);
        let row_sum: f64 = x.iter().sum();
        let curve = if sy {
            self.family.theta(a)
        } else {
            self.family.theta_misspecified(a)
        };
        let noise: f64 = StandardNormal.sample(rng);
        SampleRecord {
            x: x.to_vec(),
            a: vec![a],
            y: curve * row_sum + NOISE_SD * noise,
            s: 2 * sx as u32 + sy as u32,
        }
    }

    pub fn generate(&self, n: usize, seed: u64) -> Result<Dataset> {
        if n == 0 {
            return Err(CdrfError::invalid("cannot generate an empty dataset"));
        }
        let mut rng = rng_from_seed(seed);
        Dataset::new((0..n).map(|_| self.draw_record(&mut rng)).collect())
    }
}

pub fn generate(family: Family, n: usize, seed: u64) -> Result<Dataset> {
    Scenario::new(family).generate(n, seed)
}

/// Exact nuisance tuple of the design, with `tau` from a Monte Carlo mean of
/// the covariate row sum under the aligned covariate law.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleNuisance {
    pub scenario: Scenario,
    pub mu: ReferenceMeasure,
    pub mode: EstimationMode,
    pub xi: f64,
    pub eta: f64,
    /// Monte Carlo estimate of `E[<X, 1> | S_X = 1]`.
    pub row_sum_mean: f64,
}

pub fn oracle_nuisance(
    family: Family,
    mu: ReferenceMeasure,
    mode: EstimationMode,
    mc_size: usize,
    seed: u64,
) -> Result<OracleNuisance> {
    if mc_size == 0 {
        return Err(CdrfError::invalid("mc_size must be positive"));
    }
    if mu.dim() != 1 {
        return Err(CdrfError::DimensionMismatch {
            expected: 1,
            got: mu.dim(),
        });
    }
    let scenario = Scenario::new(family);
    let mut rng = rng_from_seed(seed);
    let total: f64 = (0..mc_size)
        .map(|_| scenario.aligned.sample(&mut rng).iter().sum::<f64>())
        .sum();
    let (xi, eta) = match mode {
        EstimationMode::Fused => (2.0, 2.0),
        EstimationMode::NonFused => (4.0, 4.0),
    };
    Ok(OracleNuisance {
        scenario,
        mu,
        mode,
        xi,
        eta,
        row_sum_mean: total / mc_size as f64,
    })
}

impl OracleNuisance {
    /// Covariate factor `p(x | S_X = 1) / p(x | S_Y = 1)` of the ratio; 1 in
    /// non-fused mode where both laws are the intersection law.
    pub fn covariate_factor(&self, x: &[f64]) -> f64 {
        match self.mode {
            EstimationMode::NonFused => 1.0,
            EstimationMode::Fused => {
                let l0 = self.scenario.aligned.log_pdf(x);
                let l1 = self.scenario.shifted.log_pdf(x);
                // 1 / (0.5 + 0.5 exp(l1 - l0))
                1.0 / (0.5 + 0.5 * (l1 - l0).exp())
            }
        }
    }

    /// Largest ratio value over a regular grid on `[0.01, 0.99]^4`.
    pub fn ratio_sup_on_grid(&self, points_per_axis: usize) -> f64 {
        let m = points_per_axis.max(2);
        let axis: Vec<f64> = (0..m).map(|i| 0.01 + 0.98 * i as f64 / (m - 1) as f64).collect();
        let mut best = 0.0f64;
        for &x1 in &axis {
            for &x2 in &axis {
                for &x3 in &axis {
                    let x = [x1, x2, x3];
                    for &a in &axis {
                        best = best.max(self.ratio(&x, &[a]));
                    }
                }
            }
        }
        best
    }
}

impl NuisanceEval for OracleNuisance {
    fn xi(&self) -> f64 {
        self.xi
    }

    fn eta(&self) -> f64 {
        self.eta
    }

    fn ratio(&self, x: &[f64], a: &[f64]) -> f64 {
        let c = Scenario::exposure_shape(x);
        let mu = self.mu.density_vec(a).unwrap_or(0.0);
        self.covariate_factor(x) * mu / beta_pdf(a[0], c, c)
    }

    fn outcome(&self, x: &[f64], a: &[f64]) -> f64 {
        self.scenario.family.theta(a[0]) * x.iter().sum::<f64>()
    }

    fn tau(&self, a: &[f64]) -> f64 {
        self.scenario.family.theta(a[0]) * self.row_sum_mean
    }
}
