//! Reference measures on the exposure space `[0,1]^d`.
//!
//! A reference measure weights the squared-error risk and supplies the
//! auxiliary exposure draws of the stochastic approximation. Coordinates are
//! independent, so `d > 1` gives the product measure.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use statrs::function::beta::ln_beta;

use crate::error::{CdrfError, Result};
use crate::seed::{rng_from_seed, Rng};

/// Lower clamp for density evaluation at the boundary of `[0,1]`.
pub const DENSITY_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum MeasureKind {
    Uniform01,
    Beta { alpha: f64, beta: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ReferenceMeasure {
    kind: MeasureKind,
    dim: usize,
}

impl ReferenceMeasure {
    pub fn uniform() -> Self {
        ReferenceMeasure {
            kind: MeasureKind::Uniform01,
            dim: 1,
        }
    }

    pub fn beta(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha > 0.0 && beta > 0.0 && alpha.is_finite() && beta.is_finite()) {
            return Err(CdrfError::invalid(format!(
                "beta parameters must be positive, got ({alpha}, {beta})"
            )));
        }
        Ok(ReferenceMeasure {
            kind: MeasureKind::Beta { alpha, beta },
            dim: 1,
        })
    }

    pub fn with_dim(mut self, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(CdrfError::invalid("measure dimension must be positive"));
        }
        self.dim = dim;
        Ok(self)
    }

    pub fn kind(&self) -> MeasureKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mean(&self) -> f64 {
        match self.kind {
            MeasureKind::Uniform01 => 0.5,
            MeasureKind::Beta { alpha, beta } => alpha / (alpha + beta),
        }
    }

    pub fn variance(&self) -> f64 {
        match self.kind {
            MeasureKind::Uniform01 => 1.0 / 12.0,
            MeasureKind::Beta { alpha, beta } => {
                let s = alpha + beta;
                alpha * beta / (s * s * (s + 1.0))
            }
        }
    }

    /// One scalar draw.
    pub fn draw(&self, rng: &mut Rng) -> f64 {
        match self.kind {
            MeasureKind::Uniform01 => rng.random::<f64>(),
            MeasureKind::Beta { alpha, beta } => sample_beta(alpha, beta, rng),
        }
    }

    /// `n` i.i.d. scalar draws (first coordinate law).
    pub fn sample(&self, n: usize, seed: u64) -> Result<Vec<f64>> {
        if n == 0 {
            return Err(CdrfError::invalid("sample size must be at least 1"));
        }
        let mut rng = rng_from_seed(seed);
        Ok((0..n).map(|_| self.draw(&mut rng)).collect())
    }

    /// `n` i.i.d. exposure vectors of length `dim`.
    pub fn sample_exposures(&self, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        if n == 0 {
            return Err(CdrfError::invalid("sample size must be at least 1"));
        }
        let mut rng = rng_from_seed(seed);
        Ok((0..n)
            .map(|_| (0..self.dim).map(|_| self.draw(&mut rng)).collect())
            .collect())
    }

    /// Lebesgue density of one coordinate at `a`.
    pub fn density(&self, a: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&a) {
            return Err(CdrfError::invalid(format!("density evaluated outside [0,1] at {a}")));
        }
        Ok(match self.kind {
            MeasureKind::Uniform01 => 1.0,
            MeasureKind::Beta { alpha, beta } => beta_pdf(a, alpha, beta),
        })
    }

    /// Product density for a full exposure vector.
    pub fn density_vec(&self, a: &[f64]) -> Result<f64> {
        if a.len() != self.dim {
            return Err(CdrfError::DimensionMismatch {
                expected: self.dim,
                got: a.len(),
            });
        }
        a.iter().try_fold(1.0, |acc, &v| Ok(acc * self.density(v)?))
    }
}

/// Beta density with the argument clamped into `[1e-12, 1 - 1e-12]`.
pub(crate) fn beta_pdf(a: f64, alpha: f64, beta: f64) -> f64 {
    let a = a.clamp(DENSITY_CLAMP, 1.0 - DENSITY_CLAMP);
    ((alpha - 1.0) * a.ln() + (beta - 1.0) * (1.0 - a).ln() - ln_beta(alpha, beta)).exp()
}

/// Beta draw as a ratio of two independent Gamma draws.
pub(crate) fn sample_beta(alpha: f64, beta: f64, rng: &mut Rng) -> f64 {
    let g1 = Gamma::new(alpha, 1.0).expect("positive shape").sample(rng);
    let g2 = Gamma::new(beta, 1.0).expect("positive shape").sample(rng);
    let s = g1 + g2;
    if s > 0.0 {
        g1 / s
    } else {
        // both underflowed; only reachable for tiny shapes
        if rng.random::<bool>() {
            0.0
        } else {
            1.0
        }
    }
}

impl fmt::Display for ReferenceMeasure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            MeasureKind::Uniform01 => write!(f, "uniform"),
            MeasureKind::Beta { alpha, beta } => write!(f, "beta({alpha},{beta})"),
        }
    }
}

impl FromStr for ReferenceMeasure {
    type Err = CdrfError;

    fn from_str(s: &str) -> Result<Self> {
        let t: String = s
            .chars()
            .filter(|c| !c.is_whitespace())
            .collect::<String>()
            .to_ascii_lowercase();
        if t == "uniform" || t == "uniform(0,1)" {
            return Ok(ReferenceMeasure::uniform());
        }
        if let Some(inner) = t.strip_prefix("beta(").and_then(|r| r.strip_suffix(')')) {
            let parts: Vec<&str> = inner.split(',').collect();
            if parts.len() == 2 {
                if let (Ok(a), Ok(b)) = (parts[0].parse::<f64>(), parts[1].parse::<f64>()) {
                    return ReferenceMeasure::beta(a, b);
                }
            }
        }
        Err(CdrfError::Config(format!("unknown reference measure `{s}`")))
    }
}

impl TryFrom<String> for ReferenceMeasure {
    type Error = CdrfError;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ReferenceMeasure> for String {
    fn from(m: ReferenceMeasure) -> String {
        m.to_string()
    }
}
