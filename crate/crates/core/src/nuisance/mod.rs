//! Nuisance estimation on the first fold: inverse source probabilities,
//! the density ratio `w`, the outcome regression `m` and the plug-in curve
//! `tau`, for fused and non-fused estimation.

pub mod outcome;
pub mod ratio;

use serde::{Deserialize, Serialize};

use crate::data::{EstimationMode, ExtendedRecord, FusionConfig, SampleRecord};
use crate::error::{CdrfError, Result, StageExt};
use crate::seed::derive_seed;

pub use outcome::{fit_outcome_regression, fit_tau, OutcomeConfig, RegressionModel, TauModel};
pub use ratio::{fit_density_ratio, RatioConfig, RatioModel, RatioTrainingSet};

/// Caps on the inverse source probabilities and the ratio clip bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NuisanceBounds {
    pub m_w: f64,
    pub m_xi: f64,
    pub m_eta: f64,
}

impl Default for NuisanceBounds {
    fn default() -> Self {
        NuisanceBounds {
            m_w: 50.0,
            m_xi: 100.0,
            m_eta: 100.0,
        }
    }
}

impl NuisanceBounds {
    pub fn new(m_w: f64, m_xi: f64, m_eta: f64) -> Result<Self> {
        if [m_w, m_xi, m_eta].iter().any(|&v| !(v >= 1.0) || !v.is_finite()) {
            return Err(CdrfError::invalid("nuisance bounds must be finite and at least 1"));
        }
        Ok(NuisanceBounds { m_w, m_xi, m_eta })
    }

    pub fn ratio_clip(&self) -> (f64, f64) {
        (1.0 / self.m_w, self.m_w)
    }

    /// `M_lambda = (M_eta + M_w + 2) / M_w`.
    pub fn m_lambda(&self) -> f64 {
        (self.m_eta + self.m_w + 2.0) / self.m_w
    }
}

/// Everything needed to fit the nuisance tuple.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NuisanceConfig {
    pub ratio: RatioConfig,
    pub outcome: OutcomeConfig,
    pub bounds: NuisanceBounds,
    /// Clip `m` and `tau` into `[-1, 1]`.
    pub clip_mean: bool,
}

/// Point evaluations of a nuisance tuple `(xi, eta, w, m, tau)`.
pub trait NuisanceEval: Sync {
    fn xi(&self) -> f64;
    fn eta(&self) -> f64;
    fn ratio(&self, x: &[f64], a: &[f64]) -> f64;
    fn outcome(&self, x: &[f64], a: &[f64]) -> f64;
    fn tau(&self, a: &[f64]) -> f64;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceProbs {
    pub xi: f64,
    pub eta: f64,
    pub mode: EstimationMode,
}

/// Inverse empirical proportions of covariate- and outcome-aligned records,
/// capped at `(m_xi, m_eta)`. In non-fused mode both use the intersection.
pub fn estimate_source_probs(
    records: &[SampleRecord],
    fusion: &FusionConfig,
    mode: EstimationMode,
    bounds: &NuisanceBounds,
) -> Result<SourceProbs> {
    fusion.validate(mode)?;
    let n = records.len() as f64;
    let nx = records.iter().filter(|r| fusion.in_x(r.s, mode)).count();
    let ny = records.iter().filter(|r| fusion.in_y(r.s, mode)).count();
    if nx == 0 || ny == 0 {
        return Err(CdrfError::EmptySourceSet(format!(
            "{} covariate-aligned and {} outcome-aligned records",
            nx, ny
        )));
    }
    Ok(SourceProbs {
        xi: (n / nx as f64).min(bounds.m_xi),
        eta: (n / ny as f64).min(bounds.m_eta),
        mode,
    })
}

/// Numerator `(x_i, b_i)` over covariate-aligned records, denominator
/// `(x_i, a_i)` over outcome-aligned records; both replaced by the
/// intersection in non-fused mode.
pub fn build_ratio_training_sets(
    fold: &[ExtendedRecord],
    fusion: &FusionConfig,
    mode: EstimationMode,
) -> Result<RatioTrainingSet> {
    fusion.validate(mode)?;
    let numerator: Vec<Vec<f64>> = fold
        .iter()
        .filter(|r| fusion.in_x(r.base.s, mode))
        .map(|r| r.base.features_at(&r.b))
        .collect();
    let denominator: Vec<Vec<f64>> = fold
        .iter()
        .filter(|r| fusion.in_y(r.base.s, mode))
        .map(|r| r.base.features())
        .collect();
    if numerator.is_empty() || denominator.is_empty() {
        return Err(CdrfError::EmptySourceSet(format!(
            "density-ratio training sets have sizes {} and {}",
            numerator.len(),
            denominator.len()
        )));
    }
    Ok(RatioTrainingSet {
        numerator,
        denominator,
        mode,
    })
}

/// Fitted nuisance tuple with clipping applied on evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceFit {
    pub xi: f64,
    pub eta: f64,
    pub ratio: RatioModel,
    pub outcome: RegressionModel,
    pub tau: TauModel,
    pub mode: EstimationMode,
    pub bounds: NuisanceBounds,
    pub clip_mean: bool,
}

pub fn assemble_nuisance(
    probs: SourceProbs,
    ratio: RatioModel,
    outcome: RegressionModel,
    tau: TauModel,
    bounds: NuisanceBounds,
    clip_mean: bool,
) -> Result<NuisanceFit> {
    let mode = probs.mode;
    if ratio.mode != mode || outcome.mode != mode || tau.mode != mode {
        return Err(CdrfError::invalid("nuisance parts were fit in different modes"));
    }
    let mut ratio = ratio;
    ratio.clip = bounds.ratio_clip();
    Ok(NuisanceFit {
        xi: probs.xi,
        eta: probs.eta,
        ratio,
        outcome,
        tau,
        mode,
        bounds,
        clip_mean,
    })
}

impl NuisanceEval for NuisanceFit {
    fn xi(&self) -> f64 {
        self.xi
    }

    fn eta(&self) -> f64 {
        self.eta
    }

    fn ratio(&self, x: &[f64], a: &[f64]) -> f64 {
        self.ratio.predict(&crate::data::joint_features(x, a))
    }

    fn outcome(&self, x: &[f64], a: &[f64]) -> f64 {
        let m = self.outcome.predict(x, a);
        if self.clip_mean {
            m.clamp(-1.0, 1.0)
        } else {
            m
        }
    }

    fn tau(&self, a: &[f64]) -> f64 {
        let t = self.tau.eval(a);
        if self.clip_mean {
            t.clamp(-1.0, 1.0)
        } else {
            t
        }
    }
}

/// Fits every nuisance component on one fold of extended records.
pub fn fit_nuisance(
    fold: &[ExtendedRecord],
    fusion: &FusionConfig,
    mode: EstimationMode,
    config: &NuisanceConfig,
    seed: u64,
) -> Result<NuisanceFit> {
    let base: Vec<SampleRecord> = fold.iter().map(|r| r.base.clone()).collect();
    let probs = estimate_source_probs(&base, fusion, mode, &config.bounds).stage("source probabilities")?;
    let ratio_train = build_ratio_training_sets(fold, fusion, mode).stage("density ratio")?;
    let ratio_cfg = RatioConfig {
        seed: derive_seed(seed, "ratio"),
        ..config.ratio.clone()
    };
    let ratio = fit_density_ratio(&ratio_train, &ratio_cfg, &config.bounds).stage("density ratio")?;
    let y_records: Vec<&SampleRecord> = base.iter().filter(|r| fusion.in_y(r.s, mode)).collect();
    let outcome = fit_outcome_regression(&y_records, mode, &config.outcome).stage("outcome regression")?;
    let x_anchors: Vec<Vec<f64>> = base
        .iter()
        .filter(|r| fusion.in_x(r.s, mode))
        .map(|r| r.x.clone())
        .collect();
    let tau = fit_tau(outcome.clone(), x_anchors, mode).stage("tau")?;
    assemble_nuisance(probs, ratio, outcome, tau, config.bounds, config.clip_mean)
}
