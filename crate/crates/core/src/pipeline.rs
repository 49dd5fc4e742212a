//! End-to-end estimation: split, nuisance fit on the first fold, bandwidth
//! and ridge selection on the second, then the closed-form fit.

use serde::{Deserialize, Serialize};

use crate::cv::{select_lambda, CVConfig, CVReport};
use crate::data::{extend_with_mu_draws, split_sample, Dataset, EstimationMode, ExtendedRecord, FusionConfig};
use crate::error::{CdrfError, Result, StageExt};
use crate::kernel::{gram, median_heuristic, KernelFamily, KernelSpec};
use crate::krr::{fit_closed_form, FittedCDRF};
use crate::loss::pseudo_residuals;
use crate::measure::ReferenceMeasure;
use crate::nuisance::{fit_nuisance, NuisanceConfig, NuisanceFit};
use crate::seed::{derive_seed, SeedTrace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum MedianTag {
    Median,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum BandwidthDoc {
    Median(MedianTag),
    Fixed(f64),
}

/// `median` or a fixed positive value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BandwidthDoc", into = "BandwidthDoc")]
pub enum BandwidthRule {
    Median,
    Fixed(f64),
}

impl TryFrom<BandwidthDoc> for BandwidthRule {
    type Error = CdrfError;

    fn try_from(d: BandwidthDoc) -> Result<Self> {
        match d {
            BandwidthDoc::Median(_) => Ok(BandwidthRule::Median),
            BandwidthDoc::Fixed(h) if h > 0.0 && h.is_finite() => Ok(BandwidthRule::Fixed(h)),
            BandwidthDoc::Fixed(h) => Err(CdrfError::invalid(format!("bandwidth must be positive, got {h}"))),
        }
    }
}

impl From<BandwidthRule> for BandwidthDoc {
    fn from(r: BandwidthRule) -> Self {
        match r {
            BandwidthRule::Median => BandwidthDoc::Median(MedianTag::Median),
            BandwidthRule::Fixed(h) => BandwidthDoc::Fixed(h),
        }
    }
}

impl std::str::FromStr for BandwidthRule {
    type Err = CdrfError;

    fn from_str(s: &str) -> Result<Self> {
        if s.trim().eq_ignore_ascii_case("median") {
            return Ok(BandwidthRule::Median);
        }
        let h: f64 = s
            .trim()
            .parse()
            .map_err(|_| CdrfError::invalid(format!("bandwidth must be 'median' or a number, got '{s}'")))?;
        BandwidthRule::try_from(BandwidthDoc::Fixed(h))
    }
}

/// Which target-fold exposures feed the median heuristic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthPool {
    AOnly,
    AAndB,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KernelConfig {
    pub kernel: KernelFamily,
    pub bandwidth: BandwidthRule,
    pub bandwidth_pool: BandwidthPool,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            kernel: KernelFamily::Laplace,
            bandwidth: BandwidthRule::Median,
            bandwidth_pool: BandwidthPool::AOnly,
        }
    }
}

impl KernelConfig {
    pub fn resolve(&self, fold2: &[ExtendedRecord]) -> Result<KernelSpec> {
        let h = match self.bandwidth {
            BandwidthRule::Fixed(h) => h,
            BandwidthRule::Median => {
                let mut pts: Vec<Vec<f64>> = fold2.iter().map(|r| r.base.a.clone()).collect();
                if self.bandwidth_pool == BandwidthPool::AAndB {
                    pts.extend(fold2.iter().map(|r| r.b.clone()));
                }
                median_heuristic(&pts, self.kernel)?
            }
        };
        KernelSpec::new(self.kernel, h)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub kernel: KernelConfig,
    pub cv: CVConfig,
    pub nuisance: NuisanceConfig,
    /// Share of records assigned to the nuisance fold.
    pub split_fraction: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            kernel: KernelConfig::default(),
            cv: CVConfig::default(),
            nuisance: NuisanceConfig::default(),
            split_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub model: FittedCDRF,
    pub nuisance: NuisanceFit,
    pub cv: CVReport,
    pub mode: EstimationMode,
    pub seed_trace: SeedTrace,
    /// Original dataset indices of the nuisance fold.
    pub nuisance_indices: Vec<usize>,
    /// Original dataset indices of the target fold.
    pub target_indices: Vec<usize>,
}

impl FitResult {
    pub fn predict(&self, a: &[f64]) -> Result<f64> {
        self.model.predict(a)
    }
}

pub fn fit_cdrf(
    data: &Dataset,
    fusion: &FusionConfig,
    mode: EstimationMode,
    mu: &ReferenceMeasure,
    config: &PipelineConfig,
    seed: u64,
) -> Result<FitResult> {
    fusion.validate(mode)?;
    config.cv.validate()?;
    let mut trace = SeedTrace::new(seed);

    // Non-fused estimation sees only perfectly aligned records.
    let (data, original): (Dataset, Vec<usize>) = match mode {
        EstimationMode::Fused => (data.clone(), (0..data.len()).collect()),
        EstimationMode::NonFused => data.filter_sources(|s| fusion.in_both(s)).stage("source filter")?,
    };

    let split = split_sample(&data, config.split_fraction, trace.derive("split")).stage("split")?;
    let fold1 = extend_with_mu_draws(&split.part1, mu, trace.derive("mu draws fold 1")).stage("reference draws")?;
    let fold2 = extend_with_mu_draws(&split.part2, mu, trace.derive("mu draws fold 2")).stage("reference draws")?;

    let nuisance = fit_nuisance(&fold1, fusion, mode, &config.nuisance, trace.derive("nuisance")).stage("nuisance")?;
    let kernel = config.kernel.resolve(&fold2).stage("bandwidth")?;

    let cv_cfg = CVConfig {
        seed: trace.derive("cv folds"),
        ..config.cv.clone()
    };
    let cv_nuisance_seed = trace.derive("cv nuisance");
    let cv = select_lambda(&fold2, fusion, mode, &kernel, &cv_cfg, |records, k| {
        let seed = derive_seed(cv_nuisance_seed, &format!("fold {k}"));
        fit_nuisance(records, fusion, mode, &config.nuisance, seed)
    })
    .stage("cross-validation")?;

    let residuals = pseudo_residuals(&nuisance, &fold2, fusion, mode).stage("pseudo-residuals")?;
    let (a, b): (Vec<Vec<f64>>, Vec<Vec<f64>>) = fold2.iter().map(|r| (r.base.a.clone(), r.b.clone())).unzip();
    let g = gram(&kernel, &a, &b).stage("gram")?;
    let model = fit_closed_form(&residuals, &g, cv.chosen_lambda, &a, &b, &kernel).stage("closed form")?;

    Ok(FitResult {
        model,
        nuisance,
        cv,
        mode,
        seed_trace: trace,
        nuisance_indices: split.index1.iter().map(|&i| original[i]).collect(),
        target_indices: split.index2.iter().map(|&i| original[i]).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bandwidth_rule_parsing() {
        assert_eq!("median".parse::<BandwidthRule>().unwrap(), BandwidthRule::Median);
        assert_eq!("0.3".parse::<BandwidthRule>().unwrap(), BandwidthRule::Fixed(0.3));
        assert!("-1".parse::<BandwidthRule>().is_err());
        assert!("wide".parse::<BandwidthRule>().is_err());
        let k: KernelConfig = toml::from_str("bandwidth = 0.25\nbandwidth_pool = \"a_and_b\"").unwrap();
        assert_eq!(k.bandwidth, BandwidthRule::Fixed(0.25));
        assert_eq!(k.bandwidth_pool, BandwidthPool::AAndB);
        let k: KernelConfig = toml::from_str("bandwidth = \"median\"").unwrap();
        assert_eq!(k.bandwidth, BandwidthRule::Median);
    }
}
