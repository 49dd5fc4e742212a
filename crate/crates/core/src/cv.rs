//! K-fold selection of the ridge parameter on the target fold.

use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{EstimationMode, ExtendedRecord, FusionConfig};
use crate::error::{CdrfError, Result, StageExt};
use crate::kernel::{gram, GramBlocks, KernelSpec};
use crate::krr::{fit_closed_form, FittedCDRF};
use crate::loss::{pairwise_sum, pseudo_residuals, PseudoResiduals};
use crate::nuisance::NuisanceEval;
use crate::seed::rng_from_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CvMode {
    /// Fit and score the curve on the held-out part, with a norm penalty.
    Refit,
    /// Fit the curve on the complement and score it out of fold.
    Standard,
}

impl FromStr for CvMode {
    type Err = CdrfError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "refit" => Ok(CvMode::Refit),
            "standard" => Ok(CvMode::Standard),
            other => Err(CdrfError::invalid(format!("unknown cv mode '{other}'"))),
        }
    }
}

/// `0.0001, 0.0051, ..., 0.0301`.
pub fn default_lambda_grid() -> Vec<f64> {
    (0..7).map(|i| 0.0001 + 0.005 * i as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CVConfig {
    pub folds: usize,
    #[serde(rename = "grid")]
    pub lambda_grid: Vec<f64>,
    pub mode: CvMode,
    /// Exponent on the RKHS norm in the refit-mode penalty.
    pub penalty_power: u8,
    pub seed: u64,
}

impl Default for CVConfig {
    fn default() -> Self {
        CVConfig {
            folds: 5,
            lambda_grid: default_lambda_grid(),
            // scoring on the fitting data always favours the smallest lambda
            mode: CvMode::Standard,
            penalty_power: 1,
            seed: 0,
        }
    }
}

impl CVConfig {
    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(CdrfError::invalid("cv needs at least 2 folds"));
        }
        if self.lambda_grid.is_empty() {
            return Err(CdrfError::invalid("empty lambda grid"));
        }
        if self.lambda_grid.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
            return Err(CdrfError::invalid("lambda grid values must be positive"));
        }
        if self.lambda_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CdrfError::invalid("lambda grid must be strictly ascending"));
        }
        if !matches!(self.penalty_power, 1 | 2) {
            return Err(CdrfError::invalid("penalty_power must be 1 or 2"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CVReport {
    pub lambda_grid: Vec<f64>,
    /// `risks[k][j]`: fold `k`, grid value `j`.
    pub risks: Vec<Vec<f64>>,
    pub chosen_lambda: f64,
}

impl CVReport {
    pub fn mean_risks(&self) -> Vec<f64> {
        column_means(&self.risks, self.lambda_grid.len())
    }
}

fn column_means(risks: &[Vec<f64>], width: usize) -> Vec<f64> {
    (0..width)
        .map(|j| {
            let col: Vec<f64> = risks.iter().map(|row| row[j]).collect();
            pairwise_sum(&col) / col.len() as f64
        })
        .collect()
}

/// Grid value with the smallest mean risk; near-ties go to the smaller value.
pub fn choose_lambda(risks: &[Vec<f64>], grid: &[f64]) -> Result<f64> {
    if grid.is_empty() || risks.is_empty() || risks.iter().any(|r| r.len() != grid.len()) {
        return Err(CdrfError::invalid("risk matrix does not match the lambda grid"));
    }
    let means = column_means(risks, grid.len());
    let mut best = 0;
    for (j, &m) in means.iter().enumerate().skip(1) {
        if !m.is_finite() {
            continue;
        }
        let b = means[best];
        if !b.is_finite() || m < b - 1e-15 * b.abs().max(1.0) {
            best = j;
        }
    }
    if !means[best].is_finite() {
        return Err(CdrfError::numeric("every cross-validated risk is non-finite"));
    }
    Ok(grid[best])
}

/// Mean of `theta(b)^2 + 2 v theta(b) + 2 u theta(a)` over the fold, plus
/// `lambda ||theta||_H^power` when `power > 0`.
pub fn fold_risk_with_power(
    theta: &FittedCDRF,
    residuals: &PseudoResiduals,
    a_points: &[Vec<f64>],
    b_points: &[Vec<f64>],
    penalty: Option<(&GramBlocks, f64, u8)>,
) -> Result<f64> {
    let n = residuals.len();
    if n == 0 || a_points.len() != n || b_points.len() != n {
        return Err(CdrfError::invalid("fold risk over mismatched or empty inputs"));
    }
    let terms: Vec<f64> = (0..n)
        .map(|i| {
            let tb = theta.predict_unchecked(&b_points[i]);
            let ta = theta.predict_unchecked(&a_points[i]);
            tb * tb + 2.0 * residuals.v[i] * tb + 2.0 * residuals.u[i] * ta
        })
        .collect();
    let mut risk = pairwise_sum(&terms) / n as f64;
    if let Some((g, lambda, power)) = penalty {
        risk += lambda * theta.rkhs_norm_with(g).powi(power as i32);
    }
    Ok(risk)
}

/// Fold risk with the first-power norm penalty when `penalized`. The model's
/// anchors are taken as the fold's exposures.
pub fn fold_risk(
    theta: &FittedCDRF,
    residuals: &PseudoResiduals,
    gram: &GramBlocks,
    lambda: f64,
    penalized: bool,
) -> Result<f64> {
    let penalty = penalized.then_some((gram, lambda, 1u8));
    fold_risk_with_power(theta, residuals, &theta.a_anchors, &theta.b_anchors, penalty)
}

/// Seeded balanced fold labels.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng_from_seed(seed));
    let mut labels = vec![0; n];
    for (rank, &i) in perm.iter().enumerate() {
        labels[i] = rank % folds;
    }
    labels
}

fn exposures(fold: &[ExtendedRecord]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    fold.iter().map(|r| (r.base.a.clone(), r.b.clone())).unzip()
}

struct Prepared {
    residuals: PseudoResiduals,
    a: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
    gram: GramBlocks,
}

impl Prepared {
    fn new<G: NuisanceEval>(
        g: &G,
        fold: &[ExtendedRecord],
        kernel: &KernelSpec,
        fusion: &FusionConfig,
        mode: EstimationMode,
    ) -> Result<Self> {
        let residuals = pseudo_residuals(g, fold, fusion, mode)?;
        let (a, b) = exposures(fold);
        let gram = gram(kernel, &a, &b)?;
        Ok(Prepared { residuals, a, b, gram })
    }

    fn fit(&self, kernel: &KernelSpec, lambda: f64) -> Result<FittedCDRF> {
        fit_closed_form(&self.residuals, &self.gram, lambda, &self.a, &self.b, kernel)
    }
}

/// Cross-validated choice of `lambda`. `fit_nuisance(records, k)` fits the
/// nuisance tuple used for fold `k` on that fold's complement.
pub fn select_lambda<G, F>(
    fold2: &[ExtendedRecord],
    fusion: &FusionConfig,
    mode: EstimationMode,
    kernel: &KernelSpec,
    config: &CVConfig,
    fit_nuisance: F,
) -> Result<CVReport>
where
    G: NuisanceEval,
    F: Fn(&[ExtendedRecord], usize) -> Result<G> + Sync,
{
    config.validate()?;
    let k = config.folds;
    if fold2.len() < 2 * k {
        return Err(CdrfError::invalid(format!(
            "cross-validation with {k} folds needs at least {} records, got {}",
            2 * k,
            fold2.len()
        )));
    }
    let labels = fold_assignment(fold2.len(), k, config.seed);
    let risks = (0..k)
        .into_par_iter()
        .map(|fold| {
            let (held, rest): (Vec<_>, Vec<_>) = fold2.iter().zip(&labels).partition(|(_, &l)| l == fold);
            let held: Vec<ExtendedRecord> = held.into_iter().map(|(r, _)| r.clone()).collect();
            let rest: Vec<ExtendedRecord> = rest.into_iter().map(|(r, _)| r.clone()).collect();
            let g = fit_nuisance(&rest, fold).stage("cv nuisance")?;
            fold_risks(&g, &held, &rest, fusion, mode, kernel, config)
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    let chosen_lambda = choose_lambda(&risks, &config.lambda_grid)?;
    Ok(CVReport {
        lambda_grid: config.lambda_grid.clone(),
        risks,
        chosen_lambda,
    })
}

fn fold_risks<G: NuisanceEval>(
    g: &G,
    held: &[ExtendedRecord],
    rest: &[ExtendedRecord],
    fusion: &FusionConfig,
    mode: EstimationMode,
    kernel: &KernelSpec,
    config: &CVConfig,
) -> Result<Vec<f64>> {
    let test = Prepared::new(g, held, kernel, fusion, mode)?;
    match config.mode {
        CvMode::Refit => config
            .lambda_grid
            .iter()
            .map(|&lam| {
                let theta = test.fit(kernel, lam)?;
                fold_risk_with_power(
                    &theta,
                    &test.residuals,
                    &test.a,
                    &test.b,
                    Some((&test.gram, lam, config.penalty_power)),
                )
            })
            .collect(),
        CvMode::Standard => {
            let train = Prepared::new(g, rest, kernel, fusion, mode)?;
            config
                .lambda_grid
                .iter()
                .map(|&lam| {
                    let theta = train.fit(kernel, lam)?;
                    fold_risk_with_power(&theta, &test.residuals, &test.a, &test.b, None)
                })
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn default_grid_has_seven_values() {
        let g = default_lambda_grid();
        assert_eq!(g.len(), 7);
        assert_abs_diff_eq!(g[0], 0.0001, epsilon = 1e-15);
        assert_abs_diff_eq!(g[1], 0.0051, epsilon = 1e-15);
        assert_abs_diff_eq!(g[6], 0.0301, epsilon = 1e-15);
        assert!(CVConfig::default().validate().is_ok());
    }

    #[test]
    fn argmin_and_ties() {
        assert_eq!(
            choose_lambda(&[vec![1.0, 2.0], vec![1.0, 2.0]], &[0.01, 0.02]).unwrap(),
            0.01
        );
        assert_eq!(choose_lambda(&[vec![3.0, 2.0]], &[0.01, 0.02]).unwrap(), 0.02);
        assert_eq!(choose_lambda(&[vec![0.5]], &[0.1]).unwrap(), 0.1);
        let tie = 1.0 + 1e-16;
        assert_eq!(choose_lambda(&[vec![1.0, tie, 1.0]], &[0.1, 0.2, 0.3]).unwrap(), 0.1);
        assert_eq!(choose_lambda(&[vec![5.0, 5.0, 5.0]], &[0.1, 0.2, 0.3]).unwrap(), 0.1);
    }

    #[test]
    fn invalid_configs() {
        let mut c = CVConfig {
            lambda_grid: vec![0.2, 0.1],
            ..CVConfig::default()
        };
        assert!(c.validate().is_err());
        c.lambda_grid = vec![];
        assert!(c.validate().is_err());
        c = CVConfig {
            folds: 1,
            ..CVConfig::default()
        };
        assert!(c.validate().is_err());
        c = CVConfig {
            penalty_power: 3,
            ..CVConfig::default()
        };
        assert!(c.validate().is_err());
    }

    fn single_term_model() -> FittedCDRF {
        // theta(t) = gamma k(t, b); anchors chosen so theta(b) = 1, theta(a) = 0.5.
        let h = 0.4;
        let k = KernelSpec::laplace(h).unwrap();
        let a = 0.6 - h * 2f64.ln();
        FittedCDRF {
            beta: vec![0.0],
            gamma: vec![1.0],
            a_anchors: vec![vec![a]],
            b_anchors: vec![vec![0.6]],
            kernel: k,
            lambda: 0.1,
        }
    }

    #[test]
    fn risk_formula() {
        let m = single_term_model();
        let r = PseudoResiduals {
            u: vec![2.0],
            v: vec![-1.0],
        };
        let g = gram(&m.kernel, &m.a_anchors, &m.b_anchors).unwrap();
        assert_abs_diff_eq!(fold_risk(&m, &r, &g, 0.1, false).unwrap(), 1.0, epsilon = 1e-12);
        // ||theta||_H = 1 here; rescale to norm 2.
        let mut m2 = m.clone();
        m2.gamma[0] = 2.0;
        let norm = m2.rkhs_norm_with(&g);
        assert_abs_diff_eq!(norm, 2.0, epsilon = 1e-12);
        let unpen = fold_risk(&m2, &r, &g, 0.1, false).unwrap();
        assert_abs_diff_eq!(fold_risk(&m2, &r, &g, 0.1, true).unwrap(), unpen + 0.2, epsilon = 1e-12);
    }

    #[test]
    fn zero_curve_has_zero_risk() {
        let mut m = single_term_model();
        m.gamma[0] = 0.0;
        let r = PseudoResiduals {
            u: vec![2.0],
            v: vec![-1.0],
        };
        let g = gram(&m.kernel, &m.a_anchors, &m.b_anchors).unwrap();
        assert_eq!(fold_risk(&m, &r, &g, 0.1, true).unwrap(), 0.0);
    }

    #[test]
    fn folds_are_balanced_and_seeded() {
        let l = fold_assignment(23, 5, 4);
        for f in 0..5 {
            let c = l.iter().filter(|&&x| x == f).count();
            assert!(c == 4 || c == 5);
        }
        assert_eq!(l, fold_assignment(23, 5, 4));
        assert_ne!(l, fold_assignment(23, 5, 5));
    }
}
