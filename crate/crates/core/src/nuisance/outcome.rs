//! Outcome regression `m(x, a)` by kernel ridge regression on the joint
//! feature `(x, a)`, and the covariate-averaged plug-in curve `tau(a)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{joint_features, EstimationMode, SampleRecord};
use crate::error::{CdrfError, Result};
use crate::kernel::{median_heuristic, KernelFamily, KernelSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutcomeConfig {
    pub kernel: KernelFamily,
    pub ridge_grid: Vec<f64>,
    /// Multipliers of the median-heuristic bandwidth tried jointly with the
    /// ridge grid.
    pub bandwidth_scales: Vec<f64>,
    pub folds: usize,
    pub standardize: bool,
}

impl Default for OutcomeConfig {
    fn default() -> Self {
        OutcomeConfig {
            kernel: KernelFamily::Gaussian,
            ridge_grid: vec![1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1],
            bandwidth_scales: vec![1.0],
            folds: 5,
            standardize: true,
        }
    }
}

/// Kernel ridge regression `m(z) = sum_j c_j k(z~, z~_j)` on (optionally)
/// standardized features `z~`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionModel {
    pub coefficients: Vec<f64>,
    /// Standardized training features.
    pub anchors: Vec<Vec<f64>>,
    pub kernel: KernelSpec,
    pub ridge: f64,
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
    pub covariate_dim: usize,
    pub mode: EstimationMode,
}

impl RegressionModel {
    fn standardize(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.center.iter().zip(&self.scale))
            .map(|(v, (c, s))| (v - c) / s)
            .collect()
    }

    pub fn predict(&self, x: &[f64], a: &[f64]) -> f64 {
        self.predict_features(&joint_features(x, a))
    }

    pub fn predict_features(&self, z: &[f64]) -> f64 {
        let zt = self.standardize(z);
        self.anchors
            .iter()
            .zip(&self.coefficients)
            .map(|(anchor, c)| c * self.kernel.eval_unchecked(&zt, anchor))
            .sum()
    }

    /// Returns `m` with coefficients multiplied by `c` (so `m -> c m`).
    pub fn scaled(&self, c: f64) -> Self {
        RegressionModel {
            coefficients: self.coefficients.iter().map(|v| v * c).collect(),
            ..self.clone()
        }
    }

    /// Weights `d_j = c_j * mean_i k_x(x~_i, x~_j)` such that
    /// `mean_i m(x_i, a) = sum_j d_j k_a(a~, a~_j)`; valid because both kernel
    /// families factor over coordinates.
    fn collapse_over_covariates(&self, x_rows: &[Vec<f64>]) -> Vec<f64> {
        let r = self.covariate_dim;
        let xs: Vec<Vec<f64>> = x_rows
            .iter()
            .map(|x| {
                x.iter()
                    .enumerate()
                    .map(|(c, v)| (v - self.center[c]) / self.scale[c])
                    .collect()
            })
            .collect();
        let n = xs.len() as f64;
        self.anchors
            .iter()
            .zip(&self.coefficients)
            .map(|(anchor, c)| {
                let mean_k: f64 = xs
                    .iter()
                    .map(|x| {
                        x.iter()
                            .zip(&anchor[..r])
                            .map(|(u, v)| self.kernel.eval_coordinate(*u, *v))
                            .product::<f64>()
                    })
                    .sum::<f64>()
                    / n;
                c * mean_k
            })
            .collect()
    }
}

pub(crate) fn standardization(features: &[Vec<f64>], enabled: bool) -> (Vec<f64>, Vec<f64>) {
    let dim = features[0].len();
    if !enabled {
        return (vec![0.0; dim], vec![1.0; dim]);
    }
    let n = features.len() as f64;
    let mut center = vec![0.0; dim];
    for f in features {
        for (c, v) in center.iter_mut().zip(f) {
            *c += v / n;
        }
    }
    let mut scale = vec![0.0; dim];
    for f in features {
        for ((s, v), c) in scale.iter_mut().zip(f).zip(&center) {
            *s += (v - c) * (v - c) / n;
        }
    }
    let scale = scale
        .into_iter()
        .map(|v| if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 })
        .collect();
    (center, scale)
}

/// Records in the conditioning set: outcome-aligned sources (fused) or the
/// intersection (non-fused).
pub fn fit_outcome_regression(
    records: &[&SampleRecord],
    mode: EstimationMode,
    config: &OutcomeConfig,
) -> Result<RegressionModel> {
    if records.len() < 2 {
        return Err(CdrfError::EmptySourceSet(format!(
            "outcome regression needs at least 2 records in the conditioning sources, got {}",
            records.len()
        )));
    }
    if config.ridge_grid.is_empty() || config.ridge_grid.iter().any(|&l| !(l > 0.0)) {
        return Err(CdrfError::invalid("ridge grid must be nonempty and positive"));
    }
    if config.bandwidth_scales.is_empty() || config.bandwidth_scales.iter().any(|&s| !(s > 0.0)) {
        return Err(CdrfError::invalid("bandwidth scales must be nonempty and positive"));
    }
    let raw: Vec<Vec<f64>> = records.iter().map(|r| r.features()).collect();
    let y = DVector::from_iterator(records.len(), records.iter().map(|r| r.y));
    let (center, scale) = standardization(&raw, config.standardize);
    let z: Vec<Vec<f64>> = raw
        .iter()
        .map(|f| {
            f.iter()
                .zip(center.iter().zip(&scale))
                .map(|(v, (c, s))| (v - c) / s)
                .collect()
        })
        .collect();
    let h0 = median_heuristic(&z, config.kernel)?;

    let mut best: Option<(f64, f64, f64)> = None; // (scale, ridge, score)
    for &bw_scale in &config.bandwidth_scales {
        let kernel = KernelSpec::new(config.kernel, h0 * bw_scale)?;
        let scores = cv_scores(&kernel, &z, &y, &config.ridge_grid, config.folds)?;
        for (&ridge, score) in config.ridge_grid.iter().zip(scores) {
            let better = match best {
                None => true,
                Some((_, r, s)) => score < s || (score == s && ridge < r),
            };
            if better {
                best = Some((bw_scale, ridge, score));
            }
        }
    }
    let (bw_scale, ridge, _) = best.expect("nonempty grids");
    let kernel = KernelSpec::new(config.kernel, h0 * bw_scale)?;
    let coefficients = krr_solve(&kernel.symmetric_matrix(&z), &y, ridge)?;
    Ok(RegressionModel {
        coefficients: coefficients.iter().copied().collect(),
        anchors: z,
        kernel,
        ridge,
        center,
        scale,
        covariate_dim: records[0].x.len(),
        mode,
    })
}

/// `(G + n lambda I) c = y`.
pub(crate) fn krr_solve(gram: &DMatrix<f64>, y: &DVector<f64>, ridge: f64) -> Result<DVector<f64>> {
    let n = gram.nrows();
    let sys = gram + DMatrix::identity(n, n) * (n as f64 * ridge);
    sys.cholesky()
        .map(|c| c.solve(y))
        .ok_or_else(|| CdrfError::numeric("kernel ridge system is not positive definite"))
}

/// Mean held-out squared error per ridge value. Each fold's Gram matrix is
/// eigendecomposed once and reused across the grid.
fn cv_scores(kernel: &KernelSpec, z: &[Vec<f64>], y: &DVector<f64>, grid: &[f64], folds: usize) -> Result<Vec<f64>> {
    let n = z.len();
    if grid.len() == 1 {
        return Ok(vec![0.0]);
    }
    let folds = folds.clamp(2, n);
    let full = kernel.symmetric_matrix(z);
    let mut sse = vec![0.0; grid.len()];
    for k in 0..folds {
        let train: Vec<usize> = (0..n).filter(|i| i % folds != k).collect();
        let test: Vec<usize> = (0..n).filter(|i| i % folds == k).collect();
        if train.is_empty() || test.is_empty() {
            continue;
        }
        let g_tr = full.select_rows(train.iter()).select_columns(train.iter());
        let g_te = full.select_rows(test.iter()).select_columns(train.iter());
        let y_tr = y.select_rows(train.iter());
        let y_te = y.select_rows(test.iter());
        let eig = g_tr.symmetric_eigen();
        let qty = eig.eigenvectors.transpose() * &y_tr;
        let m = train.len() as f64;
        for (slot, &ridge) in sse.iter_mut().zip(grid) {
            let scaled = DVector::from_iterator(
                qty.len(),
                qty.iter()
                    .zip(eig.eigenvalues.iter())
                    .map(|(q, l)| q / (l.max(0.0) + m * ridge)),
            );
            let coef = &eig.eigenvectors * scaled;
            let resid = &g_te * coef - &y_te;
            *slot += resid.norm_squared();
        }
    }
    Ok(sse.into_iter().map(|s| s / n as f64).collect())
}

/// `tau(a) = mean over anchor covariate rows of m(x_i, a)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauModel {
    pub outcome: RegressionModel,
    pub x_anchors: Vec<Vec<f64>>,
    pub mode: EstimationMode,
    /// Per-training-point weights after averaging out the covariates.
    collapsed: Vec<f64>,
}

impl TauModel {
    pub fn new(outcome: RegressionModel, x_anchors: Vec<Vec<f64>>, mode: EstimationMode) -> Result<Self> {
        if x_anchors.is_empty() {
            return Err(CdrfError::EmptySourceSet(
                "tau needs at least one covariate anchor".into(),
            ));
        }
        if let Some(x) = x_anchors.iter().find(|x| x.len() != outcome.covariate_dim) {
            return Err(CdrfError::DimensionMismatch {
                expected: outcome.covariate_dim,
                got: x.len(),
            });
        }
        let collapsed = outcome.collapse_over_covariates(&x_anchors);
        Ok(TauModel {
            outcome,
            x_anchors,
            mode,
            collapsed,
        })
    }

    pub fn eval(&self, a: &[f64]) -> f64 {
        let m = &self.outcome;
        let r = m.covariate_dim;
        let at: Vec<f64> = a
            .iter()
            .enumerate()
            .map(|(c, v)| (v - m.center[r + c]) / m.scale[r + c])
            .collect();
        m.anchors
            .iter()
            .zip(&self.collapsed)
            .map(|(anchor, d)| {
                d * at
                    .iter()
                    .zip(&anchor[r..])
                    .map(|(u, v)| m.kernel.eval_coordinate(*u, *v))
                    .product::<f64>()
            })
            .sum()
    }

    /// Direct average `mean_i m(x_i, a)`, quadratic in the anchor count.
    pub fn eval_direct(&self, a: &[f64]) -> f64 {
        self.x_anchors.iter().map(|x| self.outcome.predict(x, a)).sum::<f64>() / self.x_anchors.len() as f64
    }
}

pub fn fit_tau(outcome: RegressionModel, x_anchors: Vec<Vec<f64>>, mode: EstimationMode) -> Result<TauModel> {
    TauModel::new(outcome, x_anchors, mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn rec(x: f64, a: f64, y: f64) -> SampleRecord {
        SampleRecord {
            x: vec![x],
            a: vec![a],
            y,
            s: 0,
        }
    }

    fn single_ridge(lambda: f64) -> OutcomeConfig {
        OutcomeConfig {
            ridge_grid: vec![lambda],
            standardize: false,
            ..OutcomeConfig::default()
        }
    }

    #[test]
    fn two_points_match_hand_solve() {
        let r = [rec(0.0, 0.2, 1.0), rec(1.0, 0.6, -0.5)];
        let refs: Vec<&SampleRecord> = r.iter().collect();
        let m = fit_outcome_regression(&refs, EstimationMode::Fused, &single_ridge(0.1)).unwrap();
        let k = m.kernel.eval(&[0.0, 0.2], &[1.0, 0.6]).unwrap();
        // (G + 2*0.1 I) c = y
        let (a, b, d) = (1.0 + 0.2, k, 1.0 + 0.2);
        let det = a * d - b * b;
        let c0 = (d * 1.0 - b * -0.5) / det;
        let c1 = (a * -0.5 - b * 1.0) / det;
        assert_abs_diff_eq!(m.coefficients[0], c0, epsilon = 1e-12);
        assert_abs_diff_eq!(m.coefficients[1], c1, epsilon = 1e-12);
    }

    #[test]
    fn constant_target_shrinkage_and_limit() {
        let r: Vec<SampleRecord> = (0..6).map(|i| rec(i as f64 * 0.3, i as f64 / 6.0, 0.7)).collect();
        let refs: Vec<&SampleRecord> = r.iter().collect();
        let lambda = 0.05;
        let m = fit_outcome_regression(&refs, EstimationMode::Fused, &single_ridge(lambda)).unwrap();
        let g = m.kernel.symmetric_matrix(&m.anchors);
        let n = r.len();
        let sys = &g + DMatrix::identity(n, n) * (n as f64 * lambda);
        let fitted = &g * sys.lu().solve(&DVector::from_element(n, 0.7)).unwrap();
        for (i, rr) in r.iter().enumerate() {
            assert_abs_diff_eq!(m.predict(&rr.x, &rr.a), fitted[i], epsilon = 1e-6);
        }
        let m = fit_outcome_regression(&refs, EstimationMode::Fused, &single_ridge(1e-12)).unwrap();
        for rr in &r {
            assert_abs_diff_eq!(m.predict(&rr.x, &rr.a), 0.7, epsilon = 1e-4);
        }
    }

    #[test]
    fn too_few_records_rejected() {
        let r = [rec(0.0, 0.5, 1.0)];
        let refs: Vec<&SampleRecord> = r.iter().collect();
        assert!(fit_outcome_regression(&refs, EstimationMode::Fused, &OutcomeConfig::default()).is_err());
    }

    fn toy_model() -> RegressionModel {
        let r: Vec<SampleRecord> = (0..12)
            .map(|i| {
                let a = (i as f64 + 0.5) / 12.0;
                rec((i % 5) as f64 * 0.2, a, (3.0 * a).sin() * (1.0 + (i % 5) as f64 * 0.2))
            })
            .collect();
        let refs: Vec<&SampleRecord> = r.iter().collect();
        fit_outcome_regression(&refs, EstimationMode::Fused, &OutcomeConfig::default()).unwrap()
    }

    #[test]
    fn collapsed_tau_matches_direct_average() {
        let m = toy_model();
        let tau = fit_tau(m, vec![vec![0.1], vec![0.5], vec![0.9]], EstimationMode::Fused).unwrap();
        for a in [0.0, 0.3, 0.77, 1.0] {
            assert_abs_diff_eq!(tau.eval(&[a]), tau.eval_direct(&[a]), epsilon = 1e-12);
        }
    }

    #[test]
    fn tau_singleton_and_linearity() {
        let m = toy_model();
        let tau = fit_tau(m.clone(), vec![vec![0.4]], EstimationMode::Fused).unwrap();
        assert_abs_diff_eq!(tau.eval(&[0.3]), m.predict(&[0.4], &[0.3]), epsilon = 1e-12);
        let tau3 = fit_tau(m.scaled(3.0), vec![vec![0.4]], EstimationMode::Fused).unwrap();
        assert_abs_diff_eq!(tau3.eval(&[0.3]), 3.0 * tau.eval(&[0.3]), epsilon = 1e-12);
        assert!(fit_tau(m, vec![], EstimationMode::Fused).is_err());
    }

    #[test]
    fn tau_of_x_free_outcome_is_outcome() {
        // identical covariates everywhere make m constant in x on the anchors
        let r: Vec<SampleRecord> = (0..8).map(|i| rec(0.5, i as f64 / 8.0, i as f64 * 0.1)).collect();
        let refs: Vec<&SampleRecord> = r.iter().collect();
        let m = fit_outcome_regression(&refs, EstimationMode::Fused, &single_ridge(1e-3)).unwrap();
        let tau = fit_tau(m.clone(), vec![vec![0.5], vec![0.5]], EstimationMode::Fused).unwrap();
        assert_abs_diff_eq!(tau.eval(&[0.42]), m.predict(&[0.5], &[0.42]), epsilon = 1e-12);
    }
}
