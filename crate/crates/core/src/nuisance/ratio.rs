//! Direct density-ratio estimation by unconstrained least-squares importance
//! fitting over a Gaussian basis.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample as sample_indices;
use serde::{Deserialize, Serialize};

use crate::data::EstimationMode;
use crate::error::{CdrfError, Result};
use crate::kernel::{median_heuristic, KernelFamily, KernelSpec};
use crate::seed::{derive_seed, rng_from_seed};

use super::outcome::standardization;
use super::NuisanceBounds;

/// Points beyond this count are subsampled before the median heuristic.
const MEDIAN_POOL_CAP: usize = 2000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RatioConfig {
    pub n_basis: usize,
    pub lambda_grid: Vec<f64>,
    /// Multipliers of the median-heuristic width, selected jointly with lambda.
    pub bandwidth_scales: Vec<f64>,
    /// Standardize each coordinate by the pooled mean and deviation.
    pub standardize: bool,
    pub folds: usize,
    pub seed: u64,
}

impl Default for RatioConfig {
    fn default() -> Self {
        RatioConfig {
            n_basis: 100,
            lambda_grid: vec![1e-3, 1e-2, 1e-1, 1.0],
            bandwidth_scales: vec![0.25, 0.5, 1.0],
            standardize: true,
            folds: 5,
            seed: 0,
        }
    }
}

/// Numerator and denominator samples for the joint `(x, a)` ratio fit.
#[derive(Debug, Clone, PartialEq)]
pub struct RatioTrainingSet {
    pub numerator: Vec<Vec<f64>>,
    pub denominator: Vec<Vec<f64>>,
    pub mode: EstimationMode,
}

/// `w(z) = clip(sum_l alpha_l exp(-|z~ - c_l|^2 / (2 sigma^2)))` with
/// `z~ = (z - center) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioModel {
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
    /// Standardized basis centers.
    pub basis_centers: Vec<Vec<f64>>,
    pub basis_bandwidth: f64,
    pub alpha: Vec<f64>,
    pub lambda: f64,
    pub clip: (f64, f64),
    pub mode: EstimationMode,
}

impl RatioModel {
    fn kernel(&self) -> KernelSpec {
        KernelSpec {
            family: KernelFamily::Gaussian,
            bandwidth: self.basis_bandwidth,
        }
    }

    /// Unclipped basis expansion.
    pub fn predict_raw(&self, z: &[f64]) -> f64 {
        let k = self.kernel();
        let zt = standardize(z, &self.center, &self.scale);
        self.basis_centers
            .iter()
            .zip(&self.alpha)
            .map(|(c, a)| a * k.eval_unchecked(&zt, c))
            .sum()
    }

    pub fn predict(&self, z: &[f64]) -> f64 {
        clip(self.predict_raw(z), self.clip)
    }
}

pub(crate) fn clip(v: f64, (lo, hi): (f64, f64)) -> f64 {
    if v.is_nan() {
        return v;
    }
    v.clamp(lo, hi)
}

fn standardize(z: &[f64], center: &[f64], scale: &[f64]) -> Vec<f64> {
    z.iter()
        .zip(center.iter().zip(scale))
        .map(|(v, (c, s))| (v - c) / s)
        .collect()
}

fn design(kernel: &KernelSpec, points: &[Vec<f64>], centers: &[Vec<f64>]) -> DMatrix<f64> {
    kernel.matrix(points, centers)
}

/// `H = mean psi psi^T` over denominator rows, `h = mean psi` over numerator rows.
fn moments(psi_den: &DMatrix<f64>, psi_num: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let h_mat = psi_den.transpose() * psi_den / psi_den.nrows() as f64;
    let h_vec = psi_num.row_sum().transpose() / psi_num.nrows() as f64;
    (h_mat, h_vec)
}

/// Solves `(H + lambda I) alpha = h` and truncates negative entries to zero.
pub fn solve_ulsif(h_mat: &DMatrix<f64>, h_vec: &DVector<f64>, lambda: f64) -> Result<DVector<f64>> {
    let n = h_mat.nrows();
    let reg = h_mat + DMatrix::identity(n, n) * lambda;
    let chol = reg
        .cholesky()
        .ok_or_else(|| CdrfError::numeric(format!("uLSIF system singular at lambda {lambda}")))?;
    let mut alpha = chol.solve(h_vec);
    alpha.iter_mut().for_each(|a| *a = a.max(0.0));
    Ok(alpha)
}

fn ulsif_score(h_mat: &DMatrix<f64>, h_vec: &DVector<f64>, alpha: &DVector<f64>) -> f64 {
    0.5 * (alpha.transpose() * h_mat * alpha)[(0, 0)] - h_vec.dot(alpha)
}

fn fold_of(i: usize, folds: usize) -> usize {
    i % folds
}

pub fn fit_density_ratio(
    train: &RatioTrainingSet,
    config: &RatioConfig,
    bounds: &NuisanceBounds,
) -> Result<RatioModel> {
    let (num, den) = (&train.numerator, &train.denominator);
    if num.is_empty() || den.is_empty() {
        return Err(CdrfError::EmptySourceSet("density-ratio sample is empty".into()));
    }
    let dim = num[0].len();
    if let Some(p) = num.iter().chain(den).find(|p| p.len() != dim) {
        return Err(CdrfError::DimensionMismatch {
            expected: dim,
            got: p.len(),
        });
    }
    if config.lambda_grid.is_empty() || config.lambda_grid.iter().any(|&l| !(l >= 0.0)) {
        return Err(CdrfError::invalid("ratio lambda grid must be nonempty and nonnegative"));
    }
    if config.bandwidth_scales.is_empty() || config.bandwidth_scales.iter().any(|&b| !(b > 0.0)) {
        return Err(CdrfError::invalid(
            "ratio bandwidth scales must be nonempty and positive",
        ));
    }
    let pooled: Vec<Vec<f64>> = num.iter().chain(den).cloned().collect();
    let (center, scale) = standardization(&pooled, config.standardize);
    let num: Vec<Vec<f64>> = num.iter().map(|z| standardize(z, &center, &scale)).collect();
    let den: Vec<Vec<f64>> = den.iter().map(|z| standardize(z, &center, &scale)).collect();

    let n_basis = config.n_basis.clamp(1, num.len());
    let mut center_rng = rng_from_seed(derive_seed(config.seed, "ratio-centers"));
    let mut center_idx = sample_indices(&mut center_rng, num.len(), n_basis).into_vec();
    center_idx.sort_unstable();
    let centers: Vec<Vec<f64>> = center_idx.iter().map(|&i| num[i].clone()).collect();

    let pooled: Vec<Vec<f64>> = num.iter().chain(&den).cloned().collect();
    let pooled = if pooled.len() > MEDIAN_POOL_CAP {
        let mut rng = rng_from_seed(derive_seed(config.seed, "ratio-median"));
        let mut idx = sample_indices(&mut rng, pooled.len(), MEDIAN_POOL_CAP).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| pooled[i].clone()).collect()
    } else {
        pooled
    };
    let sigma0 = median_heuristic(&pooled, KernelFamily::Gaussian)?;

    // (sigma, lambda, score); ties keep the earlier grid entry
    let mut best: Option<(f64, f64, f64)> = None;
    for &bw in &config.bandwidth_scales {
        let kernel = KernelSpec::gaussian(sigma0 * bw)?;
        let psi_num = design(&kernel, &num, &centers);
        let psi_den = design(&kernel, &den, &centers);
        if let Ok((lambda, score)) = select_lambda(&psi_num, &psi_den, config) {
            if best.is_none_or(|(_, _, s)| score < s) {
                best = Some((sigma0 * bw, lambda, score));
            }
        }
    }
    let (sigma, lambda, _) =
        best.ok_or_else(|| CdrfError::numeric("uLSIF system singular for every bandwidth and lambda"))?;
    let kernel = KernelSpec::gaussian(sigma)?;
    let psi_num = design(&kernel, &num, &centers);
    let psi_den = design(&kernel, &den, &centers);
    let (h_mat, h_vec) = moments(&psi_den, &psi_num);
    let alpha = solve_ulsif(&h_mat, &h_vec, lambda)?;
    Ok(RatioModel {
        center,
        scale,
        basis_centers: centers,
        basis_bandwidth: sigma,
        alpha: alpha.iter().copied().collect(),
        lambda,
        clip: bounds.ratio_clip(),
        mode: train.mode,
    })
}

/// K-fold cross-validated uLSIF squared-error criterion, as `(lambda, score)`;
/// ties go to the smallest lambda. Without enough rows for two folds the
/// smallest lambda is returned with its in-sample score.
fn select_lambda(psi_num: &DMatrix<f64>, psi_den: &DMatrix<f64>, config: &RatioConfig) -> Result<(f64, f64)> {
    let mut grid = config.lambda_grid.clone();
    grid.sort_by(f64::total_cmp);
    let folds = config.folds.max(2).min(psi_num.nrows()).min(psi_den.nrows());
    if folds < 2 {
        let (h_mat, h_vec) = moments(psi_den, psi_num);
        let alpha = solve_ulsif(&h_mat, &h_vec, grid[0])?;
        return Ok((grid[0], ulsif_score(&h_mat, &h_vec, &alpha)));
    }
    let rows = |m: &DMatrix<f64>, k: usize, held: bool| -> DMatrix<f64> {
        let idx: Vec<usize> = (0..m.nrows()).filter(|&i| (fold_of(i, folds) == k) == held).collect();
        m.select_rows(idx.iter())
    };
    let mut fold_moments = Vec::with_capacity(folds);
    for k in 0..folds {
        let train = moments(&rows(psi_den, k, false), &rows(psi_num, k, false));
        let test = moments(&rows(psi_den, k, true), &rows(psi_num, k, true));
        fold_moments.push((train, test));
    }
    let mut best: Option<(f64, f64)> = None;
    for &lambda in &grid {
        let mut total = 0.0;
        let mut ok = true;
        for ((h_tr, v_tr), (h_te, v_te)) in &fold_moments {
            match solve_ulsif(h_tr, v_tr, lambda) {
                Ok(alpha) => total += ulsif_score(h_te, v_te, &alpha),
                Err(_) => {
                    ok = false;
                    break;
                }
            }
        }
        if !ok {
            continue;
        }
        let score = total / folds as f64;
        if best.is_none_or(|(_, s)| score < s) {
            best = Some((lambda, score));
        }
    }
    best.ok_or_else(|| CdrfError::numeric("uLSIF system singular for every lambda in the grid"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn constant_basis_gives_unit_ratio() {
        let h_mat = DMatrix::from_element(1, 1, 1.0);
        let h_vec = DVector::from_element(1, 1.0);
        let alpha = solve_ulsif(&h_mat, &h_vec, 0.0).unwrap();
        assert_eq!(alpha[0], 1.0);
    }

    #[test]
    fn negative_coefficients_truncated() {
        let h_mat = DMatrix::from_row_slice(2, 2, &[1.0, 0.9, 0.9, 1.0]);
        let h_vec = DVector::from_row_slice(&[1.0, 0.0]);
        let alpha = solve_ulsif(&h_mat, &h_vec, 0.0).unwrap();
        assert!(alpha[1] == 0.0 && alpha[0] > 0.0);
    }

    #[test]
    fn singular_system_reported() {
        let h_mat = DMatrix::zeros(2, 2);
        let h_vec = DVector::from_element(2, 1.0);
        assert!(solve_ulsif(&h_mat, &h_vec, 0.0).is_err());
    }

    #[test]
    fn tiny_instance_matches_hand_solve() {
        let num = vec![vec![0.1, 0.2], vec![0.4, 0.1], vec![0.7, 0.9]];
        let den = vec![vec![0.2, 0.2], vec![0.5, 0.6], vec![0.9, 0.3]];
        let train = RatioTrainingSet {
            numerator: num.clone(),
            denominator: den.clone(),
            mode: EstimationMode::Fused,
        };
        let cfg = RatioConfig {
            n_basis: 2,
            lambda_grid: vec![0.1],
            bandwidth_scales: vec![1.0],
            standardize: false,
            folds: 5,
            seed: 4,
        };
        let model = fit_density_ratio(&train, &cfg, &NuisanceBounds::default()).unwrap();
        assert_eq!(model.basis_centers.len(), 2);

        // hand assembly of the 2x2 system
        let s2 = 2.0 * model.basis_bandwidth.powi(2);
        let psi =
            |z: &Vec<f64>, c: &Vec<f64>| (-(z.iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum::<f64>()) / s2).exp();
        let (c0, c1) = (&model.basis_centers[0], &model.basis_centers[1]);
        let mut h = [[0.0; 2]; 2];
        for z in &den {
            let p = [psi(z, c0), psi(z, c1)];
            for i in 0..2 {
                for j in 0..2 {
                    h[i][j] += p[i] * p[j] / 3.0;
                }
            }
        }
        let mut hv = [0.0; 2];
        for z in &num {
            hv[0] += psi(z, c0) / 3.0;
            hv[1] += psi(z, c1) / 3.0;
        }
        let (a, b, c, d) = (h[0][0] + 0.1, h[0][1], h[1][0], h[1][1] + 0.1);
        let det = a * d - b * c;
        let x0 = ((d * hv[0] - b * hv[1]) / det).max(0.0);
        let x1 = ((a * hv[1] - c * hv[0]) / det).max(0.0);
        assert_abs_diff_eq!(model.alpha[0], x0, epsilon = 1e-12);
        assert_abs_diff_eq!(model.alpha[1], x1, epsilon = 1e-12);
    }

    #[test]
    fn predictions_clipped_to_bounds() {
        let m = RatioModel {
            center: vec![0.0],
            scale: vec![1.0],
            basis_centers: vec![vec![0.0]],
            basis_bandwidth: 1.0,
            alpha: vec![1e6],
            lambda: 0.0,
            clip: NuisanceBounds::default().ratio_clip(),
            mode: EstimationMode::Fused,
        };
        assert_eq!(m.predict(&[0.0]), 50.0);
        let m = RatioModel { alpha: vec![1e-6], ..m };
        assert_eq!(m.predict(&[0.0]), 0.02);
    }

    #[test]
    fn empty_sample_rejected() {
        let train = RatioTrainingSet {
            numerator: vec![],
            denominator: vec![vec![0.0]],
            mode: EstimationMode::Fused,
        };
        assert!(fit_density_ratio(&train, &RatioConfig::default(), &NuisanceBounds::default()).is_err());
    }
}
