//! Stochastically approximated Neyman-orthogonal loss and the per-record
//! pseudo-residuals `(u, v)` that make the empirical risk a quadratic in the
//! target function.
//!
//! For a record `z = (x, a, y, s, b)` and nuisance tuple `g`:
//!
//! ```text
//! l(theta, g; z) = (theta(b) - tau(b))^2
//!     + 2 xi  1{s in S_X} (theta(b) - tau(b)) (tau(b) - m(x, b))
//!     + 2 eta w(x, a) 1{s in S_Y} (theta(a) - tau(a)) (m(x, a) - y)
//! ```
//!
//! Non-fused estimation uses the same expression with both indicators on
//! `S_X ∩ S_Y` and the intersection-only nuisances.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{EstimationMode, ExtendedRecord, FusionConfig};
use crate::error::{CdrfError, Result};
use crate::nuisance::NuisanceEval;

/// Nuisance evaluations needed by one loss term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NuisanceValues {
    pub xi: f64,
    pub eta: f64,
    pub w_xa: f64,
    pub m_xa: f64,
    pub m_xb: f64,
    pub tau_a: f64,
    pub tau_b: f64,
}

impl NuisanceValues {
    pub fn at<G: NuisanceEval + ?Sized>(g: &G, record: &ExtendedRecord) -> Self {
        let r = &record.base;
        NuisanceValues {
            xi: g.xi(),
            eta: g.eta(),
            w_xa: g.ratio(&r.x, &r.a),
            m_xa: g.outcome(&r.x, &r.a),
            m_xb: g.outcome(&r.x, &record.b),
            tau_a: g.tau(&r.a),
            tau_b: g.tau(&record.b),
        }
    }

    fn check(&self) -> Result<()> {
        let all = [
            self.xi, self.eta, self.w_xa, self.m_xa, self.m_xb, self.tau_a, self.tau_b,
        ];
        if all.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(CdrfError::numeric(format!("non-finite nuisance evaluation {self:?}")))
        }
    }
}

/// Indicators `(1{s in S_X}, 1{s in S_Y})` for the mode.
fn indicators(s: u32, fusion: &FusionConfig, mode: EstimationMode) -> (f64, f64) {
    let ix = if fusion.in_x(s, mode) { 1.0 } else { 0.0 };
    let iy = if fusion.in_y(s, mode) { 1.0 } else { 0.0 };
    (ix, iy)
}

pub fn pointwise_loss(
    theta_at_b: f64,
    theta_at_a: f64,
    g: &NuisanceValues,
    record: &ExtendedRecord,
    fusion: &FusionConfig,
    mode: EstimationMode,
) -> Result<f64> {
    g.check()?;
    let (ix, iy) = indicators(record.base.s, fusion, mode);
    let db = theta_at_b - g.tau_b;
    let da = theta_at_a - g.tau_a;
    let mut loss = db * db;
    if ix != 0.0 {
        loss += 2.0 * g.xi * db * (g.tau_b - g.m_xb);
    }
    if iy != 0.0 {
        loss += 2.0 * g.eta * g.w_xa * da * (g.m_xa - record.base.y);
    }
    Ok(loss)
}

/// Linear coefficients of the empirical objective, one pair per record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoResiduals {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl PseudoResiduals {
    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    /// `u_i = 1{s_i in S_Y} eta w(x_i, a_i) (m(x_i, a_i) - y_i)`,
    /// `v_i = 1{s_i in S_X} xi (tau(b_i) - m(x_i, b_i)) - tau(b_i)`.
    pub fn from_values(
        values: &[NuisanceValues],
        fold: &[ExtendedRecord],
        fusion: &FusionConfig,
        mode: EstimationMode,
    ) -> Self {
        let (u, v) = values
            .iter()
            .zip(fold)
            .map(|(g, r)| {
                let (ix, iy) = indicators(r.base.s, fusion, mode);
                let u = if iy != 0.0 {
                    g.eta * g.w_xa * (g.m_xa - r.base.y)
                } else {
                    0.0
                };
                let v = if ix != 0.0 { g.xi * (g.tau_b - g.m_xb) } else { 0.0 } - g.tau_b;
                (u, v)
            })
            .unzip();
        PseudoResiduals { u, v }
    }
}

/// Evaluates the nuisance tuple on every record, in parallel with order kept.
pub fn evaluate_nuisance<G: NuisanceEval + ?Sized>(g: &G, fold: &[ExtendedRecord]) -> Result<Vec<NuisanceValues>> {
    fold.par_iter()
        .enumerate()
        .map(|(i, r)| {
            let v = NuisanceValues::at(g, r);
            v.check().map_err(|e| CdrfError::numeric(format!("record {i}: {e}")))?;
            Ok(v)
        })
        .collect()
}

pub fn pseudo_residuals<G: NuisanceEval + ?Sized>(
    g: &G,
    fold: &[ExtendedRecord],
    fusion: &FusionConfig,
    mode: EstimationMode,
) -> Result<PseudoResiduals> {
    let values = evaluate_nuisance(g, fold)?;
    Ok(PseudoResiduals::from_values(&values, fold, fusion, mode))
}

/// Mean pointwise loss over a fold.
pub fn empirical_risk<G, F>(
    theta: F,
    g: &G,
    fold: &[ExtendedRecord],
    fusion: &FusionConfig,
    mode: EstimationMode,
) -> Result<f64>
where
    G: NuisanceEval + ?Sized,
    F: Fn(&[f64]) -> f64 + Sync,
{
    if fold.is_empty() {
        return Err(CdrfError::invalid("empirical risk over an empty fold"));
    }
    let losses = fold
        .par_iter()
        .map(|r| {
            let values = NuisanceValues::at(g, r);
            pointwise_loss(theta(&r.b), theta(&r.base.a), &values, r, fusion, mode)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(pairwise_sum(&losses) / losses.len() as f64)
}

/// Pairwise (cascade) summation with a fixed reduction tree.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 16 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SampleRecord;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn record(s: u32, y: f64) -> ExtendedRecord {
        ExtendedRecord {
            base: SampleRecord {
                x: vec![0.0],
                a: vec![0.3],
                y,
                s,
            },
            b: vec![0.7],
        }
    }

    fn fusion() -> FusionConfig {
        FusionConfig::new([2, 3], [1, 3]).unwrap()
    }

    fn worked_values() -> NuisanceValues {
        NuisanceValues {
            xi: 2.0,
            eta: 2.0,
            w_xa: 1.5,
            m_xa: 0.3,
            m_xb: 0.2,
            tau_a: 0.1,
            tau_b: 0.5,
        }
    }

    #[test]
    fn worked_example() {
        let l = pointwise_loss(
            0.4,
            0.3,
            &worked_values(),
            &record(3, 0.1),
            &fusion(),
            EstimationMode::Fused,
        )
        .unwrap();
        assert_abs_diff_eq!(l, 0.13, epsilon = 1e-12);
    }

    #[test]
    fn vanishes_at_tau() {
        let g = worked_values();
        for s in 0..4 {
            for mode in [EstimationMode::Fused, EstimationMode::NonFused] {
                let l = pointwise_loss(g.tau_b, g.tau_a, &g, &record(s, 9.0), &fusion(), mode).unwrap();
                assert_eq!(l, 0.0);
            }
        }
    }

    #[test]
    fn unaligned_source_keeps_only_square() {
        let g = worked_values();
        let l = pointwise_loss(0.4, 0.3, &g, &record(0, 0.1), &fusion(), EstimationMode::Fused).unwrap();
        assert_abs_diff_eq!(l, 0.01, epsilon = 1e-15);
    }

    #[test]
    fn non_finite_nuisance_rejected() {
        let g = NuisanceValues {
            m_xa: f64::NAN,
            ..worked_values()
        };
        assert!(pointwise_loss(0.0, 0.0, &g, &record(3, 0.0), &fusion(), EstimationMode::Fused).is_err());
    }

    #[test]
    fn residual_examples() {
        let g = worked_values();
        let fold = vec![record(3, 0.1), record(0, 0.1), record(1, 0.1)];
        let vals = vec![g; 3];
        let pr = PseudoResiduals::from_values(&vals, &fold, &fusion(), EstimationMode::Fused);
        assert_abs_diff_eq!(pr.u[0], 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(pr.v[0], 0.1, epsilon = 1e-12);
        assert_eq!(pr.u[1], 0.0);
        assert_abs_diff_eq!(pr.v[1], -0.5, epsilon = 1e-15);
        // s = 1 is outcome-aligned only
        assert_abs_diff_eq!(pr.u[2], 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(pr.v[2], -0.5, epsilon = 1e-15);
        let nf = PseudoResiduals::from_values(&vals, &fold, &fusion(), EstimationMode::NonFused);
        assert_eq!(nf.u[2], 0.0);
    }

    #[test]
    fn pairwise_sum_matches_naive() {
        let xs: Vec<f64> = (0..1000).map(|i| (i as f64).sin()).collect();
        assert_abs_diff_eq!(pairwise_sum(&xs), xs.iter().sum::<f64>(), epsilon = 1e-10);
        assert_abs_diff_eq!((0.13 + 0.07) / 2.0, 0.1, epsilon = 1e-15);
    }

    fn arb_values() -> impl Strategy<Value = NuisanceValues> {
        (
            0.5f64..5.0,
            0.5f64..5.0,
            0.02f64..50.0,
            -2.0f64..2.0,
            -2.0f64..2.0,
            -2.0f64..2.0,
            -2.0f64..2.0,
        )
            .prop_map(|(xi, eta, w_xa, m_xa, m_xb, tau_a, tau_b)| NuisanceValues {
                xi,
                eta,
                w_xa,
                m_xa,
                m_xb,
                tau_a,
                tau_b,
            })
    }

    proptest! {
        /// The loss equals `theta(b)^2 + 2 v theta(b) + 2 u theta(a)` plus a
        /// theta-free constant (evaluated at theta = 0).
        #[test]
        fn quadratic_expansion(g in arb_values(), s in 0u32..4, y in -2.0f64..2.0,
                               tb in -3.0f64..3.0, ta in -3.0f64..3.0, fused: bool) {
            let mode = if fused { EstimationMode::Fused } else { EstimationMode::NonFused };
            let rec = record(s, y);
            let pr = PseudoResiduals::from_values(&[g], std::slice::from_ref(&rec), &fusion(), mode);
            let constant = pointwise_loss(0.0, 0.0, &g, &rec, &fusion(), mode).unwrap();
            let expanded = tb * tb + 2.0 * pr.v[0] * tb + 2.0 * pr.u[0] * ta + constant;
            let direct = pointwise_loss(tb, ta, &g, &rec, &fusion(), mode).unwrap();
            prop_assert!((expanded - direct).abs() <= 1e-10 * (1.0 + direct.abs()));
        }

        /// Along theta + t delta the loss is a quadratic in t whose leading
        /// coefficient is delta(b)^2.
        #[test]
        fn leading_coefficient_nonnegative(g in arb_values(), s in 0u32..4, y in -2.0f64..2.0,
                                           tb in -3.0f64..3.0, ta in -3.0f64..3.0,
                                           db in -1.0f64..1.0, da in -1.0f64..1.0) {
            let rec = record(s, y);
            let f = |t: f64| pointwise_loss(tb + t * db, ta + t * da, &g, &rec, &fusion(), EstimationMode::Fused).unwrap();
            let second = f(1.0) - 2.0 * f(0.0) + f(-1.0);
            prop_assert!((second - 2.0 * db * db).abs() <= 1e-9 * (1.0 + f(0.0).abs()));
            prop_assert!(second >= -1e-12);
        }

        /// With S_X = S_Y the two modes agree record by record.
        #[test]
        fn modes_coincide_when_sets_equal(g in arb_values(), s in 0u32..4, y in -2.0f64..2.0,
                                          tb in -3.0f64..3.0, ta in -3.0f64..3.0) {
            let f = FusionConfig::new([1, 3], [1, 3]).unwrap();
            let rec = record(s, y);
            prop_assert_eq!(
                pointwise_loss(tb, ta, &g, &rec, &f, EstimationMode::Fused).unwrap(),
                pointwise_loss(tb, ta, &g, &rec, &f, EstimationMode::NonFused).unwrap()
            );
        }
    }
}
