//! Fitted nuisances compared with the known simulation-design nuisances.

use cdrf_core::data::{extend_with_mu_draws, ExtendedRecord};
use cdrf_core::nuisance::{fit_nuisance, NuisanceBounds, NuisanceEval, NuisanceFit};
use cdrf_core::simulation::{oracle_nuisance, scenario_fusion, OracleNuisance, Scenario};
use cdrf_core::{EstimationMode, Family, NuisanceConfig, ReferenceMeasure};

fn setup(mode: EstimationMode) -> (NuisanceFit, OracleNuisance, Vec<ExtendedRecord>) {
    let mu = ReferenceMeasure::uniform();
    let scenario = Scenario::new(Family::Gaussian);
    let train = extend_with_mu_draws(&scenario.generate(2000, 10).unwrap(), &mu, 11).unwrap();
    let test = extend_with_mu_draws(&scenario.generate(2000, 12).unwrap(), &mu, 13).unwrap();
    let fit = fit_nuisance(&train, &scenario_fusion(), mode, &NuisanceConfig::default(), 14).unwrap();
    let oracle = oracle_nuisance(Family::Gaussian, mu, mode, 200_000, 15).unwrap();
    (fit, oracle, test)
}

fn mean_abs(pairs: impl Iterator<Item = (f64, f64)>) -> f64 {
    let (s, c) = pairs.fold((0.0, 0usize), |(s, c), (a, b)| (s + (a - b).abs(), c + 1));
    s / c as f64
}

#[test]
fn source_probabilities_near_design() {
    let (fit, oracle, _) = setup(EstimationMode::Fused);
    assert!((fit.xi() - oracle.xi()).abs() < 0.15, "{}", fit.xi());
    assert!((fit.eta() - oracle.eta()).abs() < 0.15, "{}", fit.eta());
    let (fit, oracle, _) = setup(EstimationMode::NonFused);
    assert!((fit.xi() - oracle.xi()).abs() < 0.4, "{}", fit.xi());
}

#[test]
fn outcome_and_tau_track_the_truth() {
    let (fit, oracle, test) = setup(EstimationMode::Fused);
    let fusion = scenario_fusion();
    let aligned = test.iter().filter(|r| fusion.in_y(r.base.s, EstimationMode::Fused));
    let m_err = mean_abs(aligned.map(|r| (fit.outcome(&r.base.x, &r.base.a), oracle.outcome(&r.base.x, &r.base.a))));
    assert!(m_err < 0.15, "outcome MAE {m_err}");
    let grid: Vec<f64> = (1..20).map(|i| i as f64 / 20.0).collect();
    let t_err = mean_abs(grid.iter().map(|&a| (fit.tau(&[a]), oracle.tau(&[a]))));
    assert!(t_err < 0.15, "tau MAE {t_err}");
}

#[test]
fn ratio_is_clipped_and_normalized() {
    let (fit, oracle, test) = setup(EstimationMode::Fused);
    let fusion = scenario_fusion();
    let (lo, hi) = NuisanceBounds::default().ratio_clip();
    let aligned: Vec<_> = test
        .iter()
        .filter(|r| fusion.in_y(r.base.s, EstimationMode::Fused))
        .collect();
    let fitted: Vec<f64> = aligned.iter().map(|r| fit.ratio(&r.base.x, &r.base.a)).collect();
    assert!(fitted.iter().all(|&w| (lo..=hi).contains(&w)));
    let m = fitted.iter().sum::<f64>() / fitted.len() as f64;
    assert!((m - 1.0).abs() < 0.2, "held-out mean {m}");
    let mae = mean_abs(
        aligned
            .iter()
            .zip(&fitted)
            .map(|(r, &w)| (w, oracle.ratio(&r.base.x, &r.base.a))),
    );
    assert!(mae < 0.6, "ratio MAE {mae}");
}

#[test]
fn same_seed_same_fit() {
    let (a, _, _) = setup(EstimationMode::Fused);
    let (b, _, _) = setup(EstimationMode::Fused);
    assert_eq!(a, b);
}
