//! Risk against the known curve, the fusion vs no-fusion Monte Carlo
//! benchmark, and the Lipschitz-constant diagnostics.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::EstimationMode;
use crate::error::{CdrfError, Result};
use crate::kernel::median;
use crate::krr::FittedCDRF;
use crate::loss::pairwise_sum;
use crate::measure::ReferenceMeasure;
use crate::pipeline::{fit_cdrf, PipelineConfig};
use crate::seed::derive_seed;
use crate::simulation::{scenario_fusion, Family, Scenario};

/// Mean squared difference to the true curve over `m_eval` draws from `mu`.
pub fn empirical_risk_vs_truth(
    model: &FittedCDRF,
    family: Family,
    mu: &ReferenceMeasure,
    m_eval: usize,
    seed: u64,
) -> Result<f64> {
    if m_eval == 0 {
        return Err(CdrfError::invalid("m_eval must be positive"));
    }
    let draws = mu.sample(m_eval, seed)?;
    risk_on_points(|a| model.predict_unchecked(&[a]), family, &draws)
}

/// Mean of `(theta(a_j) - theta_0(a_j))^2` over the given points.
pub fn risk_on_points(theta: impl Fn(f64) -> f64 + Sync, family: Family, points: &[f64]) -> Result<f64> {
    if points.is_empty() {
        return Err(CdrfError::invalid("no evaluation points"));
    }
    let sq: Vec<f64> = points
        .par_iter()
        .map(|&a| {
            let d = theta(a) - family.theta(a);
            d * d
        })
        .collect();
    let risk = pairwise_sum(&sq) / sq.len() as f64;
    if !risk.is_finite() {
        return Err(CdrfError::numeric("non-finite evaluation risk"));
    }
    Ok(risk)
}

/// `round_half_up(100 (1 - fused / nonfused))`.
pub fn percent_reduction(fused: f64, nonfused: f64) -> Result<i64> {
    if !(nonfused > 0.0) {
        return Err(CdrfError::invalid("non-fused risk must be positive"));
    }
    Ok((100.0 * (1.0 - fused / nonfused) + 0.5).floor() as i64)
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(CdrfError::invalid(format!("{name} must be positive, got {v}")))
    }
}

/// `C = 1 + max(sigma sqrt(2 ln(8/delta)), 2 L ln(8/delta))`.
pub fn c_sigma_delta(delta: f64, sigma: f64, l_subexp: f64) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(CdrfError::invalid(format!("delta must lie in (0,1), got {delta}")));
    }
    positive("sigma", sigma)?;
    positive("L", l_subexp)?;
    let log = (8.0 / delta).ln();
    Ok(1.0 + (sigma * (2.0 * log).sqrt()).max(2.0 * l_subexp * log))
}

/// `B = 4 (1 + delta)^2 (1 + xi + C eta w_sup)`.
pub fn lipschitz_constant(delta: f64, sigma: f64, l_subexp: f64, xi: f64, eta: f64, w_sup: f64) -> Result<f64> {
    let c = c_sigma_delta(delta, sigma, l_subexp)?;
    positive("xi", xi)?;
    positive("eta", eta)?;
    positive("w_sup", w_sup)?;
    Ok(4.0 * (1.0 + delta).powi(2) * (1.0 + xi + c * eta * w_sup))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsInput {
    pub delta: f64,
    pub sigma: f64,
    pub l_subexp: f64,
    pub xi: f64,
    pub eta: f64,
    pub w_sup: f64,
    pub xi_u: f64,
    pub eta_u: f64,
    pub w_sup_u: f64,
    pub p: f64,
    pub alpha: f64,
}

/// Ratio of excess-risk bounds with and without fusion.
pub fn bound_ratio(d: &DiagnosticsInput) -> Result<f64> {
    let c = c_sigma_delta(d.delta, d.sigma, d.l_subexp)?;
    for (name, v) in [
        ("xi", d.xi),
        ("eta", d.eta),
        ("w_sup", d.w_sup),
        ("xi_u", d.xi_u),
        ("eta_u", d.eta_u),
        ("w_sup_u", d.w_sup_u),
    ] {
        positive(name, v)?;
    }
    if !(d.p > 0.0 && d.p < 1.0) {
        return Err(CdrfError::invalid(format!("p must lie in (0,1), got {}", d.p)));
    }
    if !(d.alpha > 0.0 && d.alpha < 0.5) {
        return Err(CdrfError::invalid(format!(
            "alpha must lie in (0,0.5), got {}",
            d.alpha
        )));
    }
    let fused = 1.0 + d.xi + c * d.eta * d.w_sup;
    let unfused = 1.0 + d.xi_u + c * d.eta_u * d.w_sup_u;
    let q = 1.0 - 2.0 * d.alpha;
    let exponent = 2.0 * (1.0 + d.p) * q / (d.p + q);
    Ok((fused / unfused).powf(exponent))
}

/// Evaluation grid with the true and fitted curves.
pub fn curve_on_grid(model: &FittedCDRF, family: Option<Family>, points: usize) -> Vec<(f64, Option<f64>, f64)> {
    let m = points.max(2);
    (0..m)
        .map(|i| {
            let a = i as f64 / (m - 1) as f64;
            (a, family.map(|f| f.theta(a)), model.predict_unchecked(&[a]))
        })
        .collect()
}

pub fn write_curve_csv<W: Write>(mut out: W, rows: &[(f64, Option<f64>, f64)], comment: Option<&str>) -> Result<()> {
    if let Some(c) = comment {
        writeln!(out, "# {c}")?;
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["a", "theta_true", "theta_hat"])?;
    for (a, t, h) in rows {
        let t = t.map(|v| v.to_string()).unwrap_or_default();
        w.write_record([a.to_string(), t, h.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "fusion")]
    Fusion,
    #[serde(rename = "no_fusion")]
    NoFusion,
}

impl Method {
    pub fn mode(&self) -> EstimationMode {
        match self {
            Method::Fusion => EstimationMode::Fused,
            Method::NoFusion => EstimationMode::NonFused,
        }
    }
}

/// One run's risk for one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    pub scenario: Family,
    pub ref_measure: ReferenceMeasure,
    pub n: usize,
    pub run: usize,
    pub method: Method,
    pub risk: f64,
}

impl RiskReport {
    fn sort_key(&self) -> (Family, String, usize, usize, Method) {
        (
            self.scenario,
            self.ref_measure.to_string(),
            self.n,
            self.run,
            self.method,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskTableRow {
    pub scenario: Family,
    pub ref_measure: ReferenceMeasure,
    pub n: usize,
    pub fusion_median: f64,
    pub nofusion_median: f64,
    pub pct_reduction: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskTable {
    pub rows: Vec<RiskTableRow>,
}

impl RiskTable {
    pub fn row(&self, family: Family, mu: &ReferenceMeasure, n: usize) -> Option<&RiskTableRow> {
        self.rows
            .iter()
            .find(|r| r.scenario == family && &r.ref_measure == mu && r.n == n)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    pub families: Vec<Family>,
    pub measures: Vec<ReferenceMeasure>,
    pub ns: Vec<usize>,
    pub runs: usize,
    pub master_seed: u64,
    pub m_eval: usize,
    /// Worker threads; `None` uses every logical core.
    pub threads: Option<usize>,
    pub pipeline: PipelineConfig,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            families: vec![Family::Gaussian],
            measures: vec![ReferenceMeasure::uniform()],
            ns: vec![100, 400, 1600],
            runs: 100,
            master_seed: 0,
            m_eval: 1000,
            threads: None,
            pipeline: PipelineConfig::default(),
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(CdrfError::invalid("runs must be at least 1"));
        }
        if self.families.is_empty() || self.measures.is_empty() || self.ns.is_empty() {
            return Err(CdrfError::invalid("benchmark grid is empty"));
        }
        if self.ns.iter().any(|&n| n < 2) {
            return Err(CdrfError::invalid("sample sizes must be at least 2"));
        }
        if self.m_eval == 0 {
            return Err(CdrfError::invalid("m_eval must be positive"));
        }
        if self.threads == Some(0) {
            return Err(CdrfError::invalid("threads must be positive"));
        }
        self.pipeline.cv.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkOutput {
    /// Sorted by (scenario, measure, n, run, method).
    pub results: Vec<RiskReport>,
    pub table: RiskTable,
    /// Runs excluded after a fitting failure, per cell.
    pub failures: Vec<(Family, ReferenceMeasure, usize, usize, String)>,
}

type CellKey = (Family, String, usize);

/// Fits both estimators on one simulated dataset and scores them.
pub fn benchmark_run(
    family: Family,
    mu: &ReferenceMeasure,
    n: usize,
    run: usize,
    config: &BenchmarkConfig,
) -> Result<[RiskReport; 2]> {
    let tag = format!("{family}/{mu}/{n}/{run}");
    let data = Scenario::new(family).generate(n, derive_seed(config.master_seed, &format!("{tag}/data")))?;
    let fusion = scenario_fusion();
    let fit_seed = derive_seed(config.master_seed, &format!("{tag}/fit"));
    let eval_seed = derive_seed(config.master_seed, &format!("{tag}/eval"));
    let mut out = Vec::with_capacity(2);
    for method in [Method::Fusion, Method::NoFusion] {
        let fit = fit_cdrf(&data, &fusion, method.mode(), mu, &config.pipeline, fit_seed)?;
        let risk = empirical_risk_vs_truth(&fit.model, family, mu, config.m_eval, eval_seed)?;
        out.push(RiskReport {
            scenario: family,
            ref_measure: *mu,
            n,
            run,
            method,
            risk,
        });
    }
    Ok([out[0].clone(), out[1].clone()])
}

const RESULTS_HEADER: [&str; 6] = ["scenario", "ref_measure", "n", "run", "method", "risk"];

fn report_record(r: &RiskReport) -> [String; 6] {
    let method = match r.method {
        Method::Fusion => "fusion",
        Method::NoFusion => "no_fusion",
    };
    [
        r.scenario.to_string(),
        r.ref_measure.to_string(),
        r.n.to_string(),
        r.run.to_string(),
        method.to_string(),
        r.risk.to_string(),
    ]
}

fn parse_report(rec: &csv::StringRecord) -> Result<RiskReport> {
    let field = |i: usize| rec.get(i).ok_or_else(|| CdrfError::invalid("short results row"));
    let num = |i: usize| -> Result<usize> {
        field(i)?
            .parse()
            .map_err(|_| CdrfError::invalid(format!("bad integer '{}'", rec.get(i).unwrap_or(""))))
    };
    let method = match field(4)? {
        "fusion" => Method::Fusion,
        "no_fusion" => Method::NoFusion,
        other => return Err(CdrfError::invalid(format!("unknown method '{other}'"))),
    };
    Ok(RiskReport {
        scenario: field(0)?.parse()?,
        ref_measure: field(1)?.parse()?,
        n: num(2)?,
        run: num(3)?,
        method,
        risk: field(5)?.parse().map_err(|_| CdrfError::invalid("bad risk value"))?,
    })
}

/// Reads a results CSV (comment lines allowed).
pub fn read_results<R: std::io::Read>(reader: R) -> Result<Vec<RiskReport>> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .flexible(false)
        .from_reader(reader);
    rdr.records().map(|r| parse_report(&r?)).collect()
}

/// Results CSV with an optional leading comment line.
pub fn write_results<W: Write>(mut out: W, results: &[RiskReport], comment: Option<&str>) -> Result<()> {
    if let Some(c) = comment {
        writeln!(out, "# {c}")?;
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(RESULTS_HEADER)?;
    for r in results {
        w.write_record(report_record(r))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_table<W: Write>(mut out: W, table: &RiskTable, comment: Option<&str>) -> Result<()> {
    if let Some(c) = comment {
        writeln!(out, "# {c}")?;
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "scenario",
        "ref_measure",
        "n",
        "fusion_median",
        "nofusion_median",
        "pct_reduction",
    ])?;
    for r in &table.rows {
        w.write_record([
            r.scenario.to_string(),
            r.ref_measure.to_string(),
            r.n.to_string(),
            r.fusion_median.to_string(),
            r.nofusion_median.to_string(),
            r.pct_reduction.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Completed runs from a partial results file; a run counts only when both
/// methods are present. Unreadable trailing lines (an interrupted write) are
/// dropped.
fn load_partial(path: &Path) -> Result<Vec<RiskReport>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let file = BufReader::new(File::open(path)?);
    let mut rows = Vec::new();
    for line in file.lines() {
        let line = line?;
        if line.trim().is_empty() || line.starts_with('#') || line.starts_with("scenario,") {
            continue;
        }
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .from_reader(line.as_bytes());
        if let Some(Ok(rec)) = rdr.records().next() {
            if let Ok(r) = parse_report(&rec) {
                rows.push(r);
            }
        }
    }
    let mut by_run: BTreeMap<(CellKey, usize), Vec<RiskReport>> = BTreeMap::new();
    for r in rows {
        by_run
            .entry(((r.scenario, r.ref_measure.to_string(), r.n), r.run))
            .or_default()
            .push(r);
    }
    let mut done = Vec::new();
    for (_, mut rs) in by_run {
        rs.sort_by_key(|r| r.method);
        rs.dedup_by_key(|r| r.method);
        if rs.len() == 2 {
            done.extend(rs);
        }
    }
    Ok(done)
}

fn median_of(mut xs: Vec<f64>) -> f64 {
    median(&mut xs)
}

/// Table rows from sorted results, one per cell, in results order.
pub fn tabulate(results: &[RiskReport]) -> Result<RiskTable> {
    let mut cells: BTreeMap<CellKey, (ReferenceMeasure, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in results {
        let e = cells
            .entry((r.scenario, r.ref_measure.to_string(), r.n))
            .or_insert_with(|| (r.ref_measure, Vec::new(), Vec::new()));
        match r.method {
            Method::Fusion => e.1.push(r.risk),
            Method::NoFusion => e.2.push(r.risk),
        }
    }
    let mut rows = Vec::with_capacity(cells.len());
    for ((family, _, n), (mu, f, nf)) in cells {
        if f.is_empty() || nf.is_empty() {
            return Err(CdrfError::invalid(format!("cell {family}/{mu}/{n} lacks one method")));
        }
        let fm = median_of(f);
        let nm = median_of(nf);
        rows.push(RiskTableRow {
            scenario: family,
            ref_measure: mu,
            n,
            fusion_median: fm,
            nofusion_median: nm,
            pct_reduction: percent_reduction(fm, nm)?,
        });
    }
    Ok(RiskTable { rows })
}

/// Runs every (family, measure, n, run) job, in parallel. With `partial`,
/// completed runs are appended there as they finish and skipped on restart.
type RunOutcome = (Family, ReferenceMeasure, usize, usize, Result<[RiskReport; 2]>);

pub fn monte_carlo_benchmark(config: &BenchmarkConfig, partial: Option<&Path>) -> Result<BenchmarkOutput> {
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads.unwrap_or(0))
        .build()
        .map_err(|e| CdrfError::invalid(format!("thread pool: {e}")))?;

    let previous = match partial {
        Some(p) => load_partial(p)?,
        None => Vec::new(),
    };
    let done: BTreeSet<(CellKey, usize)> = previous
        .iter()
        .map(|r| ((r.scenario, r.ref_measure.to_string(), r.n), r.run))
        .collect();

    let mut jobs = Vec::new();
    for &family in &config.families {
        for mu in &config.measures {
            for &n in &config.ns {
                for run in 0..config.runs {
                    if !done.contains(&((family, mu.to_string(), n), run)) {
                        jobs.push((family, *mu, n, run));
                    }
                }
            }
        }
    }

    let sink = match partial {
        Some(p) => {
            let fresh = !p.exists() || std::fs::metadata(p)?.len() == 0;
            let mut f = OpenOptions::new().create(true).append(true).open(p)?;
            if fresh {
                writeln!(f, "{}", RESULTS_HEADER.join(","))?;
            }
            Some(Mutex::new(f))
        }
        None => None,
    };

    let outcomes: Vec<RunOutcome> = pool.install(|| {
        jobs.par_iter()
            .map(|&(family, mu, n, run)| {
                let res = benchmark_run(family, &mu, n, run, config);
                if let (Ok(pair), Some(sink)) = (&res, &sink) {
                    let mut buf = Vec::new();
                    {
                        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(&mut buf);
                        for r in pair {
                            let _ = w.write_record(report_record(r));
                        }
                        let _ = w.flush();
                    }
                    let mut f = sink.lock().expect("results sink poisoned");
                    if let Err(e) = f.write_all(&buf).and_then(|_| f.flush()) {
                        log::warn!("could not append to partial results: {e}");
                    }
                }
                (family, mu, n, run, res)
            })
            .collect()
    });

    let mut results = previous;
    let mut failures = Vec::new();
    for (family, mu, n, run, res) in outcomes {
        match res {
            Ok(pair) => results.extend(pair),
            Err(e) => failures.push((family, mu, n, run, e.to_string())),
        }
    }

    for family in &config.families {
        for mu in &config.measures {
            for &n in &config.ns {
                let failed = failures
                    .iter()
                    .filter(|f| f.0 == *family && f.1 == *mu && f.2 == n)
                    .count();
                if failed == 0 {
                    continue;
                }
                if failed * 20 >= config.runs {
                    let first = failures
                        .iter()
                        .find(|f| f.0 == *family && f.1 == *mu && f.2 == n)
                        .map(|f| f.4.clone())
                        .unwrap_or_default();
                    return Err(CdrfError::numeric(format!(
                        "{failed} of {} runs failed in cell {family}/{mu}/{n}; first error: {first}",
                        config.runs
                    )));
                }
                log::warn!("excluding {failed} failed runs in cell {family}/{mu}/{n}");
            }
        }
    }

    results.sort_by_key(|r| r.sort_key());
    let table = tabulate(&results)?;
    Ok(BenchmarkOutput {
        results,
        table,
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn reductions() {
        assert_eq!(percent_reduction(90.2, 145.3).unwrap(), 38);
        assert_eq!(percent_reduction(1.0, 1.0).unwrap(), 0);
        assert_eq!(percent_reduction(2.0, 1.0).unwrap(), -100);
        assert_eq!(percent_reduction(7.5, 11.6).unwrap(), 35);
        assert_eq!(percent_reduction(0.5, 1.0).unwrap(), 50);
        assert_eq!(percent_reduction(0.995, 1.0).unwrap(), 1);
        assert!(percent_reduction(1.0, 0.0).is_err());
    }

    #[test]
    fn lipschitz_example() {
        let log16 = 16f64.ln();
        let c = 1.0 + (2.0 * log16).sqrt().max(2.0 * log16);
        assert_abs_diff_eq!(c_sigma_delta(0.5, 1.0, 1.0).unwrap(), c, epsilon = 1e-12);
        let b = lipschitz_constant(0.5, 1.0, 1.0, 2.0, 2.0, 1.0).unwrap();
        assert_abs_diff_eq!(b, 9.0 * (3.0 + 2.0 * c), epsilon = 1e-10);
        assert_abs_diff_eq!(b, 144.81, epsilon = 5e-3);
        assert!(lipschitz_constant(0.5, 1.0, 1.0, 2.0, 2.0, 0.0).is_err());
        assert!(lipschitz_constant(1.0, 1.0, 1.0, 2.0, 2.0, 1.0).is_err());
        let lo = lipschitz_constant(0.3, 1.0, 1.0, 2.0, 2.0, 1.0).unwrap();
        let hi = lipschitz_constant(0.9, 1.0, 1.0, 2.0, 2.0, 1.0).unwrap();
        assert!(hi > lo);
    }

    fn diag() -> DiagnosticsInput {
        DiagnosticsInput {
            delta: 0.5,
            sigma: 1.0,
            l_subexp: 1.0,
            xi: 2.0,
            eta: 2.0,
            w_sup: 1.0,
            xi_u: 2.0,
            eta_u: 2.0,
            w_sup_u: 1.0,
            p: 0.5,
            alpha: 0.25,
        }
    }

    #[test]
    fn ratio_examples() {
        assert_eq!(bound_ratio(&diag()).unwrap(), 1.0);
        // pick the non-fused triple at exactly twice the fused one
        let c = c_sigma_delta(0.5, 1.0, 1.0).unwrap();
        let fused = 1.0 + 2.0 + c * 2.0;
        let d = DiagnosticsInput {
            xi_u: 2.0 * fused - 1.0 - c * 2.0,
            ..diag()
        };
        assert_abs_diff_eq!(bound_ratio(&d).unwrap(), 0.5f64.powf(1.5), epsilon = 1e-12);
        assert!(bound_ratio(&DiagnosticsInput { alpha: 0.5, ..diag() }).is_err());
        assert!(bound_ratio(&DiagnosticsInput { p: 1.0, ..diag() }).is_err());
    }

    #[test]
    fn tabulate_singleton_and_ordering() {
        let mu = ReferenceMeasure::uniform();
        let mk = |run, method, risk| RiskReport {
            scenario: Family::Gaussian,
            ref_measure: mu,
            n: 100,
            run,
            method,
            risk,
        };
        let t = tabulate(&[mk(0, Method::Fusion, 0.2), mk(0, Method::NoFusion, 0.4)]).unwrap();
        assert_eq!(t.rows.len(), 1);
        assert_eq!(t.rows[0].fusion_median, 0.2);
        assert_eq!(t.rows[0].nofusion_median, 0.4);
        assert_eq!(t.rows[0].pct_reduction, 50);
        assert!(tabulate(&[mk(0, Method::Fusion, 0.2)]).is_err());
    }

    #[test]
    fn results_round_trip() {
        let r = RiskReport {
            scenario: Family::Trigonometric,
            ref_measure: ReferenceMeasure::beta(0.5, 0.5).unwrap(),
            n: 3200,
            run: 7,
            method: Method::NoFusion,
            risk: 0.0123456789,
        };
        let mut buf = Vec::new();
        write_results(&mut buf, std::slice::from_ref(&r), Some("seed=1")).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("# seed=1\nscenario,ref_measure,n,run,method,risk\n"));
        assert!(text.contains("\"beta(0.5,0.5)\""));
        assert_eq!(read_results(&buf[..]).unwrap(), vec![r]);
    }
}
