//! Command-line front end: run configuration, file outputs and exit codes.
//!
//! Every output embeds the configuration hash and master seed, as a leading
//! `#` line in CSV files and as fields in JSON files.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cv::{CVConfig, CvMode};
use crate::data::{load_dataset, EstimationMode, FusionConfig, SourceLabel};
use crate::error::{CdrfError, Result};
use crate::evaluation::{
    bound_ratio, c_sigma_delta, curve_on_grid, empirical_risk_vs_truth, lipschitz_constant, monte_carlo_benchmark,
    write_curve_csv, write_results, write_table, BenchmarkConfig, DiagnosticsInput,
};
use crate::kernel::KernelFamily;
use crate::krr::FittedCDRF;
use crate::measure::ReferenceMeasure;
use crate::nuisance::NuisanceConfig;
use crate::pipeline::{fit_cdrf, BandwidthPool, BandwidthRule, FitResult, KernelConfig, PipelineConfig};
use crate::simulation::{oracle_nuisance, scenario_fusion, Family, Scenario};

/// Number of points in the plot-ready curve files.
pub const CURVE_POINTS: usize = 201;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeSelection {
    Fused,
    Nonfused,
    Both,
}

impl ModeSelection {
    pub fn modes(&self) -> Vec<EstimationMode> {
        match self {
            ModeSelection::Fused => vec![EstimationMode::Fused],
            ModeSelection::Nonfused => vec![EstimationMode::NonFused],
            ModeSelection::Both => vec![EstimationMode::Fused, EstimationMode::NonFused],
        }
    }
}

impl std::str::FromStr for ModeSelection {
    type Err = CdrfError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "fused" => Ok(ModeSelection::Fused),
            "nonfused" => Ok(ModeSelection::Nonfused),
            "both" => Ok(ModeSelection::Both),
            other => Err(CdrfError::invalid(format!("unknown mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkSection {
    pub families: Vec<Family>,
    pub measures: Vec<ReferenceMeasure>,
    pub ns: Vec<usize>,
    pub runs: usize,
    pub m_eval: usize,
    pub threads: Option<usize>,
}

impl Default for BenchmarkSection {
    fn default() -> Self {
        let b = BenchmarkConfig::default();
        BenchmarkSection {
            families: b.families,
            measures: b.measures,
            ns: b.ns,
            runs: b.runs,
            m_eval: b.m_eval,
            threads: b.threads,
        }
    }
}

/// Whole run configuration; every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub mode: ModeSelection,
    pub reference_measure: ReferenceMeasure,
    pub fusion: FusionConfig,
    pub split_fraction: f64,
    pub kernel: KernelConfig,
    pub cv: CVConfig,
    pub nuisance: NuisanceConfig,
    pub m_eval: usize,
    pub output_dir: PathBuf,
    pub benchmark: BenchmarkSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            mode: ModeSelection::Both,
            reference_measure: ReferenceMeasure::uniform(),
            fusion: scenario_fusion(),
            split_fraction: 0.5,
            kernel: KernelConfig::default(),
            cv: CVConfig::default(),
            nuisance: NuisanceConfig::default(),
            m_eval: 1000,
            output_dir: PathBuf::from("."),
            benchmark: BenchmarkSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| CdrfError::Config(format!("{}: {e}", path.display())))
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            kernel: self.kernel.clone(),
            cv: self.cv.clone(),
            nuisance: self.nuisance.clone(),
            split_fraction: self.split_fraction,
        }
    }

    pub fn benchmark(&self) -> BenchmarkConfig {
        let b = &self.benchmark;
        BenchmarkConfig {
            families: b.families.clone(),
            measures: b.measures.clone(),
            ns: b.ns.clone(),
            runs: b.runs,
            master_seed: self.seed,
            m_eval: b.m_eval,
            threads: b.threads,
            pipeline: self.pipeline(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.cv.validate()?;
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(CdrfError::invalid("split_fraction must lie in (0,1)"));
        }
        if self.m_eval == 0 {
            return Err(CdrfError::invalid("m_eval must be positive"));
        }
        Ok(())
    }

    /// First 16 hex digits of SHA-256 over the canonical JSON form. The output
    /// directory and thread count do not change results and are left out.
    pub fn hash(&self) -> String {
        let mut canonical = RunConfig {
            output_dir: PathBuf::new(),
            ..self.clone()
        };
        canonical.benchmark.threads = None;
        let json = serde_json::to_string(&canonical).expect("config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }

    pub fn stamp(&self) -> String {
        format!("config_hash={} master_seed={}", self.hash(), self.seed)
    }
}

#[derive(Debug, Parser)]
#[command(name = "cdrf", version, about = "Causal dose-response estimation with data fusion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset and its scenario sidecar.
    Simulate(SimulateArgs),
    /// Fit the dose-response curve on a dataset.
    Fit(FitArgs),
    /// Run only the ridge-parameter cross-validation.
    Cv(FitArgs),
    /// Score a fitted model against a known curve.
    Evaluate(EvaluateArgs),
    /// Fusion vs no-fusion Monte Carlo benchmark.
    Benchmark(BenchmarkArgs),
    /// Lipschitz constants and the fused/non-fused bound ratio.
    Diagnostics(DiagnosticsArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub family: String,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub data: PathBuf,
    /// fused, nonfused or both.
    #[arg(long)]
    pub mode: Option<String>,
    /// Reference measure, e.g. `uniform` or `beta(5,5)`.
    #[arg(long)]
    pub mu: Option<String>,
    /// Covariate-aligned sources, comma separated.
    #[arg(long)]
    pub sources_x: Option<String>,
    /// Outcome-aligned sources, comma separated.
    #[arg(long)]
    pub sources_y: Option<String>,
    #[arg(long)]
    pub kernel: Option<String>,
    /// `median` or a positive number.
    #[arg(long)]
    pub bandwidth: Option<String>,
    /// a_only or a_and_b.
    #[arg(long)]
    pub bandwidth_pool: Option<String>,
    #[arg(long)]
    pub folds: Option<usize>,
    /// Comma-separated lambda grid.
    #[arg(long)]
    pub grid: Option<String>,
    /// refit or standard.
    #[arg(long)]
    pub cv_mode: Option<String>,
    #[arg(long)]
    pub penalty_power: Option<u8>,
    /// Known curve family, adds the true curve to the curve file.
    #[arg(long)]
    pub family: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Fitted model JSON written by `fit`.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub family: String,
    #[arg(long, default_value = "uniform")]
    pub mu: String,
    #[arg(long, default_value_t = 1000)]
    pub m_eval: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Optional plot-ready curve CSV.
    #[arg(long)]
    pub curve: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Comma-separated families.
    #[arg(long)]
    pub family: Option<String>,
    /// Comma-separated measures, e.g. `uniform,beta(5,5)`.
    #[arg(long)]
    pub measures: Option<String>,
    /// Comma-separated sample sizes.
    #[arg(long)]
    pub ns: Option<String>,
    #[arg(long)]
    pub runs: Option<usize>,
    #[arg(long)]
    pub m_eval: Option<usize>,
    /// Worker threads (default: logical cores).
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DiagnosticsArgs {
    #[arg(long, default_value_t = 0.5)]
    pub delta: f64,
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    #[arg(long, default_value_t = 1.0)]
    pub l_subexp: f64,
    #[arg(long, default_value_t = 0.5)]
    pub p: f64,
    #[arg(long, default_value_t = 0.25)]
    pub alpha: f64,
    #[arg(long)]
    pub xi: Option<f64>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub w_sup: Option<f64>,
    #[arg(long)]
    pub xi_u: Option<f64>,
    #[arg(long)]
    pub eta_u: Option<f64>,
    #[arg(long)]
    pub w_sup_u: Option<f64>,
    /// Take the sources probabilities and ratio sups from the simulation design.
    #[arg(long)]
    pub oracle: bool,
    #[arg(long, default_value = "gaussian")]
    pub family: String,
    #[arg(long, default_value = "uniform")]
    pub mu: String,
}

/// Splits on commas outside parentheses, so `uniform,beta(5,5)` has two items.
pub fn split_list(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut cur = String::new();
    for ch in s.chars() {
        match ch {
            '(' => depth += 1,
            ')' => depth -= 1,
            _ => {}
        }
        if ch == ',' && depth == 0 {
            out.push(cur.trim().to_string());
            cur.clear();
        } else {
            cur.push(ch);
        }
    }
    if !cur.trim().is_empty() {
        out.push(cur.trim().to_string());
    }
    out
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    split_list(s)
        .iter()
        .map(|item| {
            item.parse::<T>()
                .map_err(|_| CdrfError::invalid(format!("invalid {what} '{item}'")))
        })
        .collect()
}

fn base_config(common: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(d) = &common.out_dir {
        cfg.output_dir = d.clone();
    }
    Ok(cfg)
}

fn fit_config(args: &FitArgs) -> Result<RunConfig> {
    let mut cfg = base_config(&args.common)?;
    if let Some(m) = &args.mode {
        cfg.mode = m.parse()?;
    }
    if let Some(m) = &args.mu {
        cfg.reference_measure = m.parse()?;
    }
    if args.sources_x.is_some() || args.sources_y.is_some() {
        let sx: Vec<SourceLabel> = match &args.sources_x {
            Some(s) => parse_list(s, "source label")?,
            None => cfg.fusion.sources_x.iter().copied().collect(),
        };
        let sy: Vec<SourceLabel> = match &args.sources_y {
            Some(s) => parse_list(s, "source label")?,
            None => cfg.fusion.sources_y.iter().copied().collect(),
        };
        cfg.fusion = FusionConfig::new(sx, sy)?;
    }
    if let Some(k) = &args.kernel {
        cfg.kernel.kernel = k.parse::<KernelFamily>()?;
    }
    if let Some(b) = &args.bandwidth {
        cfg.kernel.bandwidth = b.parse::<BandwidthRule>()?;
    }
    if let Some(p) = &args.bandwidth_pool {
        cfg.kernel.bandwidth_pool = match p.as_str() {
            "a_only" => BandwidthPool::AOnly,
            "a_and_b" => BandwidthPool::AAndB,
            other => return Err(CdrfError::invalid(format!("unknown bandwidth pool '{other}'"))),
        };
    }
    if let Some(f) = args.folds {
        cfg.cv.folds = f;
    }
    if let Some(g) = &args.grid {
        cfg.cv.lambda_grid = parse_list(g, "lambda")?;
    }
    if let Some(m) = &args.cv_mode {
        cfg.cv.mode = m.parse::<CvMode>()?;
    }
    if let Some(p) = args.penalty_power {
        cfg.cv.penalty_power = p;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

fn create_out_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    writeln!(f)?;
    Ok(())
}

/// JSON document written by `fit`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitDocument {
    pub config_hash: String,
    pub master_seed: u64,
    pub dataset_sha256: String,
    pub result: FitResult,
}

/// Model JSON with its provenance stamp; `evaluate` also accepts a bare model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelDocument {
    pub config_hash: String,
    pub master_seed: u64,
    #[serde(flatten)]
    pub model: FittedCDRF,
}

fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    let family: Family = args.family.parse()?;
    let data = Scenario::new(family).generate(args.n, args.seed)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_out_dir(parent)?;
    }
    let mut f = fs::File::create(&args.out)?;
    writeln!(f, "# family={family} n={} master_seed={}", args.n, args.seed)?;
    data.write_csv(&mut f)?;
    let sidecar = args.out.with_extension("json");
    write_json(
        &sidecar,
        &serde_json::json!({ "family": family, "seed": args.seed, "n": args.n }),
    )?;
    println!("wrote {} and {}", args.out.display(), sidecar.display());
    Ok(())
}

fn cv_csv(result: &FitResult, stamp: &str) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    writeln!(buf, "# {stamp} chosen_lambda={}", result.cv.chosen_lambda)?;
    let mut w = csv::Writer::from_writer(&mut buf);
    let mut header = vec!["lambda".to_string()];
    header.extend((0..result.cv.risks.len()).map(|k| format!("fold{k}")));
    header.push("mean".into());
    w.write_record(&header)?;
    let means = result.cv.mean_risks();
    for (j, lam) in result.cv.lambda_grid.iter().enumerate() {
        let mut row = vec![lam.to_string()];
        row.extend(result.cv.risks.iter().map(|r| r[j].to_string()));
        row.push(means[j].to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    drop(w);
    Ok(buf)
}

fn cmd_fit(args: &FitArgs, cv_only: bool) -> Result<()> {
    let cfg = fit_config(args)?;
    let family: Option<Family> = args.family.as_deref().map(str::parse).transpose()?;
    let data = load_dataset(&args.data)?;
    let dataset_sha256 = sha256_file(&args.data)?;
    let stamp = cfg.stamp();
    create_out_dir(&cfg.output_dir)?;
    let pipeline = cfg.pipeline();
    for mode in cfg.mode.modes() {
        let result = fit_cdrf(&data, &cfg.fusion, mode, &cfg.reference_measure, &pipeline, cfg.seed)?;
        let tag = mode.as_str();
        fs::write(cfg.output_dir.join(format!("cv_{tag}.csv")), cv_csv(&result, &stamp)?)?;
        if !cv_only {
            let curve = curve_on_grid(&result.model, family, CURVE_POINTS);
            let f = fs::File::create(cfg.output_dir.join(format!("curve_{tag}.csv")))?;
            write_curve_csv(f, &curve, Some(&stamp))?;
            write_json(
                &cfg.output_dir.join(format!("model_{tag}.json")),
                &ModelDocument {
                    config_hash: cfg.hash(),
                    master_seed: cfg.seed,
                    model: result.model.clone(),
                },
            )?;
            write_json(
                &cfg.output_dir.join(format!("fit_{tag}.json")),
                &FitDocument {
                    config_hash: cfg.hash(),
                    master_seed: cfg.seed,
                    dataset_sha256: dataset_sha256.clone(),
                    result: result.clone(),
                },
            )?;
        }
        println!(
            "{tag}: lambda={} bandwidth={} n2={}",
            result.cv.chosen_lambda,
            result.model.kernel.bandwidth,
            result.model.n2()
        );
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<FittedCDRF> {
    let text = fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    Ok(serde_json::from_value(value)?)
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let family: Family = args.family.parse()?;
    let mu: ReferenceMeasure = args.mu.parse()?;
    let model = load_model(&args.model)?;
    let risk = empirical_risk_vs_truth(&model, family, &mu, args.m_eval, args.seed)?;
    if let Some(path) = &args.curve {
        let curve = curve_on_grid(&model, Some(family), CURVE_POINTS);
        let stamp = format!("family={family} master_seed={}", args.seed);
        write_curve_csv(fs::File::create(path)?, &curve, Some(&stamp))?;
    }
    println!("risk={risk}");
    Ok(())
}

fn cmd_benchmark(args: &BenchmarkArgs) -> Result<()> {
    let mut cfg = base_config(&args.common)?;
    if let Some(f) = &args.family {
        cfg.benchmark.families = parse_list(f, "family")?;
    }
    if let Some(m) = &args.measures {
        cfg.benchmark.measures = parse_list(m, "measure")?;
    }
    if let Some(ns) = &args.ns {
        cfg.benchmark.ns = parse_list(ns, "sample size")?;
    }
    if let Some(r) = args.runs {
        cfg.benchmark.runs = r;
    }
    if let Some(m) = args.m_eval {
        cfg.benchmark.m_eval = m;
    }
    if args.threads.is_some() {
        cfg.benchmark.threads = args.threads;
    }
    cfg.validate()?;
    let bench = cfg.benchmark();
    bench.validate()?;
    let stamp = cfg.stamp();
    create_out_dir(&cfg.output_dir)?;
    let partial = cfg.output_dir.join(format!("results.partial.{}.csv", cfg.hash()));
    let out = monte_carlo_benchmark(&bench, Some(&partial))?;
    for f in &out.failures {
        eprintln!("warning: run {} of {}/{}/{} excluded: {}", f.3, f.0, f.1, f.2, f.4);
    }
    write_results(
        fs::File::create(cfg.output_dir.join("results.csv"))?,
        &out.results,
        Some(&stamp),
    )?;
    write_table(
        fs::File::create(cfg.output_dir.join("table.csv"))?,
        &out.table,
        Some(&stamp),
    )?;
    fs::remove_file(&partial)?;
    for r in &out.table.rows {
        println!(
            "{} {} n={}: fusion={:.4e} no_fusion={:.4e} reduction={}%",
            r.scenario, r.ref_measure, r.n, r.fusion_median, r.nofusion_median, r.pct_reduction
        );
    }
    Ok(())
}

fn cmd_diagnostics(args: &DiagnosticsArgs) -> Result<()> {
    let (xi, eta, w_sup, xi_u, eta_u, w_sup_u) = if args.oracle {
        let family: Family = args.family.parse()?;
        let mu: ReferenceMeasure = args.mu.parse()?;
        let f = oracle_nuisance(family, mu, EstimationMode::Fused, 1, 0)?;
        let nf = oracle_nuisance(family, mu, EstimationMode::NonFused, 1, 0)?;
        (
            f.xi,
            f.eta,
            f.ratio_sup_on_grid(9),
            nf.xi,
            nf.eta,
            nf.ratio_sup_on_grid(9),
        )
    } else {
        let need = |v: Option<f64>, name: &str| {
            v.ok_or_else(|| CdrfError::invalid(format!("--{name} is required without --oracle")))
        };
        (
            need(args.xi, "xi")?,
            need(args.eta, "eta")?,
            need(args.w_sup, "w-sup")?,
            need(args.xi_u, "xi-u")?,
            need(args.eta_u, "eta-u")?,
            need(args.w_sup_u, "w-sup-u")?,
        )
    };
    let input = DiagnosticsInput {
        delta: args.delta,
        sigma: args.sigma,
        l_subexp: args.l_subexp,
        xi,
        eta,
        w_sup,
        xi_u,
        eta_u,
        w_sup_u,
        p: args.p,
        alpha: args.alpha,
    };
    let report = serde_json::json!({
        "input": input,
        "c_sigma_delta": c_sigma_delta(args.delta, args.sigma, args.l_subexp)?,
        "lipschitz_fused": lipschitz_constant(args.delta, args.sigma, args.l_subexp, xi, eta, w_sup)?,
        "lipschitz_nonfused": lipschitz_constant(args.delta, args.sigma, args.l_subexp, xi_u, eta_u, w_sup_u)?,
        "bound_ratio": bound_ratio(&input)?,
    });
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Fit(a) => cmd_fit(a, false),
        Command::Cv(a) => cmd_fit(a, true),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Benchmark(a) => cmd_benchmark(a),
        Command::Diagnostics(a) => cmd_diagnostics(a),
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
