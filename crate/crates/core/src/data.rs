//! Observed samples, fusion-set configuration, sample splitting and
//! augmentation with auxiliary exposure draws.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{CdrfError, Result};
use crate::measure::ReferenceMeasure;
use crate::seed::rng_from_seed;

pub type SourceLabel = u32;

/// One observation `(x, a, y, s)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub x: Vec<f64>,
    pub a: Vec<f64>,
    pub y: f64,
    pub s: SourceLabel,
}

impl SampleRecord {
    /// Concatenated `(x, a)` feature row.
    pub fn features(&self) -> Vec<f64> {
        joint_features(&self.x, &self.a)
    }

    pub fn features_at(&self, exposure: &[f64]) -> Vec<f64> {
        joint_features(&self.x, exposure)
    }
}

pub(crate) fn joint_features(x: &[f64], a: &[f64]) -> Vec<f64> {
    let mut f = Vec::with_capacity(x.len() + a.len());
    f.extend_from_slice(x);
    f.extend_from_slice(a);
    f
}

/// Whether estimation pools partially aligned sources or only uses the
/// intersection of the covariate- and outcome-aligned source sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimationMode {
    Fused,
    #[serde(rename = "nonfused")]
    NonFused,
}

impl EstimationMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            EstimationMode::Fused => "fused",
            EstimationMode::NonFused => "nonfused",
        }
    }
}

impl std::str::FromStr for EstimationMode {
    type Err = CdrfError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "fused" | "fusion" => Ok(EstimationMode::Fused),
            "nonfused" | "no_fusion" | "nofusion" => Ok(EstimationMode::NonFused),
            other => Err(CdrfError::Config(format!("unknown mode `{other}`"))),
        }
    }
}

/// Source sets whose covariate law (`sources_x`) and outcome law given
/// covariates and exposure (`sources_y`) match the target population.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub sources_x: BTreeSet<SourceLabel>,
    pub sources_y: BTreeSet<SourceLabel>,
}

impl FusionConfig {
    pub fn new(
        sources_x: impl IntoIterator<Item = SourceLabel>,
        sources_y: impl IntoIterator<Item = SourceLabel>,
    ) -> Result<Self> {
        let cfg = FusionConfig {
            sources_x: sources_x.into_iter().collect(),
            sources_y: sources_y.into_iter().collect(),
        };
        if cfg.sources_x.is_empty() || cfg.sources_y.is_empty() {
            return Err(CdrfError::invalid("fusion source sets must be nonempty"));
        }
        Ok(cfg)
    }

    pub fn intersection(&self) -> BTreeSet<SourceLabel> {
        self.sources_x.intersection(&self.sources_y).copied().collect()
    }

    /// Non-fused estimation needs at least one perfectly aligned source.
    pub fn validate(&self, mode: EstimationMode) -> Result<()> {
        if mode == EstimationMode::NonFused && self.intersection().is_empty() {
            return Err(CdrfError::EmptySourceSet(
                "covariate and outcome source sets do not intersect".into(),
            ));
        }
        Ok(())
    }

    pub fn in_x(&self, s: SourceLabel, mode: EstimationMode) -> bool {
        match mode {
            EstimationMode::Fused => self.sources_x.contains(&s),
            EstimationMode::NonFused => self.in_both(s),
        }
    }

    pub fn in_y(&self, s: SourceLabel, mode: EstimationMode) -> bool {
        match mode {
            EstimationMode::Fused => self.sources_y.contains(&s),
            EstimationMode::NonFused => self.in_both(s),
        }
    }

    pub fn in_both(&self, s: SourceLabel) -> bool {
        self.sources_x.contains(&s) && self.sources_y.contains(&s)
    }
}

/// Nonempty collection of records with fixed covariate and exposure dims.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    records: Vec<SampleRecord>,
    covariate_dim: usize,
    exposure_dim: usize,
}

impl Dataset {
    pub fn new(records: Vec<SampleRecord>) -> Result<Self> {
        let first = records.first().ok_or(CdrfError::EmptyDataset)?;
        let (r, d) = (first.x.len(), first.a.len());
        if d == 0 {
            return Err(CdrfError::invalid("exposure must have at least one coordinate"));
        }
        for (i, rec) in records.iter().enumerate() {
            if rec.x.len() != r || rec.a.len() != d {
                return Err(CdrfError::invalid(format!(
                    "record {i} has dims ({}, {}), expected ({r}, {d})",
                    rec.x.len(),
                    rec.a.len()
                )));
            }
            if rec.a.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(CdrfError::invalid(format!("exposure out of range at record {i}")));
            }
        }
        Ok(Dataset {
            records,
            covariate_dim: r,
            exposure_dim: d,
        })
    }

    pub fn records(&self) -> &[SampleRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn covariate_dim(&self) -> usize {
        self.covariate_dim
    }

    pub fn exposure_dim(&self) -> usize {
        self.exposure_dim
    }

    /// Distinct source labels present.
    pub fn sources(&self) -> BTreeSet<SourceLabel> {
        self.records.iter().map(|r| r.s).collect()
    }

    /// Records whose source satisfies `keep`, with their original indices.
    pub fn filter_sources(&self, keep: impl Fn(SourceLabel) -> bool) -> Result<(Dataset, Vec<usize>)> {
        let (idx, recs): (Vec<usize>, Vec<SampleRecord>) = self
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| keep(r.s))
            .map(|(i, r)| (i, r.clone()))
            .unzip();
        if recs.is_empty() {
            return Err(CdrfError::EmptySourceSet(
                "no records belong to the requested sources".into(),
            ));
        }
        Ok((Dataset::new(recs)?, idx))
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        Dataset::new(indices.iter().map(|&i| self.records[i].clone()).collect())
    }

    /// Column names: `x1..xr`, then `a` (or `a1..ad`), `y`, `s`.
    pub fn header(&self) -> Vec<String> {
        let mut cols: Vec<String> = (1..=self.covariate_dim).map(|j| format!("x{j}")).collect();
        if self.exposure_dim == 1 {
            cols.push("a".into());
        } else {
            cols.extend((1..=self.exposure_dim).map(|j| format!("a{j}")));
        }
        cols.push("y".into());
        cols.push("s".into());
        cols
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(self.header())?;
        for rec in &self.records {
            let mut row: Vec<String> = rec.x.iter().map(|v| v.to_string()).collect();
            row.extend(rec.a.iter().map(|v| v.to_string()));
            row.push(rec.y.to_string());
            row.push(rec.s.to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Record plus one auxiliary exposure drawn from the reference measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtendedRecord {
    pub base: SampleRecord,
    pub b: Vec<f64>,
}

/// Disjoint nuisance fold (`part1`) and target fold (`part2`), with the
/// original record indices of each.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitPair {
    pub part1: Dataset,
    pub part2: Dataset,
    pub index1: Vec<usize>,
    pub index2: Vec<usize>,
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    parse_dataset(file)
}

/// Parses the dataset CSV. Lines starting with `#` are provenance comments.
pub fn parse_dataset<R: Read>(reader: R) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let indexed = |prefix: &str| -> Vec<usize> {
        let mut cols = Vec::new();
        for j in 1.. {
            match find(&format!("{prefix}{j}")) {
                Some(c) => cols.push(c),
                None => break,
            }
        }
        cols
    };
    let missing = |name: &str| CdrfError::Parse {
        row: 0,
        column: name.to_string(),
        message: "missing column".into(),
    };

    let x_cols = indexed("x");
    let a_cols = match find("a") {
        Some(c) => vec![c],
        None => indexed("a"),
    };
    if a_cols.is_empty() {
        return Err(missing("a"));
    }
    let y_col = find("y").ok_or_else(|| missing("y"))?;
    let s_col = find("s").ok_or_else(|| missing("s"))?;

    let mut records = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        let line = i + 1;
        let num = |c: usize| -> Result<f64> {
            let cell = row.get(c).unwrap_or("");
            cell.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| CdrfError::Parse {
                    row: line,
                    column: headers[c].clone(),
                    message: format!("non-numeric cell `{cell}`"),
                })
        };
        let x = x_cols.iter().map(|&c| num(c)).collect::<Result<Vec<_>>>()?;
        let a = a_cols.iter().map(|&c| num(c)).collect::<Result<Vec<_>>>()?;
        for (&c, v) in a_cols.iter().zip(&a) {
            if !(0.0..=1.0).contains(v) {
                return Err(CdrfError::Parse {
                    row: line,
                    column: headers[c].clone(),
                    message: "exposure out of range".into(),
                });
            }
        }
        let y = num(y_col)?;
        let s_cell = row.get(s_col).unwrap_or("");
        let s = s_cell.parse::<SourceLabel>().map_err(|_| CdrfError::Parse {
            row: line,
            column: "s".into(),
            message: format!("source label `{s_cell}` is not a nonnegative integer"),
        })?;
        records.push(SampleRecord { x, a, y, s });
    }
    Dataset::new(records)
}

/// Seeded uniform split; `part1` receives `round_half_up(fraction * n)`
/// records. Both parts keep file order.
pub fn split_sample(data: &Dataset, fraction: f64, seed: u64) -> Result<SplitPair> {
    let n = data.len();
    if n < 2 {
        return Err(CdrfError::invalid("cannot split fewer than 2 records"));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(CdrfError::invalid(format!("split fraction {fraction} not in (0,1)")));
    }
    let k = ((fraction * n as f64) + 0.5).floor() as usize;
    let k = k.clamp(1, n - 1);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng_from_seed(seed));
    let mut index1 = perm[..k].to_vec();
    let mut index2 = perm[k..].to_vec();
    index1.sort_unstable();
    index2.sort_unstable();
    Ok(SplitPair {
        part1: data.subset(&index1)?,
        part2: data.subset(&index2)?,
        index1,
        index2,
    })
}

/// Pairs each record, in order, with one independent draw from `mu`.
pub fn extend_with_mu_draws(data: &Dataset, mu: &ReferenceMeasure, seed: u64) -> Result<Vec<ExtendedRecord>> {
    if mu.dim() != data.exposure_dim() {
        return Err(CdrfError::DimensionMismatch {
            expected: data.exposure_dim(),
            got: mu.dim(),
        });
    }
    let draws = mu.sample_exposures(data.len(), seed)?;
    Ok(data
        .records()
        .iter()
        .cloned()
        .zip(draws)
        .map(|(base, b)| ExtendedRecord { base, b })
        .collect())
}
