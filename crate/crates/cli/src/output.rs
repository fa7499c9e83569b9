//! Report files: JSONL rows, CSV aggregates, per-suite summaries and stored
//! predictors.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use epsoracle_core::trainer::{Bounds, FittedFamily, GridPredictor, PredictorFunction, RbfPredictor};
use serde::{Deserialize, Serialize};

/// Version of the CSV headers below.
pub const CSV_SCHEMA_VERSION: u32 = 1;

pub const SUITES: [&str; 4] = ["theorem", "identity", "train", "sample"];

/// One JSONL report row.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub suite: String,
    pub config_hash: String,
    pub seed: u64,
    pub method: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub check: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub xt: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abs_err: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rel_err: Option<f64>,
    /// The quantity the gate compares with `tol`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stderr: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_bound: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ess: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reliable: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_evals: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    /// Gated rows only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pass: Option<bool>,
}

impl Row {
    pub fn new(suite: &str, config_hash: &str, seed: u64, method: &str) -> Self {
        Self {
            suite: suite.to_owned(),
            config_hash: config_hash.to_owned(),
            seed,
            method: method.to_owned(),
            ..Self::default()
        }
    }
}

/// Serialized writer of JSONL rows.
pub struct JsonlWriter {
    inner: BufWriter<File>,
    rows: usize,
}

impl JsonlWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
        Ok(Self {
            inner: BufWriter::new(file),
            rows: 0,
        })
    }

    pub fn write(&mut self, row: &Row) -> Result<()> {
        serde_json::to_writer(&mut self.inner, row)?;
        self.inner.write_all(b"\n")?;
        self.rows += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<usize> {
        self.inner.flush()?;
        Ok(self.rows)
    }
}

/// One line of a per-timestep CSV aggregate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub method: Option<String>,
    pub t: usize,
    pub n_probes: usize,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub pass_rate: f64,
}

/// Groups gated rows by `(method, t)`.
pub fn aggregate(rows: &[Row], with_method: bool) -> Vec<AggregateRow> {
    let mut groups: BTreeMap<(String, usize), Vec<&Row>> = BTreeMap::new();
    for r in rows {
        let (Some(t), Some(_)) = (r.t, r.pass) else { continue };
        if r.probe.is_none() {
            continue;
        }
        let key = if with_method { r.method.clone() } else { String::new() };
        groups.entry((key, t)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((method, t), rows)| {
            let n = rows.len();
            let max = |f: fn(&Row) -> Option<f64>| rows.iter().filter_map(|r| f(r)).fold(0.0, f64::max);
            AggregateRow {
                method: with_method.then_some(method),
                t,
                n_probes: n,
                max_abs_err: max(|r| r.abs_err),
                max_rel_err: max(|r| r.rel_err),
                pass_rate: rows.iter().filter(|r| r.pass == Some(true)).count() as f64 / n as f64,
            }
        })
        .collect()
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("cannot create {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// A named gate and its outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gate {
    pub name: String,
    pub pass: bool,
    pub value: f64,
    pub threshold: f64,
}

impl Gate {
    /// Passes when `value <= threshold`.
    pub fn at_most(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            pass: value <= threshold,
            value,
            threshold,
        }
    }

    /// Passes when `value >= threshold`.
    pub fn at_least(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            pass: value >= threshold,
            value,
            threshold,
        }
    }
}

/// `<suite>_summary.json`. The timestamp and runtime live only here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub suite: String,
    pub pass: bool,
    pub worst_error: f64,
    pub runtime_seconds: f64,
    /// Seconds since the Unix epoch.
    pub generated_at: u64,
    pub config_hash: String,
    pub seed: u64,
    pub rows: usize,
    pub csv_schema_version: u32,
    pub gates: Vec<Gate>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

pub fn jsonl_path(dir: &Path, suite: &str) -> PathBuf {
    dir.join(format!("{suite}.jsonl"))
}

pub fn csv_path(dir: &Path, suite: &str) -> PathBuf {
    dir.join(format!("{suite}.csv"))
}

pub fn summary_path(dir: &Path, suite: &str) -> PathBuf {
    dir.join(format!("{suite}_summary.json"))
}

pub fn predictor_path(dir: &Path, t: usize) -> PathBuf {
    dir.join(format!("t{t:04}.json"))
}

/// Serializable form of a fitted predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum StoredPredictor {
    Grid {
        t: usize,
        lower: Vec<f64>,
        upper: Vec<f64>,
        cells: Vec<usize>,
        values: Vec<f64>,
        counts: Vec<u64>,
        filled: Vec<bool>,
    },
    Rbf {
        t: usize,
        centers: Vec<Vec<f64>>,
        bandwidth: f64,
        coefficients: Vec<Vec<f64>>,
    },
}

impl From<&PredictorFunction> for StoredPredictor {
    fn from(f: &PredictorFunction) -> Self {
        match &f.family {
            FittedFamily::Grid(g) => Self::Grid {
                t: f.t,
                lower: g.bounds().lower.clone(),
                upper: g.bounds().upper.clone(),
                cells: g.cells().to_vec(),
                values: g.values().to_vec(),
                counts: g.counts().to_vec(),
                filled: g.filled().to_vec(),
            },
            FittedFamily::Rbf(r) => Self::Rbf {
                t: f.t,
                centers: r.centers().to_vec(),
                bandwidth: r.bandwidth(),
                coefficients: r.coefficients().to_vec(),
            },
        }
    }
}

impl StoredPredictor {
    pub fn into_predictor(self) -> Result<PredictorFunction> {
        Ok(match self {
            Self::Grid {
                t,
                lower,
                upper,
                cells,
                values,
                counts,
                filled,
            } => PredictorFunction {
                t,
                family: FittedFamily::Grid(GridPredictor::from_parts(Bounds { lower, upper }, cells, values, counts, filled)?),
            },
            Self::Rbf {
                t,
                centers,
                bandwidth,
                coefficients,
            } => PredictorFunction {
                t,
                family: FittedFamily::Rbf(RbfPredictor::from_parts(centers, bandwidth, coefficients)?),
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aggregate_groups_gated_probe_rows() {
        let mut rows = Vec::new();
        for (t, probe, abs, pass) in [(1, 0, 1e-9, true), (1, 1, 3e-9, false), (5, 0, 2e-9, true)] {
            let mut r = Row::new("identity", "h", 0, "closed_form");
            r.t = Some(t);
            r.probe = Some(probe);
            r.abs_err = Some(abs);
            r.rel_err = Some(abs / 2.0);
            r.pass = Some(pass);
            rows.push(r);
        }
        rows.push(Row::new("identity", "h", 0, "closed_form"));
        let agg = aggregate(&rows, false);
        assert_eq!(agg.len(), 2);
        assert_eq!(agg[0].n_probes, 2);
        assert_eq!(agg[0].max_abs_err, 3e-9);
        assert_eq!(agg[0].pass_rate, 0.5);
        assert_eq!(agg[1].t, 5);
    }

    #[test]
    fn rows_skip_absent_fields() {
        let mut r = Row::new("theorem", "abc", 3, "quadrature");
        r.t = Some(2);
        let text = serde_json::to_string(&r).unwrap();
        assert_eq!(text, r#"{"suite":"theorem","config_hash":"abc","seed":3,"method":"quadrature","t":2}"#);
    }
}
