//! Summary table over the suites of one output directory.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Serialize;

use crate::output::{self, Summary};

/// Aggregate row of the report table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportLine {
    pub suite: String,
    pub status: String,
    pub worst_error: Option<f64>,
    pub runtime_seconds: Option<f64>,
    pub rows: Option<usize>,
}

/// Reads every suite summary under `dir`. Errors when none exist.
pub fn collect_report(dir: &Path) -> Result<Vec<ReportLine>> {
    if !dir.is_dir() {
        bail!("{} is not a directory", dir.display());
    }
    let mut lines = Vec::new();
    let mut found = 0;
    for suite in output::SUITES {
        let path = output::summary_path(dir, suite);
        if !path.exists() {
            lines.push(ReportLine {
                suite: suite.to_owned(),
                status: "missing".into(),
                worst_error: None,
                runtime_seconds: None,
                rows: None,
            });
            continue;
        }
        let text = fs::read_to_string(&path).with_context(|| format!("cannot read {}", path.display()))?;
        let summary: Summary = serde_json::from_str(&text).with_context(|| format!("malformed {}", path.display()))?;
        let jsonl = output::jsonl_path(dir, suite);
        let counted = fs::read_to_string(&jsonl)
            .with_context(|| format!("cannot read {}", jsonl.display()))?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .count();
        if counted != summary.rows {
            bail!("{} has {counted} rows but its summary records {}", jsonl.display(), summary.rows);
        }
        found += 1;
        lines.push(ReportLine {
            suite: suite.to_owned(),
            status: if summary.pass { "pass" } else { "fail" }.into(),
            worst_error: Some(summary.worst_error),
            runtime_seconds: Some(summary.runtime_seconds),
            rows: Some(counted),
        });
    }
    if found == 0 {
        bail!("no suite summaries found in {}", dir.display());
    }
    Ok(lines)
}

pub fn render_report(lines: &[ReportLine]) -> String {
    let mut out = format!("{:<10} {:<8} {:>14} {:>11} {:>8}\n", "suite", "status", "worst_error", "runtime_s", "rows");
    for l in lines {
        let fmt_f = |v: Option<f64>, prec: usize| v.map_or_else(|| "-".to_owned(), |x| format!("{x:.prec$e}"));
        out.push_str(&format!(
            "{:<10} {:<8} {:>14} {:>11} {:>8}\n",
            l.suite,
            l.status,
            fmt_f(l.worst_error, 3),
            l.runtime_seconds.map_or_else(|| "-".to_owned(), |x| format!("{x:.2}")),
            l.rows.map_or_else(|| "-".to_owned(), |n| n.to_string()),
        ));
    }
    out
}
