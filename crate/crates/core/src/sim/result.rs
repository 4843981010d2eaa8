//! Time-series results, CSV export and the generic CSV reader used by the
//! plot-data transformation.

use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ResultError {
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    SchemaMismatch { path: PathBuf, message: String },
}

/// One 1 Hz sample of the closed loop.
#[derive(Debug, Clone)]
pub struct ResultRow {
    pub time_s: u64,
    /// Per-node voltage magnitude (dense node order).
    pub v: Vec<f64>,
    /// Per-DER deltas and applied injections.
    pub dp: Vec<f64>,
    pub dq: Vec<f64>,
    pub p_applied: Vec<f64>,
    pub q_applied: Vec<f64>,
    /// Per-node net active/reactive injection (loads plus DERs).
    pub p_net: Vec<f64>,
    pub q_net: Vec<f64>,
    /// Per-node multipliers as held by the node's own agent.
    pub lmin: Vec<f64>,
    pub lmax: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct RunSummary {
    /// Seconds each node spent outside [v_min, v_max] (1 Hz samples).
    pub violation_seconds: Vec<u64>,
    pub max_abs_dq: f64,
    pub max_abs_dp: f64,
    /// Gossip messages delivered over the run.
    pub message_count: u64,
    pub power_flow_solves: u64,
}

#[derive(Debug, Clone)]
pub struct TimeSeriesResult {
    pub node_names: Vec<String>,
    pub der_ids: Vec<String>,
    pub rows: Vec<ResultRow>,
    pub summary: RunSummary,
}

/// Nine significant digits, scientific notation. Deterministic bytes for
/// identical inputs.
pub fn fmt_value(v: f64) -> String {
    format!("{:.8e}", v)
}

impl TimeSeriesResult {
    pub fn header(&self) -> String {
        let mut cols = vec!["time_s".to_string()];
        for n in &self.node_names {
            cols.push(format!("V_{n}"));
        }
        for d in &self.der_ids {
            cols.push(format!("dP_{d}"));
        }
        for d in &self.der_ids {
            cols.push(format!("dQ_{d}"));
        }
        for n in &self.node_names {
            cols.push(format!("P_{n}"));
        }
        for n in &self.node_names {
            cols.push(format!("Q_{n}"));
        }
        for n in &self.node_names {
            cols.push(format!("lmin_{n}"));
        }
        for n in &self.node_names {
            cols.push(format!("lmax_{n}"));
        }
        cols.join(",")
    }

    fn format_row(&self, row: &ResultRow) -> String {
        let mut cols = vec![row.time_s.to_string()];
        for chunk in [&row.v, &row.dp, &row.dq, &row.p_net, &row.q_net, &row.lmin, &row.lmax] {
            cols.extend(chunk.iter().map(|&v| fmt_value(v)));
        }
        cols.join(",")
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::new();
        out.push_str(&self.header());
        out.push('\n');
        for row in &self.rows {
            out.push_str(&self.format_row(row));
            out.push('\n');
        }
        out
    }

    pub fn summary_csv_string(&self) -> String {
        let mut out = String::from("metric,key,value\n");
        for (n, secs) in self.node_names.iter().zip(&self.summary.violation_seconds) {
            out.push_str(&format!("violation_seconds,{n},{secs}\n"));
        }
        out.push_str(&format!(
            "max_abs_dq,all,{}\n",
            fmt_value(self.summary.max_abs_dq)
        ));
        out.push_str(&format!(
            "max_abs_dp,all,{}\n",
            fmt_value(self.summary.max_abs_dp)
        ));
        out.push_str(&format!("message_count,all,{}\n", self.summary.message_count));
        out.push_str(&format!(
            "power_flow_solves,all,{}\n",
            self.summary.power_flow_solves
        ));
        out
    }
}

/// Writes the result CSV plus a `<path>.summary.csv` side file.
pub fn export_csv(result: &TimeSeriesResult, path: &Path) -> Result<(), ResultError> {
    let write = |p: &Path, content: &str| -> Result<(), ResultError> {
        let mut f = std::fs::File::create(p).map_err(|source| ResultError::Io {
            path: p.to_path_buf(),
            source,
        })?;
        f.write_all(content.as_bytes()).map_err(|source| ResultError::Io {
            path: p.to_path_buf(),
            source,
        })
    };
    write(path, &result.to_csv_string())?;
    let mut summary_path = path.as_os_str().to_owned();
    summary_path.push(".summary.csv");
    write(Path::new(&summary_path), &result.summary_csv_string())
}

/// A parsed result CSV, schema-agnostic.
#[derive(Debug, Clone)]
pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl CsvTable {
    pub fn read(path: &Path) -> Result<Self, ResultError> {
        let text = std::fs::read_to_string(path).map_err(|source| ResultError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self, ResultError> {
        let mut lines = text.lines();
        let header: Vec<String> = lines
            .next()
            .ok_or_else(|| ResultError::SchemaMismatch {
                path: path.to_path_buf(),
                message: "empty file".into(),
            })?
            .split(',')
            .map(str::to_string)
            .collect();
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row: Result<Vec<f64>, _> = line.split(',').map(str::parse::<f64>).collect();
            let row = row.map_err(|e| ResultError::SchemaMismatch {
                path: path.to_path_buf(),
                message: format!("line {}: {e}", i + 2),
            })?;
            if row.len() != header.len() {
                return Err(ResultError::SchemaMismatch {
                    path: path.to_path_buf(),
                    message: format!("line {}: {} columns, expected {}", i + 2, row.len(), header.len()),
                });
            }
            rows.push(row);
        }
        Ok(Self { header, rows })
    }

    /// Column indices whose name starts with the given prefix.
    pub fn columns_with_prefix(&self, prefix: &str) -> Vec<usize> {
        self.header
            .iter()
            .enumerate()
            .filter(|(_, h)| h.starts_with(prefix))
            .map(|(i, _)| i)
            .collect()
    }
}
