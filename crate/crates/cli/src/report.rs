//! Report rows and the small CSV reader/writer used for every table on disk.
//!
//! Tables start with a `# config_hash=<hex>` line. Floats use Rust's
//! shortest round-trip formatting, so re-running a command reproduces the
//! files byte for byte and reading them back is lossless.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use lyt_core::trainer::{StepRecord, TrainLog};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// One evaluated model on one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub dataset: String,
    /// Free-form run label (`main`, or an ablation cell).
    pub variant: String,
    pub seed: u64,
    pub config_hash: String,
    /// Selected latent dims in rank order.
    pub selected: Vec<usize>,
    /// Summed pairwise MI (nats) between selected dims and state variables.
    pub mi_total: f64,
    pub amse: f64,
    pub r2_mean: f64,
    pub id: f64,
    pub id_mean: f64,
    pub id_std: f64,
    pub id_splits: Vec<f64>,
    /// Intrinsic dimension of the ground-truth observables themselves.
    pub id_truth: f64,
    pub err_k: f64,
    pub static_k: f64,
    /// Long-horizon (4K-step) rollout error.
    pub err_4k: f64,
    pub static_4k: f64,
    pub overlap: f64,
    /// Measured mean hinge along rollouts, whether or not it was trained on.
    pub measured_lyap: f64,
    pub flops: u64,
    pub params: usize,
}

pub const REPORT_HEADER: &str = "dataset,variant,seed,config_hash,selected,mi_total,amse,r2_mean,id,id_mean,id_std,id_splits,id_truth,err_k,static_k,err_4k,static_4k,overlap,measured_lyap,flops,params";

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(";")
}

fn split<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(';')
        .map(|x| x.parse().map_err(|_| CliError::Input(format!("bad {what} entry {x:?}"))))
        .collect()
}

impl ReportRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.dataset,
            self.variant,
            self.seed,
            self.config_hash,
            join(&self.selected),
            self.mi_total,
            self.amse,
            self.r2_mean,
            self.id,
            self.id_mean,
            self.id_std,
            join(&self.id_splits),
            self.id_truth,
            self.err_k,
            self.static_k,
            self.err_4k,
            self.static_4k,
            self.overlap,
            self.measured_lyap,
            self.flops,
            self.params
        )
    }

    pub fn from_record(t: &Table, r: usize) -> Result<ReportRow> {
        let s = |c: &str| t.get(r, c);
        let f = |c: &str| t.float(r, c);
        Ok(ReportRow {
            dataset: s("dataset")?.to_string(),
            variant: s("variant")?.to_string(),
            seed: t.parse(r, "seed")?,
            config_hash: s("config_hash")?.to_string(),
            selected: split(s("selected")?, "selected")?,
            mi_total: f("mi_total")?,
            amse: f("amse")?,
            r2_mean: f("r2_mean")?,
            id: f("id")?,
            id_mean: f("id_mean")?,
            id_std: f("id_std")?,
            id_splits: split(s("id_splits")?, "id_splits")?,
            id_truth: f("id_truth")?,
            err_k: f("err_k")?,
            static_k: f("static_k")?,
            err_4k: f("err_4k")?,
            static_4k: f("static_4k")?,
            overlap: f("overlap")?,
            measured_lyap: f("measured_lyap")?,
            flops: t.parse(r, "flops")?,
            params: t.parse(r, "params")?,
        })
    }
}

/// Rows of a report table, all sharing one config hash line.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentReport {
    pub config_hash: String,
    pub rows: Vec<ReportRow>,
}

impl ExperimentReport {
    pub fn to_csv(&self) -> String {
        let body: Vec<String> = self.rows.iter().map(ReportRow::to_csv).collect();
        table_text(&self.config_hash, REPORT_HEADER, &body)
    }

    pub fn load(path: &Path) -> Result<ExperimentReport> {
        let t = Table::load(path)?;
        let rows = (0..t.rows.len())
            .map(|r| ReportRow::from_record(&t, r))
            .collect::<Result<_>>()?;
        Ok(ExperimentReport {
            config_hash: t.config_hash,
            rows,
        })
    }
}

/// Hash line, header line, then one line per row.
pub fn table_text(config_hash: &str, header: &str, rows: &[String]) -> String {
    let mut out = format!("# config_hash={config_hash}\n{header}\n");
    for r in rows {
        writeln!(out, "{r}").expect("write to string");
    }
    out
}

/// A parsed CSV table: no quoting, comma separated, `#` lines skipped except
/// for the config hash.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub config_hash: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn from_text(text: &str) -> Result<Table> {
        let mut t = Table::default();
        for line in text.lines() {
            if let Some(rest) = line.strip_prefix('#') {
                if let Some(h) = rest.trim().strip_prefix("config_hash=") {
                    t.config_hash = h.to_string();
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let fields: Vec<String> = line.split(',').map(str::to_string).collect();
            if t.header.is_empty() {
                t.header = fields;
            } else if fields.len() != t.header.len() {
                return Err(CliError::Input(format!(
                    "row has {} fields, header has {}",
                    fields.len(),
                    t.header.len()
                )));
            } else {
                t.rows.push(fields);
            }
        }
        if t.header.is_empty() {
            return Err(CliError::Input("table has no header".into()));
        }
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Table> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Table::from_text(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
    }

    pub fn column(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Input(format!("missing column {name:?}")))
    }

    pub fn get(&self, row: usize, col: &str) -> Result<&str> {
        Ok(&self.rows[row][self.column(col)?])
    }

    pub fn parse<T: std::str::FromStr>(&self, row: usize, col: &str) -> Result<T> {
        let v = self.get(row, col)?;
        v.parse()
            .map_err(|_| CliError::Input(format!("column {col:?}: cannot parse {v:?}")))
    }

    pub fn float(&self, row: usize, col: &str) -> Result<f64> {
        self.parse(row, col)
    }
}

/// Reads back a log written by [`TrainLog::write_csv`].
pub fn read_train_log(path: &Path) -> Result<TrainLog> {
    let t = Table::load(path)?;
    let mut records = Vec::with_capacity(t.rows.len());
    for r in 0..t.rows.len() {
        records.push(StepRecord {
            step: t.parse(r, "step")?,
            l_rec: t.float(r, "l_rec")?,
            l_pred: t.float(r, "l_pred")?,
            l_lyap: t.float(r, "l_lyap")?,
            l_total: t.float(r, "l_total")?,
            gnorm: t.float(r, "gnorm")?,
            ms: t.float(r, "ms")?,
        });
    }
    Ok(TrainLog {
        config_hash: t.config_hash,
        records,
    })
}

pub fn train_log_text(log: &TrainLog) -> String {
    let mut buf = Vec::new();
    log.write_csv(&mut buf).expect("write to memory");
    String::from_utf8(buf).expect("CSV is UTF-8")
}
