//! Per-round fairness reports and JSONL serialization.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
}

/// One training round's evaluation. The top-level metrics are the trusted
/// evaluator's view of the freshly aggregated model over the pooled train
/// rows; `test` is the same model on the held-out split; `exchange` records
/// what actually crossed the secure channels during the round (and therefore
/// refers to the previous round's model).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub round: u32,
    pub acc_global: f64,
    pub eod: Option<f64>,
    pub spd: Option<f64>,
    pub std_acc: f64,
    pub per_client: Vec<ClientRow>,
    pub test: EvalBlock,
    pub exchange: ExchangeBlock,
    pub theta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRow {
    pub k: u16,
    pub n_k: u64,
    pub acc: f64,
    pub f_k: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalBlock {
    pub acc: f64,
    pub eod: Option<f64>,
    pub spd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExchangeBlock {
    /// Secure-summed global fairness metric (previous round's model).
    pub f_global: f64,
    /// Secure-summed weighted mean accuracy.
    pub acc_bar: f64,
    /// Mean of the client metric gaps.
    pub mean_gap: f64,
    /// Denominator of the weighted model average.
    pub weight_sum: f64,
}

pub fn write_jsonl<W: Write>(mut w: W, rows: &[ReportRow]) -> Result<(), ReportError> {
    for row in rows {
        serde_json::to_writer(&mut w, row).map_err(std::io::Error::other)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn write_jsonl_file(path: &Path, rows: &[ReportRow]) -> Result<(), ReportError> {
    let file = std::fs::File::create(path)?;
    let mut buf = std::io::BufWriter::new(file);
    write_jsonl(&mut buf, rows)?;
    buf.flush()?;
    Ok(())
}

pub fn read_jsonl_file(path: &Path) -> Result<Vec<ReportRow>, ReportError> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut rows = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(
            serde_json::from_str(&line).map_err(|source| ReportError::Parse {
                line: i + 1,
                source,
            })?,
        );
    }
    Ok(rows)
}
