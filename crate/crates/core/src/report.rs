//! Run serialization and cross-run trade-off tables.
//!
//! JSON output is canonical: object keys sorted, two-space indentation,
//! integers verbatim, every other number printed with 17 significant digits,
//! trailing newline. Equal records always produce equal bytes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::fedproto::ArchitectureKind;
use crate::kpi::{KpiSample, RunRecord};

pub const CSV_HEADER: [&str; 10] = [
    "round",
    "node",
    "accuracy",
    "precision",
    "recall",
    "f1",
    "loss",
    "bytes_sent",
    "bytes_received",
    "flops",
];

/// KPIs written as `series_<name>.tsv`.
pub const SERIES: [&str; 8] = [
    "accuracy",
    "precision",
    "recall",
    "f1",
    "loss",
    "bytes_sent",
    "bytes_received",
    "flops",
];

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("duplicate run for {arch} with {n} participants")]
    DuplicateRun { arch: ArchitectureKind, n: usize },
    #[error("no runs to tabulate")]
    Empty,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ReportError + '_ {
    move |source| ReportError::Io {
        path: path.to_owned(),
        source,
    }
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), ReportError> {
    fs::write(path, contents).map_err(io_err(path))
}

pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

fn push_indent(out: &mut String, depth: usize) {
    for _ in 0..depth {
        out.push_str("  ");
    }
}

fn write_canonical(value: &Value, depth: usize, out: &mut String) -> Result<(), ReportError> {
    match value {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            // serde_json never stores non-finite floats
            if let (true, Some(v)) = (n.is_f64(), n.as_f64()) {
                out.push_str(&format_float(v));
            } else {
                out.push_str(&n.to_string());
            }
        }
        Value::String(s) => out.push_str(&serde_json::to_string(s)?),
        Value::Array(items) if items.is_empty() => out.push_str("[]"),
        Value::Array(items) => {
            out.push_str("[\n");
            for (i, item) in items.iter().enumerate() {
                push_indent(out, depth + 1);
                write_canonical(item, depth + 1, out)?;
                out.push_str(if i + 1 < items.len() { ",\n" } else { "\n" });
            }
            push_indent(out, depth);
            out.push(']');
        }
        Value::Object(map) if map.is_empty() => out.push_str("{}"),
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push_str("{\n");
            for (i, key) in keys.iter().enumerate() {
                push_indent(out, depth + 1);
                out.push_str(&serde_json::to_string(key)?);
                out.push_str(": ");
                write_canonical(&map[*key], depth + 1, out)?;
                out.push_str(if i + 1 < keys.len() { ",\n" } else { "\n" });
            }
            push_indent(out, depth);
            out.push('}');
        }
    }
    Ok(())
}

pub fn to_canonical_json<T: Serialize>(value: &T) -> Result<String, ReportError> {
    let value = serde_json::to_value(value)?;
    let mut out = String::new();
    write_canonical(&value, 0, &mut out)?;
    out.push('\n');
    Ok(out)
}

pub fn emit_json(record: &RunRecord, path: &Path) -> Result<(), ReportError> {
    write_file(path, to_canonical_json(record)?.as_bytes())
}

pub fn read_record(path: &Path) -> Result<RunRecord, ReportError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(serde_json::from_str(&text)?)
}

fn csv_row(sample: &KpiSample) -> [String; 10] {
    [
        sample.round.to_string(),
        sample
            .node
            .map_or_else(|| "avg".to_owned(), |n| n.to_string()),
        sample.accuracy.to_string(),
        sample.precision.to_string(),
        sample.recall.to_string(),
        sample.f1.to_string(),
        sample.loss.to_string(),
        sample.bytes_sent.to_string(),
        sample.bytes_received.to_string(),
        sample.flops.to_string(),
    ]
}

/// One row per (round, node) followed by the round's `avg` row.
pub fn record_csv(record: &RunRecord) -> Result<String, ReportError> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record(CSV_HEADER)?;
    for round in &record.rounds {
        for sample in round.nodes.iter().chain(std::iter::once(&round.average)) {
            writer.write_record(csv_row(sample))?;
        }
    }
    let bytes = writer
        .into_inner()
        .map_err(|e| ReportError::Csv(e.into_error().into()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn emit_csv(record: &RunRecord, path: &Path) -> Result<(), ReportError> {
    write_file(path, record_csv(record)?.as_bytes())
}

/// Federation-average `round<TAB>value` lines for one KPI, or `None` for an
/// unknown KPI name.
pub fn series_tsv(record: &RunRecord, kpi: &str) -> Option<String> {
    let value = |s: &KpiSample| -> Option<String> {
        Some(match kpi {
            "accuracy" => s.accuracy.to_string(),
            "precision" => s.precision.to_string(),
            "recall" => s.recall.to_string(),
            "f1" => s.f1.to_string(),
            "loss" => s.loss.to_string(),
            "bytes_sent" => s.bytes_sent.to_string(),
            "bytes_received" => s.bytes_received.to_string(),
            "flops" => s.flops.to_string(),
            _ => return None,
        })
    };
    let mut out = String::new();
    for round in &record.rounds {
        out.push_str(&format!("{}\t{}\n", round.round, value(&round.average)?));
    }
    Some(out)
}

/// Writes `record.json`, `record.csv` and one `series_<kpi>.tsv` per KPI into
/// `<out>/<arch>_n<N>_s<seed>/` and returns that directory.
pub fn write_run_outputs(record: &RunRecord, out: &Path) -> Result<PathBuf, ReportError> {
    let dir = out.join(record.config.run_name());
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    emit_json(record, &dir.join("record.json"))?;
    emit_csv(record, &dir.join("record.csv"))?;
    for kpi in SERIES {
        let body = series_tsv(record, kpi).expect("known series");
        write_file(&dir.join(format!("series_{kpi}.tsv")), body.as_bytes())?;
    }
    Ok(dir)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffRow {
    pub arch: ArchitectureKind,
    pub n_participants: usize,
    pub final_accuracy: f64,
    pub final_loss: f64,
    pub convergence_round: Option<usize>,
    pub total_bytes: u64,
    pub total_flops: u64,
}

impl TradeoffRow {
    pub fn from_record(record: &RunRecord) -> Self {
        Self {
            arch: record.config.arch,
            n_participants: record.config.n_participants,
            final_accuracy: record.summary.final_accuracy,
            final_loss: record.summary.final_loss,
            convergence_round: record.summary.convergence_round,
            total_bytes: record.summary.total_bytes,
            total_flops: record.summary.total_flops,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffTable {
    pub convergence_threshold: f64,
    pub rows: Vec<TradeoffRow>,
}

/// One row per run, ordered by architecture then participant count.
pub fn tradeoff_table(records: &[RunRecord]) -> Result<TradeoffTable, ReportError> {
    let first = records.first().ok_or(ReportError::Empty)?;
    let mut rows: Vec<TradeoffRow> = records.iter().map(TradeoffRow::from_record).collect();
    rows.sort_by_key(|r| (r.arch, r.n_participants));
    if let Some(w) = rows
        .windows(2)
        .find(|w| (w[0].arch, w[0].n_participants) == (w[1].arch, w[1].n_participants))
    {
        return Err(ReportError::DuplicateRun {
            arch: w[0].arch,
            n: w[0].n_participants,
        });
    }
    Ok(TradeoffTable {
        convergence_threshold: first.summary.convergence_threshold,
        rows,
    })
}

fn mark(is_best: bool) -> &'static str {
    if is_best {
        "*"
    } else {
        " "
    }
}

impl TradeoffTable {
    /// Fixed-width text rendering; `*` marks the best value in each column.
    pub fn render(&self) -> String {
        let best_acc = self
            .rows
            .iter()
            .map(|r| r.final_accuracy)
            .fold(f64::MIN, f64::max);
        let best_loss = self
            .rows
            .iter()
            .map(|r| r.final_loss)
            .fold(f64::MAX, f64::min);
        let best_conv = self.rows.iter().filter_map(|r| r.convergence_round).min();
        let best_bytes = self.rows.iter().map(|r| r.total_bytes).min().unwrap_or(0);
        let best_flops = self.rows.iter().map(|r| r.total_flops).min().unwrap_or(0);

        let mut out = format!(
            "{:<5} {:>3} {:>13} {:>11} {:>12} {:>16} {:>18}\n",
            "arch",
            "N",
            "accuracy(%)",
            "loss",
            format!("round@{:.2}", self.convergence_threshold),
            "bytes",
            "flops"
        );
        for r in &self.rows {
            let conv = r
                .convergence_round
                .map_or_else(|| "-".to_owned(), |c| c.to_string());
            out.push_str(&format!(
                "{:<5} {:>3} {:>12.2}{} {:>10.6}{} {:>11}{} {:>15}{} {:>17}{}\n",
                r.arch.to_string(),
                r.n_participants,
                100.0 * r.final_accuracy,
                mark(r.final_accuracy == best_acc),
                r.final_loss,
                mark(r.final_loss == best_loss),
                conv,
                mark(r.convergence_round.is_some() && r.convergence_round == best_conv),
                r.total_bytes,
                mark(r.total_bytes == best_bytes),
                r.total_flops,
                mark(r.total_flops == best_flops),
            ));
        }
        out
    }
}

/// Writes `tradeoff.json` and `tradeoff.txt` into `out`.
pub fn write_tradeoff(table: &TradeoffTable, out: &Path) -> Result<(), ReportError> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    write_file(
        &out.join("tradeoff.json"),
        to_canonical_json(table)?.as_bytes(),
    )?;
    write_file(&out.join("tradeoff.txt"), table.render().as_bytes())
}
