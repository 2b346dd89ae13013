//! Metrics logging: an append-only CSV of per-step records plus a JSON
//! summary document per run.
//!
//! The CSV header is fixed so runs stay diffable; unmeasured quantities
//! are empty cells. Records are also kept in memory so pipelines can
//! inspect curves (threshold crossings, monotonicity) without re-reading
//! the file.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "epoch,step,loss,accuracy,chi,phi,lr,wall_secs";

/// One logged step. `step` counts optimizer updates across the whole run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: Option<f64>,
    pub accuracy: Option<f64>,
    pub chi: Option<f64>,
    pub phi: Option<f64>,
    pub lr: Option<f64>,
    pub wall_secs: Option<f64>,
}

fn cell(value: Option<f64>) -> String {
    value.map(|v| v.to_string()).unwrap_or_default()
}

fn parse_cell(s: &str, line: usize) -> Result<Option<f64>> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse::<f64>()
        .map(Some)
        .map_err(|_| Error::Dataset(format!("metrics line {line}: bad number {s:?}")))
}

impl MetricsRecord {
    fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch,
            self.step,
            cell(self.loss),
            cell(self.accuracy),
            cell(self.chi),
            cell(self.phi),
            cell(self.lr),
            cell(self.wall_secs),
        )
    }
}

/// Append-only metrics log. With a backing file every record is flushed
/// as written, so an aborted run still leaves a valid CSV behind.
pub struct MetricsLog {
    records: Vec<MetricsRecord>,
    writer: Option<BufWriter<File>>,
}

impl MetricsLog {
    /// A log backed by a CSV file (created, header written).
    pub fn to_path(path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut writer = BufWriter::new(File::create(path)?);
        writeln!(writer, "{CSV_HEADER}")?;
        writer.flush()?;
        Ok(Self {
            records: Vec::new(),
            writer: Some(writer),
        })
    }

    /// A log that only accumulates in memory.
    pub fn in_memory() -> Self {
        Self {
            records: Vec::new(),
            writer: None,
        }
    }

    pub fn push(&mut self, record: MetricsRecord) -> Result<()> {
        if let Some(writer) = &mut self.writer {
            writeln!(writer, "{}", record.to_csv_line())?;
            writer.flush()?;
        }
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[MetricsRecord] {
        &self.records
    }

    pub fn last(&self) -> Option<&MetricsRecord> {
        self.records.last()
    }
}

/// Reads a metrics CSV back into records (used by tests and the sweep
/// summaries).
pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header == CSV_HEADER => {}
        _ => {
            return Err(Error::Dataset(format!(
                "{}: missing metrics header",
                path.display()
            )))
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 8 {
            return Err(Error::Dataset(format!(
                "{}: line {} has {} cells, expected 8",
                path.display(),
                i + 1,
                cells.len()
            )));
        }
        let int = |s: &str| -> Result<usize> {
            s.parse()
                .map_err(|_| Error::Dataset(format!("metrics line {}: bad index {s:?}", i + 1)))
        };
        out.push(MetricsRecord {
            epoch: int(cells[0])?,
            step: int(cells[1])?,
            loss: parse_cell(cells[2], i + 1)?,
            accuracy: parse_cell(cells[3], i + 1)?,
            chi: parse_cell(cells[4], i + 1)?,
            phi: parse_cell(cells[5], i + 1)?,
            lr: parse_cell(cells[6], i + 1)?,
            wall_secs: parse_cell(cells[7], i + 1)?,
        });
    }
    Ok(out)
}

/// Writes a run summary as pretty JSON.
pub fn write_summary(path: &Path, summary: &impl Serialize) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut text = serde_json::to_string_pretty(summary)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}
