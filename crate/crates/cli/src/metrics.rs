//! `metrics.csv`: one row per (run, epoch).

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use maskforge::trainer::EpochMetrics;

use crate::error::{CliError, Result};

pub const METRICS_HEADER: &str = "run_id,epoch,lambda,tau,train_acc,test_acc,L_f,Q,lambda_stepped,seconds";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub run_id: usize,
    pub epoch: usize,
    pub lambda: f64,
    pub tau: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub task_loss: f64,
    pub mask_loss: f64,
    pub lambda_stepped: bool,
    pub seconds: f64,
}

impl MetricsRow {
    pub fn from_epoch(run_id: usize, m: &EpochMetrics) -> Self {
        Self {
            run_id,
            epoch: m.epoch,
            lambda: m.lambda,
            tau: m.tau,
            train_acc: m.train_accuracy,
            test_acc: m.test_accuracy,
            task_loss: m.task_loss,
            mask_loss: m.mask_loss,
            lambda_stepped: m.lambda_stepped,
            seconds: m.seconds,
        }
    }

    /// Shortest round-trip decimal for floats, `true`/`false` for the flag.
    pub fn to_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.run_id,
            self.epoch,
            self.lambda,
            self.tau,
            self.train_acc,
            self.test_acc,
            self.task_loss,
            self.mask_loss,
            self.lambda_stepped,
            self.seconds
        )
    }

    fn parse(line: &str) -> std::result::Result<Self, String> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 10 {
            return Err(format!("expected 10 fields, found {}", f.len()));
        }
        let int = |i: usize| f[i].parse::<usize>().map_err(|e| format!("field {}: {e}", i + 1));
        let float = |i: usize| f[i].parse::<f64>().map_err(|e| format!("field {}: {e}", i + 1));
        Ok(Self {
            run_id: int(0)?,
            epoch: int(1)?,
            lambda: float(2)?,
            tau: float(3)?,
            train_acc: float(4)?,
            test_acc: float(5)?,
            task_loss: float(6)?,
            mask_loss: float(7)?,
            lambda_stepped: f[8].parse().map_err(|e| format!("field 9: {e}"))?,
            seconds: float(9)?,
        })
    }
}

/// Append-only CSV sink; the header is written on creation.
pub struct MetricsWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| CliError::io(path, e))?;
        let mut w = Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        };
        w.write_raw(METRICS_HEADER)?;
        w.flush()?;
        Ok(w)
    }

    fn write_raw(&mut self, line: &str) -> Result<()> {
        writeln!(self.out, "{line}").map_err(|e| CliError::io(&self.path, e))
    }

    pub fn append(&mut self, row: &MetricsRow) -> Result<()> {
        self.write_raw(&row.to_line())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| CliError::io(&self.path, e))
    }
}

pub fn write_metrics_csv(rows: &[MetricsRow], path: &Path) -> Result<()> {
    let mut w = MetricsWriter::create(path)?;
    for r in rows {
        w.append(r)?;
    }
    w.flush()
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(CliError::parse(path, "line 1: missing or unexpected header"));
    }
    lines
        .enumerate()
        .map(|(i, l)| MetricsRow::parse(l).map_err(|m| CliError::parse(path, format!("line {}: {m}", i + 2))))
        .collect()
}
