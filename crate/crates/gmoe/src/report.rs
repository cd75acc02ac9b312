//! CSV and JSON reports for training metrics, routing histograms and balance.
//!
//! Floats are written with Rust's shortest round-trip formatting, so equal
//! values always produce equal bytes.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use gmoe_core::losses::LossBreakdown;
use gmoe_core::telemetry::{BalanceReport, ExpertHistogram};
use gmoe_core::train::{CheckpointMetrics, SplitMetrics};
use serde::{Deserialize, Serialize};

pub const METRICS_HEADER: [&str; 8] = ["iteration", "split", "samples", "accuracy", "classification", "importance", "load", "total"];
pub const LAYERS_HEADER: [&str; 5] = ["iteration", "split", "block", "importance_cv2", "load_cv2"];
pub const HISTOGRAM_HEADER: [&str; 4] = ["block", "attribute", "expert", "count"];

/// Append-only writer for `metrics.csv` (one row per split per checkpoint,
/// plus a `train` row carrying the mean training objective) and
/// `layers.csv` (per-layer balance of every evaluated split).
pub struct MetricsWriter {
    metrics: csv::Writer<File>,
    layers: csv::Writer<File>,
}

impl MetricsWriter {
    /// Starts both files afresh with their headers.
    pub fn create(metrics: &Path, layers: &Path) -> std::io::Result<Self> {
        let open = |p: &Path| -> std::io::Result<csv::Writer<File>> {
            File::create(p)?;
            let f = OpenOptions::new().append(true).open(p)?;
            Ok(csv::Writer::from_writer(f))
        };
        let mut w = MetricsWriter {
            metrics: open(metrics)?,
            layers: open(layers)?,
        };
        w.metrics.write_record(METRICS_HEADER)?;
        w.layers.write_record(LAYERS_HEADER)?;
        w.flush()?;
        Ok(w)
    }

    pub fn append(&mut self, m: &CheckpointMetrics) -> std::io::Result<()> {
        let it = m.iteration.to_string();
        if let Some(l) = &m.train_loss {
            self.metrics.write_record([it.as_str(), "train", "", "", &fmt(l.classification), &fmt(l.importance), &fmt(l.load), &fmt(l.total)])?;
        }
        for s in &m.splits {
            self.metrics.write_record([
                it.as_str(),
                &s.split,
                &s.samples.to_string(),
                &fmt(s.accuracy),
                &fmt(s.loss.classification),
                &fmt(s.loss.importance),
                &fmt(s.loss.load),
                &fmt(s.loss.total),
            ])?;
            for l in &s.layers {
                self.layers
                    .write_record([it.as_str(), &s.split, &l.block.to_string(), &fmt(l.importance), &fmt(l.load)])?;
            }
        }
        self.flush()
    }

    pub fn flush(&mut self) -> std::io::Result<()> {
        self.metrics.flush()?;
        self.layers.flush()
    }
}

pub fn fmt(x: f64) -> String {
    format!("{x}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub classification: f64,
    pub importance: f64,
    pub load: f64,
    pub total: f64,
    pub lambda: f64,
}

impl From<&LossBreakdown> for LossRecord {
    fn from(l: &LossBreakdown) -> Self {
        LossRecord {
            classification: l.classification,
            importance: l.importance,
            load: l.load,
            total: l.total,
            lambda: l.lambda,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub block: usize,
    pub importance_cv2: f64,
    pub load_cv2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub split: String,
    pub samples: usize,
    pub accuracy: f64,
    pub loss: LossRecord,
    pub layers: Vec<LayerRecord>,
}

impl From<&SplitMetrics> for SplitRecord {
    fn from(s: &SplitMetrics) -> Self {
        SplitRecord {
            split: s.split.clone(),
            samples: s.samples,
            accuracy: s.accuracy,
            loss: (&s.loss).into(),
            layers: s
                .layers
                .iter()
                .map(|l| LayerRecord {
                    block: l.block,
                    importance_cv2: l.importance,
                    load_cv2: l.load,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub iteration: usize,
    pub train_loss: Option<LossRecord>,
    pub splits: Vec<SplitRecord>,
}

impl From<&CheckpointMetrics> for CheckpointRecord {
    fn from(m: &CheckpointMetrics) -> Self {
        CheckpointRecord {
            iteration: m.iteration,
            train_loss: m.train_loss.as_ref().map(Into::into),
            splits: m.splits.iter().map(Into::into).collect(),
        }
    }
}

/// JSON summary of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub architecture: String,
    pub parameters: usize,
    pub selected_iteration: usize,
    pub selected_checkpoint: String,
    pub selection_splits: Vec<String>,
    pub checkpoints: Vec<CheckpointRecord>,
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> std::io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()
}

pub fn write_histograms_csv(path: &Path, hists: &[ExpertHistogram]) -> csv::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(HISTOGRAM_HEADER)?;
    for h in hists {
        for (label, row) in h.row_labels.iter().zip(&h.counts) {
            for (e, c) in row.iter().enumerate() {
                w.write_record([h.block.to_string(), label.clone(), e.to_string(), c.to_string()])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a histogram CSV back; rows and blocks keep their order of first
/// appearance.
pub fn read_histograms_csv(path: &Path) -> Result<Vec<ExpertHistogram>, ReportError> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != HISTOGRAM_HEADER {
        return Err(ReportError::Format(format!("expected columns {HISTOGRAM_HEADER:?}, found {header:?}")));
    }
    let mut out: Vec<ExpertHistogram> = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let num = |i: usize| -> Result<u64, ReportError> {
            rec[i]
                .parse()
                .map_err(|_| ReportError::Format(format!("row {}: `{}` is not a count", line + 2, &rec[i])))
        };
        let (block, label, expert, count) = (num(0)? as usize, rec[1].to_string(), num(2)? as usize, num(3)?);
        let pos = match out.iter().position(|h| h.block == block) {
            Some(p) => p,
            None => {
                out.push(ExpertHistogram::new(block, Vec::new(), 0));
                out.len() - 1
            }
        };
        let h = &mut out[pos];
        let row = match h.row_labels.iter().position(|l| *l == label) {
            Some(r) => r,
            None => {
                h.row_labels.push(label);
                h.counts.push(Vec::new());
                h.counts.len() - 1
            }
        };
        let cells = &mut h.counts[row];
        if cells.len() <= expert {
            cells.resize(expert + 1, 0);
        }
        cells[expert] += count;
    }
    for h in &mut out {
        let width = h.counts.iter().map(Vec::len).max().unwrap_or(0);
        h.counts.iter_mut().for_each(|r| r.resize(width, 0));
    }
    Ok(out)
}

pub fn write_balance_csv(path: &Path, report: &BalanceReport) -> csv::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let experts = report.layers.iter().map(|l| l.shares.len()).max().unwrap_or(0);
    let mut header = vec!["block".to_string(), "tokens".into(), "importance_cv2".into(), "load_cv2".into()];
    header.extend((0..experts).map(|e| format!("share_{e}")));
    w.write_record(&header)?;
    for l in &report.layers {
        let mut row = vec![l.block.to_string(), l.tokens.to_string(), fmt(l.importance), fmt(l.load)];
        row.extend(l.shares.iter().map(|&s| fmt(s)));
        row.resize(header.len(), String::new());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed report: {0}")]
    Format(String),
}

/// Reads a whole CSV as strings, header included.
pub fn read_csv_rows(path: &Path) -> Result<Vec<Vec<String>>, ReportError> {
    let text = fs::read_to_string(path)?;
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_reader(text.as_bytes());
    r.records()
        .map(|rec| Ok(rec?.iter().map(str::to_string).collect()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.csv");
        let mut a = ExpertHistogram::new(0, vec!["pixel".into(), "feature".into()], 3);
        a.counts = vec![vec![1, 0, 5], vec![0, 7, 0]];
        let mut b = ExpertHistogram::new(2, vec!["noise".into()], 3);
        b.counts = vec![vec![2, 2, 2]];
        write_histograms_csv(&p, &[a.clone(), b.clone()]).unwrap();
        assert_eq!(read_histograms_csv(&p).unwrap(), vec![a, b]);
    }

    #[test]
    fn histogram_csv_rejects_foreign_columns() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.csv");
        fs::write(&p, "a,b\n1,2\n").unwrap();
        assert!(matches!(read_histograms_csv(&p), Err(ReportError::Format(_))));
    }

    #[test]
    fn float_formatting_round_trips() {
        for x in [0.1, 1.0 / 3.0, 1e-300, 0.0, 123456.789] {
            assert_eq!(fmt(x).parse::<f64>().unwrap().to_bits(), x.to_bits());
        }
    }
}
