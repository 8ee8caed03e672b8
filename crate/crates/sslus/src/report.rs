//! CSV and JSON outputs written by the commands.

use std::path::Path;

use sslus_core::losses::LossReport;
use sslus_core::metrics::MetricsReport;
use sslus_core::training::{EpochRecord, LogRow};

use crate::error::{Error, Result};

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))
}

fn finish(mut w: csv::Writer<std::fs::File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

pub fn write_loss_csv(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut w = writer(path)?;
    let wrap = |e: csv::Error| Error::format(path, e.to_string());
    w.write_record(LossReport::CSV_HEADER.split(','))
        .map_err(wrap)?;
    for r in rows {
        let mut rec = vec![r.epoch.to_string(), r.step.to_string()];
        rec.extend(r.report.components().into_iter().map(cell));
        w.write_record(&rec).map_err(wrap)?;
    }
    finish(w, path)
}

/// Per-image rows, then `mean` and `sd` rows.
pub fn write_metrics_csv(path: &Path, report: &MetricsReport) -> Result<()> {
    let mut w = writer(path)?;
    let wrap = |e: csv::Error| Error::format(path, e.to_string());
    w.write_record(["id", "dsc", "jc", "hd", "ppv", "rec"])
        .map_err(wrap)?;
    for m in &report.per_image {
        let vals = [m.dsc, m.jc, m.hd, m.ppv, m.rec];
        let mut rec = vec![m.id.clone()];
        rec.extend(vals.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(wrap)?;
    }
    let a = &report.aggregate;
    let cols = [a.dsc, a.jc, a.hd, a.ppv, a.rec];
    let mut mean = vec![String::from("mean")];
    mean.extend(cols.iter().map(|c| c.mean.to_string()));
    let mut sd = vec![String::from("sd")];
    sd.extend(cols.iter().map(|c| c.sd.to_string()));
    w.write_record(&mean).map_err(wrap)?;
    w.write_record(&sd).map_err(wrap)?;
    finish(w, path)
}

pub fn write_curve_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = writer(path)?;
    let wrap = |e: csv::Error| Error::format(path, e.to_string());
    w.write_record(["epoch", "lr", "train_loss", "val_dsc"])
        .map_err(wrap)?;
    for r in history {
        w.write_record([
            r.epoch.to_string(),
            r.lr.to_string(),
            r.train_loss.to_string(),
            r.val_dsc.to_string(),
        ])
        .map_err(wrap)?;
    }
    finish(w, path)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub method: String,
    pub lambda: f64,
    pub dsc: f64,
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut w = writer(path)?;
    let wrap = |e: csv::Error| Error::format(path, e.to_string());
    w.write_record(["method", "lambda", "dsc"]).map_err(wrap)?;
    for r in rows {
        w.write_record([r.method.clone(), r.lambda.to_string(), r.dsc.to_string()])
            .map_err(wrap)?;
    }
    finish(w, path)
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text =
        serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}
