//! CSV and JSON emission for histories, sweeps, energy and discharge reports.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::energy::EnergyReport;
use crate::error::{Error, Result};
use crate::streaming::{DischargeReport, DischargeRow};
use crate::sweep::{SweepReport, SweepRow};
use crate::trainer::{EpochRecord, TrainHistory};

pub const SWEEP_HEADER: [&str; 7] = [
    "axis_value",
    "energy_ratio",
    "val_accuracy",
    "mean_density",
    "task_loss",
    "baseline",
    "error",
];

pub const HISTORY_HEADER: [&str; 5] = ["epoch", "task_loss", "energy_objective", "val_accuracy", "mean_density"];

pub const DISCHARGE_HEADER: [&str; 6] = [
    "epoch",
    "executed_macs",
    "joules",
    "percent_drop",
    "cumulative_percent",
    "discharge_rate_per_hour",
];

fn csv_string<T: Serialize>(header: &[&str], rows: &[T]) -> Result<String> {
    let csv_err = |source| Error::Csv { path: PathBuf::from("<memory>"), source };
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.serialize(row).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format { what: "csv", detail: e.to_string() })?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

fn parse_csv<T: DeserializeOwned>(text: &str, header: &[&str]) -> Result<Vec<T>> {
    let csv_err = |source| Error::Csv { path: PathBuf::from("<memory>"), source };
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let found: Vec<String> = r.headers().map_err(csv_err)?.iter().map(str::to_owned).collect();
    if found != header {
        return Err(Error::Format {
            what: "csv",
            detail: format!("unexpected header {found:?}"),
        });
    }
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

pub fn sweep_csv(report: &SweepReport) -> Result<String> {
    csv_string(&SWEEP_HEADER, &report.rows)
}

pub fn parse_sweep_csv(text: &str) -> Result<Vec<SweepRow>> {
    parse_csv(text, &SWEEP_HEADER)
}

pub fn history_csv(history: &TrainHistory) -> Result<String> {
    csv_string(&HISTORY_HEADER, &history.records)
}

pub fn parse_history_csv(text: &str) -> Result<Vec<EpochRecord>> {
    parse_csv(text, &HISTORY_HEADER)
}

pub fn discharge_csv(report: &DischargeReport) -> Result<String> {
    csv_string(&DISCHARGE_HEADER, &report.rows)
}

pub fn parse_discharge_csv(text: &str) -> Result<Vec<DischargeRow>> {
    parse_csv(text, &DISCHARGE_HEADER)
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

fn write_file(path: PathBuf, contents: &str) -> Result<PathBuf> {
    fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes `sweep.csv` and `sweep.json` under `out_dir`.
pub fn emit_sweep(report: &SweepReport, out_dir: &Path) -> Result<Vec<PathBuf>> {
    ensure_dir(out_dir)?;
    Ok(vec![
        write_file(out_dir.join("sweep.csv"), &sweep_csv(report)?)?,
        write_file(out_dir.join("sweep.json"), &to_json(report)?)?,
    ])
}

pub fn emit_history(history: &TrainHistory, out_dir: &Path) -> Result<PathBuf> {
    ensure_dir(out_dir)?;
    write_file(out_dir.join("history.csv"), &history_csv(history)?)
}

pub fn emit_discharge(report: &DischargeReport, out_dir: &Path) -> Result<PathBuf> {
    ensure_dir(out_dir)?;
    write_file(out_dir.join("discharge.csv"), &discharge_csv(report)?)
}

pub fn emit_energy(report: &EnergyReport, out_dir: &Path) -> Result<PathBuf> {
    ensure_dir(out_dir)?;
    write_file(out_dir.join("energy.json"), &to_json(report)?)
}
