//! Atomic artifact writers and the run manifest.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::experiment::BoundReport;
use crate::sde::{CoupledTrajectoryRecord, TrajectoryRecord};

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| Error::Io(e.to_string()))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Io(e.to_string()))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn csv_bytes(header: &[String], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Io(e.to_string());
    w.write_record(header).map_err(io)?;
    for r in rows {
        w.write_record(r).map_err(io)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.to_string()))
}

pub fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    write_atomic(path, &csv_bytes(header, rows)?)
}

fn num(x: f64) -> String {
    format!("{x}")
}

/// `t, d0_true, d0_filter, u, dY_1..dY_n`; row `i` carries the increments
/// of the step ending at `t_i`.
pub fn trajectory_rows(
    truth: &TrajectoryRecord,
    filter: Option<&TrajectoryRecord>,
    n_channels: usize,
) -> (Vec<String>, Vec<Vec<String>>) {
    let mut header: Vec<String> = ["t", "d0_true", "d0_filter", "u"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((1..=n_channels).map(|k| format!("dY_{k}")));
    let rows = (0..truth.times.len())
        .map(|i| {
            let mut r = vec![
                num(truth.times[i]),
                num(truth.d0_series[i]),
                filter.map_or(String::new(), |f| num(f.d0_series[i])),
                num(truth.u_series[i]),
            ];
            match i.checked_sub(1).and_then(|j| truth.dy_increments.get(j)) {
                Some(dy) => r.extend(dy.iter().map(|x| num(*x))),
                None => r.extend(std::iter::repeat_n(String::new(), n_channels)),
            }
            r
        })
        .collect();
    (header, rows)
}

pub fn coupled_rows(rec: &CoupledTrajectoryRecord, n_channels: usize) -> (Vec<String>, Vec<Vec<String>>) {
    trajectory_rows(&rec.truth, Some(&rec.filter), n_channels)
}

/// `t, empirical, bound, margin`.
pub fn bound_rows(report: &BoundReport) -> (Vec<String>, Vec<Vec<String>>) {
    let header = ["t", "empirical", "bound", "margin"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let rows = report
        .series
        .iter()
        .map(|p| vec![num(p.t), num(p.empirical), num(p.bound), num(p.margin)])
        .collect();
    (header, rows)
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: String,
    pub subcommand: String,
    pub config_hash: String,
    pub model_hash: String,
    pub seed: u64,
    pub dt: f64,
    pub t_final: f64,
    pub n_traj: usize,
    pub repair_count: usize,
    /// The validated scenario, rendered.
    pub config: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
