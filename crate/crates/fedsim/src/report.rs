//! Artifact serialization: round logs, summaries, sweep tables,
//! landscape grids (all CSV) and the binary model dump.
//!
//! Output bytes are a pure function of the records. Floats go through
//! Rust's shortest round-trip formatting, metric cells skipped by the
//! eval stride stay empty, and wall-clock time never appears in a file.
//! Infinite SNR on a silent channel prints as `inf`.
//!
//! Every CSV starts with a `# schema:` line so downstream tooling can
//! refuse files it does not understand.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read as _, Write as _};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::channel::ChannelReport;
use crate::error::{Error, Result};
use crate::federation::{RoundRecord, RunStatus};
use crate::metrics::LandscapeSlice;
use crate::numkit::ParamVec;

pub const ROUNDS_SCHEMA: &str = "fedsim-rounds-v1";
pub const SUMMARY_SCHEMA: &str = "fedsim-summary-v1";
pub const SWEEP_SCHEMA: &str = "fedsim-sweep-v1";
pub const LANDSCAPE_SCHEMA: &str = "fedsim-landscape-v1";

pub const ROUNDS_COLUMNS: &str = "round,global_loss,test_accuracy,avg_sq_grad_norm,\
sharpness_gap,sigma_g_sq_hat,sigma_l_sq_hat,downlink_norm_mean,downlink_snr_db_mean,\
uplink_norm_mean,uplink_snr_db_mean";

pub const SUMMARY_COLUMNS: &str = "rounds_completed,final_global_loss,final_test_accuracy,\
best_test_accuracy,final_avg_sq_grad_norm,final_sharpness_gap,status,diverged_round";

fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "nan".to_owned()
    } else if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.to_owned()
    } else {
        format!("{v}")
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

fn mean_of(reports: &[ChannelReport], pick: impl Fn(&ChannelReport) -> f64) -> Option<f64> {
    if reports.is_empty() {
        return None;
    }
    Some(reports.iter().map(pick).sum::<f64>() / reports.len() as f64)
}

/// One line per round; channel columns are client means.
pub fn rounds_csv(records: &[RoundRecord]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# schema: {ROUNDS_SCHEMA}");
    let _ = writeln!(out, "{ROUNDS_COLUMNS}");
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.round,
            fmt_opt(r.global_loss),
            fmt_opt(r.test_accuracy),
            fmt_opt(r.avg_sq_grad_norm),
            fmt_opt(r.sharpness_gap),
            fmt_opt(r.sigma_g_sq_hat),
            fmt_opt(r.sigma_l_sq_hat),
            fmt_opt(mean_of(&r.downlink, |c| c.applied_norm)),
            fmt_opt(mean_of(&r.downlink, |c| c.snr_db)),
            fmt_opt(mean_of(&r.uplink, |c| c.applied_norm)),
            fmt_opt(mean_of(&r.uplink, |c| c.snr_db)),
        );
    }
    out
}

/// End-of-run digest; derivable from the rounds CSV alone.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub rounds_completed: u64,
    pub final_global_loss: Option<f64>,
    pub final_test_accuracy: Option<f64>,
    pub best_test_accuracy: Option<f64>,
    pub final_avg_sq_grad_norm: Option<f64>,
    pub final_sharpness_gap: Option<f64>,
    pub status: String,
    pub diverged_round: Option<u64>,
}

pub fn summarize(records: &[RoundRecord], status: &RunStatus) -> SummaryRow {
    let last = |pick: fn(&RoundRecord) -> Option<f64>| {
        records.iter().rev().find_map(pick)
    };
    let best_acc = records
        .iter()
        .filter_map(|r| r.test_accuracy)
        .fold(None, |best: Option<f64>, acc| {
            Some(best.map_or(acc, |b| b.max(acc)))
        });
    let (status_str, diverged_round) = match status {
        RunStatus::Completed => ("completed".to_owned(), None),
        RunStatus::Diverged { round, .. } => ("diverged".to_owned(), Some(*round)),
    };
    SummaryRow {
        rounds_completed: records.len() as u64,
        final_global_loss: last(|r| r.global_loss),
        final_test_accuracy: last(|r| r.test_accuracy),
        best_test_accuracy: best_acc,
        final_avg_sq_grad_norm: last(|r| r.avg_sq_grad_norm),
        final_sharpness_gap: last(|r| r.sharpness_gap),
        status: status_str,
        diverged_round,
    }
}

fn summary_cells(row: &SummaryRow) -> String {
    format!(
        "{},{},{},{},{},{},{},{}",
        row.rounds_completed,
        fmt_opt(row.final_global_loss),
        fmt_opt(row.final_test_accuracy),
        fmt_opt(row.best_test_accuracy),
        fmt_opt(row.final_avg_sq_grad_norm),
        fmt_opt(row.final_sharpness_gap),
        row.status,
        row.diverged_round.map(|r| r.to_string()).unwrap_or_default(),
    )
}

pub fn summary_csv(row: &SummaryRow) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# schema: {SUMMARY_SCHEMA}");
    let _ = writeln!(out, "{SUMMARY_COLUMNS}");
    let _ = writeln!(out, "{}", summary_cells(row));
    out
}

/// One summary row per sweep cell, labeled. Failed cells carry an error
/// status instead of metrics, so a sweep never loses rows.
pub enum CellResult {
    Finished(SummaryRow),
    Failed(String),
}

pub fn sweep_csv(cells: &[(String, CellResult)]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# schema: {SWEEP_SCHEMA}");
    let _ = writeln!(out, "label,{SUMMARY_COLUMNS}");
    for (label, result) in cells {
        match result {
            CellResult::Finished(row) => {
                let _ = writeln!(out, "{label},{}", summary_cells(row));
            }
            CellResult::Failed(_) => {
                let _ = writeln!(out, "{label},0,,,,,,error,");
            }
        }
    }
    out
}

/// Row-major long format: one line per grid point with its offsets.
pub fn landscape_csv(slice: &LandscapeSlice) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# schema: {LANDSCAPE_SCHEMA}");
    let _ = writeln!(out, "# extent: {}", fmt_f64(slice.extent()));
    let _ = writeln!(out, "# resolution: {}", slice.cols());
    let _ = writeln!(out, "# directions: {}", slice.directions().len());
    let offsets = slice.offsets();
    if slice.rows() == 1 {
        let _ = writeln!(out, "offset1,loss");
        for (j, off) in offsets.iter().enumerate() {
            let _ = writeln!(out, "{},{}", fmt_f64(*off), fmt_f64(slice.value(0, j)));
        }
    } else {
        let _ = writeln!(out, "offset1,offset2,loss");
        for (i, off2) in offsets.iter().enumerate() {
            for (j, off1) in offsets.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{},{},{}",
                    fmt_f64(*off1),
                    fmt_f64(*off2),
                    fmt_f64(slice.value(i, j))
                );
            }
        }
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(text.as_bytes())?;
    w.flush()?;
    Ok(())
}

/// Binary model dump: little-endian u64 length, then that many
/// little-endian f64 values. No magic, no alignment padding.
pub fn write_model(path: &Path, w: &ParamVec) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_u64::<LittleEndian>(w.len() as u64)?;
    for &v in w.values() {
        out.write_f64::<LittleEndian>(v)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_model(path: &Path) -> Result<ParamVec> {
    let mut input = BufReader::new(File::open(path)?);
    let d = input.read_u64::<LittleEndian>()? as usize;
    let mut values = Vec::with_capacity(d);
    for _ in 0..d {
        values.push(input.read_f64::<LittleEndian>()?);
    }
    let mut trailing = [0u8; 1];
    if input.read(&mut trailing)? != 0 {
        return Err(Error::Format {
            path: path.display().to_string(),
            reason: "trailing bytes after declared length".to_owned(),
        });
    }
    ParamVec::new(values).map_err(|_| Error::Format {
        path: path.display().to_string(),
        reason: "non-finite parameter value".to_owned(),
    })
}
