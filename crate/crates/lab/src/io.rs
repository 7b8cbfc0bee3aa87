//! File-backed forms of the line and binary formats defined in `mbl-core`.

use std::fs;
use std::path::Path;

use mbl_core::checkpoint::{decode_checkpoint, encode_checkpoint};
use mbl_core::dataset_fmt::{encode_sample, parse_sample};
use mbl_core::debias::{encode_trial, SearchTrial};
use mbl_core::eval::{encode_report_row, parse_report_row, ReportRow};
use mbl_core::forge::{Gender, Sample};
use mbl_core::ParamSet;

use crate::{LabError, Result};

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> LabError + '_ {
    move |source| LabError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_dataset(path: &Path, samples: &[Sample]) -> Result<()> {
    let mut out = String::new();
    for s in samples {
        out.push_str(&encode_sample(s));
        out.push('\n');
    }
    fs::write(path, out).map_err(io_err(path))
}

/// Read a dataset, dropping unknown-gender rows. Returns the kept samples
/// and the number of pruned rows; parse failures carry the line number.
pub fn read_dataset(path: &Path) -> Result<(Vec<Sample>, usize)> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut samples = Vec::new();
    let mut pruned = 0usize;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let sample = parse_sample(line).map_err(|source| LabError::ParseAt {
            path: path.to_path_buf(),
            line: i + 1,
            source,
        })?;
        if sample.gender == Gender::Unknown {
            pruned += 1;
        } else {
            samples.push(sample);
        }
    }
    Ok((samples, pruned))
}

pub fn write_checkpoint(path: &Path, params: &ParamSet) -> Result<()> {
    fs::write(path, encode_checkpoint(params)).map_err(io_err(path))
}

pub fn read_checkpoint(path: &Path) -> Result<ParamSet> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(decode_checkpoint(&bytes)?)
}

pub fn write_report(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let mut out = String::new();
    for row in rows {
        out.push_str(&encode_report_row(row));
        out.push('\n');
    }
    fs::write(path, out).map_err(io_err(path))
}

pub fn read_report(path: &Path) -> Result<Vec<ReportRow>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        rows.push(parse_report_row(line).map_err(|source| LabError::ParseAt {
            path: path.to_path_buf(),
            line: i + 1,
            source,
        })?);
    }
    Ok(rows)
}

pub fn write_trace(path: &Path, trials: &[SearchTrial]) -> Result<()> {
    let mut out = String::new();
    for t in trials {
        out.push_str(&encode_trial(t));
        out.push('\n');
    }
    fs::write(path, out).map_err(io_err(path))
}
