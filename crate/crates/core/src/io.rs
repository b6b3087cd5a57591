//! JSON-lines series files.
//!
//! The first line is a [`FileHeader`]; every following line is one series
//! `{"t": [t_1, ..., t_M], "x": [[x_11, ..., x_1d], ..., [x_M1, ..., x_Md]]}`.
//! Numbers are written with 17 significant digits so that every `f64`
//! survives a write/read round trip unchanged.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::series::{Series, TimeGrid, TimeSeriesBatch};
use crate::TOOL_VERSION;

pub const SERIES_FORMAT: &str = "spdiff-series";
pub const FORMAT_VERSION: &str = "1.0";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileHeader {
    pub format: String,
    pub version: String,
    pub tool_version: String,
    pub dim: usize,
    pub count: usize,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Free-form metadata: dataset parameters, sampler configuration, ...
    #[serde(default)]
    pub meta: serde_json::Value,
}

impl FileHeader {
    pub fn new(dim: usize, count: usize, seed: Option<u64>, meta: serde_json::Value) -> Self {
        Self {
            format: SERIES_FORMAT.to_string(),
            version: FORMAT_VERSION.to_string(),
            tool_version: TOOL_VERSION.to_string(),
            dim,
            count,
            seed,
            meta,
        }
    }
}

/// Accepts any `1.x` version string.
pub fn check_version(version: &str) -> Result<()> {
    let major = version.split('.').next().unwrap_or("");
    let supported = FORMAT_VERSION.split('.').next().unwrap_or("");
    if major == supported {
        Ok(())
    } else {
        Err(Error::Format(format!("unsupported format version {version}, this build reads {FORMAT_VERSION}")))
    }
}

/// `{:.16e}`: 17 significant digits, enough to round-trip any finite `f64`.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn push_array(out: &mut String, values: impl Iterator<Item = f64>) {
    out.push('[');
    for (i, v) in values.enumerate() {
        if i > 0 {
            out.push(',');
        }
        write!(out, "{v:.16e}").expect("writing to a String");
    }
    out.push(']');
}

/// One data line, without the trailing newline.
pub fn series_line(s: &Series) -> String {
    let mut out = String::with_capacity(48 * s.len() * (s.channels() + 1));
    out.push_str("{\"t\":");
    push_array(&mut out, s.grid.times().iter().copied());
    out.push_str(",\"x\":[");
    for (i, row) in s.values.rows().into_iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        push_array(&mut out, row.iter().copied());
    }
    out.push_str("]}");
    out
}

pub fn write_batch<W: Write>(mut w: W, batch: &TimeSeriesBatch, seed: Option<u64>, meta: serde_json::Value) -> Result<()> {
    let header = FileHeader::new(batch.dim(), batch.len(), seed, meta);
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for s in batch.iter() {
        w.write_all(series_line(s).as_bytes())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_batch_file(path: &Path, batch: &TimeSeriesBatch, seed: Option<u64>, meta: serde_json::Value) -> Result<()> {
    write_batch(BufWriter::new(File::create(path)?), batch, seed, meta)
}

#[derive(Deserialize)]
struct SeriesLine {
    t: Vec<f64>,
    x: Vec<Vec<f64>>,
}

pub fn read_batch<R: BufRead>(r: R) -> Result<(FileHeader, TimeSeriesBatch)> {
    let mut lines = r.lines();
    let first = lines.next().ok_or_else(|| Error::Format("empty file, expected a header line".into()))??;
    let header: FileHeader = serde_json::from_str(&first)?;
    if header.format != SERIES_FORMAT {
        return Err(Error::Format(format!("expected format {SERIES_FORMAT}, found {}", header.format)));
    }
    check_version(&header.version)?;
    let mut series = Vec::with_capacity(header.count);
    for (k, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SeriesLine = serde_json::from_str(&line)?;
        let m = rec.t.len();
        if rec.x.len() != m {
            return Err(Error::Format(format!("series {k}: {m} times but {} value rows", rec.x.len())));
        }
        if let Some(row) = rec.x.iter().find(|row| row.len() != header.dim) {
            return Err(Error::DimensionMismatch { expected: header.dim, got: row.len() });
        }
        let values = Array2::from_shape_vec((m, header.dim), rec.x.into_iter().flatten().collect())
            .map_err(|e| Error::Format(e.to_string()))?;
        series.push(Series::new(TimeGrid::new(rec.t)?, values)?);
    }
    if series.len() != header.count {
        return Err(Error::Format(format!("header announces {} series, found {}", header.count, series.len())));
    }
    let batch = TimeSeriesBatch::new(header.dim, series)?;
    Ok((header, batch))
}

pub fn read_batch_file(path: &Path) -> Result<(FileHeader, TimeSeriesBatch)> {
    read_batch(BufReader::new(File::open(path)?))
}
