//! Time grids, series and batches, plus the affine maps used to normalize
//! observation times and channel values before they reach a model.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Strictly increasing, finite observation times.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct TimeGrid(Vec<f64>);

impl TimeGrid {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::InvalidGrid("grid has no points".into()));
        }
        if let Some(bad) = times.iter().find(|t| !t.is_finite()) {
            return Err(Error::InvalidGrid(format!("non-finite time {bad}")));
        }
        if let Some(i) = times.windows(2).position(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidGrid(format!(
                "times must be strictly increasing: t[{i}] = {} >= t[{}] = {}",
                times[i],
                i + 1,
                times[i + 1]
            )));
        }
        Ok(Self(times))
    }

    /// `m` equally spaced points on `[t0, t1]` (just `t0` when `m == 1`).
    pub fn uniform(m: usize, t0: f64, t1: f64) -> Result<Self> {
        if m == 0 {
            return Err(Error::InvalidGrid("grid has no points".into()));
        }
        if m == 1 {
            return Self::new(vec![t0]);
        }
        let h = (t1 - t0) / (m - 1) as f64;
        Self::new((0..m).map(|i| if i == m - 1 { t1 } else { t0 + i as f64 * h }).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn times(&self) -> &[f64] {
        &self.0
    }

    pub fn first(&self) -> f64 {
        self.0[0]
    }

    pub fn last(&self) -> f64 {
        self.0[self.0.len() - 1]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(self.0.iter().map(|&t| f(t)).collect())
    }
}

impl<'de> Deserialize<'de> for TimeGrid {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = Vec::<f64>::deserialize(d)?;
        TimeGrid::new(v).map_err(serde::de::Error::custom)
    }
}

/// One series: `values` is `M x d`, row `i` observed at `grid[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub grid: TimeGrid,
    pub values: Array2<f64>,
}

impl Series {
    pub fn new(grid: TimeGrid, values: Array2<f64>) -> Result<Self> {
        if values.nrows() != grid.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} time points but {} value rows",
                grid.len(),
                values.nrows()
            )));
        }
        if values.ncols() == 0 {
            return Err(Error::ShapeMismatch("series has zero channels".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::ShapeMismatch("series contains non-finite values".into()));
        }
        Ok(Self { grid, values })
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.values.ncols()
    }
}

/// A set of series sharing the channel count `d`; lengths may differ.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesBatch {
    dim: usize,
    series: Vec<Series>,
}

impl TimeSeriesBatch {
    pub fn new(dim: usize, series: Vec<Series>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::ShapeMismatch("channel count must be positive".into()));
        }
        if let Some(s) = series.iter().find(|s| s.channels() != dim) {
            return Err(Error::DimensionMismatch { expected: dim, got: s.channels() });
        }
        Ok(Self { dim, series })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.series.len()
    }

    pub fn is_empty(&self) -> bool {
        self.series.is_empty()
    }

    pub fn series(&self) -> &[Series] {
        &self.series
    }

    pub fn into_series(self) -> Vec<Series> {
        self.series
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Series> {
        self.series.iter()
    }

    /// Split by series index: the first `floor(fraction * len)` go left.
    pub fn split(&self, fraction: f64) -> (Self, Self) {
        let k = ((self.len() as f64) * fraction).floor() as usize;
        let k = k.min(self.len());
        (
            Self { dim: self.dim, series: self.series[..k].to_vec() },
            Self { dim: self.dim, series: self.series[k..].to_vec() },
        )
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self { dim: self.dim, series: idx.iter().map(|&i| self.series[i].clone()).collect() }
    }

    /// Apply `f` to every series' values, keeping the grids.
    pub fn map_values(&self, f: impl Fn(&Array2<f64>) -> Array2<f64>) -> Result<Self> {
        let series = self
            .series
            .iter()
            .map(|s| Series::new(s.grid.clone(), f(&s.values)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(self.dim, series)
    }

    /// Earliest and latest observation time over the batch.
    pub fn time_range(&self) -> Option<(f64, f64)> {
        let lo = self.series.iter().map(|s| s.grid.first()).reduce(f64::min)?;
        let hi = self.series.iter().map(|s| s.grid.last()).reduce(f64::max)?;
        Some((lo, hi))
    }
}

/// Affine time map `t -> (t - offset) / scale` onto `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeMap {
    pub offset: f64,
    pub scale: f64,
}

impl TimeMap {
    pub const IDENTITY: TimeMap = TimeMap { offset: 0.0, scale: 1.0 };

    /// Map the batch's overall time range onto `[0, 1]`. A degenerate range
    /// (all series observed at a single instant) only shifts.
    pub fn fit(batch: &TimeSeriesBatch) -> Self {
        match batch.time_range() {
            Some((lo, hi)) if hi > lo => Self { offset: lo, scale: hi - lo },
            Some((lo, _)) => Self { offset: lo, scale: 1.0 },
            None => Self::IDENTITY,
        }
    }

    pub fn apply(&self, grid: &TimeGrid) -> Result<TimeGrid> {
        grid.map(|t| (t - self.offset) / self.scale)
    }
}

/// Channel-wise standardization to zero mean and unit variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    /// Pooled statistics over every observation of every series. Channels
    /// with zero spread keep unit scale.
    pub fn fit(batch: &TimeSeriesBatch) -> Self {
        let d = batch.dim();
        let mut sum = vec![0.0; d];
        let mut sq = vec![0.0; d];
        let mut count = 0usize;
        for s in batch.iter() {
            for row in s.values.rows() {
                for (j, v) in row.iter().enumerate() {
                    sum[j] += v;
                    sq[j] += v * v;
                }
            }
            count += s.len();
        }
        if count == 0 {
            return Self::identity(d);
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let var = (q / n - m * m).max(0.0);
                if var > 0.0 { var.sqrt() } else { 1.0 }
            })
            .collect();
        Self { mean, std }
    }

    pub fn normalize(&self, values: &Array2<f64>) -> Array2<f64> {
        let mut out = values.clone();
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / self.std[j];
            }
        }
        out
    }

    pub fn denormalize(&self, values: &Array2<f64>) -> Array2<f64> {
        let mut out = values.clone();
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v * self.std[j] + self.mean[j];
            }
        }
        out
    }

    pub fn normalize_batch(&self, batch: &TimeSeriesBatch) -> Result<TimeSeriesBatch> {
        batch.map_values(|v| self.normalize(v))
    }
}
