//! Sample-quality metrics.
//!
//! * [`discriminative_score`]: held-out accuracy of a classifier trained to
//!   tell real from generated series (0.5 means indistinguishable).
//! * [`gaussian_path_nll`]: exact per-observation negative log-likelihood under
//!   a known Gaussian process.
//! * [`marginal_stats`]: per-time-bin mean and standard deviation discrepancies.
//! * [`energy_score`]: the multivariate proper scoring rule over flattened series.

use std::collections::BTreeMap;

use ndarray::{concatenate, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::adam::{self, Adam, AdamConfig, Parameters};
use crate::denoiser::layers::{mixer_backward, mixer_forward, mixer_gamma_init, posenc_into, sigmoid, tanh, tanh_backward, Dense, MixerCache};
use crate::error::{Error, Result};
use crate::linalg::{mvn_logpdf, GaussianSpec};
use crate::noise::KernelSpec;
use crate::series::{Normalizer, Series, TimeMap, TimeSeriesBatch};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: String,
    pub value: f64,
    pub stderr: f64,
    pub n_real: usize,
    pub n_fake: usize,
    #[serde(default)]
    pub config: serde_json::Value,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub details: BTreeMap<String, f64>,
}

impl EvalReport {
    pub fn new(metric: &str, value: f64, stderr: f64, n_real: usize, n_fake: usize) -> Self {
        Self {
            metric: metric.to_string(),
            value,
            stderr,
            n_real,
            n_fake,
            config: serde_json::Value::Null,
            details: BTreeMap::new(),
        }
    }

    pub fn with_config(mut self, config: serde_json::Value) -> Self {
        self.config = config;
        self
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// Minimum number of series in each batch for the discriminator.
pub const MIN_DISCRIMINATOR_SERIES: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub hidden: usize,
    pub enc_dim: usize,
    pub enc_scale: f64,
    pub mixer_scales: Vec<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub train_fraction: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            enc_dim: 16,
            enc_scale: 100.0,
            mixer_scales: vec![1.0, 10.0, 100.0, 1000.0],
            epochs: 30,
            batch_size: 32,
            lr: 1e-3,
            train_fraction: 0.8,
        }
    }
}

/// `[x, posenc(t)] -> tanh -> [h, mix(h)] -> tanh -> mean over time -> logit`.
#[derive(Debug, Clone, PartialEq)]
struct Discriminator {
    enc_dim: usize,
    enc_scale: f64,
    scales: Vec<f64>,
    input: Dense,
    hidden: Dense,
    out: Dense,
    gamma: Vec<f64>,
}

struct DiscTape {
    input: Array2<f64>,
    h1: Array2<f64>,
    cat: Array2<f64>,
    cache: MixerCache,
    h2: Array2<f64>,
}

impl Discriminator {
    fn init<R: Rng + ?Sized>(d: usize, cfg: &DiscriminatorConfig, rng: &mut R) -> Self {
        let h = cfg.hidden;
        Self {
            enc_dim: cfg.enc_dim,
            enc_scale: cfg.enc_scale,
            scales: cfg.mixer_scales.clone(),
            input: Dense::glorot(d + cfg.enc_dim, h, rng),
            hidden: Dense::glorot(2 * h, h, rng),
            out: Dense::glorot(h, 1, rng),
            gamma: vec![mixer_gamma_init(); cfg.mixer_scales.len()],
        }
    }

    fn zeros_like(&self) -> Self {
        let z = |l: &Dense| Dense::zeros(l.fan_in(), l.fan_out());
        Self {
            enc_dim: self.enc_dim,
            enc_scale: self.enc_scale,
            scales: self.scales.clone(),
            input: z(&self.input),
            hidden: z(&self.hidden),
            out: z(&self.out),
            gamma: vec![0.0; self.gamma.len()],
        }
    }

    fn forward(&self, x: &Array2<f64>, times: &[f64]) -> (f64, DiscTape) {
        let (m, d) = x.dim();
        let mut input = Array2::zeros((m, d + self.enc_dim));
        for i in 0..m {
            let mut row = input.row_mut(i);
            let r = row.as_slice_mut().expect("standard layout");
            for c in 0..d {
                r[c] = x[[i, c]];
            }
            posenc_into(self.enc_scale * times[i], &mut r[d..]);
        }
        let h1 = tanh(self.input.forward(&input));
        let (y, cache) = mixer_forward(&self.gamma, &self.scales, times, &h1);
        let cat = concatenate(Axis(1), &[h1.view(), y.view()]).expect("equal rows");
        let h2 = tanh(self.hidden.forward(&cat));
        let pooled = h2.mean_axis(Axis(0)).expect("non-empty series");
        let logit = pooled.dot(&self.out.w.column(0)) + self.out.b[0];
        (logit, DiscTape { input, h1, cat, cache, h2 })
    }

    fn backward(&self, tape: &DiscTape, g_logit: f64) -> Self {
        let mut g = self.zeros_like();
        let m = tape.h2.nrows() as f64;
        let pooled = tape.h2.mean_axis(Axis(0)).expect("non-empty series");
        g.out.w.column_mut(0).scaled_add(g_logit, &pooled);
        g.out.b[0] += g_logit;
        let w = self.out.w.column(0).to_owned() * (g_logit / m);
        let g_h2 = Array2::from_shape_fn(tape.h2.dim(), |(_, j)| w[j]);
        let gz2 = tanh_backward(&tape.h2, g_h2);
        let g_cat = self.hidden.backward(&tape.cat, &gz2, &mut g.hidden);
        let h = tape.h1.ncols();
        let g_y = g_cat.slice(ndarray::s![.., h..]).to_owned();
        let g_mix = mixer_backward(&self.gamma, &self.scales, &tape.cache, &tape.h1, &g_y, &mut g.gamma);
        let g_h1 = g_cat.slice(ndarray::s![.., ..h]).to_owned() + &g_mix;
        let gz1 = tanh_backward(&tape.h1, g_h1);
        self.input.backward_params(&tape.input, &gz1, &mut g.input);
        g
    }
}

impl Parameters for Discriminator {
    fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        for (name, l) in [("input", &self.input), ("hidden", &self.hidden), ("out", &self.out)] {
            out.push((format!("{name}.weight"), l.w.shape().to_vec(), l.w.as_slice().expect("standard layout")));
            out.push((format!("{name}.bias"), vec![l.b.len()], l.b.as_slice().expect("standard layout")));
        }
        out.push(("mixer.gamma".into(), vec![self.gamma.len()], &self.gamma[..]));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in [&mut self.input, &mut self.hidden, &mut self.out] {
            out.push(l.w.as_slice_mut().expect("standard layout"));
            out.push(l.b.as_slice_mut().expect("standard layout"));
        }
        out.push(&mut self.gamma);
        out
    }
}

struct Example {
    values: Array2<f64>,
    times: Vec<f64>,
    label: f64,
}

fn prepare(batch: &TimeSeriesBatch, label: f64, norm: &Normalizer, tmap: &TimeMap) -> Result<Vec<Example>> {
    batch
        .iter()
        .map(|s| Ok(Example { values: norm.normalize(&s.values), times: tmap.apply(&s.grid)?.times().to_vec(), label }))
        .collect()
}

/// Held-out accuracy of a freshly trained real-vs-fake classifier.
///
/// Each batch is split by index (`train_fraction` for training). Values are
/// standardized and times mapped to `[0, 1]` with statistics of the real
/// training split. All randomness (initialization and per-epoch shuffles)
/// comes from `rng`.
pub fn discriminative_score<R: Rng + ?Sized>(
    real: &TimeSeriesBatch,
    fake: &TimeSeriesBatch,
    cfg: &DiscriminatorConfig,
    rng: &mut R,
) -> Result<EvalReport> {
    for b in [real, fake] {
        if b.len() < MIN_DISCRIMINATOR_SERIES {
            return Err(Error::InsufficientData { needed: MIN_DISCRIMINATOR_SERIES, got: b.len() });
        }
    }
    if real.dim() != fake.dim() {
        return Err(Error::DimensionMismatch { expected: real.dim(), got: fake.dim() });
    }
    let (real_train, real_test) = real.split(cfg.train_fraction);
    let (fake_train, fake_test) = fake.split(cfg.train_fraction);
    let norm = Normalizer::fit(&real_train);
    let tmap = TimeMap::fit(&real_train);
    let mut train = prepare(&real_train, 1.0, &norm, &tmap)?;
    train.extend(prepare(&fake_train, 0.0, &norm, &tmap)?);
    let mut test = prepare(&real_test, 1.0, &norm, &tmap)?;
    test.extend(prepare(&fake_test, 0.0, &norm, &tmap)?);

    let mut model = Discriminator::init(real.dim(), cfg, rng);
    let mut opt = Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let parts: Vec<Discriminator> = chunk
                .par_iter()
                .map(|&i| {
                    let ex = &train[i];
                    let (logit, tape) = model.forward(&ex.values, &ex.times);
                    model.backward(&tape, sigmoid(logit) - ex.label)
                })
                .collect();
            let mut grads = model.zeros_like();
            for p in &parts {
                adam::add_assign(&mut grads, p);
            }
            adam::scale(&mut grads, 1.0 / chunk.len() as f64);
            opt.step(&mut model, &grads);
        }
    }
    let correct: usize = test
        .par_iter()
        .map(|ex| {
            let (logit, _) = model.forward(&ex.values, &ex.times);
            usize::from((logit > 0.0) == (ex.label > 0.5))
        })
        .sum();
    let n = test.len() as f64;
    let acc = correct as f64 / n;
    let mut report = EvalReport::new("disc", acc, (acc * (1.0 - acc) / n).sqrt(), real.len(), fake.len());
    report.details.insert("n_test".into(), n);
    Ok(report)
}

/// Mean over series of the per-observation negative log-likelihood under the
/// Gaussian process with covariance `kernel` and mean `mean(t, channel)`
/// (zero when `None`), with channels independent.
pub fn gaussian_path_nll(
    batch: &TimeSeriesBatch,
    kernel: &KernelSpec,
    mean: Option<&(dyn Fn(f64, usize) -> f64 + Sync)>,
) -> Result<EvalReport> {
    if batch.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let per_series: Vec<f64> = batch
        .series()
        .par_iter()
        .map(|s| series_nll(s, kernel, mean))
        .collect::<Result<_>>()?;
    let n = per_series.len() as f64;
    let avg = per_series.iter().sum::<f64>() / n;
    let stderr = if per_series.len() > 1 {
        (per_series.iter().map(|v| (v - avg).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
    } else {
        0.0
    };
    Ok(EvalReport::new("nll", avg, stderr, 0, batch.len()))
}

fn series_nll(s: &Series, kernel: &KernelSpec, mean: Option<&(dyn Fn(f64, usize) -> f64 + Sync)>) -> Result<f64> {
    let l = kernel.factor(&s.grid)?;
    let mut total = 0.0;
    for c in 0..s.channels() {
        let mu: Vec<f64> = s.grid.times().iter().map(|&t| mean.map_or(0.0, |f| f(t, c))).collect();
        let g = GaussianSpec::new(&mu, 1.0, &l)?;
        total -= mvn_logpdf(&s.values.column(c).to_vec(), &g)?;
    }
    Ok(total / (s.len() * s.channels()) as f64)
}

/// Number of equal-width bins over normalized time in [`marginal_stats`].
pub const MARGINAL_BINS: usize = 10;

/// Per-bin `(mean, population std)` of every channel, `None` for empty bins.
pub fn binned_moments(batch: &TimeSeriesBatch, tmap: &TimeMap) -> Result<Vec<Vec<Option<(f64, f64)>>>> {
    let d = batch.dim();
    let mut sums = vec![vec![(0usize, 0.0f64, 0.0f64); d]; MARGINAL_BINS];
    for s in batch.iter() {
        let grid = tmap.apply(&s.grid)?;
        for (i, &u) in grid.times().iter().enumerate() {
            let bin = ((u * MARGINAL_BINS as f64).floor().max(0.0) as usize).min(MARGINAL_BINS - 1);
            for c in 0..d {
                let v = s.values[[i, c]];
                let e = &mut sums[bin][c];
                e.0 += 1;
                e.1 += v;
                e.2 += v * v;
            }
        }
    }
    Ok(sums
        .into_iter()
        .map(|row| {
            row.into_iter()
                .map(|(n, s1, s2)| {
                    (n > 0).then(|| {
                        let m = s1 / n as f64;
                        (m, (s2 / n as f64 - m * m).max(0.0).sqrt())
                    })
                })
                .collect()
        })
        .collect())
}

/// Compares per-time-bin means and standard deviations of `real` and `fake`.
///
/// Times of both batches are mapped to `[0, 1]` with the map fitted on `real`
/// and split into [`MARGINAL_BINS`] bins. `value` is the larger of the two
/// max-abs discrepancies; `details` lists max- and mean-abs discrepancies of
/// each moment. Bins empty in either batch are skipped.
pub fn marginal_stats(real: &TimeSeriesBatch, fake: &TimeSeriesBatch) -> Result<EvalReport> {
    if real.is_empty() || fake.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: real.len().min(fake.len()) });
    }
    if real.dim() != fake.dim() {
        return Err(Error::DimensionMismatch { expected: real.dim(), got: fake.dim() });
    }
    let tmap = TimeMap::fit(real);
    let a = binned_moments(real, &tmap)?;
    let b = binned_moments(fake, &tmap)?;
    let mut mean_diffs = Vec::new();
    let mut std_diffs = Vec::new();
    for (ra, rb) in a.iter().zip(&b) {
        for (x, y) in ra.iter().zip(rb) {
            if let (Some((m1, s1)), Some((m2, s2))) = (x, y) {
                mean_diffs.push((m1 - m2).abs());
                std_diffs.push((s1 - s2).abs());
            }
        }
    }
    if mean_diffs.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let max = |v: &[f64]| v.iter().copied().fold(0.0, f64::max);
    let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mut report = EvalReport::new("marginal", max(&mean_diffs).max(max(&std_diffs)), 0.0, real.len(), fake.len());
    report.details.insert("mean_max_abs".into(), max(&mean_diffs));
    report.details.insert("mean_mean_abs".into(), avg(&mean_diffs));
    report.details.insert("std_max_abs".into(), max(&std_diffs));
    report.details.insert("std_mean_abs".into(), avg(&std_diffs));
    Ok(report)
}

fn euclid(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `(1/K) sum_k ||X_k - y|| - (1/(2K^2)) sum_{k,k'} ||X_k - X_k'||` over
/// flattened series.
pub fn energy_score(samples: &[Array2<f64>], observation: &Array2<f64>) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptySampleSet);
    }
    if let Some(s) = samples.iter().find(|s| s.dim() != observation.dim()) {
        return Err(Error::ShapeMismatch(format!("sample {:?} vs observation {:?}", s.dim(), observation.dim())));
    }
    let k = samples.len() as f64;
    let fit = samples.iter().map(|s| euclid(s, observation)).sum::<f64>() / k;
    let mut spread = 0.0;
    for i in 0..samples.len() {
        for j in i + 1..samples.len() {
            spread += euclid(&samples[i], &samples[j]);
        }
    }
    // The double sum counts every unordered pair twice.
    Ok(fit - 2.0 * spread / (2.0 * k * k))
}

/// Mean of a set of equally shaped samples.
pub fn sample_mean(samples: &[Array2<f64>]) -> Option<Array2<f64>> {
    let first = samples.first()?;
    let mut acc = Array2::zeros(first.dim());
    for s in samples {
        acc += s;
    }
    Some(acc / samples.len() as f64)
}
