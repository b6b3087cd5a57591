//! End-to-end training, sampling and checkpointing.
//!
//! Training data are standardized per channel and their times mapped onto
//! `[0, 1]` with statistics of the training set; both transforms are stored in
//! the checkpoint and undone when sampling.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cspd::{Cspd, VpSchedule};
use crate::denoiser::adam::{self, Adam, AdamConfig};
use crate::denoiser::{Architecture, DenoiserParams, TensorRecord};
use crate::dspd::{DiffusionSchedule, Dspd, SamplerNoise};
use crate::error::{Error, Result};
use crate::io::check_version;
use crate::noise::{KernelKind, KernelSpec};
use crate::rng::{seeded, stream};
use crate::series::{Normalizer, Series, TimeGrid, TimeMap, TimeSeriesBatch};
use crate::TOOL_VERSION;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Dspd,
    Cspd,
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dspd" => Ok(ModelKind::Dspd),
            "cspd" => Ok(ModelKind::Cspd),
            other => Err(Error::Format(format!("unknown model `{other}`, expected dspd or cspd"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerKind {
    Ancestral,
    ReverseSde,
    ProbFlow,
}

impl FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ancestral" => Ok(SamplerKind::Ancestral),
            "reverse-sde" | "reverse_sde" => Ok(SamplerKind::ReverseSde),
            "prob-flow" | "prob_flow" | "probability-flow" => Ok(SamplerKind::ProbFlow),
            other => Err(Error::Format(format!("unknown sampler `{other}`"))),
        }
    }
}

/// Every setting of a training run. All fields have defaults, so an empty
/// TOML or JSON document is a valid configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelKind,
    pub kernel: KernelKind,
    /// Kernel bandwidth; the kernel's default when absent.
    pub gamma: Option<f64>,
    /// Discrete diffusion steps `N`.
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub beta_min: f64,
    pub beta_max: f64,
    pub s_min: f64,
    pub sampler_noise: SamplerNoise,
    pub hidden: usize,
    pub depth: usize,
    pub enc_dim: usize,
    pub enc_scale: f64,
    pub mixer: bool,
    pub mixer_scales: Vec<f64>,
    /// Feed the denoiser a whitened copy of its input. Only used together
    /// with the temporal mixer; a mixer-free network is strictly pointwise.
    pub whiten: bool,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Rescale gradients whose global norm exceeds this value.
    pub grad_clip: Option<f64>,
    /// Decay of the exponential moving average of the weights. The averaged
    /// weights are the ones kept for sampling; `None` keeps the last iterate.
    pub ema_decay: Option<f64>,
    pub seed: u64,
    pub normalize: bool,
    pub deterministic: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::Dspd,
            kernel: KernelKind::Rbf,
            gamma: None,
            diffusion_steps: 100,
            beta_start: 1e-3,
            beta_end: 0.3,
            beta_min: 0.1,
            beta_max: 20.0,
            s_min: 1e-3,
            sampler_noise: SamplerNoise::BetaTilde,
            hidden: 128,
            depth: 3,
            enc_dim: 32,
            enc_scale: 100.0,
            mixer: true,
            mixer_scales: vec![1.0, 10.0, 100.0, 1000.0],
            whiten: true,
            lr: 1e-3,
            batch_size: 32,
            epochs: 30,
            grad_clip: Some(1.0),
            ema_decay: Some(0.999),
            seed: 0,
            normalize: true,
            deterministic: false,
        }
    }
}

impl RunConfig {
    pub fn kernel_spec(&self) -> Result<KernelSpec> {
        KernelSpec::new(self.kernel, self.gamma.unwrap_or_else(|| self.kernel.default_gamma()))
    }

    pub fn architecture(&self, channels: usize) -> Architecture {
        let whiten = if self.whiten && self.mixer { self.kernel_spec().ok() } else { None };
        Architecture {
            whiten,
            channels,
            hidden: self.hidden,
            depth: self.depth,
            enc_dim: self.enc_dim,
            enc_scale: self.enc_scale,
            mixer: self.mixer,
            mixer_scales: self.mixer_scales.clone(),
        }
    }

    pub fn process(&self) -> Result<Process> {
        let kernel = self.kernel_spec()?;
        match self.model {
            ModelKind::Dspd => {
                let schedule = DiffusionSchedule::linear(self.diffusion_steps, self.beta_start, self.beta_end)?;
                Ok(Process::Dspd(Dspd { schedule, kernel, sampler_noise: self.sampler_noise }))
            }
            ModelKind::Cspd => {
                let schedule = VpSchedule::new(self.beta_min, self.beta_max)?;
                if !(0.0 < self.s_min && self.s_min < schedule.horizon) {
                    return Err(Error::InvalidRange(format!("s_min must lie in (0, 1), got {}", self.s_min)));
                }
                Ok(Process::Cspd(Cspd { schedule, kernel, s_min: self.s_min }))
            }
        }
    }

    /// Field-level validation of everything that does not depend on data.
    pub fn validate(&self) -> Result<()> {
        self.process()?;
        self.architecture(1).validate()?;
        if self.batch_size == 0 {
            return Err(Error::InvalidRange("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidRange(format!("lr must be positive, got {}", self.lr)));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::InvalidRange(format!("grad_clip must be positive, got {c}")));
            }
        }
        if let Some(d) = self.ema_decay {
            if !(0.0..1.0).contains(&d) {
                return Err(Error::InvalidRange(format!("ema_decay must lie in [0, 1), got {d}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Process {
    Dspd(Dspd),
    Cspd(Cspd),
}

impl Process {
    pub fn kernel(&self) -> &KernelSpec {
        match self {
            Process::Dspd(p) => &p.kernel,
            Process::Cspd(p) => &p.kernel,
        }
    }

    pub fn default_sampler(&self) -> SamplerKind {
        match self {
            Process::Dspd(_) => SamplerKind::Ancestral,
            Process::Cspd(_) => SamplerKind::ReverseSde,
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub config: RunConfig,
    pub process: Process,
    pub params: DenoiserParams,
    pub normalizer: Normalizer,
    pub time_map: TimeMap,
}

/// Fit a model to `data`, reporting every finished epoch to `on_epoch`.
///
/// All randomness flows from `config.seed`: initialization first, then for
/// each epoch a shuffle of the series followed by the mini-batch draws.
pub fn train(config: &RunConfig, data: &TimeSeriesBatch, mut on_epoch: impl FnMut(&EpochLog)) -> Result<TrainedModel> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let process = config.process()?;
    let normalizer = if config.normalize { Normalizer::fit(data) } else { Normalizer::identity(data.dim()) };
    let time_map = TimeMap::fit(data);
    let series: Vec<Series> = data
        .iter()
        .map(|s| Series::new(time_map.apply(&s.grid)?, normalizer.normalize(&s.values)))
        .collect::<Result<_>>()?;

    let mut rng = seeded(config.seed);
    let mut params = DenoiserParams::init(config.architecture(data.dim()), &mut rng)?;
    let mut opt = Adam::new(AdamConfig { lr: config.lr, ..AdamConfig::default() });
    let mut average = config.ema_decay.map(|d| (d, params.clone()));
    let mut order: Vec<usize> = (0..series.len()).collect();
    for epoch in 1..=config.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<Series> = chunk.iter().map(|&i| series[i].clone()).collect();
            let (loss, mut grads) = match &process {
                Process::Dspd(p) => p.training_loss(&params, &batch, &mut rng, config.deterministic)?,
                Process::Cspd(p) => p.score_matching_loss(&params, &batch, &mut rng, config.deterministic)?,
            };
            if let Some(clip) = config.grad_clip {
                let norm = adam::global_norm(&grads);
                if norm > clip {
                    adam::scale(&mut grads, clip / norm);
                }
            }
            opt.step(&mut params, &grads);
            if let Some((decay, avg)) = average.as_mut() {
                adam::ema_update(avg, &params, *decay, opt.steps_taken());
            }
            total += loss;
            batches += 1;
        }
        if !adam::all_finite(&params) {
            return Err(Error::Overflow(format!("parameters became non-finite in epoch {epoch}")));
        }
        on_epoch(&EpochLog { epoch, loss: total / batches as f64, seconds: start.elapsed().as_secs_f64() });
    }
    if let Some((_, avg)) = average {
        params = avg;
    }
    Ok(TrainedModel { config: config.clone(), process, params, normalizer, time_map })
}

impl TrainedModel {
    /// Draw `n` series. Sample `i` uses grid `grids[i % grids.len()]` (in
    /// original time units) and the random stream `stream(seed, i)`.
    /// `steps` sets the solver steps of the continuous samplers.
    pub fn sample(&self, grids: &[TimeGrid], n: usize, seed: u64, sampler: Option<SamplerKind>, steps: Option<usize>) -> Result<TimeSeriesBatch> {
        let d = self.params.arch.channels;
        if n == 0 {
            return TimeSeriesBatch::new(d, vec![]);
        }
        if grids.is_empty() {
            return Err(Error::InvalidGrid("no time grid given".into()));
        }
        let sampler = sampler.unwrap_or_else(|| self.process.default_sampler());
        match (&self.process, sampler) {
            (Process::Dspd(_), SamplerKind::Ancestral) => {
                if steps.is_some() {
                    return Err(Error::InvalidRange("solver steps apply only to the continuous samplers".into()));
                }
            }
            (Process::Cspd(_), SamplerKind::ReverseSde | SamplerKind::ProbFlow) => {}
            (_, s) => return Err(Error::InvalidRange(format!("sampler {s:?} does not fit this model"))),
        }
        let mapped: Vec<TimeGrid> = grids.iter().map(|g| self.time_map.apply(g)).collect::<Result<_>>()?;
        let series = (0..n)
            .into_par_iter()
            .map(|i| {
                let k = i % grids.len();
                let mut rng = stream(seed, i as u64);
                let x = match (&self.process, sampler) {
                    (Process::Dspd(p), _) => p.ancestral_sample(&self.params, &mapped[k], d, &mut rng)?,
                    (Process::Cspd(p), SamplerKind::ReverseSde) => {
                        p.reverse_sde_sample(&self.params, &mapped[k], d, &mut rng, steps.unwrap_or(500))?
                    }
                    (Process::Cspd(p), _) => p.probability_flow_sample(&self.params, &mapped[k], d, &mut rng, steps.unwrap_or(100))?,
                };
                Series::new(grids[k].clone(), self.normalizer.denormalize(&x))
            })
            .collect::<Result<Vec<_>>>()?;
        TimeSeriesBatch::new(d, series)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION.to_string(),
            tool_version: TOOL_VERSION.to_string(),
            config: self.config.clone(),
            architecture: self.params.arch.clone(),
            normalizer: self.normalizer.clone(),
            time_map: self.time_map,
            tensors: self.params.to_records(),
        }
    }

    pub fn from_checkpoint(c: Checkpoint) -> Result<Self> {
        if c.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!("expected format {CHECKPOINT_FORMAT}, found {}", c.format)));
        }
        check_version(&c.version)?;
        let process = c.config.process()?;
        let params = DenoiserParams::from_records(c.architecture, &c.tensors)?;
        if c.normalizer.mean.len() != params.arch.channels {
            return Err(Error::DimensionMismatch { expected: params.arch.channels, got: c.normalizer.mean.len() });
        }
        Ok(Self { config: c.config, process, params, normalizer: c.normalizer, time_map: c.time_map })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, &self.to_checkpoint())?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c: Checkpoint = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        Self::from_checkpoint(c)
    }
}

pub const CHECKPOINT_FORMAT: &str = "spdiff-checkpoint";
pub const CHECKPOINT_VERSION: &str = "1.0";

/// On-disk model: configuration, architecture, data transforms and the
/// network tensors as base64 little-endian `f64` arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: String,
    pub tool_version: String,
    pub config: RunConfig,
    pub architecture: Architecture,
    pub normalizer: Normalizer,
    pub time_map: TimeMap,
    pub tensors: Vec<TensorRecord>,
}
