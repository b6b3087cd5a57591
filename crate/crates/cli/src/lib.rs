//! Command-line front end: dataset generation, training, sampling, evaluation
//! and the oracle self-check.
//!
//! Every command writes JSON: series files are JSON lines behind a header,
//! checkpoints are single JSON documents, and reports and logs are one JSON
//! object per line on standard output.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use thiserror::Error;

use spdiff::datasets::{generate, DatasetName, DatasetSpec};
use spdiff::dspd::SamplerNoise;
use spdiff::evaluation::{discriminative_score, energy_score, gaussian_path_nll, marginal_stats, DiscriminatorConfig, EvalReport};
use spdiff::io::{read_batch_file, write_batch_file};
use spdiff::pipeline::{train, ModelKind, RunConfig, SamplerKind, TrainedModel};
use spdiff::rng::seeded;
use spdiff::{KernelKind, KernelSpec, TimeGrid, TimeSeriesBatch};

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "SPDIFF_THREADS";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error in `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("bad times spec `{0}`: expected uniform:M:t0:t1 or a JSON file of grids")]
    BadTimesSpec(String),
    #[error("unknown metric `{0}`, expected disc, nll, marginal or energy")]
    UnknownMetric(String),
    #[error("{path}: {source}")]
    File { path: PathBuf, source: spdiff::Error },
    #[error(transparent)]
    Core(#[from] spdiff::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    fn config(field: &str, message: impl ToString) -> Self {
        CliError::Config { field: field.to_string(), message: message.to_string() }
    }

    fn file(path: &Path, source: spdiff::Error) -> Self {
        CliError::File { path: path.to_path_buf(), source }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "spdiff", version, about = "Stochastic-process diffusion models for continuous-time series")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint; logs one JSON line per epoch.
    Train(TrainArgs),
    /// Draw series from a trained model.
    Sample(SampleArgs),
    /// Compare generated series with real ones.
    Eval(EvalArgs),
    /// Run the oracle suite; exits nonzero if any check fails.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// cir, lorenz, ou_data, predator_prey, sine or sink
    #[arg(long)]
    pub dataset: String,
    #[arg(long, short)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, short)]
    pub out: PathBuf,
    /// Override a dataset parameter, e.g. `--set points=32`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML or JSON run configuration; every field is optional.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, short)]
    pub out: PathBuf,
    /// dspd or cspd
    #[arg(long)]
    pub model: Option<String>,
    /// rbf, ou or white
    #[arg(long)]
    pub kernel: Option<String>,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Number of discrete diffusion steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// beta-tilde or beta
    #[arg(long)]
    pub sampler_noise: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub deterministic: bool,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// `uniform:M:t0:t1` or a JSON file holding an array of time arrays.
    #[arg(long)]
    pub times: String,
    #[arg(long, short)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, short)]
    pub out: PathBuf,
    /// ancestral, reverse-sde or prob-flow
    #[arg(long)]
    pub sampler: Option<String>,
    /// Solver steps of the continuous samplers.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Accepted for symmetry with `train`; output order never depends on
    /// the number of workers.
    #[arg(long)]
    pub deterministic: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// disc, nll, marginal or energy
    #[arg(long)]
    pub metric: String,
    #[arg(long)]
    pub real: PathBuf,
    #[arg(long)]
    pub fake: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Kernel of the reference process for `nll`.
    #[arg(long)]
    pub kernel: Option<String>,
    #[arg(long)]
    pub gamma: Option<f64>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Caps the global worker pool at `SPDIFF_THREADS` when it is set.
pub fn configure_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().map_err(|_| CliError::config(THREADS_ENV, format!("expected a positive integer, got `{raw}`")))?;
    if n == 0 {
        return Err(CliError::config(THREADS_ENV, "must be at least 1"));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::config(THREADS_ENV, e))
}

/// Runs one command, writing logs and reports to `out`. Returns the process
/// exit code.
pub fn run(cli: Cli, out: &mut dyn Write) -> CliResult<i32> {
    match cli.command {
        Command::GenData(a) => cmd_gen_data(&a).map(|_| 0),
        Command::Train(a) => cmd_train(&a, out).map(|_| 0),
        Command::Sample(a) => cmd_sample(&a).map(|_| 0),
        Command::Eval(a) => {
            let report = cmd_eval(&a)?;
            writeln!(out, "{}", report.to_json_line())?;
            Ok(0)
        }
        Command::Verify(a) => cmd_verify(&a, out),
    }
}

fn parse_override(raw: &str) -> CliResult<(String, f64)> {
    let (k, v) = raw.split_once('=').ok_or_else(|| CliError::config("set", format!("expected KEY=VALUE, got `{raw}`")))?;
    let v: f64 = v.trim().parse().map_err(|_| CliError::config(k.trim(), format!("`{v}` is not a number")))?;
    Ok((k.trim().to_string(), v))
}

pub fn cmd_gen_data(a: &GenDataArgs) -> CliResult<()> {
    let name: DatasetName = a.dataset.parse()?;
    let mut spec = DatasetSpec::new(name, a.n, a.seed);
    for raw in &a.overrides {
        let (k, v) = parse_override(raw)?;
        spec = spec.with(&k, v);
    }
    let batch = generate(&spec)?;
    let params = spec.params()?;
    let meta = json!({ "command": "gen-data", "dataset": name.as_str(), "n": a.n, "params": params });
    write_batch_file(&a.out, &batch, Some(a.seed), meta).map_err(|e| CliError::file(&a.out, e))
}

/// Reads a configuration file; the format follows the extension (`.json`
/// for JSON, anything else is TOML).
pub fn load_config(path: &Path) -> CliResult<RunConfig> {
    let text = fs::read_to_string(path)?;
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    if is_json {
        serde_json::from_str(&text).map_err(|e| CliError::config(&path.display().to_string(), e))
    } else {
        toml::from_str(&text).map_err(|e| CliError::config(&path.display().to_string(), e.message()))
    }
}

/// Configuration file (or defaults) with command-line flags applied on top.
pub fn resolve_config(a: &TrainArgs) -> CliResult<RunConfig> {
    let mut c = match &a.config {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    if let Some(m) = &a.model {
        c.model = m.parse::<ModelKind>().map_err(|e| CliError::config("model", e))?;
    }
    if let Some(k) = &a.kernel {
        c.kernel = k.parse::<KernelKind>().map_err(|e| CliError::config("kernel", e))?;
    }
    if let Some(g) = a.gamma {
        c.gamma = Some(g);
    }
    if let Some(n) = a.steps {
        c.diffusion_steps = n;
    }
    if let Some(s) = &a.sampler_noise {
        c.sampler_noise = s.parse::<SamplerNoise>().map_err(|e| CliError::config("sampler_noise", e))?;
    }
    if let Some(e) = a.epochs {
        c.epochs = e;
    }
    if a.deterministic {
        c.deterministic = true;
    }
    if let Some(s) = a.seed {
        c.seed = s;
    }
    c.validate().map_err(|e| CliError::config("config", e))?;
    Ok(c)
}

pub fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> CliResult<()> {
    let config = resolve_config(a)?;
    let (_, data) = read_batch_file(&a.data).map_err(|e| CliError::file(&a.data, e))?;
    writeln!(out, "{}", json!({ "config": config }))?;
    let mut io_error = None;
    let model = train(&config, &data, |log| {
        if io_error.is_none() {
            if let Err(e) = writeln!(out, "{}", serde_json::to_string(log).expect("epoch log serializes")) {
                io_error = Some(e);
            }
        }
    })?;
    if let Some(e) = io_error {
        return Err(e.into());
    }
    model.save(&a.out).map_err(|e| CliError::file(&a.out, e))
}

/// Parses `uniform:M:t0:t1`, or reads a JSON array of time arrays from the
/// named file.
pub fn parse_times(spec: &str) -> CliResult<Vec<TimeGrid>> {
    let bad = || CliError::BadTimesSpec(spec.to_string());
    if let Some(rest) = spec.strip_prefix("uniform:") {
        let parts: Vec<&str> = rest.split(':').collect();
        let [m, t0, t1] = parts[..] else {
            return Err(bad());
        };
        let m: usize = m.parse().map_err(|_| bad())?;
        let t0: f64 = t0.parse().map_err(|_| bad())?;
        let t1: f64 = t1.parse().map_err(|_| bad())?;
        return Ok(vec![TimeGrid::uniform(m, t0, t1).map_err(|_| bad())?]);
    }
    let path = Path::new(spec);
    if !path.is_file() {
        return Err(bad());
    }
    let raw: Vec<Vec<f64>> = serde_json::from_str(&fs::read_to_string(path)?).map_err(|_| bad())?;
    if raw.is_empty() {
        return Err(bad());
    }
    raw.into_iter().map(|t| TimeGrid::new(t).map_err(|_| bad())).collect()
}

pub fn cmd_sample(a: &SampleArgs) -> CliResult<()> {
    let grids = parse_times(&a.times)?;
    let sampler = a.sampler.as_deref().map(str::parse::<SamplerKind>).transpose().map_err(|e| CliError::config("sampler", e))?;
    let model = TrainedModel::load(&a.checkpoint).map_err(|e| CliError::file(&a.checkpoint, e))?;
    let batch = model.sample(&grids, a.n, a.seed, sampler, a.steps)?;
    let meta = json!({
        "command": "sample",
        "checkpoint": a.checkpoint.display().to_string(),
        "times": a.times,
        "n": a.n,
        "sampler": sampler.unwrap_or_else(|| model.process.default_sampler()),
        "steps": a.steps,
        "config": model.config,
    });
    write_batch_file(&a.out, &batch, Some(a.seed), meta).map_err(|e| CliError::file(&a.out, e))
}

fn read(path: &Path) -> CliResult<TimeSeriesBatch> {
    Ok(read_batch_file(path).map_err(|e| CliError::file(path, e))?.1)
}

/// Mean energy score of the fake series against each real series. Fake
/// series are grouped by their exact time grid; every real series needs at
/// least two fake series on its grid.
pub fn grouped_energy_score(real: &TimeSeriesBatch, fake: &TimeSeriesBatch) -> CliResult<EvalReport> {
    if real.is_empty() {
        return Err(spdiff::Error::EmptySampleSet.into());
    }
    let key = |g: &TimeGrid| g.times().iter().map(|t| t.to_bits()).collect::<Vec<u64>>();
    let mut groups: HashMap<Vec<u64>, Vec<_>> = HashMap::new();
    for s in fake.iter() {
        groups.entry(key(&s.grid)).or_default().push(s.values.clone());
    }
    let mut scores = Vec::with_capacity(real.len());
    for s in real.iter() {
        let samples = groups.get(&key(&s.grid)).filter(|g| g.len() > 1).ok_or(spdiff::Error::EmptySampleSet)?;
        scores.push(energy_score(samples, &s.values)?);
    }
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let stderr = if scores.len() > 1 { (scores.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt() } else { 0.0 };
    Ok(EvalReport::new("energy", mean, stderr, real.len(), fake.len()))
}

pub fn cmd_eval(a: &EvalArgs) -> CliResult<EvalReport> {
    let metric = a.metric.to_ascii_lowercase();
    if !["disc", "nll", "marginal", "energy"].contains(&metric.as_str()) {
        return Err(CliError::UnknownMetric(a.metric.clone()));
    }
    let real = read(&a.real)?;
    let fake = read(&a.fake)?;
    let mut echo = json!({ "real": a.real.display().to_string(), "fake": a.fake.display().to_string(), "seed": a.seed });
    let report = match metric.as_str() {
        "disc" => {
            let cfg = DiscriminatorConfig::default();
            echo["discriminator"] = json!(cfg);
            discriminative_score(&real, &fake, &cfg, &mut seeded(a.seed))?
        }
        "nll" => {
            let kind = match &a.kernel {
                Some(k) => k.parse::<KernelKind>().map_err(|e| CliError::config("kernel", e))?,
                None => KernelKind::Ou,
            };
            let kernel = KernelSpec::new(kind, a.gamma.unwrap_or_else(|| kind.default_gamma())).map_err(|e| CliError::config("gamma", e))?;
            echo["kernel"] = json!(kernel);
            let mut r = gaussian_path_nll(&fake, &kernel, None)?;
            let reference = gaussian_path_nll(&real, &kernel, None)?;
            r.n_real = real.len();
            r.details.insert("real_value".into(), reference.value);
            r.details.insert("real_stderr".into(), reference.stderr);
            r
        }
        "marginal" => marginal_stats(&real, &fake)?,
        _ => grouped_energy_score(&real, &fake)?,
    };
    Ok(report.with_config(echo))
}

pub fn cmd_verify(a: &VerifyArgs, out: &mut dyn Write) -> CliResult<i32> {
    let results = spdiff::verify::run_all(a.seed);
    for r in &results {
        writeln!(out, "{}", r.to_json_line())?;
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    writeln!(out, "{}", json!({ "summary": { "checks": results.len(), "failed": failed } }))?;
    Ok(i32::from(failed > 0))
}
