//! Synthetic datasets generated from ODEs and SDEs.
//!
//! Every series draws from its own random stream `stream(seed, index)`, so a
//! batch is reproducible regardless of thread count and any prefix of a larger
//! batch equals the smaller batch.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{standard_normal, stream, SpRng};
use crate::series::{Series, TimeGrid, TimeSeriesBatch};

/// Largest internal step of the ODE integrators.
pub const ODE_MAX_DT: f64 = 1e-3;
/// Euler–Maruyama substeps per unit of time for the SDE datasets.
pub const SDE_SUBSTEPS_PER_UNIT: usize = 64;

/// Classical fourth-order Runge–Kutta step.
pub fn rk4_step<const N: usize>(f: impl Fn(&[f64; N], f64) -> [f64; N], x: &[f64; N], t: f64, dt: f64) -> [f64; N] {
    let axpy = |a: &[f64; N], k: &[f64; N], h: f64| -> [f64; N] { std::array::from_fn(|i| a[i] + h * k[i]) };
    let k1 = f(x, t);
    let k2 = f(&axpy(x, &k1, 0.5 * dt), t + 0.5 * dt);
    let k3 = f(&axpy(x, &k2, 0.5 * dt), t + 0.5 * dt);
    let k4 = f(&axpy(x, &k3, dt), t + dt);
    std::array::from_fn(|i| x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
}

/// `x + drift dt + diff sqrt(dt) z` with independent `z` per component.
pub fn euler_maruyama_step<const N: usize, R: Rng + ?Sized>(
    drift: impl Fn(&[f64; N], f64) -> [f64; N],
    diff: impl Fn(&[f64; N], f64) -> [f64; N],
    x: &[f64; N],
    t: f64,
    dt: f64,
    rng: &mut R,
) -> [f64; N] {
    let a = drift(x, t);
    let b = diff(x, t);
    let sq = dt.sqrt();
    std::array::from_fn(|i| x[i] + a[i] * dt + b[i] * sq * standard_normal(rng))
}

/// Integrates from `(t0, x0)` and records the state at each of `times`
/// (all `>= t0`), using RK4 substeps no longer than `max_dt` that land exactly
/// on the recording times.
pub fn integrate_ode<const N: usize>(
    f: impl Fn(&[f64; N], f64) -> [f64; N] + Copy,
    x0: [f64; N],
    t0: f64,
    times: &[f64],
    max_dt: f64,
) -> Vec<[f64; N]> {
    let mut x = x0;
    let mut t = t0;
    let mut out = Vec::with_capacity(times.len());
    for &target in times {
        let span = target - t;
        if span > 0.0 {
            let n = (span / max_dt).ceil() as usize;
            let h = span / n as f64;
            for k in 0..n {
                x = rk4_step(f, &x, t + k as f64 * h, h);
            }
        }
        t = target;
        out.push(x);
    }
    out
}

/// Euler–Maruyama from `(t0, x0)`, recording at each of `times`, with
/// `substeps_per_unit` steps per unit time (at least one per interval).
pub fn simulate_sde<const N: usize, R: Rng + ?Sized>(
    drift: impl Fn(&[f64; N], f64) -> [f64; N] + Copy,
    diff: impl Fn(&[f64; N], f64) -> [f64; N] + Copy,
    x0: [f64; N],
    t0: f64,
    times: &[f64],
    substeps_per_unit: usize,
    rng: &mut R,
) -> Vec<[f64; N]> {
    let mut x = x0;
    let mut t = t0;
    let mut out = Vec::with_capacity(times.len());
    for &target in times {
        let span = target - t;
        if span > 0.0 {
            let n = ((span * substeps_per_unit as f64).round() as usize).max(1);
            let h = span / n as f64;
            for k in 0..n {
                x = euler_maruyama_step(drift, diff, &x, t + k as f64 * h, h, rng);
            }
        }
        t = target;
        out.push(x);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetName {
    Cir,
    Lorenz,
    OuData,
    PredatorPrey,
    Sine,
    Sink,
}

impl DatasetName {
    pub const ALL: [DatasetName; 6] = [
        DatasetName::Cir,
        DatasetName::Lorenz,
        DatasetName::OuData,
        DatasetName::PredatorPrey,
        DatasetName::Sine,
        DatasetName::Sink,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DatasetName::Cir => "cir",
            DatasetName::Lorenz => "lorenz",
            DatasetName::OuData => "ou_data",
            DatasetName::PredatorPrey => "predator_prey",
            DatasetName::Sine => "sine",
            DatasetName::Sink => "sink",
        }
    }

    pub fn channels(self) -> usize {
        match self {
            DatasetName::Cir | DatasetName::OuData | DatasetName::Sine => 1,
            DatasetName::PredatorPrey | DatasetName::Sink => 2,
            DatasetName::Lorenz => 3,
        }
    }

    /// Parameter names accepted as overrides, with their defaults.
    pub fn defaults(self) -> &'static [(&'static str, f64)] {
        match self {
            DatasetName::Cir => &[("a", 1.0), ("b", 1.2), ("sigma", 0.2), ("length", 64.0)],
            DatasetName::Lorenz => &[("rho", 28.0), ("sigma", 10.0), ("beta", 2.667), ("points", 100.0), ("horizon", 2.0)],
            DatasetName::OuData => &[("mu", 0.02), ("theta", 0.1), ("sigma", 0.4), ("length", 64.0)],
            DatasetName::PredatorPrey => &[("init_low", 0.5), ("init_high", 2.0), ("points", 100.0), ("horizon", 10.0)],
            DatasetName::Sine => &[("waves", 5.0), ("points", 64.0), ("horizon", 10.0)],
            DatasetName::Sink => &[("points", 100.0), ("horizon", 1.0)],
        }
    }
}

impl fmt::Display for DatasetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "cir" => Ok(DatasetName::Cir),
            "lorenz" => Ok(DatasetName::Lorenz),
            "ou" | "ou_data" => Ok(DatasetName::OuData),
            "predator_prey" | "lotka_volterra" => Ok(DatasetName::PredatorPrey),
            "sine" => Ok(DatasetName::Sine),
            "sink" => Ok(DatasetName::Sink),
            _ => Err(Error::UnknownDataset(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: DatasetName,
    pub n_series: usize,
    pub seed: u64,
    #[serde(default)]
    pub overrides: BTreeMap<String, f64>,
}

impl DatasetSpec {
    pub fn new(name: DatasetName, n_series: usize, seed: u64) -> Self {
        Self { name, n_series, seed, overrides: BTreeMap::new() }
    }

    pub fn with(mut self, key: &str, value: f64) -> Self {
        self.overrides.insert(key.to_string(), value);
        self
    }

    /// Resolved parameters; rejects override keys the dataset does not know.
    pub fn params(&self) -> Result<BTreeMap<&'static str, f64>> {
        let defaults = self.name.defaults();
        for key in self.overrides.keys() {
            if !defaults.iter().any(|(k, _)| k == key) {
                return Err(Error::InvalidRange(format!("{} has no parameter `{key}`", self.name)));
            }
        }
        Ok(defaults.iter().map(|&(k, v)| (k, self.overrides.get(k).copied().unwrap_or(v))).collect())
    }
}

/// Generate a batch for `spec`.
pub fn generate(spec: &DatasetSpec) -> Result<TimeSeriesBatch> {
    if spec.n_series == 0 {
        return Err(Error::InvalidRange("n_series must be at least 1".into()));
    }
    let p = spec.params()?;
    let one: fn(&BTreeMap<&str, f64>, &mut SpRng) -> Result<Series> = match spec.name {
        DatasetName::Cir => cir_series,
        DatasetName::Lorenz => lorenz_series,
        DatasetName::OuData => ou_series,
        DatasetName::PredatorPrey => predator_prey_series,
        DatasetName::Sine => sine_series,
        DatasetName::Sink => sink_series,
    };
    let series = (0..spec.n_series)
        .into_par_iter()
        .map(|i| one(&p, &mut stream(spec.seed, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    TimeSeriesBatch::new(spec.name.channels(), series)
}

pub fn gen_cir(spec: &DatasetSpec) -> Result<TimeSeriesBatch> {
    generate(&DatasetSpec { name: DatasetName::Cir, ..spec.clone() })
}

pub fn gen_lorenz(spec: &DatasetSpec) -> Result<TimeSeriesBatch> {
    generate(&DatasetSpec { name: DatasetName::Lorenz, ..spec.clone() })
}

pub fn gen_ou_data(spec: &DatasetSpec) -> Result<TimeSeriesBatch> {
    generate(&DatasetSpec { name: DatasetName::OuData, ..spec.clone() })
}

pub fn gen_predator_prey(spec: &DatasetSpec) -> Result<TimeSeriesBatch> {
    generate(&DatasetSpec { name: DatasetName::PredatorPrey, ..spec.clone() })
}

pub fn gen_sine(spec: &DatasetSpec) -> Result<TimeSeriesBatch> {
    generate(&DatasetSpec { name: DatasetName::Sine, ..spec.clone() })
}

pub fn gen_sink(spec: &DatasetSpec) -> Result<TimeSeriesBatch> {
    generate(&DatasetSpec { name: DatasetName::Sink, ..spec.clone() })
}

fn count(p: &BTreeMap<&str, f64>, key: &str) -> Result<usize> {
    let v = p[key];
    if v >= 1.0 && v.fract() == 0.0 {
        Ok(v as usize)
    } else {
        Err(Error::InvalidRange(format!("`{key}` must be a positive integer, got {v}")))
    }
}

fn to_series<const N: usize>(grid: TimeGrid, states: &[[f64; N]]) -> Result<Series> {
    let values = Array2::from_shape_fn((states.len(), N), |(i, c)| states[i][c]);
    Series::new(grid, values)
}

/// Integer times `1..=length`.
fn integer_grid(p: &BTreeMap<&str, f64>) -> Result<TimeGrid> {
    let len = count(p, "length")?;
    TimeGrid::new((1..=len).map(|t| t as f64).collect())
}

fn uniform_grid(p: &BTreeMap<&str, f64>) -> Result<TimeGrid> {
    TimeGrid::uniform(count(p, "points")?, 0.0, p["horizon"])
}

/// `dx = a (b - x) dt + sigma sqrt(max(x, 0)) dW` from a positive `N(0, 1)`
/// draw at `t = 0`, recorded at `t = 1, ..., length`.
fn cir_series(p: &BTreeMap<&str, f64>, rng: &mut SpRng) -> Result<Series> {
    let (a, b, sigma) = (p["a"], p["b"], p["sigma"]);
    let x0 = loop {
        let v = standard_normal(rng);
        if v > 0.0 {
            break v;
        }
    };
    let grid = integer_grid(p)?;
    let states = simulate_sde(
        |x: &[f64; 1], _| [a * (b - x[0])],
        |x: &[f64; 1], _| [sigma * x[0].max(0.0).sqrt()],
        [x0],
        0.0,
        grid.times(),
        SDE_SUBSTEPS_PER_UNIT,
        rng,
    );
    to_series(grid, &states)
}

/// `dx = (mu t - theta x) dt + sigma dW` from `N(0, 1)` at `t = 0`.
fn ou_series(p: &BTreeMap<&str, f64>, rng: &mut SpRng) -> Result<Series> {
    let x0 = standard_normal(rng);
    ou_series_from(p, x0, rng)
}

fn ou_series_from(p: &BTreeMap<&str, f64>, x0: f64, rng: &mut SpRng) -> Result<Series> {
    let (mu, theta, sigma) = (p["mu"], p["theta"], p["sigma"]);
    let grid = integer_grid(p)?;
    let states = simulate_sde(
        |x: &[f64; 1], t| [mu * t - theta * x[0]],
        |_: &[f64; 1], _| [sigma],
        [x0],
        0.0,
        grid.times(),
        SDE_SUBSTEPS_PER_UNIT,
        rng,
    );
    to_series(grid, &states)
}

pub fn lorenz_field(rho: f64, sigma: f64, beta: f64) -> impl Fn(&[f64; 3], f64) -> [f64; 3] + Copy {
    move |x: &[f64; 3], _| [sigma * (x[1] - x[0]), x[0] * (rho - x[2]) - x[1], x[0] * x[1] - beta * x[2]]
}

/// Fixed-step RK4 trajectory on `[0, horizon]` with step `ODE_MAX_DT`.
pub fn lorenz_trajectory(x0: [f64; 3], rho: f64, sigma: f64, beta: f64, horizon: f64) -> Vec<[f64; 3]> {
    let f = lorenz_field(rho, sigma, beta);
    let steps = (horizon / ODE_MAX_DT).round() as usize;
    let mut traj = Vec::with_capacity(steps + 1);
    let mut x = x0;
    traj.push(x);
    for k in 0..steps {
        x = rk4_step(f, &x, k as f64 * ODE_MAX_DT, ODE_MAX_DT);
        traj.push(x);
    }
    traj
}

/// Lorenz system from `N(0, 100 I)`, observed at sorted uniform random times
/// by linear interpolation of a fine trajectory.
fn lorenz_series(p: &BTreeMap<&str, f64>, rng: &mut SpRng) -> Result<Series> {
    let (rho, sigma, beta, horizon) = (p["rho"], p["sigma"], p["beta"], p["horizon"]);
    let points = count(p, "points")?;
    let x0 = [10.0 * standard_normal(rng), 10.0 * standard_normal(rng), 10.0 * standard_normal(rng)];
    let mut times: Vec<f64> = (0..points).map(|_| rng.random_range(0.0..horizon)).collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    while times.len() < points {
        times.push(rng.random_range(0.0..horizon));
        times.sort_by(f64::total_cmp);
        times.dedup();
    }
    let traj = lorenz_trajectory(x0, rho, sigma, beta, horizon);
    let last = traj.len() - 1;
    let states: Vec<[f64; 3]> = times
        .iter()
        .map(|&t| {
            let pos = t / ODE_MAX_DT;
            let k = (pos.floor() as usize).min(last - 1);
            let w = pos - k as f64;
            std::array::from_fn(|c| (1.0 - w) * traj[k][c] + w * traj[k + 1][c])
        })
        .collect();
    to_series(TimeGrid::new(times)?, &states)
}

pub fn predator_prey_field(x: &[f64; 2], _: f64) -> [f64; 2] {
    [2.0 / 3.0 * x[0] - 2.0 / 3.0 * x[0] * x[1], x[0] * x[1] - x[1]]
}

/// Lotka–Volterra from `Uniform(init_low, init_high)^2`.
fn predator_prey_series(p: &BTreeMap<&str, f64>, rng: &mut SpRng) -> Result<Series> {
    let (lo, hi) = (p["init_low"], p["init_high"]);
    let x0 = [rng.random_range(lo..hi), rng.random_range(lo..hi)];
    let grid = uniform_grid(p)?;
    let states = integrate_ode(predator_prey_field, x0, 0.0, grid.times(), ODE_MAX_DT);
    to_series(grid, &states)
}

/// Draws `(a, b, c)` for one wave: `a ~ N(3, 1)`, `b ~ N(0, 0.25)`, `c ~ N(0, 1)`.
pub fn draw_wave<R: Rng + ?Sized>(rng: &mut R) -> (f64, f64, f64) {
    let a = 3.0 + standard_normal(rng);
    let b = 0.5 * standard_normal(rng);
    let c = standard_normal(rng);
    (a, b, c)
}

/// `sum_k a_k sin(b_k t + c_k)` on `grid`.
pub fn sine_mixture(waves: &[(f64, f64, f64)], grid: &TimeGrid) -> Result<Series> {
    let values =
        Array2::from_shape_fn((grid.len(), 1), |(i, _)| waves.iter().map(|(a, b, c)| a * (b * grid.times()[i] + c).sin()).sum());
    Series::new(grid.clone(), values)
}

fn sine_series(p: &BTreeMap<&str, f64>, rng: &mut SpRng) -> Result<Series> {
    let waves: Vec<_> = (0..count(p, "waves")?).map(|_| draw_wave(rng)).collect();
    sine_mixture(&waves, &uniform_grid(p)?)
}

pub const SINK_MATRIX: [[f64; 2]; 2] = [[-4.0, 10.0], [-3.0, 2.0]];

pub fn sink_field(x: &[f64; 2], _: f64) -> [f64; 2] {
    let a = SINK_MATRIX;
    [a[0][0] * x[0] + a[0][1] * x[1], a[1][0] * x[0] + a[1][1] * x[1]]
}

fn sink_series(p: &BTreeMap<&str, f64>, rng: &mut SpRng) -> Result<Series> {
    let x0 = [standard_normal(rng), standard_normal(rng)];
    let grid = uniform_grid(p)?;
    let states = integrate_ode(sink_field, x0, 0.0, grid.times(), ODE_MAX_DT);
    to_series(grid, &states)
}
