//! Discrete stochastic-process diffusion.
//!
//! A DDPM whose per-step noise is drawn from a Gaussian process on the series'
//! time grid instead of independently per observation:
//!
//! ```text
//! q(X_n | X_{n-1}) = N(sqrt(1 - beta_n) X_{n-1}, beta_n Sigma)
//! q(X_n | X_0)     = N(sqrt(abar_n) X_0, (1 - abar_n) Sigma)
//! ```
//!
//! The model predicts the white noise `eps` behind `L eps`, so the training
//! objective reduces to a plain mean squared error.

use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{kl_scaled_gaussians, mvn_logpdf, GaussianSpec, LowerTriangular};
use crate::model::{NoisePredictor, Trainable};
use crate::noise::KernelSpec;
use crate::rng::normal_array;
use crate::series::{Series, TimeGrid, TimeSeriesBatch};

/// Noise scales `beta_1..beta_N` with `alpha_n = 1 - beta_n` and
/// `abar_n = prod_{k<=n} alpha_k`. Steps are 1-based; `abar_0 = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    /// `N` betas linearly spaced from `beta_start` to `beta_end` inclusive.
    pub fn linear(n: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidRange(format!("need at least 2 diffusion steps, got {n}")));
        }
        if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
            return Err(Error::InvalidRange(format!(
                "need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let step = (beta_end - beta_start) / (n - 1) as f64;
        let betas = (0..n)
            .map(|i| if i == n - 1 { beta_end } else { beta_start + i as f64 * step })
            .collect();
        Self::from_betas(betas)
    }

    /// Any strictly increasing sequence in `(0, 1)`.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidRange("empty schedule".into()));
        }
        if betas.iter().any(|b| !(0.0 < *b && *b < 1.0)) {
            return Err(Error::InvalidRange("betas must lie in (0, 1)".into()));
        }
        if betas.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidRange("betas must be strictly increasing".into()));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alphas, alpha_bars })
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn beta(&self, n: usize) -> f64 {
        self.betas[n - 1]
    }

    pub fn alpha(&self, n: usize) -> f64 {
        self.alphas[n - 1]
    }

    pub fn alpha_bar(&self, n: usize) -> f64 {
        if n == 0 {
            1.0
        } else {
            self.alpha_bars[n - 1]
        }
    }

    /// Posterior variance factor `(1 - abar_{n-1}) beta_n / (1 - abar_n)`.
    pub fn beta_tilde(&self, n: usize) -> f64 {
        (1.0 - self.alpha_bar(n - 1)) * self.beta(n) / (1.0 - self.alpha_bar(n))
    }

    /// Requires `sqrt(abar_N) < 0.05`, i.e. the last step is close to pure noise.
    pub fn check_final_noise(&self) -> Result<()> {
        let r = self.alpha_bar(self.len()).sqrt();
        if r < 0.05 {
            Ok(())
        } else {
            Err(Error::FinalNoiseTooLarge(r))
        }
    }

    fn check_step(&self, n: usize) -> Result<()> {
        if (1..=self.len()).contains(&n) {
            Ok(())
        } else {
            Err(Error::StepOutOfRange { step: n, max: self.len() })
        }
    }

    /// Mean and variance factor of `q(X_{n-1} | X_n, X_0) = N(mu, beta_tilde Sigma)`.
    ///
    /// At `n = 1` the posterior is the point mass at `X_0`.
    pub fn posterior_params(&self, x0: &Array2<f64>, xn: &Array2<f64>, n: usize) -> Result<(Array2<f64>, f64)> {
        self.check_step(n)?;
        if x0.dim() != xn.dim() {
            return Err(Error::ShapeMismatch(format!("X0 is {:?} but Xn is {:?}", x0.dim(), xn.dim())));
        }
        if n == 1 {
            return Ok((x0.clone(), 0.0));
        }
        let (ab_prev, ab) = (self.alpha_bar(n - 1), self.alpha_bar(n));
        let c0 = ab_prev.sqrt() * self.beta(n) / (1.0 - ab);
        let cn = self.alpha(n).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        Ok((x0 * c0 + xn * cn, self.beta_tilde(n)))
    }
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        Self::linear(100, 1e-3, 0.3).expect("default schedule is valid")
    }
}

/// Scale of the noise injected by the ancestral sampler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerNoise {
    /// `beta_n * L z`, as the sampling pseudocode is printed; the reverse
    /// model scored by the ELBO then has covariance `beta_n Sigma`.
    Beta,
    /// `sqrt(beta_tilde_n) * L z`, matching the exact posterior covariance.
    #[default]
    BetaTilde,
}

impl std::str::FromStr for SamplerNoise {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "beta" => Ok(SamplerNoise::Beta),
            "beta_tilde" | "beta-tilde" => Ok(SamplerNoise::BetaTilde),
            other => Err(Error::Format(format!("unknown sampler noise `{other}`"))),
        }
    }
}

/// The three parts of the variational bound, each summed over channels and
/// averaged over Monte-Carlo draws.
#[derive(Debug, Clone, PartialEq)]
pub struct ElboTerms {
    /// `log p(X_0 | X_1)` with covariance `beta_1 Sigma`.
    pub reconstruction: f64,
    /// `KL(q(X_N | X_0) || N(0, Sigma))`.
    pub prior_kl: f64,
    /// `KL(q(X_{n-1} | X_n, X_0) || p(X_{n-1} | X_n))` for `n = 2..=N`.
    pub step_kls: Vec<f64>,
}

impl ElboTerms {
    pub fn total(&self) -> f64 {
        self.reconstruction - self.prior_kl - self.step_kls.iter().sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dspd {
    pub schedule: DiffusionSchedule,
    pub kernel: KernelSpec,
    #[serde(default)]
    pub sampler_noise: SamplerNoise,
}

impl Dspd {
    pub fn new(schedule: DiffusionSchedule, kernel: KernelSpec) -> Self {
        Self { schedule, kernel, sampler_noise: SamplerNoise::default() }
    }

    /// Noise level handed to the model at step `n`.
    pub fn level(&self, n: usize) -> f64 {
        n as f64 / self.schedule.len() as f64
    }

    /// Variance factor of the learned reverse transition at step `n >= 2`.
    pub fn reverse_variance(&self, n: usize) -> f64 {
        match self.sampler_noise {
            SamplerNoise::Beta => self.schedule.beta(n),
            SamplerNoise::BetaTilde => self.schedule.beta_tilde(n),
        }
    }

    fn sampler_scale(&self, n: usize) -> f64 {
        match self.sampler_noise {
            SamplerNoise::Beta => self.schedule.beta(n),
            SamplerNoise::BetaTilde => self.schedule.beta_tilde(n).sqrt(),
        }
    }

    /// Draw `X_n ~ q(X_n | X_0)`; returns `(X_n, white)`.
    pub fn forward_sample<R: Rng + ?Sized>(
        &self,
        x0: &Array2<f64>,
        grid: &TimeGrid,
        n: usize,
        rng: &mut R,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        check_rows(x0, grid)?;
        let l = self.kernel.factor(grid)?;
        self.forward_sample_with_factor(x0, &l, n, rng)
    }

    pub fn forward_sample_with_factor<R: Rng + ?Sized>(
        &self,
        x0: &Array2<f64>,
        l: &LowerTriangular,
        n: usize,
        rng: &mut R,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        self.schedule.check_step(n)?;
        let white = normal_array(rng, x0.nrows(), x0.ncols());
        let xn = self.noised(x0, l, n, &white)?;
        Ok((xn, white))
    }

    /// `sqrt(abar_n) X_0 + sqrt(1 - abar_n) L white`.
    pub fn noised(&self, x0: &Array2<f64>, l: &LowerTriangular, n: usize, white: &Array2<f64>) -> Result<Array2<f64>> {
        let ab = self.schedule.alpha_bar(n);
        let coloured = l.mul_columns(white)?;
        Ok(x0 * ab.sqrt() + &coloured * (1.0 - ab).sqrt())
    }

    /// One Markov step `X_{n-1} -> X_n`.
    pub fn single_step_forward<R: Rng + ?Sized>(
        &self,
        x_prev: &Array2<f64>,
        grid: &TimeGrid,
        n: usize,
        rng: &mut R,
    ) -> Result<Array2<f64>> {
        self.schedule.check_step(n)?;
        check_rows(x_prev, grid)?;
        let l = self.kernel.factor(grid)?;
        let beta = self.schedule.beta(n);
        let z = normal_array(rng, x_prev.nrows(), x_prev.ncols());
        Ok(x_prev * (1.0 - beta).sqrt() + &l.mul_columns(&z)? * beta.sqrt())
    }

    /// Reverse mean under the noise parameterization:
    /// `(X_n - beta_n / sqrt(1 - abar_n) L eps) / sqrt(alpha_n)`.
    pub fn reverse_mean(&self, xn: &Array2<f64>, eps: &Array2<f64>, l: &LowerTriangular, n: usize) -> Result<Array2<f64>> {
        let coef = self.schedule.beta(n) / (1.0 - self.schedule.alpha_bar(n)).sqrt();
        let le = l.mul_columns(eps)?;
        Ok((xn - &(&le * coef)) / self.schedule.alpha(n).sqrt())
    }

    /// Mean squared error between the white noise and the model's prediction,
    /// averaged over every series, time point and channel, with the gradient of
    /// that mean.
    ///
    /// Randomness is consumed series by series: first the step
    /// `n ~ U{1..N}`, then `M x d` white normals in row-major order. The
    /// per-series work then runs in parallel; with `deterministic` the
    /// gradients are summed in series order.
    pub fn training_loss<M: Trainable, R: Rng + ?Sized>(
        &self,
        model: &M,
        batch: &[Series],
        rng: &mut R,
        deterministic: bool,
    ) -> Result<(f64, M::Grads)> {
        let big_n = self.schedule.len();
        let draws: Vec<(usize, Array2<f64>)> = batch
            .iter()
            .map(|s| {
                let n = rng.random_range(1..=big_n);
                (n, normal_array(rng, s.len(), s.channels()))
            })
            .collect();
        let count: usize = batch.iter().map(|s| s.len() * s.channels()).sum();
        let per_series = |(s, (n, white)): (&Series, &(usize, Array2<f64>))| -> Result<(f64, M::Grads)> {
            let l = self.kernel.factor(&s.grid)?;
            let xn = self.noised(&s.values, &l, *n, white)?;
            let (pred, grads) = model.squared_error_grads(&xn, s.grid.times(), self.level(*n), white);
            Ok((squared_error(&pred, white)?, grads))
        };
        reduce_losses::<M, _>(model, batch, &draws, count, deterministic, per_series)
    }

    /// Monte-Carlo estimate of the evidence lower bound for one series.
    pub fn elbo<M: NoisePredictor + ?Sized, R: Rng + ?Sized>(
        &self,
        model: &M,
        series: &Series,
        rng: &mut R,
        mc_samples: usize,
    ) -> Result<f64> {
        Ok(self.elbo_terms(model, series, rng, mc_samples)?.total())
    }

    /// The ELBO decomposed into its terms.
    ///
    /// Each Monte-Carlo round draws `X_1` for the reconstruction term and then
    /// an independent `X_n ~ q(X_n | X_0)` for every `n = 2..=N`.
    pub fn elbo_terms<M: NoisePredictor + ?Sized, R: Rng + ?Sized>(
        &self,
        model: &M,
        series: &Series,
        rng: &mut R,
        mc_samples: usize,
    ) -> Result<ElboTerms> {
        if mc_samples == 0 {
            return Err(Error::InvalidRange("mc_samples must be at least 1".into()));
        }
        let big_n = self.schedule.len();
        let l = self.kernel.factor(&series.grid)?;
        let x0 = &series.values;
        let times = series.grid.times();

        let ab_n = self.schedule.alpha_bar(big_n);
        let zeros = Array2::zeros(x0.dim());
        let prior_kl = sum_channels(&(x0 * ab_n.sqrt()), 1.0 - ab_n, &zeros, 1.0, &l)?;

        let mut reconstruction = 0.0;
        let mut step_kls = vec![0.0; big_n - 1];
        for _ in 0..mc_samples {
            let (x1, _) = self.forward_sample_with_factor(x0, &l, 1, rng)?;
            let eps = model.predict(&x1, times, self.level(1));
            let mu = self.reverse_mean(&x1, &eps, &l, 1)?;
            let beta1 = self.schedule.beta(1);
            for c in 0..x0.ncols() {
                let mean = mu.column(c).to_vec();
                let g = GaussianSpec::new(&mean, beta1, &l)?;
                reconstruction += mvn_logpdf(&x0.column(c).to_vec(), &g)?;
            }
            for n in 2..=big_n {
                let (xn, _) = self.forward_sample_with_factor(x0, &l, n, rng)?;
                let (mu_post, beta_post) = self.schedule.posterior_params(x0, &xn, n)?;
                let eps = model.predict(&xn, times, self.level(n));
                let mu_model = self.reverse_mean(&xn, &eps, &l, n)?;
                step_kls[n - 2] += sum_channels(&mu_post, beta_post, &mu_model, self.reverse_variance(n), &l)?;
            }
        }
        let k = mc_samples as f64;
        Ok(ElboTerms {
            reconstruction: reconstruction / k,
            prior_kl,
            step_kls: step_kls.into_iter().map(|v| v / k).collect(),
        })
    }

    /// Ancestral sampling on `grid` with `d` channels.
    ///
    /// Draws `X_N = L z` and then, for `n = N..1`, evaluates the model and
    /// draws a fresh `z` (skipped at `n = 1`, which returns the mean).
    pub fn ancestral_sample<M: NoisePredictor + ?Sized, R: Rng + ?Sized>(
        &self,
        model: &M,
        grid: &TimeGrid,
        d: usize,
        rng: &mut R,
    ) -> Result<Array2<f64>> {
        let l = self.kernel.factor(grid)?;
        let m = grid.len();
        let mut x = l.mul_columns(&normal_array(rng, m, d))?;
        for n in (1..=self.schedule.len()).rev() {
            let eps = model.predict(&x, grid.times(), self.level(n));
            if eps.dim() != x.dim() {
                return Err(Error::ShapeMismatch(format!("model returned {:?}, expected {:?}", eps.dim(), x.dim())));
            }
            let mean = self.reverse_mean(&x, &eps, &l, n)?;
            x = if n > 1 {
                let z = l.mul_columns(&normal_array(rng, m, d))?;
                mean + &z * self.sampler_scale(n)
            } else {
                mean
            };
        }
        Ok(x)
    }

    /// Convenience wrapper over [`Dspd::training_loss`] for a whole batch.
    pub fn batch_loss<M: Trainable, R: Rng + ?Sized>(
        &self,
        model: &M,
        batch: &TimeSeriesBatch,
        rng: &mut R,
    ) -> Result<(f64, M::Grads)> {
        self.training_loss(model, batch.series(), rng, true)
    }
}

fn check_rows(x: &Array2<f64>, grid: &TimeGrid) -> Result<()> {
    if x.nrows() == grid.len() {
        Ok(())
    } else {
        Err(Error::ShapeMismatch(format!("{} rows for {} time points", x.nrows(), grid.len())))
    }
}

pub(crate) fn squared_error(pred: &Array2<f64>, target: &Array2<f64>) -> Result<f64> {
    if pred.dim() != target.dim() {
        return Err(Error::ShapeMismatch(format!("model returned {:?}, expected {:?}", pred.dim(), target.dim())));
    }
    Ok(target.iter().zip(pred.iter()).map(|(t, p)| (t - p) * (t - p)).sum())
}

/// Sum of per-channel KLs between `N(mu1, a Sigma)` and `N(mu2, b Sigma)`.
fn sum_channels(mu1: &Array2<f64>, a: f64, mu2: &Array2<f64>, b: f64, l: &LowerTriangular) -> Result<f64> {
    let mut total = 0.0;
    for c in 0..mu1.ncols() {
        total += kl_scaled_gaussians(&mu1.column(c).to_vec(), a, &mu2.column(c).to_vec(), b, l)?;
    }
    Ok(total)
}

/// Shared tail of the two training objectives: run `per_series` over the
/// batch, sum squared errors and gradients, and divide by `count`.
pub(crate) fn reduce_losses<M, D>(
    model: &M,
    batch: &[Series],
    draws: &[D],
    count: usize,
    deterministic: bool,
    per_series: impl Fn((&Series, &D)) -> Result<(f64, M::Grads)> + Sync,
) -> Result<(f64, M::Grads)>
where
    M: Trainable,
    D: Sync,
{
    if count == 0 {
        return Ok((0.0, model.zero_grads()));
    }
    let (sse, mut grads) = if deterministic {
        let parts: Vec<(f64, M::Grads)> =
            batch.par_iter().zip(draws.par_iter()).map(&per_series).collect::<Result<_>>()?;
        let mut sse = 0.0;
        let mut acc = model.zero_grads();
        for (e, g) in &parts {
            sse += e;
            M::accumulate(&mut acc, g);
        }
        (sse, acc)
    } else {
        batch
            .par_iter()
            .zip(draws.par_iter())
            .map(&per_series)
            .try_reduce(
                || (0.0, model.zero_grads()),
                |(e1, mut g1), (e2, g2)| {
                    M::accumulate(&mut g1, &g2);
                    Ok((e1 + e2, g1))
                },
            )?
    };
    let inv = 1.0 / count as f64;
    M::scale(&mut grads, inv);
    Ok((sse * inv, grads))
}
