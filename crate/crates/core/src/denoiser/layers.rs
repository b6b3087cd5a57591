//! Building blocks shared by the denoiser and the evaluation discriminator.

use std::ops::Range;

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;

use crate::error::{Error, Result};

/// Sinusoidal encoding: interleaved `(sin(v w_i), cos(v w_i))` with
/// `w_i = 10000^(-2i/dim)`.
pub fn posenc(value: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 == 1 {
        return Err(Error::OddDim(dim));
    }
    let mut out = vec![0.0; dim];
    posenc_into(value, &mut out);
    Ok(out)
}

pub(crate) fn posenc_into(value: f64, out: &mut [f64]) {
    let dim = out.len();
    for i in 0..dim / 2 {
        let w = 10000f64.powf(-2.0 * i as f64 / dim as f64);
        let (s, c) = (value * w).sin_cos();
        out[2 * i] = s;
        out[2 * i + 1] = c;
    }
}

/// Affine map `X W + b` applied row-wise; `W` is `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Dense {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self { w: Array2::zeros((fan_in, fan_out)), b: Array1::zeros(fan_out) }
    }

    /// Glorot-uniform weights and zero biases.
    pub fn glorot<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)).collect();
        let w = Array2::from_shape_vec((fan_in, fan_out), data).expect("length matches shape");
        Self { w, b: Array1::zeros(fan_out) }
    }

    pub fn fan_in(&self) -> usize {
        self.w.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.w.ncols()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }

    /// Accumulates parameter gradients into `grad`.
    pub fn backward_params(&self, x: &Array2<f64>, gz: &Array2<f64>, grad: &mut Dense) {
        grad.w += &x.t().dot(gz);
        grad.b += &gz.sum_axis(Axis(0));
    }

    /// Accumulates parameter gradients and returns the gradient w.r.t. `x`.
    pub fn backward(&self, x: &Array2<f64>, gz: &Array2<f64>, grad: &mut Dense) -> Array2<f64> {
        self.backward_params(x, gz, grad);
        gz.dot(&self.w.t())
    }
}

pub fn tanh(mut z: Array2<f64>) -> Array2<f64> {
    z.mapv_inplace(f64::tanh);
    z
}

/// Gradient through `a = tanh(z)` given the activation `a`.
pub fn tanh_backward(a: &Array2<f64>, mut ga: Array2<f64>) -> Array2<f64> {
    ga.zip_mut_with(a, |g, &a| *g *= 1.0 - a * a);
    ga
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `softplus^{-1}(1)`, the initial mixer parameter.
pub fn mixer_gamma_init() -> f64 {
    1f64.exp_m1().ln()
}

/// Columns of a `width`-wide activation owned by `head` out of `heads`.
pub fn head_columns(width: usize, heads: usize, head: usize) -> Range<usize> {
    head * width / heads..(head + 1) * width / heads
}

/// Row-normalized Gaussian weights `K_ij ∝ exp(-lambda (t_i - t_j)^2)`.
pub fn mixer_weights(times: &[f64], lambda: f64) -> Array2<f64> {
    let m = times.len();
    let mut k = Array2::zeros((m, m));
    for i in 0..m {
        let mut row = k.row_mut(i);
        let mut total = 0.0;
        for j in 0..m {
            let dt = times[i] - times[j];
            let e = (-lambda * dt * dt).exp();
            row[j] = e;
            total += e;
        }
        row /= total;
    }
    k
}

/// State kept by [`mixer_forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct MixerCache {
    sq_dist: Array2<f64>,
    weights: Vec<Array2<f64>>,
}

impl MixerCache {
    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }
}

/// Multi-head temporal mixing. Head `h` owns a contiguous block of columns of
/// `x` and averages them over time with bandwidth
/// `lambda_h = scale_h * softplus(gamma_h)`.
pub fn mixer_forward(gamma: &[f64], scales: &[f64], times: &[f64], x: &Array2<f64>) -> (Array2<f64>, MixerCache) {
    let m = times.len();
    let sq_dist = Array2::from_shape_fn((m, m), |(i, j)| (times[i] - times[j]).powi(2));
    let heads = gamma.len();
    let width = x.ncols();
    let mut y = Array2::zeros(x.dim());
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let k = mixer_weights(times, scales[h] * softplus(gamma[h]));
        let cols = head_columns(width, heads, h);
        y.slice_mut(s![.., cols.clone()]).assign(&k.dot(&x.slice(s![.., cols])));
        weights.push(k);
    }
    (y, MixerCache { sq_dist, weights })
}

/// Returns the gradient w.r.t. the mixer input and accumulates into `g_gamma`.
pub fn mixer_backward(
    gamma: &[f64],
    scales: &[f64],
    cache: &MixerCache,
    x: &Array2<f64>,
    gy: &Array2<f64>,
    g_gamma: &mut [f64],
) -> Array2<f64> {
    let heads = gamma.len();
    let width = x.ncols();
    let m = x.nrows();
    let mut gx = Array2::zeros(x.dim());
    for h in 0..heads {
        let k = &cache.weights[h];
        let cols = head_columns(width, heads, h);
        let gy_h = gy.slice(s![.., cols.clone()]);
        gx.slice_mut(s![.., cols.clone()]).assign(&k.t().dot(&gy_h));
        let gk = gy_h.dot(&x.slice(s![.., cols]).t());
        let mut g_lambda = 0.0;
        for i in 0..m {
            let krow = k.row(i);
            let drow = cache.sq_dist.row(i);
            let r: f64 = krow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
            for j in 0..m {
                g_lambda += gk[[i, j]] * krow[j] * (r - drow[j]);
            }
        }
        g_gamma[h] += g_lambda * scales[h] * sigmoid(gamma[h]);
    }
    gx
}
