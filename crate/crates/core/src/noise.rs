//! Stationary noise processes evaluated on a time grid.
//!
//! The RBF Gaussian process gives smooth noise, the Ornstein–Uhlenbeck process
//! continuous but rough noise, and the white kernel independent noise. All have
//! unit marginal variance. Multivariate series receive an independent draw per
//! channel, which is the same as one draw from the block-diagonal covariance
//! with `Sigma` repeated on the diagonal.
//!
//! Three OU samplers are provided. The multivariate-normal route is the one used
//! for training and sampling because it exposes the white noise that the model
//! learns to predict; the time-changed Wiener and the exact recursion exist as
//! independent routes to the same distribution.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cholesky, mvn_sample, GaussianSpec, LowerTriangular, SymMatrix, DEFAULT_JITTER};
use crate::rng::{normal_array, standard_normal};
use crate::series::TimeGrid;

/// Largest `gamma * (t_max - t_0)` accepted by the time-changed Wiener sampler.
pub const WIENER_MAX_EXPONENT: f64 = 200.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    /// `exp(-gamma (t_i - t_j)^2)`
    Rbf,
    /// `exp(-gamma |t_i - t_j|)`
    Ou,
    /// identity covariance
    White,
}

impl KernelKind {
    /// Default length-scale parameter on grids normalized to `[0, 1]`.
    pub fn default_gamma(self) -> f64 {
        match self {
            KernelKind::Rbf => 50.0,
            KernelKind::Ou | KernelKind::White => 1.0,
        }
    }
}

impl std::str::FromStr for KernelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rbf" | "gp" | "rbf_gp" => Ok(KernelKind::Rbf),
            "ou" => Ok(KernelKind::Ou),
            "white" | "gauss" | "iid" => Ok(KernelKind::White),
            other => Err(Error::Format(format!("unknown kernel `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub gamma: f64,
}

impl KernelSpec {
    pub fn new(kind: KernelKind, gamma: f64) -> Result<Self> {
        if kind != KernelKind::White && !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::InvalidRange(format!("kernel gamma must be positive, got {gamma}")));
        }
        Ok(Self { kind, gamma })
    }

    pub fn rbf(gamma: f64) -> Self {
        Self { kind: KernelKind::Rbf, gamma }
    }

    pub fn ou(gamma: f64) -> Self {
        Self { kind: KernelKind::Ou, gamma }
    }

    pub fn white() -> Self {
        Self { kind: KernelKind::White, gamma: 1.0 }
    }

    /// Kernel value at lag `dt`.
    pub fn eval(&self, dt: f64) -> f64 {
        match self.kind {
            KernelKind::Rbf => (-self.gamma * dt * dt).exp(),
            KernelKind::Ou => (-self.gamma * dt.abs()).exp(),
            KernelKind::White => {
                if dt == 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// Cholesky factor of the covariance on `grid`.
    ///
    /// The white kernel returns the exact identity (no jitter), so the
    /// single-point and white cases reproduce the classical models bit for bit.
    pub fn factor(&self, grid: &TimeGrid) -> Result<LowerTriangular> {
        self.factor_with_jitter(grid, DEFAULT_JITTER)
    }

    pub fn factor_with_jitter(&self, grid: &TimeGrid, jitter: f64) -> Result<LowerTriangular> {
        match self.kind {
            KernelKind::White => Ok(LowerTriangular::identity(grid.len())),
            _ => cholesky(&covariance_matrix(self, grid), jitter),
        }
    }
}

/// `Sigma_ij = k(t_i, t_j)`; the diagonal is exactly 1.
pub fn covariance_matrix(k: &KernelSpec, t: &TimeGrid) -> SymMatrix {
    let ts = t.times();
    SymMatrix::from_fn(ts.len(), |i, j| if i == j { 1.0 } else { k.eval(ts[i] - ts[j]) })
}

/// Independent per-channel draws: returns `(white, L * white)`, both `M x d`.
/// White noise is drawn in row-major order.
pub fn sample_process_noise<R: Rng + ?Sized>(
    k: &KernelSpec,
    t: &TimeGrid,
    d: usize,
    rng: &mut R,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let l = k.factor(t)?;
    let white = normal_array(rng, t.len(), d);
    let correlated = l.mul_columns(&white)?;
    Ok((white, correlated))
}

/// OU noise as `exp(-gamma t) W(exp(2 gamma t))`.
///
/// The grid is shifted so that it starts at 0; `W(1)` is then a standard normal
/// and later values add independent Gaussian increments in the transformed
/// clock.
pub fn ou_sample_wiener<R: Rng + ?Sized>(t: &TimeGrid, gamma: f64, rng: &mut R) -> Result<Vec<f64>> {
    let t0 = t.first();
    let span = gamma * (t.last() - t0);
    if !(span <= WIENER_MAX_EXPONENT) {
        return Err(Error::Overflow(format!(
            "gamma * (t_max - t_0) = {span} exceeds {WIENER_MAX_EXPONENT}; use the recursive or multivariate sampler"
        )));
    }
    let mut out = Vec::with_capacity(t.len());
    let mut w = 0.0;
    let mut clock = 0.0;
    for &ti in t.times() {
        let s = gamma * (ti - t0);
        let next = (2.0 * s).exp();
        w += (next - clock).sqrt() * standard_normal(rng);
        clock = next;
        out.push((-s).exp() * w);
    }
    Ok(out)
}

/// OU noise by the exact one-step recursion
/// `e_i = c e_{i-1} + sqrt(1 - c^2) z`, `c = exp(-gamma (t_i - t_{i-1}))`.
pub fn ou_sample_recursive<R: Rng + ?Sized>(t: &TimeGrid, gamma: f64, rng: &mut R) -> Vec<f64> {
    let ts = t.times();
    let mut out = Vec::with_capacity(ts.len());
    let mut prev = standard_normal(rng);
    out.push(prev);
    for w in ts.windows(2) {
        let c = (-gamma * (w[1] - w[0])).exp();
        prev = c * prev + (1.0 - c * c).sqrt() * standard_normal(rng);
        out.push(prev);
    }
    out
}

/// OU noise through its covariance matrix: returns `(white, L * white)`.
pub fn ou_sample_mvn<R: Rng + ?Sized>(t: &TimeGrid, gamma: f64, rng: &mut R) -> Result<(Vec<f64>, Vec<f64>)> {
    let k = KernelSpec::new(KernelKind::Ou, gamma)?;
    let l = k.factor(t)?;
    let mean = vec![0.0; t.len()];
    let g = GaussianSpec::new(&mean, 1.0, &l)?;
    Ok(mvn_sample(&g, rng))
}
