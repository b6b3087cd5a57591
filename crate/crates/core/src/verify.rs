//! Oracle suite comparing the closed-form machinery against independent
//! computations.
//!
//! Every check returns the largest error it observed together with its
//! tolerance. Checks never fail with an error: a numerical failure inside a
//! check is reported as an infinite error so the suite always runs to the end.

use std::time::Instant;

use ndarray::Array2;
use serde::Serialize;

use crate::cspd::{Cspd, VpSchedule};
use crate::denoiser::{Architecture, DenoiserParams};
use crate::denoiser::adam::Parameters;
use crate::dspd::DiffusionSchedule;
use crate::error::Result;
use crate::linalg::{mvn_logpdf, GaussianSpec, DEFAULT_JITTER};
use crate::model::Trainable;
use crate::noise::{covariance_matrix, ou_sample_mvn, ou_sample_recursive, ou_sample_wiener, KernelSpec};
use crate::rng::{normal_array, seeded, SpRng};
use crate::series::TimeGrid;
use rand::Rng;

/// Signature of a posterior implementation under test:
/// `(schedule, X0, Xn, n) -> (mean, variance factor)`.
pub type PosteriorFn<'a> = dyn Fn(&DiffusionSchedule, &Array2<f64>, &Array2<f64>, usize) -> Result<(Array2<f64>, f64)> + 'a;

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub check: String,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub seconds: f64,
}

impl CheckResult {
    fn new(check: &str, max_error: f64, tolerance: f64, seconds: f64) -> Self {
        Self { check: check.to_string(), max_error, tolerance, passed: max_error <= tolerance, seconds }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("check results serialize")
    }
}

fn timed(name: &str, tolerance: f64, f: impl FnOnce() -> Result<f64>) -> CheckResult {
    let start = Instant::now();
    let err = f().unwrap_or(f64::INFINITY);
    let err = if err.is_nan() { f64::INFINITY } else { err };
    CheckResult::new(name, err, tolerance, start.elapsed().as_secs_f64())
}

/// Runs all checks with the library's own posterior.
pub fn run_all(seed: u64) -> Vec<CheckResult> {
    run_all_with(seed, &|s, x0, xn, n| s.posterior_params(x0, xn, n))
}

/// Runs all checks, substituting `posterior` for the library posterior.
pub fn run_all_with(seed: u64, posterior: &PosteriorFn<'_>) -> Vec<CheckResult> {
    vec![
        check_posterior(seed, posterior),
        check_score(seed.wrapping_add(1)),
        check_whitening_identity(),
        check_covariance_ode(),
        check_ou_samplers(seed.wrapping_add(4)),
        check_denoiser_gradients(seed.wrapping_add(5)),
    ]
}

fn max_abs(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

/// Dense inverse by Gauss-Jordan elimination with partial pivoting.
pub fn gauss_jordan_inverse(a: &Array2<f64>) -> Option<Array2<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return None;
    }
    let mut m = a.clone();
    let mut inv = Array2::<f64>::eye(n);
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| m[[i, col]].abs().total_cmp(&m[[j, col]].abs()))?;
        if m[[pivot, col]] == 0.0 {
            return None;
        }
        for k in 0..n {
            m.swap([col, k], [pivot, k]);
            inv.swap([col, k], [pivot, k]);
        }
        let p = m[[col, col]];
        for k in 0..n {
            m[[col, k]] /= p;
            inv[[col, k]] /= p;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = m[[r, col]];
            if f == 0.0 {
                continue;
            }
            for k in 0..n {
                m[[r, k]] -= f * m[[col, k]];
                inv[[r, k]] -= f * inv[[col, k]];
            }
        }
    }
    Some(inv)
}

fn random_grid(rng: &mut SpRng, m: usize) -> TimeGrid {
    let mut t = Vec::with_capacity(m);
    let mut acc: f64 = rng.random_range(0.0..0.5);
    for _ in 0..m {
        t.push(acc);
        acc += rng.random_range(0.05..0.3);
    }
    TimeGrid::new(t).expect("increasing times")
}

fn random_kernel(rng: &mut SpRng) -> KernelSpec {
    match rng.random_range(0..3) {
        0 => KernelSpec::rbf(rng.random_range(1.0..20.0)),
        1 => KernelSpec::ou(rng.random_range(0.5..5.0)),
        _ => KernelSpec::white(),
    }
}

/// Conditions the joint Gaussian of `(X_{n-1}, X_n) | X_0` on `X_n` for one
/// channel. Both marginals are built from the one-step forward kernel and the
/// cumulative one, and the conditional follows from the block formulas.
fn brute_force_posterior(
    schedule: &DiffusionSchedule,
    sigma: &Array2<f64>,
    x0: &[f64],
    xn: &[f64],
    n: usize,
) -> Option<(Vec<f64>, Array2<f64>)> {
    let m = x0.len();
    let ab_prev = schedule.alpha_bar(n - 1);
    let a = schedule.alpha(n);
    let c11 = sigma * (1.0 - ab_prev);
    let c12 = sigma * (a.sqrt() * (1.0 - ab_prev));
    let c22 = sigma * (1.0 - ab_prev) * a + sigma * schedule.beta(n);
    let c22_inv = gauss_jordan_inverse(&c22)?;
    let gain = c12.dot(&c22_inv);
    let m1: Vec<f64> = x0.iter().map(|v| ab_prev.sqrt() * v).collect();
    let resid: Vec<f64> = (0..m).map(|i| xn[i] - (a * ab_prev).sqrt() * x0[i]).collect();
    let mean = (0..m).map(|i| m1[i] + (0..m).map(|j| gain[[i, j]] * resid[j]).sum::<f64>()).collect();
    let cov = c11 - gain.dot(&c12.t());
    Some((mean, cov))
}

/// Posterior mean and covariance against brute-force Gaussian conditioning on
/// 20 random instances with `M <= 4` and `N <= 10`.
pub fn check_posterior(seed: u64, posterior: &PosteriorFn<'_>) -> CheckResult {
    timed("posterior_conditioning", 1e-8, || {
        let mut rng = seeded(seed);
        let mut worst = 0.0f64;
        for _ in 0..20 {
            let m = rng.random_range(1..=4);
            let d = rng.random_range(1..=2);
            let n_steps = rng.random_range(2..=10);
            let beta_end = rng.random_range(0.2..0.6);
            let schedule = DiffusionSchedule::linear(n_steps, 1e-3, beta_end)?;
            let n = rng.random_range(2..=n_steps);
            let grid = random_grid(&mut rng, m);
            let kernel = random_kernel(&mut rng);
            let l = kernel.factor(&grid)?;
            let sigma = l.reconstruct();
            let x0 = normal_array(&mut rng, m, d);
            let xn = normal_array(&mut rng, m, d);
            let (mu, bt) = posterior(&schedule, &x0, &xn, n)?;
            let cov = &sigma * bt;
            for c in 0..d {
                let x0c = x0.column(c).to_vec();
                let xnc = xn.column(c).to_vec();
                let Some((mean, bcov)) = brute_force_posterior(&schedule, &sigma, &x0c, &xnc, n) else {
                    return Ok(f64::INFINITY);
                };
                for i in 0..m {
                    worst = worst.max((mean[i] - mu[[i, c]]).abs());
                }
                worst = worst.max(max_abs(&bcov, &cov));
            }
        }
        Ok(worst)
    })
}

/// Analytic transition score against central differences of the log-density.
pub fn check_score(seed: u64) -> CheckResult {
    timed("score_finite_differences", 1e-4, || {
        let mut rng = seeded(seed);
        let h = 1e-5;
        let mut worst = 0.0f64;
        for _ in 0..10 {
            let m = rng.random_range(1..=6);
            let d = rng.random_range(1..=2);
            let grid = random_grid(&mut rng, m);
            let kernel = random_kernel(&mut rng);
            let cspd = Cspd::new(VpSchedule::default(), kernel);
            let l = kernel.factor(&grid)?;
            let s = rng.random_range(0.05..1.0);
            let x0 = normal_array(&mut rng, m, d);
            let xs = normal_array(&mut rng, m, d);
            let eval = cspd.exact_score(&xs, &x0, s, &l)?;
            let (mu, sigma2) = cspd.transition_params(&x0, s)?;
            for c in 0..d {
                let mean = mu.column(c).to_vec();
                let g = GaussianSpec::new(&mean, sigma2, &l)?;
                let base = xs.column(c).to_vec();
                for i in 0..m {
                    let mut up = base.clone();
                    up[i] += h;
                    let mut dn = base.clone();
                    dn[i] -= h;
                    let fd = (mvn_logpdf(&up, &g)? - mvn_logpdf(&dn, &g)?) / (2.0 * h);
                    let a = eval.score[[i, c]];
                    worst = worst.max((fd - a).abs() / a.abs().max(fd.abs()).max(1e-6));
                }
            }
        }
        Ok(worst)
    })
}

/// `L^T Sigma^{-1} L = I`, with `Sigma^{-1}` from Gauss-Jordan elimination of
/// the factored matrix, on grids of up to 64 points.
pub fn check_whitening_identity() -> CheckResult {
    timed("whitening_identity", 1e-6, || {
        let uniform = TimeGrid::uniform(64, 0.0, 1.0)?;
        let mut rng = seeded(17);
        let mut irregular: Vec<f64> = (0..48).map(|_| rng.random_range(0.0..1.0)).collect();
        irregular.sort_by(f64::total_cmp);
        irregular.dedup();
        let irregular = TimeGrid::new(irregular)?;
        let cases = [
            (KernelSpec::rbf(50.0), &uniform),
            (KernelSpec::rbf(200.0), &uniform),
            (KernelSpec::ou(1.0), &uniform),
            (KernelSpec::ou(10.0), &irregular),
            (KernelSpec::rbf(100.0), &irregular),
            (KernelSpec::white(), &uniform),
        ];
        let mut worst = 0.0f64;
        for (kernel, grid) in cases {
            let l = kernel.factor(grid)?;
            let mut sigma = covariance_matrix(&kernel, grid).into_array();
            if kernel.kind != crate::noise::KernelKind::White {
                sigma.diag_mut().mapv_inplace(|v| v + DEFAULT_JITTER);
            }
            let Some(inv) = gauss_jordan_inverse(&sigma) else {
                return Ok(f64::INFINITY);
            };
            let la = l.as_array();
            let prod = la.t().dot(&inv.dot(la));
            worst = worst.max(max_abs(&prod, &Array2::eye(grid.len())));
        }
        Ok(worst)
    })
}

/// RK4 integration of the transition-covariance ODE against
/// `(1 - exp(-B(s))) Sigma`.
pub fn check_covariance_ode() -> CheckResult {
    timed("covariance_ode", 1e-5, || {
        let grid = TimeGrid::new(vec![0.0, 0.1, 0.25, 0.3, 0.7, 1.0])?;
        let mut worst = 0.0f64;
        for kernel in [KernelSpec::rbf(20.0), KernelSpec::ou(2.0), KernelSpec::white()] {
            let cspd = Cspd::new(VpSchedule::default(), kernel);
            worst = worst.max(cspd.covariance_ode_check(&grid, 1000)?);
        }
        Ok(worst)
    })
}

/// Empirical covariances of the three OU samplers agree pairwise over 1e5
/// draws on an irregular grid of eight points.
pub fn check_ou_samplers(seed: u64) -> CheckResult {
    timed("ou_sampler_equivalence", 0.05, || {
        let grid = TimeGrid::new(vec![0.0, 0.05, 0.2, 0.22, 0.5, 0.9, 1.3, 2.0])?;
        let gamma = 1.5;
        let draws = 100_000;
        let m = grid.len();
        let mut covs = [Array2::<f64>::zeros((m, m)), Array2::zeros((m, m)), Array2::zeros((m, m))];
        let mut rngs = [seeded(seed), seeded(seed ^ 0x9e37), seeded(seed ^ 0x7f4a)];
        for _ in 0..draws {
            let samples = [
                ou_sample_wiener(&grid, gamma, &mut rngs[0])?,
                ou_sample_recursive(&grid, gamma, &mut rngs[1]),
                ou_sample_mvn(&grid, gamma, &mut rngs[2])?.1,
            ];
            for (cov, x) in covs.iter_mut().zip(&samples) {
                for i in 0..m {
                    for j in 0..m {
                        cov[[i, j]] += x[i] * x[j];
                    }
                }
            }
        }
        for c in covs.iter_mut() {
            c.mapv_inplace(|v| v / draws as f64);
        }
        Ok(max_abs(&covs[0], &covs[1]).max(max_abs(&covs[0], &covs[2])).max(max_abs(&covs[1], &covs[2])))
    })
}

fn tiny_architecture(mixer: bool, whiten: Option<KernelSpec>) -> Architecture {
    Architecture {
        channels: 2,
        hidden: 8,
        depth: 3,
        enc_dim: 4,
        enc_scale: 3.0,
        mixer,
        mixer_scales: vec![1.0, 10.0, 100.0],
        whiten,
    }
}

/// Backpropagated gradients of a squared-error loss against central
/// differences on every parameter of small networks.
pub fn check_denoiser_gradients(seed: u64) -> CheckResult {
    timed("denoiser_gradients", 1e-4, || {
        let mut rng = seeded(seed);
        let mut worst = 0.0f64;
        let archs = [
            tiny_architecture(true, None),
            tiny_architecture(false, None),
            tiny_architecture(true, Some(KernelSpec::ou(1.0))),
        ];
        for arch in archs {
            let mut p = DenoiserParams::init(arch, &mut rng)?;
            for (h, g) in p.mixer_gamma.iter_mut().enumerate() {
                *g += 0.3 * h as f64 - 0.2;
            }
            let t = [0.0, 0.15, 0.4, 0.47];
            let level = 0.37;
            let x = normal_array(&mut rng, 4, 2);
            let target = normal_array(&mut rng, 4, 2);
            let loss = |p: &DenoiserParams| -> Result<f64> {
                let (out, _) = p.forward(&x, &t, level)?;
                Ok((&out - &target).iter().map(|e| e * e).sum())
            };
            let (_, grads) = p.squared_error_grads(&x, &t, level, &target);
            let analytic: Vec<Vec<f64>> = grads.tensors().into_iter().map(|t| t.2.to_vec()).collect();
            let h = 1e-5;
            for (k, a_k) in analytic.iter().enumerate() {
                for (i, &a) in a_k.iter().enumerate() {
                    let orig = p.tensors()[k].2[i];
                    p.tensors_mut()[k][i] = orig + h;
                    let up = loss(&p)?;
                    p.tensors_mut()[k][i] = orig - h;
                    let dn = loss(&p)?;
                    p.tensors_mut()[k][i] = orig;
                    let fd = (up - dn) / (2.0 * h);
                    if (fd - a).abs() > 1e-9 {
                        worst = worst.max((fd - a).abs() / a.abs().max(fd.abs()));
                    }
                }
            }
        }
        Ok(worst)
    })
}
