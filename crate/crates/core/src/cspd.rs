//! Continuous stochastic process diffusion.
//!
//! A variance-preserving SDE whose diffusion term is coloured by the Cholesky
//! factor `L` of the kernel matrix on the series' time grid:
//!
//! ```text
//! dX = -1/2 beta(s) X ds + sqrt(beta(s)) L dW
//! ```
//!
//! so that `q(X_s | X_0) = N(X_0 e^{-1/2 B(s)}, (1 - e^{-B(s)}) Sigma)` with
//! `B(s) = int_0^s beta`. The network predicts the white noise behind the
//! transition sample; the score is recovered as `-L^{-T} eps / sqrt(sigma2)`.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dspd::{reduce_losses, squared_error};
use crate::error::{Error, Result};
use crate::linalg::LowerTriangular;
use crate::model::{NoisePredictor, Trainable};
use crate::noise::{covariance_matrix, KernelSpec};
use crate::rng::normal_array;
use crate::series::{Series, TimeGrid};

/// Linear `beta(s) = beta_min + s (beta_max - beta_min)` on `[0, horizon]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VpSchedule {
    pub beta_min: f64,
    pub beta_max: f64,
    pub horizon: f64,
}

impl VpSchedule {
    pub fn new(beta_min: f64, beta_max: f64) -> Result<Self> {
        if !(0.0 < beta_min && beta_min < beta_max && beta_max.is_finite()) {
            return Err(Error::InvalidRange(format!("need 0 < beta_min < beta_max, got {beta_min}, {beta_max}")));
        }
        Ok(Self { beta_min, beta_max, horizon: 1.0 })
    }

    pub fn beta(&self, s: f64) -> f64 {
        self.beta_min + s * (self.beta_max - self.beta_min)
    }

    fn check(&self, s: f64) -> Result<()> {
        if (0.0..=self.horizon).contains(&s) {
            Ok(())
        } else {
            Err(Error::SOutOfRange { s, horizon: self.horizon })
        }
    }

    /// `int_0^s beta(u) du`.
    pub fn integral_beta(&self, s: f64) -> Result<f64> {
        self.check(s)?;
        Ok(self.integral_unchecked(s))
    }

    fn integral_unchecked(&self, s: f64) -> f64 {
        self.beta_min * s + 0.5 * (self.beta_max - self.beta_min) * s * s
    }

    /// Mean factor `e^{-1/2 B(s)}` and variance factor `1 - e^{-B(s)}`.
    pub fn factors(&self, s: f64) -> Result<(f64, f64)> {
        let b = self.integral_beta(s)?;
        Ok(((-0.5 * b).exp(), -(-b).exp_m1()))
    }
}

impl Default for VpSchedule {
    fn default() -> Self {
        Self { beta_min: 0.1, beta_max: 20.0, horizon: 1.0 }
    }
}

/// A score together with the point at which it was evaluated.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreEvaluation {
    pub s: f64,
    pub sigma2: f64,
    pub score: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cspd {
    pub schedule: VpSchedule,
    pub kernel: KernelSpec,
    /// Lower cutoff for training times and the end point of sampling.
    pub s_min: f64,
}

impl Cspd {
    pub fn new(schedule: VpSchedule, kernel: KernelSpec) -> Self {
        Self { schedule, kernel, s_min: 1e-3 }
    }

    /// `(X_0 e^{-1/2 B(s)}, 1 - e^{-B(s)})`; the covariance is `sigma2 Sigma`.
    pub fn transition_params(&self, x0: &Array2<f64>, s: f64) -> Result<(Array2<f64>, f64)> {
        let (m, v) = self.schedule.factors(s)?;
        Ok((x0 * m, v))
    }

    /// `-Sigma_s^{-1} (X_s - mu)` for the exact transition density.
    pub fn exact_score(&self, xs: &Array2<f64>, x0: &Array2<f64>, s: f64, l: &LowerTriangular) -> Result<ScoreEvaluation> {
        let (mu, sigma2) = self.transition_params(x0, s)?;
        if sigma2 <= 0.0 {
            return Err(Error::DegenerateTime);
        }
        if xs.dim() != x0.dim() {
            return Err(Error::ShapeMismatch(format!("Xs is {:?} but X0 is {:?}", xs.dim(), x0.dim())));
        }
        let white = l.solve_lower_columns(&(xs - &mu))?;
        let score = l.solve_upper_columns(&white)? * (-1.0 / sigma2);
        Ok(ScoreEvaluation { s, sigma2, score })
    }

    /// `-L^{-T} eps_hat / sqrt(sigma2)`.
    pub fn score_from_noise_prediction(&self, eps_hat: &Array2<f64>, s: f64, l: &LowerTriangular) -> Result<Array2<f64>> {
        let (_, sigma2) = self.schedule.factors(s)?;
        if sigma2 <= 0.0 {
            return Err(Error::DegenerateTime);
        }
        Ok(l.solve_upper_columns(eps_hat)? * (-1.0 / sigma2.sqrt()))
    }

    /// `Sigma * score = -L eps_hat / sqrt(sigma2)`, computed without forming `Sigma`.
    fn sigma_score(&self, eps_hat: &Array2<f64>, sigma2: f64, l: &LowerTriangular) -> Result<Array2<f64>> {
        Ok(l.mul_columns(eps_hat)? * (-1.0 / sigma2.sqrt()))
    }

    /// Draw `X_s ~ q(X_s | X_0)`; returns `(X_s, white)`.
    pub fn forward_sample_with_factor<R: Rng + ?Sized>(
        &self,
        x0: &Array2<f64>,
        l: &LowerTriangular,
        s: f64,
        rng: &mut R,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        let white = normal_array(rng, x0.nrows(), x0.ncols());
        let xs = self.noised(x0, l, s, &white)?;
        Ok((xs, white))
    }

    pub fn noised(&self, x0: &Array2<f64>, l: &LowerTriangular, s: f64, white: &Array2<f64>) -> Result<Array2<f64>> {
        let (mu, sigma2) = self.transition_params(x0, s)?;
        Ok(mu + &(l.mul_columns(white)? * sigma2.sqrt()))
    }

    /// Euler–Maruyama simulation of the forward SDE from 0 to `s`.
    pub fn euler_maruyama_forward<R: Rng + ?Sized>(
        &self,
        x0: &Array2<f64>,
        l: &LowerTriangular,
        s: f64,
        n_steps: usize,
        rng: &mut R,
    ) -> Result<Array2<f64>> {
        self.schedule.check(s)?;
        let ds = s / n_steps as f64;
        let mut x = x0.clone();
        for k in 0..n_steps {
            let beta = self.schedule.beta(k as f64 * ds);
            let z = l.mul_columns(&normal_array(rng, x.nrows(), x.ncols()))?;
            x = &x * (1.0 - 0.5 * beta * ds) + &(z * (beta * ds).sqrt());
        }
        Ok(x)
    }

    /// Noise-prediction loss with `s ~ U[s_min, horizon)`, averaged over all
    /// entries. Randomness is drawn series by series (`s`, then `M x d`
    /// white normals) before the parallel part.
    pub fn score_matching_loss<M: Trainable, R: Rng + ?Sized>(
        &self,
        model: &M,
        batch: &[Series],
        rng: &mut R,
        deterministic: bool,
    ) -> Result<(f64, M::Grads)> {
        let draws: Vec<(f64, Array2<f64>)> = batch
            .iter()
            .map(|s| {
                let t = rng.random_range(self.s_min..self.schedule.horizon);
                (t, normal_array(rng, s.len(), s.channels()))
            })
            .collect();
        let count: usize = batch.iter().map(|s| s.len() * s.channels()).sum();
        let per_series = |(series, (s, white)): (&Series, &(f64, Array2<f64>))| -> Result<(f64, M::Grads)> {
            let l = self.kernel.factor(&series.grid)?;
            let xs = self.noised(&series.values, &l, *s, white)?;
            let (pred, grads) = model.squared_error_grads(&xs, series.grid.times(), *s, white);
            Ok((squared_error(&pred, white)?, grads))
        };
        reduce_losses::<M, _>(model, batch, &draws, count, deterministic, per_series)
    }

    fn sampling_steps(&self, n_steps: usize) -> Result<f64> {
        if n_steps < 10 {
            return Err(Error::InvalidRange(format!("need at least 10 sampling steps, got {n_steps}")));
        }
        Ok((self.schedule.horizon - self.s_min) / n_steps as f64)
    }

    fn predict_checked<M: NoisePredictor + ?Sized>(&self, model: &M, x: &Array2<f64>, grid: &TimeGrid, s: f64) -> Result<Array2<f64>> {
        let eps = model.predict(x, grid.times(), s);
        if eps.dim() != x.dim() {
            return Err(Error::ShapeMismatch(format!("model returned {:?}, expected {:?}", eps.dim(), x.dim())));
        }
        Ok(eps)
    }

    /// Euler–Maruyama on the reverse SDE from the horizon down to `s_min`.
    ///
    /// `X_S = L z`; each step evaluates the model at the current `s` and then
    /// draws `z`. The last step adds no noise.
    pub fn reverse_sde_sample<M: NoisePredictor + ?Sized, R: Rng + ?Sized>(
        &self,
        model: &M,
        grid: &TimeGrid,
        d: usize,
        rng: &mut R,
        n_steps: usize,
    ) -> Result<Array2<f64>> {
        let ds = self.sampling_steps(n_steps)?;
        let l = self.kernel.factor(grid)?;
        let m = grid.len();
        let mut x = l.mul_columns(&normal_array(rng, m, d))?;
        for k in 0..n_steps {
            let s = self.schedule.horizon - k as f64 * ds;
            let beta = self.schedule.beta(s);
            let (_, sigma2) = self.schedule.factors(s)?;
            let eps = self.predict_checked(model, &x, grid, s)?;
            let ss = self.sigma_score(&eps, sigma2, &l)?;
            x = &x * (1.0 + 0.5 * beta * ds) + &(ss * (beta * ds));
            if k + 1 < n_steps {
                let z = l.mul_columns(&normal_array(rng, m, d))?;
                x = x + &(z * (beta * ds).sqrt());
            }
        }
        Ok(x)
    }

    /// RK4 on the probability-flow ODE from the horizon down to `s_min`,
    /// starting at the given `X_S`.
    pub fn probability_flow_from<M: NoisePredictor + ?Sized>(
        &self,
        model: &M,
        grid: &TimeGrid,
        x_start: Array2<f64>,
        n_steps: usize,
    ) -> Result<Array2<f64>> {
        let ds = self.sampling_steps(n_steps)?;
        let l = self.kernel.factor(grid)?;
        let field = |x: &Array2<f64>, s: f64| -> Result<Array2<f64>> {
            let beta = self.schedule.beta(s);
            let (_, sigma2) = self.schedule.factors(s)?;
            let eps = self.predict_checked(model, x, grid, s)?;
            let ss = self.sigma_score(&eps, sigma2, &l)?;
            Ok((x * (-0.5 * beta)) - &(ss * (0.5 * beta)))
        };
        let mut x = x_start;
        let h = -ds;
        for k in 0..n_steps {
            let s = self.schedule.horizon - k as f64 * ds;
            let k1 = field(&x, s)?;
            let k2 = field(&(&x + &(&k1 * (0.5 * h))), s + 0.5 * h)?;
            let k3 = field(&(&x + &(&k2 * (0.5 * h))), s + 0.5 * h)?;
            let k4 = field(&(&x + &(&k3 * h)), (s + h).max(0.0))?;
            x = &x + &((k1 + &(k2 * 2.0) + &(k3 * 2.0) + &k4) * (h / 6.0));
        }
        Ok(x)
    }

    /// Probability-flow sampling with `X_S = L z`.
    pub fn probability_flow_sample<M: NoisePredictor + ?Sized, R: Rng + ?Sized>(
        &self,
        model: &M,
        grid: &TimeGrid,
        d: usize,
        rng: &mut R,
        n_steps: usize,
    ) -> Result<Array2<f64>> {
        let l = self.kernel.factor(grid)?;
        let start = l.mul_columns(&normal_array(rng, grid.len(), d))?;
        self.probability_flow_from(model, grid, start, n_steps)
    }

    /// Integrates `dSigma_s/ds = beta(s) (Sigma - Sigma_s)` from zero with
    /// RK4 and returns the largest deviation from `sigma2(s) Sigma` seen at
    /// any step.
    pub fn covariance_ode_check(&self, grid: &TimeGrid, n_steps: usize) -> Result<f64> {
        if n_steps == 0 {
            return Err(Error::InvalidRange("need at least one step".into()));
        }
        let sigma = covariance_matrix(&self.kernel, grid).into_array();
        let h = self.schedule.horizon / n_steps as f64;
        let field = |c: &Array2<f64>, s: f64| (&sigma - c) * self.schedule.beta(s);
        let mut cov = Array2::<f64>::zeros(sigma.dim());
        let mut worst = 0.0f64;
        for k in 0..n_steps {
            let s = k as f64 * h;
            let k1 = field(&cov, s);
            let k2 = field(&(&cov + &(&k1 * (0.5 * h))), s + 0.5 * h);
            let k3 = field(&(&cov + &(&k2 * (0.5 * h))), s + 0.5 * h);
            let k4 = field(&(&cov + &(&k3 * h)), s + h);
            cov = &cov + &((k1 + &(k2 * 2.0) + &(k3 * 2.0) + &k4) * (h / 6.0));
            let s_next = ((k + 1) as f64 * h).min(self.schedule.horizon);
            let (_, sigma2) = self.schedule.factors(s_next)?;
            let err = (&cov - &(&sigma * sigma2)).iter().fold(0.0f64, |m, e| m.max(e.abs()));
            worst = worst.max(err);
        }
        Ok(worst)
    }
}

impl Default for Cspd {
    fn default() -> Self {
        Self::new(VpSchedule::default(), KernelSpec::rbf(50.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{mvn_logpdf, GaussianSpec};
    use crate::model::FnPredictor;
    use crate::rng::seeded;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn grid(t: &[f64]) -> TimeGrid {
        TimeGrid::new(t.to_vec()).unwrap()
    }

    #[test]
    fn integral_beta_values() {
        let s = VpSchedule::default();
        assert_eq!(s.integral_beta(0.0).unwrap(), 0.0);
        assert_abs_diff_eq!(s.integral_beta(1.0).unwrap(), 10.05, epsilon = 1e-12);
        assert!(matches!(s.integral_beta(1.5), Err(Error::SOutOfRange { .. })));
        assert!(matches!(s.integral_beta(-0.1), Err(Error::SOutOfRange { .. })));
        assert!(VpSchedule::new(20.0, 0.1).is_err());
    }

    #[test]
    fn integral_beta_matches_quadrature() {
        let sched = VpSchedule::new(0.3, 7.0).unwrap();
        for &s in &[0.1, 0.45, 1.0] {
            // RK4 on y' = beta(u)
            let n = 50;
            let h = s / n as f64;
            let mut y = 0.0;
            for k in 0..n {
                let u = k as f64 * h;
                y += h / 6.0 * (sched.beta(u) + 4.0 * sched.beta(u + 0.5 * h) + sched.beta(u + h));
            }
            assert_abs_diff_eq!(y, sched.integral_beta(s).unwrap(), epsilon = 1e-10);
        }
    }

    #[test]
    fn transition_at_ends() {
        let c = Cspd::default();
        let x0 = array![[1.0, -2.0], [0.5, 3.0]];
        let (mu, v) = c.transition_params(&x0, 0.0).unwrap();
        assert_eq!((mu, v), (x0.clone(), 0.0));
        let (mu, v) = c.transition_params(&x0, 1.0).unwrap();
        assert_abs_diff_eq!(mu[[0, 0]], (-5.025f64).exp(), epsilon = 1e-15);
        assert!((mu[[0, 0]] - 6.56e-3).abs() < 2e-5);
        assert_abs_diff_eq!(v, 1.0 - 4.3e-5, epsilon = 1e-6);
    }

    #[test]
    fn score_at_mode_and_white_reduction() {
        let c = Cspd::new(VpSchedule::default(), KernelSpec::white());
        let g = grid(&[0.0]);
        let l = c.kernel.factor(&g).unwrap();
        let x0 = array![[0.8]];
        let (mu, sigma2) = c.transition_params(&x0, 0.3).unwrap();
        assert!(c.exact_score(&mu, &x0, 0.3, &l).unwrap().score.iter().all(|v| *v == 0.0));
        let xs = array![[0.2]];
        let sc = c.exact_score(&xs, &x0, 0.3, &l).unwrap();
        assert_abs_diff_eq!(sc.score[[0, 0]], -(0.2 - mu[[0, 0]]) / sigma2, epsilon = 1e-14);
        assert!(matches!(c.exact_score(&xs, &x0, 0.0, &l), Err(Error::DegenerateTime)));
        let eps = array![[0.7]];
        let from_eps = c.score_from_noise_prediction(&eps, 0.3, &l).unwrap();
        assert_abs_diff_eq!(from_eps[[0, 0]], -0.7 / sigma2.sqrt(), epsilon = 1e-14);
        assert!(c
            .score_from_noise_prediction(&Array2::zeros((1, 1)), 0.3, &l)
            .unwrap()
            .iter()
            .all(|v| *v == 0.0));
    }

    #[test]
    fn exact_score_matches_finite_differences() {
        let c = Cspd::new(VpSchedule::default(), KernelSpec::rbf(3.0));
        let mut rng = seeded(21);
        for m in 1..=6 {
            let g = TimeGrid::uniform(m, 0.0, 1.0).unwrap();
            let l = c.kernel.factor(&g).unwrap();
            for &s in &[0.1, 0.5, 0.9] {
                let x0 = normal_array(&mut rng, m, 1);
                let (xs, _) = c.forward_sample_with_factor(&x0, &l, s, &mut rng).unwrap();
                let sc = c.exact_score(&xs, &x0, s, &l).unwrap();
                let (mu, sigma2) = c.transition_params(&x0, s).unwrap();
                let mean = mu.column(0).to_vec();
                let spec = GaussianSpec::new(&mean, sigma2, &l).unwrap();
                let h = 1e-5;
                for i in 0..m {
                    let mut up = xs.column(0).to_vec();
                    up[i] += h;
                    let mut dn = xs.column(0).to_vec();
                    dn[i] -= h;
                    let fd = (mvn_logpdf(&up, &spec).unwrap() - mvn_logpdf(&dn, &spec).unwrap()) / (2.0 * h);
                    let a = sc.score[[i, 0]];
                    assert!((fd - a).abs() <= 1e-4 * a.abs().max(1e-2), "m={m} s={s} {fd} vs {a}");
                }
            }
        }
    }

    #[test]
    fn noise_prediction_score_equals_exact() {
        let c = Cspd::new(VpSchedule::default(), KernelSpec::ou(2.0));
        let g = grid(&[0.0, 0.1, 0.35, 0.6, 0.61]);
        let l = c.kernel.factor(&g).unwrap();
        let mut rng = seeded(22);
        for &s in &[0.05, 0.5, 1.0] {
            let x0 = normal_array(&mut rng, 5, 2);
            let (xs, white) = c.forward_sample_with_factor(&x0, &l, s, &mut rng).unwrap();
            let a = c.exact_score(&xs, &x0, s, &l).unwrap().score;
            let b = c.score_from_noise_prediction(&white, s, &l).unwrap();
            for (u, v) in a.iter().zip(b.iter()) {
                assert_abs_diff_eq!(u, v, epsilon = 1e-10 * u.abs().max(1.0));
            }
        }
    }

    #[test]
    fn covariance_ode_small_error() {
        let c = Cspd::new(VpSchedule::default(), KernelSpec::rbf(1.0));
        let err = c.covariance_ode_check(&TimeGrid::uniform(4, 0.0, 1.0).unwrap(), 1000).unwrap();
        assert!(err < 1e-5, "{err}");
        let w = Cspd::new(VpSchedule::default(), KernelSpec::white());
        assert!(w.covariance_ode_check(&grid(&[0.0]), 1000).unwrap() < 1e-5);
    }

    #[test]
    fn probability_flow_zero_score_growth() {
        let c = Cspd::new(VpSchedule::default(), KernelSpec::rbf(10.0));
        let g = grid(&[0.0, 0.4, 0.9]);
        let zero = FnPredictor(|x: &Array2<f64>, _: &[f64], _: f64| Array2::zeros(x.dim()));
        let start = array![[0.3], [-1.2], [0.05]];
        let end = c.probability_flow_from(&zero, &g, start.clone(), 1000).unwrap();
        let b = c.schedule.integral_beta(1.0).unwrap() - c.schedule.integral_beta(c.s_min).unwrap();
        let growth = (0.5 * b).exp();
        for (u, v) in end.iter().zip(start.iter()) {
            assert!((u - v * growth).abs() <= 1e-6 * (v * growth).abs(), "{u} vs {}", v * growth);
        }
        let again = c.probability_flow_from(&zero, &g, start, 1000).unwrap();
        assert_eq!(end, again);
    }

    #[test]
    fn too_few_steps_rejected() {
        let c = Cspd::default();
        let zero = FnPredictor(|x: &Array2<f64>, _: &[f64], _: f64| Array2::zeros(x.dim()));
        assert!(c.reverse_sde_sample(&zero, &grid(&[0.0]), 1, &mut seeded(1), 9).is_err());
    }

    #[test]
    fn oracle_score_denoises_to_x0() {
        let c = Cspd::new(VpSchedule::default(), KernelSpec::rbf(20.0));
        let g = grid(&[0.0, 0.3, 0.7]);
        let l = c.kernel.factor(&g).unwrap();
        let x0 = array![[0.5], [-1.0], [1.5]];
        let oracle = FnPredictor(|x: &Array2<f64>, _: &[f64], s: f64| {
            let (mu, sigma2) = c.transition_params(&x0, s).unwrap();
            l.solve_lower_columns(&(x - &mu)).unwrap() / sigma2.sqrt()
        });
        let mut rng = seeded(23);
        let runs = 1000;
        let mut err = 0.0;
        for _ in 0..runs {
            let x = c.reverse_sde_sample(&oracle, &g, 1, &mut rng, 1000).unwrap();
            err += (&x - &x0).iter().map(|e| e.abs()).sum::<f64>() / 3.0;
        }
        assert!(err / (runs as f64) < 0.1, "{}", err / runs as f64);
    }

    #[test]
    fn variance_preservation() {
        let c = Cspd::new(VpSchedule::default(), KernelSpec::ou(1.0));
        let g = grid(&[0.0, 0.2, 0.9]);
        let l = c.kernel.factor(&g).unwrap();
        let sigma = covariance_matrix(&c.kernel, &g).into_array();
        let mut rng = seeded(24);
        let n = 40_000;
        for &s in &[0.05, 0.5] {
            let mut acc = Array2::<f64>::zeros((3, 3));
            for _ in 0..n {
                let x0 = l.mul_columns(&normal_array(&mut rng, 3, 1)).unwrap();
                let (xs, _) = c.forward_sample_with_factor(&x0, &l, s, &mut rng).unwrap();
                acc = acc + &xs.dot(&xs.t());
            }
            let cov = acc / n as f64;
            assert!((&cov - &sigma).iter().all(|e| e.abs() < 0.03));
        }
    }
}
