//! Dense symmetric linear algebra: Cholesky, triangular solves and the
//! Gaussian densities, samples and divergences built on them.
//!
//! Matrices are small (a few hundred time points at most) and stored densely
//! in row-major `ndarray` arrays.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::normal_vec;

/// Diagonal jitter applied to kernel matrices before factorization.
pub const DEFAULT_JITTER: f64 = 1e-6;

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// A symmetric matrix. Symmetry is checked exactly on construction.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix(Array2<f64>);

impl SymMatrix {
    pub fn new(m: Array2<f64>) -> Result<Self> {
        let (r, c) = m.dim();
        if r == 0 || r != c {
            return Err(Error::ShapeMismatch(format!("expected a non-empty square matrix, got {r}x{c}")));
        }
        for i in 0..r {
            for j in 0..i {
                if m[[i, j]] != m[[j, i]] {
                    return Err(Error::ShapeMismatch(format!("matrix is not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(Self(m))
    }

    /// Build from the lower triangle produced by `f(i, j)` for `j <= i`.
    pub fn from_fn(dim: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Array2::zeros((dim, dim));
        for i in 0..dim {
            for j in 0..=i {
                let v = f(i, j);
                m[[i, j]] = v;
                m[[j, i]] = v;
            }
        }
        Self(m)
    }

    pub fn identity(dim: usize) -> Self {
        Self(Array2::eye(dim))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_array(self) -> Array2<f64> {
        self.0
    }
}

/// Lower-triangular factor `L` with a strictly positive diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct LowerTriangular(Array2<f64>);

impl LowerTriangular {
    pub fn identity(dim: usize) -> Self {
        Self(Array2::eye(dim))
    }

    /// Wrap a matrix, checking the zero upper triangle and positive diagonal.
    pub fn new(m: Array2<f64>) -> Result<Self> {
        let (r, c) = m.dim();
        if r == 0 || r != c {
            return Err(Error::ShapeMismatch(format!("expected a non-empty square matrix, got {r}x{c}")));
        }
        for i in 0..r {
            if !(m[[i, i]] > 0.0) {
                return Err(Error::NotPositiveDefinite { index: i, pivot: m[[i, i]] });
            }
            for j in i + 1..r {
                if m[[i, j]] != 0.0 {
                    return Err(Error::ShapeMismatch(format!("nonzero entry above the diagonal at ({i}, {j})")));
                }
            }
        }
        Ok(Self(m))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.0
    }

    /// `sum_i ln L_ii`, i.e. half the log-determinant of `L L^T`.
    pub fn log_diag_sum(&self) -> f64 {
        self.0.diag().iter().map(|v| v.ln()).sum()
    }

    /// `L x`.
    pub fn mul_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len(self.dim(), x.len())?;
        Ok(self.mul_vec_unchecked(x))
    }

    fn mul_vec_unchecked(&self, x: &[f64]) -> Vec<f64> {
        let n = self.dim();
        (0..n)
            .map(|i| {
                let row = self.0.row(i);
                let mut acc = 0.0;
                for k in 0..=i {
                    acc += row[k] * x[k];
                }
                acc
            })
            .collect()
    }

    /// `L X`, applying the factor to every column (channel) of `X`.
    pub fn mul_columns(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        check_len(self.dim(), x.nrows())?;
        let mut out = Array2::zeros(x.dim());
        for (j, col) in x.axis_iter(Axis(1)).enumerate() {
            let col = col.to_vec();
            let y = self.mul_vec_unchecked(&col);
            out.column_mut(j).assign(&Array1::from(y));
        }
        Ok(out)
    }

    /// Solve `L x = b` for every column of `B`.
    pub fn solve_lower_columns(&self, b: &Array2<f64>) -> Result<Array2<f64>> {
        map_columns(b, self.dim(), |c| solve_lower(self, c))
    }

    /// Solve `L^T x = b` for every column of `B`.
    pub fn solve_upper_columns(&self, b: &Array2<f64>) -> Result<Array2<f64>> {
        map_columns(b, self.dim(), |c| solve_upper(self, c))
    }

    /// Reconstruct `L L^T`.
    pub fn reconstruct(&self) -> Array2<f64> {
        self.0.dot(&self.0.t())
    }
}

fn map_columns(
    b: &Array2<f64>,
    dim: usize,
    mut f: impl FnMut(&[f64]) -> Result<Vec<f64>>,
) -> Result<Array2<f64>> {
    check_len(dim, b.nrows())?;
    let mut out = Array2::zeros(b.dim());
    for (j, col) in b.axis_iter(Axis(1)).enumerate() {
        let x = f(&col.to_vec())?;
        out.column_mut(j).assign(&ArrayView1::from(&x[..]));
    }
    Ok(out)
}

fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}

/// Cholesky factor of `m + jitter * I`.
pub fn cholesky(m: &SymMatrix, jitter: f64) -> Result<LowerTriangular> {
    if !(jitter >= 0.0) {
        return Err(Error::InvalidRange(format!("jitter must be nonnegative, got {jitter}")));
    }
    let a = m.as_array();
    let n = m.dim();
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut diag = a[[j, j]] + jitter;
        for k in 0..j {
            diag -= l[[j, k]] * l[[j, k]];
        }
        if !(diag > 0.0) {
            return Err(Error::NotPositiveDefinite { index: j, pivot: diag });
        }
        let ljj = diag.sqrt();
        l[[j, j]] = ljj;
        for i in j + 1..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / ljj;
        }
    }
    Ok(LowerTriangular(l))
}

/// Forward substitution: `L x = b`.
pub fn solve_lower(l: &LowerTriangular, b: &[f64]) -> Result<Vec<f64>> {
    let n = l.dim();
    check_len(n, b.len())?;
    let a = l.as_array();
    let mut x = b.to_vec();
    for i in 0..n {
        let mut s = x[i];
        for k in 0..i {
            s -= a[[i, k]] * x[k];
        }
        x[i] = s / a[[i, i]];
    }
    Ok(x)
}

/// Back substitution against the transpose: `L^T x = b`.
pub fn solve_upper(l: &LowerTriangular, b: &[f64]) -> Result<Vec<f64>> {
    let n = l.dim();
    check_len(n, b.len())?;
    let a = l.as_array();
    let mut x = b.to_vec();
    for i in (0..n).rev() {
        let mut s = x[i];
        for k in i + 1..n {
            s -= a[[k, i]] * x[k];
        }
        x[i] = s / a[[i, i]];
    }
    Ok(x)
}

/// `N(mean, scale * L L^T)`.
#[derive(Debug, Clone, Copy)]
pub struct GaussianSpec<'a> {
    pub mean: &'a [f64],
    pub scale: f64,
    pub factor: &'a LowerTriangular,
}

impl<'a> GaussianSpec<'a> {
    pub fn new(mean: &'a [f64], scale: f64, factor: &'a LowerTriangular) -> Result<Self> {
        if !(scale > 0.0) {
            return Err(Error::NonPositiveScale(scale));
        }
        check_len(factor.dim(), mean.len())?;
        Ok(Self { mean, scale, factor })
    }
}

/// `log N(x; mean, scale * L L^T)`.
pub fn mvn_logpdf(x: &[f64], g: &GaussianSpec<'_>) -> Result<f64> {
    let d = g.factor.dim();
    check_len(d, x.len())?;
    check_len(d, g.mean.len())?;
    let diff: Vec<f64> = x.iter().zip(g.mean).map(|(a, b)| a - b).collect();
    let z = solve_lower(g.factor, &diff)?;
    let quad: f64 = z.iter().map(|v| v * v).sum();
    let d = d as f64;
    Ok(-0.5 * (d * (LN_2PI + g.scale.ln()) + 2.0 * g.factor.log_diag_sum() + quad / g.scale))
}

/// Draw `(white, sample)` with `sample = mean + sqrt(scale) * L * white`.
pub fn mvn_sample<R: Rng + ?Sized>(g: &GaussianSpec<'_>, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
    let white = normal_vec(rng, g.factor.dim());
    let coloured = g.factor.mul_vec_unchecked(&white);
    let root = g.scale.sqrt();
    let sample = g.mean.iter().zip(&coloured).map(|(m, c)| m + root * c).collect();
    (white, sample)
}

/// `KL(N(mu1, a * Sigma) || N(mu2, b * Sigma))` with `Sigma = L L^T`.
pub fn kl_scaled_gaussians(mu1: &[f64], a: f64, mu2: &[f64], b: f64, l: &LowerTriangular) -> Result<f64> {
    let d = l.dim();
    check_len(d, mu1.len())?;
    check_len(d, mu2.len())?;
    if !(a > 0.0) {
        return Err(Error::NonPositiveScale(a));
    }
    if !(b > 0.0) {
        return Err(Error::NonPositiveScale(b));
    }
    let diff: Vec<f64> = mu1.iter().zip(mu2).map(|(x, y)| x - y).collect();
    let z = solve_lower(l, &diff)?;
    let quad: f64 = z.iter().map(|v| v * v).sum();
    let d = d as f64;
    Ok(0.5 * (d * a / b - d + d * (b / a).ln() + quad / b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;

    fn l2() -> LowerTriangular {
        cholesky(&SymMatrix::new(array![[1.0, 0.5], [0.5, 1.0]]).unwrap(), 0.0).unwrap()
    }

    #[test]
    fn cholesky_identity() {
        let l = cholesky(&SymMatrix::identity(3), 0.0).unwrap();
        assert_eq!(l.as_array(), &Array2::<f64>::eye(3));
    }

    #[test]
    fn cholesky_two_by_two() {
        let l = l2();
        assert_abs_diff_eq!(l.as_array()[[0, 0]], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(l.as_array()[[1, 0]], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(l.as_array()[[1, 1]], 0.866_025_4, epsilon = 1e-7);
        assert_eq!(l.as_array()[[0, 1]], 0.0);
    }

    #[test]
    fn cholesky_rank_deficient() {
        let m = SymMatrix::new(array![[1.0, 1.0], [1.0, 1.0]]).unwrap();
        assert!(matches!(cholesky(&m, 0.0), Err(Error::NotPositiveDefinite { index: 1, .. })));
        // jitter rescues it
        assert!(cholesky(&m, 1e-6).is_ok());
    }

    #[test]
    fn rejects_asymmetric() {
        assert!(SymMatrix::new(array![[1.0, 0.2], [0.3, 1.0]]).is_err());
    }

    #[test]
    fn triangular_solves() {
        let id = LowerTriangular::identity(2);
        assert_eq!(solve_lower(&id, &[3.0, 4.0]).unwrap(), vec![3.0, 4.0]);
        assert_eq!(solve_upper(&id, &[3.0, 4.0]).unwrap(), vec![3.0, 4.0]);

        let l = l2();
        let x = solve_lower(&l, &[1.0, 1.0]).unwrap();
        assert_abs_diff_eq!(x[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(x[1], 0.577_350_3, epsilon = 1e-7);
        let y = solve_upper(&l, &[1.0, 1.0]).unwrap();
        assert_abs_diff_eq!(y[0], 0.422_649_7, epsilon = 1e-7);
        assert_abs_diff_eq!(y[1], 1.154_700_5, epsilon = 1e-7);

        assert!(matches!(
            solve_lower(&l, &[1.0, 2.0, 3.0]),
            Err(Error::DimensionMismatch { expected: 2, got: 3 })
        ));
        assert!(matches!(solve_upper(&l, &[1.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn logpdf_values() {
        let l1 = LowerTriangular::identity(1);
        let g = GaussianSpec::new(&[0.0], 1.0, &l1).unwrap();
        assert_abs_diff_eq!(mvn_logpdf(&[0.0], &g).unwrap(), -0.918_938_5, epsilon = 1e-7);

        let l = LowerTriangular::identity(2);
        let g = GaussianSpec::new(&[0.3, -1.0], 1.0, &l).unwrap();
        assert_abs_diff_eq!(mvn_logpdf(&[0.3, -1.0], &g).unwrap(), -1.837_877_1, epsilon = 1e-7);

        let g4 = GaussianSpec::new(&[0.0], 4.0, &l1).unwrap();
        let g1 = GaussianSpec::new(&[0.0], 1.0, &l1).unwrap();
        let diff = mvn_logpdf(&[0.0], &g4).unwrap() - mvn_logpdf(&[0.0], &g1).unwrap();
        assert_abs_diff_eq!(diff, -0.5 * 4f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn logpdf_integrates_to_one() {
        // trapezoid rule on [-12, 12] for N(0.7, 2.5)
        let l = LowerTriangular::identity(1);
        let g = GaussianSpec::new(&[0.7], 2.5, &l).unwrap();
        let n = 24_000;
        let (a, b) = (-12.0, 12.0);
        let h = (b - a) / n as f64;
        let mut total = 0.0;
        for i in 0..=n {
            let x = a + i as f64 * h;
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            total += w * mvn_logpdf(&[x], &g).unwrap().exp();
        }
        assert_abs_diff_eq!(total * h, 1.0, epsilon = 1e-4);
    }

    #[test]
    fn sample_identity_and_determinism() {
        let l = LowerTriangular::identity(3);
        let mean = [0.0; 3];
        let g = GaussianSpec::new(&mean, 1.0, &l).unwrap();
        let (w, s) = mvn_sample(&g, &mut seeded(3));
        assert_eq!(w, s);
        let (w2, s2) = mvn_sample(&g, &mut seeded(3));
        assert_eq!((w, s), (w2, s2));
    }

    #[test]
    fn sample_covariance_monte_carlo() {
        let l = l2();
        let mean = [0.0; 2];
        let g = GaussianSpec::new(&mean, 1.0, &l).unwrap();
        let mut rng = seeded(11);
        let n = 100_000;
        let mut c = [0.0; 3];
        for _ in 0..n {
            let (_, x) = mvn_sample(&g, &mut rng);
            c[0] += x[0] * x[0];
            c[1] += x[0] * x[1];
            c[2] += x[1] * x[1];
        }
        let c: Vec<f64> = c.iter().map(|v| v / n as f64).collect();
        assert!((c[0] - 1.0).abs() < 0.02 && (c[1] - 0.5).abs() < 0.02 && (c[2] - 1.0).abs() < 0.02, "{c:?}");
    }

    #[test]
    fn kl_values() {
        let l = l2();
        assert_abs_diff_eq!(kl_scaled_gaussians(&[1.0, 2.0], 0.3, &[1.0, 2.0], 0.3, &l).unwrap(), 0.0, epsilon = 1e-14);
        let l1 = LowerTriangular::identity(1);
        assert_abs_diff_eq!(kl_scaled_gaussians(&[1.0], 1.0, &[0.0], 1.0, &l1).unwrap(), 0.5, epsilon = 1e-14);
        assert!(matches!(kl_scaled_gaussians(&[1.0], 0.0, &[0.0], 1.0, &l1), Err(Error::NonPositiveScale(_))));
        assert!(matches!(kl_scaled_gaussians(&[1.0, 0.0], 1.0, &[0.0], 1.0, &l1), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn kl_matches_monte_carlo() {
        // E_p[log p(x) - log q(x)] over draws from p, d = 3
        let m = SymMatrix::new(array![[2.0, 0.6, 0.1], [0.6, 1.5, -0.3], [0.1, -0.3, 1.0]]).unwrap();
        let l = cholesky(&m, 0.0).unwrap();
        let (mu1, a) = ([0.4, -0.2, 1.0], 0.7);
        let (mu2, b) = ([0.0, 0.3, 0.5], 1.3);
        let p = GaussianSpec::new(&mu1, a, &l).unwrap();
        let q = GaussianSpec::new(&mu2, b, &l).unwrap();
        let mut rng = seeded(5);
        let n = 50_000;
        let vals: Vec<f64> = (0..n)
            .map(|_| {
                let (_, x) = mvn_sample(&p, &mut rng);
                mvn_logpdf(&x, &p).unwrap() - mvn_logpdf(&x, &q).unwrap()
            })
            .collect();
        let mean = vals.iter().sum::<f64>() / n as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        let exact = kl_scaled_gaussians(&mu1, a, &mu2, b, &l).unwrap();
        assert!((mean - exact).abs() < 3.0 * se, "mc {mean} exact {exact} se {se}");
    }

    fn random_spd(n: usize, seed: u64) -> SymMatrix {
        let mut rng = seeded(seed);
        let a = crate::rng::normal_array(&mut rng, n, n);
        let mut m = a.dot(&a.t());
        for i in 0..n {
            m[[i, i]] += n as f64;
        }
        SymMatrix::from_fn(n, |i, j| m[[i, j]])
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn factor_reconstructs(n in 1usize..40, seed in 0u64..1000) {
            let m = random_spd(n, seed);
            let l = cholesky(&m, 1e-6).unwrap();
            let mut target = m.as_array().clone();
            for i in 0..n { target[[i, i]] += 1e-6; }
            let err = (&l.reconstruct() - &target).iter().fold(0.0f64, |a, v| a.max(v.abs()));
            prop_assert!(err <= 1e-8 * (n as f64), "err {}", err);
        }

        #[test]
        fn solve_then_multiply_recovers(n in 1usize..40, seed in 0u64..1000) {
            let l = cholesky(&random_spd(n, seed), 0.0).unwrap();
            let b = normal_vec(&mut seeded(seed + 1), n);
            let x = solve_lower(&l, &b).unwrap();
            let back = l.mul_vec(&x).unwrap();
            let norm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
            let err = back.iter().zip(&b).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt();
            prop_assert!(err <= 1e-10 * norm.max(1.0));
        }
    }
}
