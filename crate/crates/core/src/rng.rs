//! Seeded random streams and the standard-normal transform.
//!
//! Every stochastic routine takes its generator explicitly. Normals are produced
//! with the cosine branch of the Box–Muller transform from two consecutive
//! `f64` uniforms, so a given seed yields the same normals on every platform and
//! across releases of `rand_distr`.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// The generator used throughout the crate.
pub type SpRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SpRng {
    SpRng::seed_from_u64(seed)
}

/// Independent stream `index` of the master `seed`.
///
/// Streams share the key but use distinct ChaCha stream ids, so per-series
/// generators can be created in any order or in parallel.
pub fn stream(seed: u64, index: u64) -> SpRng {
    let mut rng = SpRng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Derive a child generator from the parent's output.
pub fn split<R: Rng + ?Sized>(rng: &mut R) -> SpRng {
    SpRng::seed_from_u64(rng.random::<u64>())
}

/// One N(0, 1) draw: `sqrt(-2 ln u1) * cos(2 pi u2)` with `u1` in (0, 1].
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u1 = 1.0 - rng.random::<f64>();
    let u2 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

pub fn fill_normal<R: Rng + ?Sized>(rng: &mut R, out: &mut [f64]) {
    for v in out {
        *v = standard_normal(rng);
    }
}

pub fn normal_vec<R: Rng + ?Sized>(rng: &mut R, len: usize) -> Vec<f64> {
    (0..len).map(|_| standard_normal(rng)).collect()
}

/// `rows x cols` standard normals, filled in row-major order.
pub fn normal_array<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    let data = normal_vec(rng, rows * cols);
    Array2::from_shape_vec((rows, cols), data).expect("shape matches length")
}
