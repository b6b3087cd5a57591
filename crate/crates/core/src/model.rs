//! The interface between the diffusion processes and a noise-prediction
//! network.
//!
//! A model receives the noisy series (`M x d`), its observation times and a
//! scalar noise level (`n / N` for the discrete process, `s` for the continuous
//! one) and predicts the white noise that produced it.

use ndarray::Array2;

pub trait NoisePredictor: Sync {
    fn predict(&self, noisy: &Array2<f64>, times: &[f64], level: f64) -> Array2<f64>;
}

/// A predictor whose parameters can be trained by gradient descent.
pub trait Trainable: NoisePredictor {
    type Grads: Send;

    /// Prediction and the gradient of `sum((prediction - target)^2)` with
    /// respect to every parameter.
    fn squared_error_grads(
        &self,
        noisy: &Array2<f64>,
        times: &[f64],
        level: f64,
        target: &Array2<f64>,
    ) -> (Array2<f64>, Self::Grads);

    fn zero_grads(&self) -> Self::Grads;

    /// `acc += g`
    fn accumulate(acc: &mut Self::Grads, g: &Self::Grads);

    /// `g *= factor`
    fn scale(g: &mut Self::Grads, factor: f64);
}

/// Wraps a closure as a parameter-free predictor (oracles, baselines).
pub struct FnPredictor<F>(pub F);

impl<F> NoisePredictor for FnPredictor<F>
where
    F: Fn(&Array2<f64>, &[f64], f64) -> Array2<f64> + Sync,
{
    fn predict(&self, noisy: &Array2<f64>, times: &[f64], level: f64) -> Array2<f64> {
        (self.0)(noisy, times, level)
    }
}

impl<F> Trainable for FnPredictor<F>
where
    F: Fn(&Array2<f64>, &[f64], f64) -> Array2<f64> + Sync,
{
    type Grads = ();

    fn squared_error_grads(&self, noisy: &Array2<f64>, times: &[f64], level: f64, _: &Array2<f64>) -> (Array2<f64>, ()) {
        (self.predict(noisy, times, level), ())
    }

    fn zero_grads(&self) {}

    fn accumulate(_: &mut (), _: &()) {}

    fn scale(_: &mut (), _: f64) {}
}

/// Always predicts zero noise.
pub struct ZeroPredictor;

impl NoisePredictor for ZeroPredictor {
    fn predict(&self, noisy: &Array2<f64>, _: &[f64], _: f64) -> Array2<f64> {
        Array2::zeros(noisy.dim())
    }
}
