//! The noise-prediction network.
//!
//! Every time point is embedded as `[x_i, posenc(k t_i), posenc(k level)]` and
//! passed through a tanh MLP. After the first hidden layer an optional
//! multi-head temporal mixer lets points exchange information: head `h`
//! averages its block of hidden units over time with normalized weights
//! `exp(-scale_h softplus(gamma_h) (t_i - t_j)^2)`, and the mixed features are
//! concatenated to the unmixed ones. Weights depend only on time values, so the
//! network is equivariant to permutations of the time points and accepts any
//! irregular grid. Gradients are computed by hand.

pub mod adam;
pub mod layers;
pub mod tensor;

use ndarray::{concatenate, s, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{NoisePredictor, Trainable};
use crate::noise::KernelSpec;
use crate::series::TimeGrid;

pub use adam::{Adam, AdamConfig, Parameters};
use layers::{mixer_backward, mixer_forward, mixer_gamma_init, posenc_into, tanh, tanh_backward, Dense, MixerCache};
pub use layers::posenc;
pub use tensor::TensorRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    /// Channels `d` of the series.
    pub channels: usize,
    pub hidden: usize,
    /// Number of hidden tanh layers.
    pub depth: usize,
    /// Length of each positional encoding (time and noise level).
    pub enc_dim: usize,
    /// Times and levels are multiplied by this before encoding.
    pub enc_scale: f64,
    pub mixer: bool,
    /// One bandwidth multiplier per mixer head.
    pub mixer_scales: Vec<f64>,
    /// When set, each point also receives its row of `L^{-1} X` for the
    /// kernel's Cholesky factor `L` on the input times. Like the mixer this
    /// couples time points, so it requires `mixer`.
    #[serde(default)]
    pub whiten: Option<KernelSpec>,
}

impl Architecture {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            hidden: 128,
            depth: 3,
            enc_dim: 32,
            enc_scale: 100.0,
            mixer: true,
            mixer_scales: vec![1.0, 10.0, 100.0, 1000.0],
            whiten: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.enc_dim == 0 || self.enc_dim % 2 == 1 {
            return Err(Error::OddDim(self.enc_dim));
        }
        if self.channels == 0 || self.hidden == 0 || self.depth == 0 {
            return Err(Error::InvalidRange("channels, hidden and depth must be positive".into()));
        }
        if self.mixer && (self.mixer_scales.is_empty() || self.mixer_scales.len() > self.hidden) {
            return Err(Error::InvalidRange(format!(
                "mixer needs between 1 and {} heads, got {}",
                self.hidden,
                self.mixer_scales.len()
            )));
        }
        if self.whiten.is_some() && !self.mixer {
            return Err(Error::InvalidRange("whitening mixes time points and needs the temporal mixer enabled".into()));
        }
        if self.mixer_scales.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidRange("mixer scales must be positive".into()));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.value_width() + 2 * self.enc_dim
    }

    fn value_width(&self) -> usize {
        if self.whiten.is_some() {
            2 * self.channels
        } else {
            self.channels
        }
    }

    fn heads(&self) -> usize {
        if self.mixer {
            self.mixer_scales.len()
        } else {
            0
        }
    }

    /// `(fan_in, fan_out)` of every dense layer, the output head last.
    fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let after_mix = if self.mixer { 2 * self.hidden } else { self.hidden };
        let mut shapes = vec![(self.input_width(), self.hidden)];
        for l in 1..self.depth {
            shapes.push((if l == 1 { after_mix } else { self.hidden }, self.hidden));
        }
        let head_in = if self.depth == 1 { after_mix } else { self.hidden };
        shapes.push((head_in, self.channels));
        shapes
    }
}

/// Network weights. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub arch: Architecture,
    pub layers: Vec<Dense>,
    pub mixer_gamma: Vec<f64>,
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    input: Array2<f64>,
    acts: Vec<Array2<f64>>,
    mixed: Option<(Array2<f64>, MixerCache)>,
    times: Vec<f64>,
}

impl Tape {
    /// Mixer weight matrices, one per head.
    pub fn mixer_weights(&self) -> Option<&[Array2<f64>]> {
        self.mixed.as_ref().map(|(_, c)| c.weights())
    }
}

impl DenoiserParams {
    /// Glorot-uniform weights, zero biases, `softplus(gamma) = 1`.
    pub fn init<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let layers = arch.layer_shapes().into_iter().map(|(i, o)| Dense::glorot(i, o, rng)).collect();
        let mixer_gamma = vec![mixer_gamma_init(); arch.heads()];
        Ok(Self { arch, layers, mixer_gamma })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            arch: self.arch.clone(),
            layers: self.layers.iter().map(|l| Dense::zeros(l.fan_in(), l.fan_out())).collect(),
            mixer_gamma: vec![0.0; self.mixer_gamma.len()],
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.2.len()).sum()
    }

    /// Rebuild from an architecture and serialized tensors.
    pub fn from_records(arch: Architecture, records: &[TensorRecord]) -> Result<Self> {
        arch.validate()?;
        let mut p = Self {
            layers: arch.layer_shapes().into_iter().map(|(i, o)| Dense::zeros(i, o)).collect(),
            mixer_gamma: vec![0.0; arch.heads()],
            arch,
        };
        tensor::load_records(&mut p, records)?;
        Ok(p)
    }

    pub fn to_records(&self) -> Vec<TensorRecord> {
        tensor::to_records(self)
    }

    fn embed(&self, x: &Array2<f64>, times: &[f64], level: f64) -> Result<Array2<f64>> {
        let (m, d) = x.dim();
        if d != self.arch.channels || times.len() != m {
            return Err(Error::ShapeMismatch(format!(
                "input {m}x{d} with {} times, network expects {} channels",
                times.len(),
                self.arch.channels
            )));
        }
        let whitened = match &self.arch.whiten {
            Some(kernel) => {
                let grid = TimeGrid::new(times.to_vec())?;
                Some(kernel.factor(&grid)?.solve_lower_columns(x)?)
            }
            None => None,
        };
        let v = self.arch.value_width();
        let e = self.arch.enc_dim;
        let k = self.arch.enc_scale;
        let mut level_enc = vec![0.0; e];
        posenc_into(k * level, &mut level_enc);
        let mut input = Array2::zeros((m, self.arch.input_width()));
        for (i, mut row) in input.rows_mut().into_iter().enumerate() {
            let r = row.as_slice_mut().expect("standard layout");
            for c in 0..d {
                r[c] = x[[i, c]];
            }
            if let Some(w) = &whitened {
                for c in 0..d {
                    r[d + c] = w[[i, c]];
                }
            }
            posenc_into(k * times[i], &mut r[v..v + e]);
            r[v + e..].copy_from_slice(&level_enc);
        }
        Ok(input)
    }

    pub fn forward(&self, x: &Array2<f64>, times: &[f64], level: f64) -> Result<(Array2<f64>, Tape)> {
        let input = self.embed(x, times, level)?;
        let depth = self.arch.depth;
        let mut acts: Vec<Array2<f64>> = Vec::with_capacity(depth);
        let mut mixed = None;
        acts.push(tanh(self.layers[0].forward(&input)));
        if self.arch.mixer {
            let (y, cache) = mixer_forward(&self.mixer_gamma, &self.arch.mixer_scales, times, &acts[0]);
            let cat = concatenate(Axis(1), &[acts[0].view(), y.view()]).expect("equal row counts");
            mixed = Some((cat, cache));
        }
        for l in 1..depth {
            let inp = if l == 1 { mixed.as_ref().map_or(&acts[0], |m| &m.0) } else { &acts[l - 1] };
            let a = tanh(self.layers[l].forward(inp));
            acts.push(a);
        }
        let head_in = if depth == 1 { mixed.as_ref().map_or(&acts[0], |m| &m.0) } else { &acts[depth - 1] };
        let out = self.layers[depth].forward(head_in);
        Ok((out, Tape { input, acts, mixed, times: times.to_vec() }))
    }

    /// Gradients of `sum(g_out * output)` with respect to every parameter.
    pub fn backward(&self, tape: &Tape, g_out: &Array2<f64>) -> Self {
        let mut grads = self.zeros_like();
        let depth = self.arch.depth;
        let hidden = self.arch.hidden;
        let mixed_input = |l: usize| if l == 1 { tape.mixed.as_ref().map(|m| &m.0) } else { None };

        let head_in = if depth == 1 { mixed_input(1).unwrap_or(&tape.acts[0]) } else { &tape.acts[depth - 1] };
        let mut g_in = self.layers[depth].backward(head_in, g_out, &mut grads.layers[depth]);
        // g_in is now the gradient w.r.t. the input of the layer `layer`
        let mut layer = depth;
        loop {
            if layer == 1 {
                if let Some((_, cache)) = &tape.mixed {
                    let g_h = g_in.slice(s![.., ..hidden]).to_owned();
                    let g_y = g_in.slice(s![.., hidden..]).to_owned();
                    let g_mix = mixer_backward(
                        &self.mixer_gamma,
                        &self.arch.mixer_scales,
                        cache,
                        &tape.acts[0],
                        &g_y,
                        &mut grads.mixer_gamma,
                    );
                    g_in = g_h + &g_mix;
                }
            }
            let l = layer - 1;
            let gz = tanh_backward(&tape.acts[l], g_in);
            if l == 0 {
                self.layers[0].backward_params(&tape.input, &gz, &mut grads.layers[0]);
                break;
            }
            let inp = mixed_input(l).unwrap_or(&tape.acts[l - 1]);
            g_in = self.layers[l].backward(inp, &gz, &mut grads.layers[l]);
            layer = l;
        }
        debug_assert_eq!(tape.times.len(), g_out.nrows());
        grads
    }
}

impl Parameters for DenoiserParams {
    fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::with_capacity(2 * self.layers.len() + 1);
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.weight"), l.w.shape().to_vec(), l.w.as_slice().expect("standard layout")));
            out.push((format!("layers.{i}.bias"), vec![l.b.len()], l.b.as_slice().expect("standard layout")));
        }
        if !self.mixer_gamma.is_empty() {
            out.push(("mixer.gamma".into(), vec![self.mixer_gamma.len()], &self.mixer_gamma));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::with_capacity(2 * self.layers.len() + 1);
        for l in self.layers.iter_mut() {
            out.push(l.w.as_slice_mut().expect("standard layout"));
            out.push(l.b.as_slice_mut().expect("standard layout"));
        }
        if !self.mixer_gamma.is_empty() {
            out.push(&mut self.mixer_gamma);
        }
        out
    }
}

impl NoisePredictor for DenoiserParams {
    fn predict(&self, noisy: &Array2<f64>, times: &[f64], level: f64) -> Array2<f64> {
        match self.forward(noisy, times, level) {
            Ok((out, _)) => out,
            Err(e) => panic!("denoiser input rejected: {e}"),
        }
    }
}

impl Trainable for DenoiserParams {
    type Grads = DenoiserParams;

    fn squared_error_grads(&self, noisy: &Array2<f64>, times: &[f64], level: f64, target: &Array2<f64>) -> (Array2<f64>, Self) {
        let (out, tape) = match self.forward(noisy, times, level) {
            Ok(v) => v,
            Err(e) => panic!("denoiser input rejected: {e}"),
        };
        let g = (&out - target) * 2.0;
        let grads = self.backward(&tape, &g);
        (out, grads)
    }

    fn zero_grads(&self) -> Self {
        self.zeros_like()
    }

    fn accumulate(acc: &mut Self, g: &Self) {
        adam::add_assign(acc, g);
    }

    fn scale(g: &mut Self, factor: f64) {
        adam::scale(g, factor);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_array, seeded};

    fn tiny(mixer: bool, depth: usize) -> Architecture {
        Architecture {
            channels: 2,
            hidden: 8,
            depth,
            enc_dim: 4,
            enc_scale: 3.0,
            mixer,
            mixer_scales: vec![1.0, 10.0, 100.0],
            whiten: None,
        }
    }

    fn loss(p: &DenoiserParams, x: &Array2<f64>, t: &[f64], level: f64, target: &Array2<f64>) -> f64 {
        let (out, _) = p.forward(x, t, level).unwrap();
        (&out - target).iter().map(|e| e * e).sum()
    }

    fn check_gradients(arch: Architecture, seed: u64) {
        let mut rng = seeded(seed);
        let mut p = DenoiserParams::init(arch, &mut rng).unwrap();
        // Move gamma away from its symmetric start so its gradient is generic.
        for (h, g) in p.mixer_gamma.iter_mut().enumerate() {
            *g += 0.3 * h as f64 - 0.2;
        }
        let t = [0.0, 0.15, 0.4, 0.47];
        let x = normal_array(&mut rng, 4, 2);
        let target = normal_array(&mut rng, 4, 2);
        let (_, grads) = p.squared_error_grads(&x, &t, 0.37, &target);
        let analytic: Vec<Vec<f64>> = grads.tensors().into_iter().map(|t| t.2.to_vec()).collect();
        let names: Vec<String> = p.tensors().into_iter().map(|t| t.0).collect();
        let h = 1e-5;
        for (k, name) in names.iter().enumerate() {
            for i in 0..analytic[k].len() {
                let orig = p.tensors()[k].2[i];
                p.tensors_mut()[k][i] = orig + h;
                let up = loss(&p, &x, &t, 0.37, &target);
                p.tensors_mut()[k][i] = orig - h;
                let dn = loss(&p, &x, &t, 0.37, &target);
                p.tensors_mut()[k][i] = orig;
                let fd = (up - dn) / (2.0 * h);
                let a = analytic[k][i];
                let rel = (fd - a).abs() / a.abs().max(fd.abs()).max(1e-6);
                assert!(rel < 1e-4 || (fd - a).abs() < 1e-9, "{name}[{i}]: fd {fd} vs analytic {a}");
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        check_gradients(tiny(true, 3), 31);
        check_gradients(tiny(false, 3), 32);
        check_gradients(tiny(true, 1), 33);
        check_gradients(tiny(true, 2), 34);
        check_gradients(Architecture { whiten: Some(KernelSpec::ou(1.0)), ..tiny(true, 3) }, 35);
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let p = DenoiserParams::init(tiny(true, 3), &mut seeded(1)).unwrap();
        let x = normal_array(&mut seeded(2), 3, 2);
        let (_, tape) = p.forward(&x, &[0.0, 0.5, 1.0], 0.2).unwrap();
        let g = p.backward(&tape, &Array2::zeros((3, 2)));
        assert!(g.tensors().iter().all(|t| t.2.iter().all(|v| *v == 0.0)));
        // A perfect prediction is a stationary point of the squared error.
        let (out, _) = p.forward(&x, &[0.0, 0.5, 1.0], 0.2).unwrap();
        let (_, g) = p.squared_error_grads(&x, &[0.0, 0.5, 1.0], 0.2, &out);
        assert!(g.tensors().iter().all(|t| t.2.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn permutation_equivariance() {
        let p = DenoiserParams::init(tiny(true, 3), &mut seeded(3)).unwrap();
        let t = [0.1, 0.9, 0.35, 0.6, 0.2];
        let x = normal_array(&mut seeded(4), 5, 2);
        let perm = [3, 0, 4, 1, 2];
        let tp: Vec<f64> = perm.iter().map(|&i| t[i]).collect();
        let xp = Array2::from_shape_fn((5, 2), |(i, c)| x[[perm[i], c]]);
        let (out, _) = p.forward(&x, &t, 0.5).unwrap();
        let (outp, _) = p.forward(&xp, &tp, 0.5).unwrap();
        for i in 0..5 {
            for c in 0..2 {
                assert!((outp[[i, c]] - out[[perm[i], c]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_point_mixer_is_identity() {
        let mut rng = seeded(5);
        let p = DenoiserParams::init(tiny(true, 3), &mut rng).unwrap();
        let x = normal_array(&mut rng, 1, 2);
        let (out, tape) = p.forward(&x, &[0.4], 0.1).unwrap();
        for k in tape.mixer_weights().unwrap() {
            assert_eq!(k, &Array2::from_elem((1, 1), 1.0));
        }
        // The mixed block equals the unmixed one, so the pure MLP path with the
        // two weight blocks summed gives the same output.
        let h1 = tanh(p.layers[0].forward(&tape.input));
        let w = &p.layers[1].w;
        let folded = Dense { w: &w.slice(s![..8, ..]) + &w.slice(s![8.., ..]), b: p.layers[1].b.clone() };
        let h2 = tanh(folded.forward(&h1));
        let h3 = tanh(p.layers[2].forward(&h2));
        let y = p.layers[3].forward(&h3);
        assert!((&y - &out).iter().all(|e| e.abs() < 1e-14));
    }

    #[test]
    fn pointwise_mode_is_independent_across_points() {
        let p = DenoiserParams::init(tiny(false, 3), &mut seeded(6)).unwrap();
        let x = ndarray::array![[0.3, -0.1], [0.3, -0.1], [1.0, 2.0]];
        let (a, _) = p.forward(&x, &[0.2, 0.2, 0.7], 0.3).unwrap();
        let (b, _) = p.forward(&x.slice(s![..1, ..]).to_owned(), &[0.2], 0.3).unwrap();
        assert_eq!(a.row(0), b.row(0));
        assert_eq!(a.row(1), b.row(0));
    }

    #[test]
    fn init_statistics_and_reproducibility() {
        let arch = Architecture { hidden: 64, ..Architecture::new(2) };
        let p = DenoiserParams::init(arch.clone(), &mut seeded(7)).unwrap();
        let q = DenoiserParams::init(arch, &mut seeded(7)).unwrap();
        assert_eq!(p, q);
        for l in &p.layers {
            assert!(l.b.iter().all(|v| *v == 0.0));
        }
        let w = &p.layers[2].w;
        let var = w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
        let expected = 2.0 / (w.nrows() + w.ncols()) as f64;
        assert!((var / expected - 1.0).abs() < 0.2, "{var} vs {expected}");
        for g in &p.mixer_gamma {
            assert!((layers::softplus(*g) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn records_roundtrip_bitwise() {
        let p = DenoiserParams::init(tiny(true, 2), &mut seeded(8)).unwrap();
        let back = DenoiserParams::from_records(p.arch.clone(), &p.to_records()).unwrap();
        assert_eq!(p, back);
        let mut recs = p.to_records();
        recs.pop();
        assert!(DenoiserParams::from_records(p.arch.clone(), &recs).is_err());
    }

    #[test]
    fn shape_errors() {
        let p = DenoiserParams::init(tiny(true, 2), &mut seeded(9)).unwrap();
        assert!(matches!(p.forward(&Array2::zeros((2, 3)), &[0.0, 1.0], 0.1), Err(Error::ShapeMismatch(_))));
        assert!(matches!(p.forward(&Array2::zeros((2, 2)), &[0.0], 0.1), Err(Error::ShapeMismatch(_))));
        assert!(DenoiserParams::init(Architecture { enc_dim: 3, ..tiny(true, 2) }, &mut seeded(1)).is_err());
        let pointwise_whitened = Architecture { whiten: Some(KernelSpec::ou(1.0)), ..tiny(false, 2) };
        assert!(DenoiserParams::init(pointwise_whitened, &mut seeded(1)).is_err());
    }
}
