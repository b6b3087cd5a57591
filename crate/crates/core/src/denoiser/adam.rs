//! Adam with bias correction over any [`Parameters`] container.

use serde::{Deserialize, Serialize};

/// A set of named, flat parameter tensors in a fixed order.
pub trait Parameters {
    /// `(name, shape, data)` for every tensor.
    fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])>;

    /// Mutable data in the same order as [`Parameters::tensors`].
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;
}

/// `acc += g`, tensor by tensor.
pub fn add_assign<P: Parameters>(acc: &mut P, g: &P) {
    let src: Vec<&[f64]> = g.tensors().into_iter().map(|t| t.2).collect();
    for (dst, src) in acc.tensors_mut().into_iter().zip(src) {
        for (a, b) in dst.iter_mut().zip(src) {
            *a += b;
        }
    }
}

/// Move the running average `avg` towards `params` after optimizer step
/// `step` (counted from 1). The decay ramps up as `(1 + step) / (10 + step)`
/// until it reaches `decay`.
pub fn ema_update<P: Parameters>(avg: &mut P, params: &P, decay: f64, step: u64) {
    let d = decay.min((1.0 + step as f64) / (10.0 + step as f64));
    let src: Vec<&[f64]> = params.tensors().into_iter().map(|t| t.2).collect();
    for (dst, src) in avg.tensors_mut().into_iter().zip(src) {
        for (a, b) in dst.iter_mut().zip(src) {
            *a = d * *a + (1.0 - d) * b;
        }
    }
}

pub fn scale<P: Parameters>(g: &mut P, factor: f64) {
    for t in g.tensors_mut() {
        t.iter_mut().for_each(|v| *v *= factor);
    }
}

pub fn global_norm<P: Parameters>(g: &P) -> f64 {
    g.tensors().iter().flat_map(|t| t.2.iter()).map(|v| v * v).sum::<f64>().sqrt()
}

pub fn all_finite<P: Parameters>(p: &P) -> bool {
    p.tensors().iter().all(|t| t.2.iter().all(|v| v.is_finite()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step<P: Parameters>(&mut self, params: &mut P, grads: &P) {
        let grads: Vec<&[f64]> = grads.tensors().into_iter().map(|t| t.2).collect();
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (k, p) in params.tensors_mut().into_iter().enumerate() {
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], grads[k]);
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}
