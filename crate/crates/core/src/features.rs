//! Bounded feature maps `psi(s, a, x)` with analytic x-gradients.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{MeanflowError, Result};

pub trait FeatureMap: Send + Sync + std::fmt::Debug {
    fn key(&self) -> &'static str;
    fn dim(&self) -> usize;
    fn n_states(&self) -> usize;
    fn n_actions(&self) -> usize;

    fn eval(&self, s: usize, a: usize, x: &[f64]) -> f64;

    /// Overwrites `out` with `grad_x psi(s, a, x)`.
    fn grad_x(&self, s: usize, a: usize, x: &[f64], out: &mut [f64]);

    /// `out += weight * grad_x psi(s, a, x)`.
    fn add_grad_x(&self, s: usize, a: usize, x: &[f64], weight: f64, out: &mut [f64]) {
        let mut g = vec![0.0; self.dim()];
        self.grad_x(s, a, x, &mut g);
        out.iter_mut().zip(&g).for_each(|(o, gi)| *o += weight * gi);
    }

    /// Declared `sup |psi|`.
    fn sup_norm(&self) -> f64;
    /// Declared `sup |grad_x psi|` (Euclidean).
    fn grad_sup_norm(&self) -> f64;
    /// Declared `sup ||D_x^2 psi||` (operator norm).
    fn hess_sup_norm(&self) -> f64;

    /// Highest derivative order with a declared bound.
    fn smoothness(&self) -> usize {
        2
    }

    /// `||psi||_{Psi^{k,inf}}`, summing the declared bounds up to order `k`.
    fn norm(&self, k: usize) -> f64 {
        let mut n = self.sup_norm();
        if k >= 1 {
            n += self.grad_sup_norm();
        }
        if k >= 2 {
            n += self.hess_sup_norm();
        }
        n
    }
}

/// `psi(s,a,x) = B * tanh(x[s * A + a])`; one coordinate per state-action pair.
#[derive(Debug, Clone)]
pub struct TabularIndicator {
    n_states: usize,
    n_actions: usize,
    bound: f64,
}

impl TabularIndicator {
    pub fn new(n_states: usize, n_actions: usize, bound: f64) -> Self {
        Self { n_states, n_actions, bound }
    }

    #[inline]
    fn idx(&self, s: usize, a: usize) -> usize {
        s * self.n_actions + a
    }
}

impl FeatureMap for TabularIndicator {
    fn key(&self) -> &'static str {
        "tabular-indicator"
    }

    fn dim(&self) -> usize {
        self.n_states * self.n_actions
    }

    fn n_states(&self) -> usize {
        self.n_states
    }

    fn n_actions(&self) -> usize {
        self.n_actions
    }

    fn eval(&self, s: usize, a: usize, x: &[f64]) -> f64 {
        self.bound * x[self.idx(s, a)].tanh()
    }

    fn grad_x(&self, s: usize, a: usize, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        let i = self.idx(s, a);
        let t = x[i].tanh();
        out[i] = self.bound * (1.0 - t * t);
    }

    fn add_grad_x(&self, s: usize, a: usize, x: &[f64], weight: f64, out: &mut [f64]) {
        let i = self.idx(s, a);
        let t = x[i].tanh();
        out[i] += weight * self.bound * (1.0 - t * t);
    }

    fn sup_norm(&self) -> f64 {
        self.bound
    }

    fn grad_sup_norm(&self) -> f64 {
        self.bound
    }

    fn hess_sup_norm(&self) -> f64 {
        // max |d^2/dx^2 tanh| = 4 / (3 sqrt 3)
        self.bound * 4.0 / (3.0 * 3f64.sqrt())
    }
}

/// `psi(s,a,x) = B * cos(w_{s,a} . x + phase_{s,a})` with Gaussian frequencies.
#[derive(Debug, Clone)]
pub struct RandomFourier {
    n_states: usize,
    n_actions: usize,
    dim: usize,
    bound: f64,
    /// `freq[(s * A + a) * d + j]`
    freq: Vec<f64>,
    phase: Vec<f64>,
    max_freq: f64,
}

impl RandomFourier {
    pub fn new(n_states: usize, n_actions: usize, dim: usize, bound: f64, freq_scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, freq_scale).expect("finite frequency scale");
        let unif = Uniform::new(0.0, 2.0 * PI).expect("valid range");
        let pairs = n_states * n_actions;
        let freq: Vec<f64> = (0..pairs * dim).map(|_| normal.sample(&mut rng)).collect();
        let phase: Vec<f64> = (0..pairs).map(|_| unif.sample(&mut rng)).collect();
        let max_freq = (0..pairs)
            .map(|p| freq[p * dim..(p + 1) * dim].iter().map(|w| w * w).sum::<f64>().sqrt())
            .fold(0.0, f64::max);
        Self { n_states, n_actions, dim, bound, freq, phase, max_freq }
    }

    #[inline]
    fn arg(&self, s: usize, a: usize, x: &[f64]) -> (usize, f64) {
        let p = s * self.n_actions + a;
        let w = &self.freq[p * self.dim..(p + 1) * self.dim];
        (p, w.iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>() + self.phase[p])
    }
}

impl FeatureMap for RandomFourier {
    fn key(&self) -> &'static str {
        "random-fourier"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn n_states(&self) -> usize {
        self.n_states
    }

    fn n_actions(&self) -> usize {
        self.n_actions
    }

    fn eval(&self, s: usize, a: usize, x: &[f64]) -> f64 {
        self.bound * self.arg(s, a, x).1.cos()
    }

    fn grad_x(&self, s: usize, a: usize, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        self.add_grad_x(s, a, x, 1.0, out);
    }

    fn add_grad_x(&self, s: usize, a: usize, x: &[f64], weight: f64, out: &mut [f64]) {
        let (p, arg) = self.arg(s, a, x);
        let c = -weight * self.bound * arg.sin();
        let w = &self.freq[p * self.dim..(p + 1) * self.dim];
        out.iter_mut().zip(w).for_each(|(o, wi)| *o += c * wi);
    }

    fn sup_norm(&self) -> f64 {
        self.bound
    }

    fn grad_sup_norm(&self) -> f64 {
        self.bound * self.max_freq
    }

    fn hess_sup_norm(&self) -> f64 {
        self.bound * self.max_freq * self.max_freq
    }
}

/// Registry entry for a feature map, selected by `key` in configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "key", rename_all = "kebab-case")]
pub enum FeatureSpec {
    TabularIndicator {
        #[serde(default = "default_bound")]
        bound: f64,
    },
    RandomFourier {
        #[serde(default = "default_bound")]
        bound: f64,
        #[serde(default = "default_freq_scale")]
        freq_scale: f64,
        #[serde(default)]
        seed: u64,
    },
}

fn default_bound() -> f64 {
    1.0
}

fn default_freq_scale() -> f64 {
    1.0
}

impl FeatureSpec {
    pub fn key(&self) -> &'static str {
        match self {
            FeatureSpec::TabularIndicator { .. } => "tabular-indicator",
            FeatureSpec::RandomFourier { .. } => "random-fourier",
        }
    }

    /// Parameter dimension this map needs; `None` when it is free.
    pub fn required_dim(&self, n_states: usize, n_actions: usize) -> Option<usize> {
        match self {
            FeatureSpec::TabularIndicator { .. } => Some(n_states * n_actions),
            FeatureSpec::RandomFourier { .. } => None,
        }
    }

    pub fn build(&self, n_states: usize, n_actions: usize, dim: usize) -> Result<Box<dyn FeatureMap>> {
        match *self {
            FeatureSpec::TabularIndicator { bound } => {
                if dim != n_states * n_actions {
                    return Err(MeanflowError::SizeMismatch(format!(
                        "tabular-indicator needs d = S*A = {}, got {dim}",
                        n_states * n_actions
                    )));
                }
                Ok(Box::new(TabularIndicator::new(n_states, n_actions, bound)))
            }
            FeatureSpec::RandomFourier { bound, freq_scale, seed } => {
                Ok(Box::new(RandomFourier::new(n_states, n_actions, dim, bound, freq_scale, seed)))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn check_grad(f: &dyn FeatureMap, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = f.dim();
        for _ in 0..50 {
            let s = rng.random_range(0..f.n_states());
            let a = rng.random_range(0..f.n_actions());
            let x: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            let mut g = vec![0.0; d];
            f.grad_x(s, a, &x, &mut g);
            assert!(f.eval(s, a, &x).abs() <= f.sup_norm() + 1e-12);
            assert!(g.iter().map(|v| v * v).sum::<f64>().sqrt() <= f.grad_sup_norm() + 1e-12);
            for j in 0..d {
                let h = 1e-6;
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[j] += h;
                xm[j] -= h;
                let fd = (f.eval(s, a, &xp) - f.eval(s, a, &xm)) / (2.0 * h);
                assert!((fd - g[j]).abs() <= 1e-5 * (1.0 + g[j].abs()), "j={j} fd={fd} an={}", g[j]);
            }
        }
    }

    #[test]
    fn tabular_gradients_and_bounds() {
        check_grad(&TabularIndicator::new(3, 2, 1.5), 1);
    }

    #[test]
    fn fourier_gradients_and_bounds() {
        check_grad(&RandomFourier::new(4, 3, 2, 2.0, 1.3, 9), 2);
    }

    #[test]
    fn spec_rejects_wrong_tabular_dim() {
        let spec = FeatureSpec::TabularIndicator { bound: 1.0 };
        assert!(spec.build(3, 2, 5).is_err());
        assert_eq!(spec.required_dim(3, 2), Some(6));
        let parsed: FeatureSpec = serde_json::from_str(r#"{"key":"random-fourier","bound":2.0}"#).unwrap();
        assert_eq!(parsed.key(), "random-fourier");
    }
}
