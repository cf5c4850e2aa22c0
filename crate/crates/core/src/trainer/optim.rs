//! Adam with decoupled weight decay, behind elementwise then global-norm
//! gradient clipping.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub clip_value: f64,
    pub clip_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { learning_rate: 3e-3, weight_decay: 1e-6, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, clip_value: 1.0, clip_norm: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

/// Clips every coordinate to `[-value, value]`, then rescales so the global
/// norm is at most `norm`. Returns the norm after the elementwise clip.
pub fn clip_gradients(grads: &mut Gradients, value: f64, norm: f64) -> f64 {
    for (_, g) in grads.iter_mut() {
        for v in g.data_mut() {
            *v = v.clamp(-value, value);
        }
    }
    let n = grads.global_norm();
    if n > norm {
        grads.scale(norm / n);
    }
    n
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW { cfg, step: 0, moments: BTreeMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Clips `grads` and updates every parameter in `store`. Parameters
    /// without a gradient see a zero gradient. Returns the pre-rescale norm.
    pub fn step(&mut self, store: &mut ParamStore, mut grads: Gradients) -> f64 {
        let norm = clip_gradients(&mut grads, self.cfg.clip_value, self.cfg.clip_norm);
        self.step += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let names: Vec<String> = store.names().map(str::to_string).collect();
        for name in names {
            let p = store.get_mut(&name).expect("listed parameter");
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())));
            let g = grads.get(&name);
            for i in 0..p.numel() {
                let gi = g.map_or(0.0, |g| g.data()[i]);
                let mi = c.beta1 * m.data()[i] + (1.0 - c.beta1) * gi;
                let vi = c.beta2 * v.data()[i] + (1.0 - c.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let theta = p.data()[i];
                let update = (mi / bc1) / ((vi / bc2).sqrt() + c.epsilon) + c.weight_decay * theta;
                p.data_mut()[i] = theta - c.learning_rate * update;
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::vector(vec![1.0, -2.0, 0.5]));
        s
    }

    fn grads(v: Vec<f64>) -> Gradients {
        let mut g = Gradients::default();
        g.accumulate("w", Tensor::vector(v));
        g
    }

    #[test]
    fn zero_gradient_is_pure_weight_decay() {
        let mut s = store();
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(&mut s, grads(vec![0.0; 3]));
        let shrink = 1.0 - 3e-3 * 1e-6;
        assert_eq!(s.get("w").unwrap().data(), &[1.0 * shrink, -2.0 * shrink, 0.5 * shrink]);
        // parameters absent from the gradient behave the same way
        let mut s2 = store();
        AdamW::new(AdamWConfig::default()).step(&mut s2, Gradients::default());
        assert_eq!(s2.get("w").unwrap(), s.get("w").unwrap());
    }

    #[test]
    fn large_coordinate_is_clipped_before_norm_rescale() {
        let mut g = grads(vec![100.0, 0.0, 0.0]);
        let pre = clip_gradients(&mut g, 1.0, 1.0);
        assert_eq!(pre, 1.0);
        assert_eq!(g.get("w").unwrap().data(), &[1.0, 0.0, 0.0]);
        let mut g = grads(vec![100.0, 100.0, 0.0]);
        clip_gradients(&mut g, 1.0, 1.0);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((g.get("w").unwrap().data()[0] - h).abs() < 1e-15);
        assert!((g.global_norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // bias-corrected first Adam step is lr·sign(g) up to epsilon
        let mut s = store();
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() });
        opt.step(&mut s, grads(vec![0.3, -0.2, 0.0]));
        let w = s.get("w").unwrap().data();
        assert!((w[0] - (1.0 - 3e-3)).abs() < 1e-9);
        assert!((w[1] - (-2.0 + 3e-3)).abs() < 1e-9);
        assert_eq!(w[2], 0.5);
    }

    #[test]
    fn identical_state_gives_identical_updates() {
        let run = || {
            let mut s = store();
            let mut opt = AdamW::new(AdamWConfig::default());
            for k in 0..5 {
                opt.step(&mut s, grads(vec![0.1 * k as f64, -0.7, 3.0]));
            }
            s
        };
        assert_eq!(run(), run());
    }
}
