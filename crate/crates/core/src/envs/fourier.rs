//! Random truncated Fourier series on the unit interval.

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::rng::RngStream;

pub const HARMONICS: usize = 3;
pub const AMPLITUDE_RANGE: (f64, f64) = (0.1, 1.1);

/// One function per input dimension:
/// `f(u) = a₀ + Σ_{i=1}^{2} a_i cos(2π i (u − c) − φ_i)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FourierTask {
    pub amplitudes: Vec<[f64; HARMONICS]>,
    pub phases: Vec<[f64; HARMONICS - 1]>,
    pub shifts: Vec<f64>,
}

impl FourierTask {
    pub fn sample(rng: &mut RngStream, dim: usize) -> Self {
        let mut amplitudes = Vec::with_capacity(dim);
        let mut phases = Vec::with_capacity(dim);
        let mut shifts = Vec::with_capacity(dim);
        for _ in 0..dim {
            let mut a = [0.0; HARMONICS];
            for v in a.iter_mut() {
                *v = rng.gen_range(AMPLITUDE_RANGE.0..=AMPLITUDE_RANGE.1);
            }
            let mut p = [0.0; HARMONICS - 1];
            for v in p.iter_mut() {
                *v = rng.gen_range(0.0..=PI);
            }
            amplitudes.push(a);
            phases.push(p);
            shifts.push(rng.gen_range(0.0..=PI));
        }
        FourierTask { amplitudes, phases, shifts }
    }

    pub fn dim(&self) -> usize {
        self.amplitudes.len()
    }

    /// Value of dimension `d` at the unit-interval coordinate `u`.
    pub fn component(&self, d: usize, u: f64) -> f64 {
        let a = &self.amplitudes[d];
        let mut f = a[0];
        for i in 1..HARMONICS {
            f += a[i] * (2.0 * PI * i as f64 * (u - self.shifts[d]) - self.phases[d][i - 1]).cos();
        }
        f
    }

    /// Maps an action in `[-1, 1]^D` onto one period.
    pub fn to_unit(x: f64) -> f64 {
        (x.clamp(-1.0, 1.0) + 1.0) / 2.0
    }

    /// Per-dimension outputs and the reward (their mean).
    pub fn step(&self, x: &[f64]) -> (Vec<f64>, f64) {
        let obs: Vec<f64> = (0..self.dim()).map(|d| self.component(d, Self::to_unit(x[d]))).collect();
        let reward = obs.iter().sum::<f64>() / obs.len() as f64;
        (obs, reward)
    }

    /// Numeric maximum of the reward over the action box; exact on the grid
    /// and refined by golden-section search around the best grid point.
    pub fn max_reward(&self) -> f64 {
        (0..self.dim())
            .map(|d| {
                let f = |u: f64| self.component(d, u);
                let n = 2000;
                let best = (0..=n).map(|k| k as f64 / n as f64).fold((0.0, f64::NEG_INFINITY), |acc, u| {
                    let v = f(u);
                    if v > acc.1 {
                        (u, v)
                    } else {
                        acc
                    }
                });
                let (mut lo, mut hi) = ((best.0 - 1.0 / n as f64).max(0.0), (best.0 + 1.0 / n as f64).min(1.0));
                let r = (5f64.sqrt() - 1.0) / 2.0;
                for _ in 0..60 {
                    let (m1, m2) = (hi - r * (hi - lo), lo + r * (hi - lo));
                    if f(m1) < f(m2) {
                        lo = m1;
                    } else {
                        hi = m2;
                    }
                }
                best.1.max(f((lo + hi) / 2.0))
            })
            .sum::<f64>()
            / self.dim() as f64
    }
}
