//! Diagonal-Gaussian beliefs over the latent task variable: densities,
//! KL divergence, nested importance weights and the windowed evidence
//! lower bound.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{log_sum_exp, softmax};

pub const LOG_STD_MIN: f64 = -7.0;
pub const LOG_STD_MAX: f64 = 2.0;

pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Variational belief `N(mean, diag(exp(log_std)²))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeliefParams {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
}

impl BeliefParams {
    /// Builds a belief, clamping `log_std` into the supported range.
    pub fn new(mean: Vec<f64>, log_std: Vec<f64>) -> Self {
        assert_eq!(mean.len(), log_std.len(), "belief mean/log_std dimension mismatch");
        let log_std = log_std.into_iter().map(|s| s.clamp(LOG_STD_MIN, LOG_STD_MAX)).collect();
        BeliefParams { mean, log_std }
    }

    pub fn standard(dim: usize) -> Self {
        BeliefParams { mean: vec![0.0; dim], log_std: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_density(&self, m: &[f64]) -> f64 {
        self.mean
            .iter()
            .zip(&self.log_std)
            .zip(m)
            .map(|((mu, s), x)| {
                let z = (x - mu) * (-s).exp();
                -0.5 * z * z - s - HALF_LN_2PI
            })
            .sum()
    }

    pub fn entropy(&self) -> f64 {
        self.log_std.iter().map(|s| s + 0.5 + HALF_LN_2PI).sum()
    }

    /// Reparameterized draw `mean + exp(log_std) ⊙ eps`.
    pub fn transform(&self, eps: &[f64]) -> Vec<f64> {
        self.mean.iter().zip(&self.log_std).zip(eps).map(|((m, s), e)| m + s.exp() * e).collect()
    }

    pub fn sample(&self, count: usize, rng: &mut RngStream) -> Vec<Vec<f64>> {
        (0..count)
            .map(|_| {
                let eps: Vec<f64> = (0..self.dim()).map(|_| StandardNormal.sample(rng)).collect();
                self.transform(&eps)
            })
            .collect()
    }
}

/// Closed-form `KL(q ∥ p)` between diagonal Gaussians.
pub fn gaussian_kl(q: &BeliefParams, p: &BeliefParams) -> f64 {
    assert_eq!(q.dim(), p.dim(), "KL between beliefs of different dimension");
    q.mean
        .iter()
        .zip(&q.log_std)
        .zip(p.mean.iter().zip(&p.log_std))
        .map(|((mq, sq), (mp, sp))| {
            let vr = (2.0 * (sq - sp)).exp();
            let d = (mq - mp) * (-sp).exp();
            sp - sq + 0.5 * (vr + d * d - 1.0)
        })
        .sum()
}

/// Raw and normalized nested importance weights.
#[derive(Clone, Debug, PartialEq)]
pub struct NestedWeights {
    pub log_raw: Vec<f64>,
    pub normalized: Vec<f64>,
}

impl NestedWeights {
    pub fn from_log_raw(log_raw: Vec<f64>) -> Self {
        let normalized = softmax(&log_raw);
        NestedWeights { log_raw, normalized }
    }

    pub fn uniform(count: usize) -> Self {
        Self::from_log_raw(vec![0.0; count])
    }

    /// `ln Σ_j ω̄_j exp(v_j)`.
    pub fn log_mean_exp(&self, values: &[f64]) -> f64 {
        let terms: Vec<f64> = self.normalized.iter().zip(values).map(|(w, v)| w.ln() + v).collect();
        log_sum_exp(&terms)
    }

    pub fn mean(&self, values: &[f64]) -> f64 {
        self.normalized.iter().zip(values).map(|(w, v)| w * v).sum()
    }
}

/// `ln ω̂_j = ln b_prev(M_j) − ln b_cur(M_j) + decode_j`, with `M_j ~ b_cur`.
///
/// `decode` may contain `-inf` (a sample that cannot explain the step); the
/// belief densities must be finite.
pub fn nested_log_weights(
    prev: &BeliefParams,
    cur: &BeliefParams,
    samples: &[Vec<f64>],
    decode: &[f64],
) -> Result<NestedWeights> {
    assert_eq!(samples.len(), decode.len());
    let mut log_raw = Vec::with_capacity(samples.len());
    for (j, (m, d)) in samples.iter().zip(decode).enumerate() {
        let lp = prev.log_density(m);
        let lc = cur.log_density(m);
        if !lp.is_finite() || !lc.is_finite() || d.is_nan() || *d == f64::INFINITY {
            return Err(Error::NestedWeight { index: j });
        }
        log_raw.push(lp - lc + d);
    }
    Ok(NestedWeights::from_log_raw(log_raw))
}

/// Weights of the evidence lower bound terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElboWeights {
    /// Multiplier on the KL term (1 for the plain bound).
    pub kl: f64,
    /// Multiplier on the belief entropy bonus.
    pub entropy: f64,
}

impl ElboWeights {
    pub const PLAIN: ElboWeights = ElboWeights { kl: 1.0, entropy: 0.0 };
}

/// Windowed evidence lower bound
/// `−w_kl·KL(q ∥ prior) + mean_k Σ_window decode(M_k) + w_ent·H(q)`
/// with `M_k = transform(eps_k)`. `decode(m)` returns the summed window
/// log-likelihood under latent `m` (0 for an empty window).
pub fn elbo(
    q: &BeliefParams,
    prior: &BeliefParams,
    eps: &[Vec<f64>],
    decode: impl Fn(&[f64]) -> f64,
    weights: ElboWeights,
) -> f64 {
    let kl = gaussian_kl(q, prior);
    let recon = if eps.is_empty() {
        0.0
    } else {
        eps.iter().map(|e| decode(&q.transform(e))).sum::<f64>() / eps.len() as f64
    };
    -weights.kl * kl + recon + weights.entropy * q.entropy()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn kl_examples() {
        let s = BeliefParams::standard(3);
        assert_eq!(gaussian_kl(&s, &s), 0.0);
        let shifted = BeliefParams::new(vec![1.0; 3], vec![0.0; 3]);
        assert!((gaussian_kl(&shifted, &s) - 1.5).abs() < 1e-15);
    }

    #[test]
    fn kl_matches_monte_carlo() {
        let q = BeliefParams::new(vec![0.3, -1.0], vec![-0.5, 0.2]);
        let p = BeliefParams::new(vec![0.0, 0.5], vec![0.1, -0.3]);
        let mut rng = RngStream::new(5);
        let n = 100_000;
        let d: Vec<f64> = q.sample(n, &mut rng).iter().map(|m| q.log_density(m) - p.log_density(m)).collect();
        let mean = d.iter().sum::<f64>() / n as f64;
        let sd = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        assert!((mean - gaussian_kl(&q, &p)).abs() < 3.0 * sd / (n as f64).sqrt());
    }

    #[test]
    fn floor_variance_samples_hug_mean() {
        let b = BeliefParams::new(vec![2.0, -1.0], vec![-9.0, -7.0]);
        assert_eq!(b.log_std, vec![-7.0, -7.0]);
        for m in b.sample(100, &mut RngStream::new(9)) {
            for (x, mu) in m.iter().zip(&b.mean) {
                assert!((x - mu).abs() < 1e-2);
            }
        }
    }

    #[test]
    fn sample_mean_within_three_standard_errors() {
        let b = BeliefParams::new(vec![0.7, -0.2], vec![0.3, -1.0]);
        let n = 100_000;
        let s = b.sample(n, &mut RngStream::new(4));
        for d in 0..2 {
            let mean = s.iter().map(|m| m[d]).sum::<f64>() / n as f64;
            let se = b.log_std[d].exp() / (n as f64).sqrt();
            assert!((mean - b.mean[d]).abs() < 3.0 * se);
        }
    }

    #[test]
    fn equal_beliefs_constant_decode_give_uniform_weights() {
        let b = BeliefParams::new(vec![0.1, 0.2], vec![-0.3, 0.4]);
        let samples = b.sample(6, &mut RngStream::new(1));
        let w = nested_log_weights(&b, &b, &samples, &[-1.3; 6]).unwrap();
        for v in &w.normalized {
            assert!((v - 1.0 / 6.0).abs() < 1e-15);
        }
    }

    #[test]
    fn impossible_sample_gets_zero_weight() {
        let b = BeliefParams::standard(1);
        let samples = vec![vec![0.1], vec![-0.4], vec![1.0]];
        let w = nested_log_weights(&b, &b, &samples, &[0.0, f64::NEG_INFINITY, -0.5]).unwrap();
        assert_eq!(w.normalized[1], 0.0);
        assert!((w.normalized.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nan_decode_is_an_error() {
        let b = BeliefParams::standard(1);
        let e = nested_log_weights(&b, &b, &[vec![0.0], vec![1.0]], &[0.0, f64::NAN]).unwrap_err();
        assert!(matches!(e, Error::NestedWeight { index: 1 }));
    }

    #[test]
    fn elbo_prior_equal_empty_window_is_entropy_bonus() {
        let b = BeliefParams::new(vec![0.3], vec![-0.2]);
        let w = ElboWeights { kl: 0.01, entropy: 1e-5 };
        let v = elbo(&b, &b, &[], |_| unreachable!(), w);
        assert!((v - 1e-5 * b.entropy()).abs() < 1e-15);
    }

    #[test]
    fn elbo_window_additivity() {
        let q = BeliefParams::new(vec![0.2], vec![-0.5]);
        let p = BeliefParams::standard(1);
        let eps: Vec<Vec<f64>> = (0..50).map(|i| vec![(i as f64 - 25.0) / 10.0]).collect();
        let step = |m: &[f64]| -0.5 * (1.0 - m[0]).powi(2);
        let one = elbo(&q, &p, &eps, step, ElboWeights::PLAIN);
        let two = elbo(&q, &p, &eps, |m| 2.0 * step(m), ElboWeights::PLAIN);
        let kl = gaussian_kl(&q, &p);
        assert!(((two + kl) - 2.0 * (one + kl)).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn kl_is_non_negative(
            mq in prop::collection::vec(-3.0..3.0f64, 4),
            sq in prop::collection::vec(-3.0..1.5f64, 4),
            mp in prop::collection::vec(-3.0..3.0f64, 4),
            sp in prop::collection::vec(-3.0..1.5f64, 4),
        ) {
            let kl = gaussian_kl(&BeliefParams::new(mq, sq), &BeliefParams::new(mp, sp));
            prop_assert!(kl >= -1e-12);
        }

        #[test]
        fn normalized_weights_shift_invariant(raw in prop::collection::vec(-50.0..50.0f64, 1..20), c in -100.0..100.0f64) {
            let a = NestedWeights::from_log_raw(raw.clone());
            let b = NestedWeights::from_log_raw(raw.iter().map(|x| x + c).collect());
            prop_assert!((a.normalized.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (x, y) in a.normalized.iter().zip(&b.normalized) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn kl_non_negative_ten_thousand_pairs() {
        let mut rng = RngStream::new(77);
        for _ in 0..10_000 {
            let mut draw = |lo: f64, hi: f64| (0..3).map(|_| rng.gen_range(lo..hi)).collect::<Vec<_>>();
            let q = BeliefParams::new(draw(-4.0, 4.0), draw(-7.0, 2.0));
            let p = BeliefParams::new(draw(-4.0, 4.0), draw(-7.0, 2.0));
            assert!(gaussian_kl(&q, &p) >= 0.0);
        }
    }
}
