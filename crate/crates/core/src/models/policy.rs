//! Action distributions produced by the policy head.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::envs::{Action, ActionSpace};
use crate::rng::RngStream;
use crate::tensor::{log_sum_exp, log_tanh_jacobian, softmax};

pub const POLICY_LOG_STD_MIN: f64 = -5.0;
pub const POLICY_LOG_STD_MAX: f64 = 2.0;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Clone, Debug, PartialEq)]
pub enum PolicyDist {
    Categorical { logits: Vec<f64> },
    /// Diagonal Gaussian over the pre-squash value, squashed by tanh.
    SquashedGaussian { mean: Vec<f64>, log_std: Vec<f64> },
}

impl PolicyDist {
    /// Builds the distribution from one row of policy-head output.
    pub fn from_head(space: ActionSpace, row: &[f64]) -> Self {
        match space {
            ActionSpace::Discrete(n) => {
                assert_eq!(row.len(), n);
                PolicyDist::Categorical { logits: row.to_vec() }
            }
            ActionSpace::Continuous(d) => {
                assert_eq!(row.len(), 2 * d);
                PolicyDist::SquashedGaussian {
                    mean: row[..d].to_vec(),
                    log_std: row[d..].iter().map(|s| s.clamp(POLICY_LOG_STD_MIN, POLICY_LOG_STD_MAX)).collect(),
                }
            }
        }
    }

    pub fn probs(&self) -> Option<Vec<f64>> {
        match self {
            PolicyDist::Categorical { logits } => Some(softmax(logits)),
            PolicyDist::SquashedGaussian { .. } => None,
        }
    }

    pub fn sample(&self, rng: &mut RngStream) -> Action {
        match self {
            PolicyDist::Categorical { logits } => {
                let p = softmax(logits);
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                for (i, pi) in p.iter().enumerate() {
                    acc += pi;
                    if u < acc {
                        return Action::Discrete(i);
                    }
                }
                Action::Discrete(p.len() - 1)
            }
            PolicyDist::SquashedGaussian { mean, log_std } => Action::Continuous(
                mean.iter()
                    .zip(log_std)
                    .map(|(m, s)| {
                        let e: f64 = StandardNormal.sample(rng);
                        m + s.exp() * e
                    })
                    .collect(),
            ),
        }
    }

    /// Log-density of the action; continuous densities are over the
    /// squashed value and include the tanh Jacobian.
    pub fn log_prob(&self, action: &Action) -> f64 {
        match (self, action) {
            (PolicyDist::Categorical { logits }, Action::Discrete(a)) => logits[*a] - log_sum_exp(logits),
            (PolicyDist::SquashedGaussian { mean, log_std }, Action::Continuous(u)) => mean
                .iter()
                .zip(log_std)
                .zip(u)
                .map(|((m, s), x)| {
                    let z = (x - m) * (-s).exp();
                    -0.5 * z * z - s - HALF_LN_2PI - log_tanh_jacobian(*x)
                })
                .sum(),
            _ => panic!("action {action:?} does not match the policy"),
        }
    }

    /// Categorical entropy, or the entropy of the pre-squash Gaussian.
    pub fn entropy(&self) -> f64 {
        match self {
            PolicyDist::Categorical { logits } => {
                let lse = log_sum_exp(logits);
                -logits.iter().map(|l| (l - lse).exp() * (l - lse)).sum::<f64>()
            }
            PolicyDist::SquashedGaussian { log_std, .. } => log_std.iter().map(|s| s + 0.5 + HALF_LN_2PI).sum(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn categorical_normalizes_and_uniform_entropy() {
        let d = PolicyDist::from_head(ActionSpace::Discrete(5), &[0.3, -1.0, 2.0, 0.0, 0.7]);
        assert!((d.probs().unwrap().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let u = PolicyDist::from_head(ActionSpace::Discrete(5), &[0.0; 5]);
        assert!((u.entropy() - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn squashed_samples_inside_open_interval() {
        let d = PolicyDist::from_head(ActionSpace::Continuous(2), &[3.0, -2.0, 1.0, 2.0]);
        let mut rng = RngStream::new(0);
        for _ in 0..1000 {
            let Action::Continuous(u) = d.sample(&mut rng) else { unreachable!() };
            for x in u {
                let y = x.tanh();
                assert!(y > -1.0 && y < 1.0 || x.abs() > 19.0);
            }
        }
    }

    #[test]
    fn squashed_density_integrates_to_one() {
        let d = PolicyDist::from_head(ActionSpace::Continuous(1), &[0.4, -0.3]);
        // integrate the density of y = tanh(u) over (-1, 1) with the midpoint rule
        let n = 200_000;
        let h = 2.0 / n as f64;
        let total: f64 = (0..n)
            .map(|i| {
                let y = -1.0 + (i as f64 + 0.5) * h;
                (d.log_prob(&Action::Continuous(vec![y.atanh()]))).exp() * h
            })
            .sum();
        assert!((total - 1.0).abs() < 1e-2, "{total}");
    }

    #[test]
    fn log_std_is_clamped() {
        let d = PolicyDist::from_head(ActionSpace::Continuous(1), &[0.0, 9.0]);
        assert_eq!(d, PolicyDist::SquashedGaussian { mean: vec![0.0], log_std: vec![POLICY_LOG_STD_MAX] });
    }
}
