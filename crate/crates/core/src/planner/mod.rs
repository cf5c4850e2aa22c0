//! Bayes-adaptive sequential Monte-Carlo planning.
//!
//! Each of `K` particles carries a hyperstate (state and belief) plus
//! `K_Ω` nested latent samples drawn from its belief. Actions are proposed
//! from the prior policy, outcomes from the model, and particle weights
//! accumulate `R̄/T` plus the change in the belief-weighted soft value.
//! Particles are resampled multinomially every `r` depths.

pub mod learned;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::belief::NestedWeights;
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{effective_sample_size, log_sum_exp, softmax};

/// Batched generative model the planner searches over. Every method works
/// on a batch of particles; outer `Vec`s are indexed by particle and inner
/// ones by nested latent. Random draws for particle `p` use `rngs[p]`.
pub trait PlanningModel {
    type State: Clone;
    type Action: Clone + PartialEq;
    type Belief: Clone;
    type Latent: Clone;

    fn sample_latents(&self, beliefs: &[Self::Belief], count: usize, rngs: &mut [RngStream]) -> Result<Vec<Vec<Self::Latent>>>;

    /// `ln b_p(M)` for every latent in `latents[p]`.
    fn latent_log_densities(&self, beliefs: &[Self::Belief], latents: &[Vec<Self::Latent>]) -> Result<Vec<Vec<f64>>>;

    /// One prior-policy action per particle, conditioned on one latent each.
    fn sample_actions(&self, states: &[Self::State], latents: &[Self::Latent], rngs: &mut [RngStream]) -> Result<Vec<Self::Action>>;

    /// Mean reward of `(state, action)` under every latent in `latents[p]`.
    fn reward_means(&self, states: &[Self::State], actions: &[Self::Action], latents: &[Vec<Self::Latent>]) -> Result<Vec<Vec<f64>>>;

    /// Reward and next state drawn under one latent per particle.
    fn sample_outcomes(
        &self,
        states: &[Self::State],
        actions: &[Self::Action],
        latents: &[Self::Latent],
        rngs: &mut [RngStream],
    ) -> Result<Vec<(f64, Self::State)>>;

    /// Log-likelihood of the transition (including the policy term) under
    /// every latent in `latents[p]`.
    fn transition_log_likelihoods(
        &self,
        states: &[Self::State],
        actions: &[Self::Action],
        rewards: &[f64],
        next_states: &[Self::State],
        latents: &[Vec<Self::Latent>],
    ) -> Result<Vec<Vec<f64>>>;

    /// Belief after observing the transition.
    fn update_beliefs(
        &self,
        beliefs: &[Self::Belief],
        states: &[Self::State],
        actions: &[Self::Action],
        rewards: &[f64],
        next_states: &[Self::State],
    ) -> Result<Vec<Self::Belief>>;

    /// Soft value of `states[p]` under every latent in `latents[p]`.
    fn values(&self, states: &[Self::State], latents: &[Vec<Self::Latent>]) -> Result<Vec<Vec<f64>>>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerConfig {
    pub particles: usize,
    pub nested: usize,
    pub depth: usize,
    pub resample_period: usize,
    pub temperature: f64,
    pub discount: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig { particles: 32, nested: 8, depth: 4, resample_period: 2, temperature: 0.1, discount: 0.99 }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.particles == 0 {
            return Err("planner.particles must be >= 1".into());
        }
        if self.nested == 0 {
            return Err("planner.nested must be >= 1".into());
        }
        if self.resample_period == 0 {
            return Err("planner.resample_period must be >= 1".into());
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err("planner.temperature must be > 0".into());
        }
        if !(0.0..=1.0).contains(&self.discount) {
            return Err("planner.discount must lie in [0, 1]".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlanResult<A> {
    /// `q̂*`: distinct root actions with their total weight.
    pub policy: Vec<(A, f64)>,
    /// Per-particle root actions with final normalized weights.
    pub samples: Vec<(A, f64)>,
    pub value: f64,
    /// Effective sample size after each depth's weight update.
    pub ess: Vec<f64>,
}

/// `Δ ln w̃ = R/T + ln Σ ω̄' exp(V'/T) − ln Σ ω̄ exp(V/T)`.
pub fn weight_increment(
    reward: f64,
    temperature: f64,
    now: &NestedWeights,
    values_now: &[f64],
    next: &NestedWeights,
    values_next: &[f64],
) -> f64 {
    let scale = |v: &[f64]| v.iter().map(|x| x / temperature).collect::<Vec<_>>();
    reward / temperature + next.log_mean_exp(&scale(values_next)) - now.log_mean_exp(&scale(values_now))
}

/// Multinomial draw of `count` indices from normalized `weights`.
pub fn resample(weights: &[f64], count: usize, rng: &mut RngStream) -> Vec<usize> {
    let mut cdf = Vec::with_capacity(weights.len());
    let mut acc = 0.0;
    for w in weights {
        acc += w;
        cdf.push(acc);
    }
    (0..count)
        .map(|_| {
            let u = rng.gen::<f64>() * acc;
            cdf.partition_point(|c| *c <= u).min(weights.len() - 1)
        })
        .collect()
}

/// Draws one index from normalized `weights`.
pub fn sample_index(weights: &[f64], rng: &mut RngStream) -> usize {
    resample(weights, 1, rng)[0]
}

/// Merges equal root actions: `q̂*(a) = Σ_{i: a_i = a} w̄_i`.
pub fn extract_root_policy<A: Clone + PartialEq>(actions: &[A], weights: &[f64]) -> Vec<(A, f64)> {
    let mut out: Vec<(A, f64)> = Vec::new();
    for (a, w) in actions.iter().zip(weights) {
        match out.iter_mut().find(|(b, _)| b == a) {
            Some(entry) => entry.1 += w,
            None => out.push((a.clone(), *w)),
        }
    }
    out
}

fn nested_from_parts(prev: &[f64], cur: &[f64], decode: &[f64]) -> Result<NestedWeights> {
    let mut raw = Vec::with_capacity(prev.len());
    for (j, ((p, c), d)) in prev.iter().zip(cur).zip(decode).enumerate() {
        if !p.is_finite() || !c.is_finite() || d.is_nan() || *d == f64::INFINITY {
            return Err(Error::NestedWeight { index: j });
        }
        raw.push(p - c + d);
    }
    Ok(NestedWeights::from_log_raw(raw))
}

/// Single-root planning call.
pub fn plan<M: PlanningModel>(
    model: &M,
    state: M::State,
    belief: M::Belief,
    cfg: &PlannerConfig,
    rng: &RngStream,
) -> Result<PlanResult<M::Action>> {
    Ok(plan_batch(model, &[(state, belief)], cfg, std::slice::from_ref(rng))?.remove(0))
}

/// Plans from several roots at once, batching model calls across all
/// particles. Root `r` draws randomness only from `rngs[r]`, so results do
/// not depend on how roots are batched.
pub fn plan_batch<M: PlanningModel>(
    model: &M,
    roots: &[(M::State, M::Belief)],
    cfg: &PlannerConfig,
    rngs: &[RngStream],
) -> Result<Vec<PlanResult<M::Action>>> {
    cfg.validate().map_err(Error::Config)?;
    assert_eq!(roots.len(), rngs.len());
    let (nr, k, kw, temp) = (roots.len(), cfg.particles, cfg.nested, cfg.temperature);
    let np = nr * k;
    let mut root_rngs: Vec<RngStream> = rngs.iter().map(|r| r.split(u64::MAX)).collect();
    let mut prngs: Vec<RngStream> = (0..np).map(|p| rngs[p / k].split((p % k) as u64)).collect();
    let inv_t = |v: &[f64]| v.iter().map(|x| x / temp).collect::<Vec<_>>();

    // Shared root nested set.
    let root_states: Vec<M::State> = roots.iter().map(|r| r.0.clone()).collect();
    let root_beliefs: Vec<M::Belief> = roots.iter().map(|r| r.1.clone()).collect();
    let root_latents = model.sample_latents(&root_beliefs, kw, &mut root_rngs)?;
    let root_values = model.values(&root_states, &root_latents)?;
    let uniform = NestedWeights::uniform(kw);
    let root_soft: Vec<f64> = root_values.iter().map(|v| uniform.log_mean_exp(&inv_t(v))).collect();

    let mut states: Vec<M::State> = (0..np).map(|p| root_states[p / k].clone()).collect();
    let mut beliefs: Vec<M::Belief> = (0..np).map(|p| root_beliefs[p / k].clone()).collect();
    let mut latents: Vec<Vec<M::Latent>> = (0..np).map(|p| root_latents[p / k].clone()).collect();
    let mut nested: Vec<NestedWeights> = vec![uniform.clone(); np];
    let mut soft: Vec<f64> = (0..np).map(|p| root_soft[p / k]).collect();
    let mut log_w = vec![0.0; np];
    let mut disc_reward = vec![0.0; np];
    let mut ess: Vec<Vec<f64>> = vec![Vec::new(); nr];

    let choose = |latents: &[Vec<M::Latent>], nested: &[NestedWeights], prngs: &mut [RngStream]| -> Vec<M::Latent> {
        (0..latents.len())
            .map(|p| latents[p][sample_index(&nested[p].normalized, &mut prngs[p])].clone())
            .collect()
    };

    let picked = choose(&latents, &nested, &mut prngs);
    let mut actions = model.sample_actions(&states, &picked, &mut prngs)?;
    let mut root_actions = actions.clone();

    for t in 0..cfg.depth {
        if t > 0 {
            let picked = choose(&latents, &nested, &mut prngs);
            actions = model.sample_actions(&states, &picked, &mut prngs)?;
        }
        let means = model.reward_means(&states, &actions, &latents)?;
        let r_bar: Vec<f64> = (0..np).map(|p| nested[p].mean(&means[p])).collect();
        let outcome_latents = choose(&latents, &nested, &mut prngs);
        let outcomes = model.sample_outcomes(&states, &actions, &outcome_latents, &mut prngs)?;
        let (rewards, next_states): (Vec<f64>, Vec<M::State>) = outcomes.into_iter().unzip();
        let next_beliefs = model.update_beliefs(&beliefs, &states, &actions, &rewards, &next_states)?;
        let next_latents = model.sample_latents(&next_beliefs, kw, &mut prngs)?;
        let lp_prev = model.latent_log_densities(&beliefs, &next_latents)?;
        let lp_next = model.latent_log_densities(&next_beliefs, &next_latents)?;
        let decode = model.transition_log_likelihoods(&states, &actions, &rewards, &next_states, &next_latents)?;
        let next_values = model.values(&next_states, &next_latents)?;
        let discount = cfg.discount.powi(t as i32);
        for p in 0..np {
            let w = nested_from_parts(&lp_prev[p], &lp_next[p], &decode[p])?;
            let s = if w.log_raw.iter().all(|x| *x == f64::NEG_INFINITY) {
                f64::NEG_INFINITY
            } else {
                w.log_mean_exp(&inv_t(&next_values[p]))
            };
            let delta = r_bar[p] / temp + s - soft[p];
            if delta.is_nan() {
                return Err(Error::NanWeight { particle: p });
            }
            log_w[p] += delta;
            disc_reward[p] += discount * r_bar[p];
            nested[p] = w;
            soft[p] = s;
        }
        states = next_states;
        beliefs = next_beliefs;
        latents = next_latents;

        let resample_now = (t + 1) % cfg.resample_period == 0 && t + 1 < cfg.depth;
        for r in 0..nr {
            let range = r * k..(r + 1) * k;
            if log_w[range.clone()].iter().all(|w| *w == f64::NEG_INFINITY) {
                return Err(Error::Degeneracy { depth: t + 1 });
            }
            let w = softmax(&log_w[range.clone()]);
            ess[r].push(effective_sample_size(&w));
            if resample_now {
                let idx = resample(&w, k, &mut root_rngs[r]);
                let base = r * k;
                let take = |src: usize| base + idx[src];
                let new_states: Vec<M::State> = (0..k).map(|i| states[take(i)].clone()).collect();
                let new_beliefs: Vec<M::Belief> = (0..k).map(|i| beliefs[take(i)].clone()).collect();
                let new_latents: Vec<Vec<M::Latent>> = (0..k).map(|i| latents[take(i)].clone()).collect();
                let new_nested: Vec<NestedWeights> = (0..k).map(|i| nested[take(i)].clone()).collect();
                let new_soft: Vec<f64> = (0..k).map(|i| soft[take(i)]).collect();
                let new_disc: Vec<f64> = (0..k).map(|i| disc_reward[take(i)]).collect();
                let new_roots: Vec<M::Action> = (0..k).map(|i| root_actions[take(i)].clone()).collect();
                for i in 0..k {
                    states[base + i] = new_states[i].clone();
                    beliefs[base + i] = new_beliefs[i].clone();
                    latents[base + i] = new_latents[i].clone();
                    nested[base + i] = new_nested[i].clone();
                    soft[base + i] = new_soft[i];
                    disc_reward[base + i] = new_disc[i];
                    root_actions[base + i] = new_roots[i].clone();
                    log_w[base + i] = 0.0;
                }
            }
        }
    }

    let boot = cfg.discount.powi(cfg.depth as i32);
    let mut results = Vec::with_capacity(nr);
    for r in 0..nr {
        let range = r * k..(r + 1) * k;
        let w = softmax(&log_w[range.clone()]);
        let terms: Vec<f64> = range
            .clone()
            .zip(&w)
            .map(|(p, wi)| wi.ln() + (disc_reward[p] + boot * temp * soft[p]) / temp)
            .collect();
        let value = temp * log_sum_exp(&terms);
        let acts = &root_actions[range];
        results.push(PlanResult {
            policy: extract_root_policy(acts, &w),
            samples: acts.iter().cloned().zip(w.iter().copied()).collect(),
            value,
            ess: std::mem::take(&mut ess[r]),
        });
    }
    Ok(results)
}
