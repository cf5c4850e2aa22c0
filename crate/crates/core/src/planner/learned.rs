//! Planning over the learned model: latents are draws from the variational
//! belief, outcomes come from the decoders and beliefs advance through the
//! inference network.
//!
//! Imagined rewards are the decoder mean under the chosen latent. Imagined
//! gridworld observations place the agent on one tile drawn with
//! probability proportional to the per-tile Bernoulli means; at the end of
//! an inner episode the agent returns to the lifetime's start tile. Steps
//! past the end of the lifetime earn nothing and carry no evidence.

use rand::Rng;

use super::PlanningModel;
use crate::belief::BeliefParams;
use crate::envs::grid::tile_image;
use crate::envs::Action;
use crate::error::Result;
use crate::models::{DecodeRow, Hidden, Model};
use crate::rng::RngStream;
use crate::tensor::sigmoid;

/// Agent-visible environment state.
#[derive(Clone, Debug, PartialEq)]
pub struct LearnedState {
    /// Observation the agent acts on.
    pub obs: Vec<f64>,
    /// Observation right after the previous action, before any inner reset.
    pub arrived: Vec<f64>,
    /// Steps taken in the lifetime.
    pub t: usize,
    /// First observation of the lifetime.
    pub start: Vec<f64>,
}

impl LearnedState {
    pub fn new(obs: Vec<f64>, t: usize, start: Vec<f64>) -> Self {
        LearnedState { arrived: obs.clone(), obs, t, start }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LearnedBelief {
    pub hidden: Hidden,
    pub phi: BeliefParams,
}

pub struct LearnedModel<'a> {
    pub model: &'a Model,
}

impl LearnedModel<'_> {
    fn live(&self, s: &LearnedState) -> bool {
        s.t < self.model.env.horizon()
    }

    fn features(&self, s: &LearnedState) -> Vec<f64> {
        self.model.env.features(&s.obs, s.t.min(self.model.env.horizon()))
    }

    /// Flattens `(particle, latent)` pairs of live particles.
    fn pairs<'b>(&self, states: &[LearnedState], latents: &'b [Vec<Vec<f64>>]) -> (Vec<(usize, usize)>, Vec<Vec<f64>>, Vec<&'b Vec<f64>>) {
        let mut idx = Vec::new();
        let mut feats = Vec::new();
        let mut zs = Vec::new();
        for (p, s) in states.iter().enumerate() {
            if !self.live(s) {
                continue;
            }
            let f = self.features(s);
            for (j, z) in latents[p].iter().enumerate() {
                idx.push((p, j));
                feats.push(f.clone());
                zs.push(z);
            }
        }
        (idx, feats, zs)
    }

    fn scatter(&self, latents: &[Vec<Vec<f64>>], idx: &[(usize, usize)], vals: Vec<f64>) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = latents.iter().map(|l| vec![0.0; l.len()]).collect();
        for ((p, j), v) in idx.iter().zip(vals) {
            out[*p][*j] = v;
        }
        out
    }
}

impl PlanningModel for LearnedModel<'_> {
    type State = LearnedState;
    type Action = Action;
    type Belief = LearnedBelief;
    type Latent = Vec<f64>;

    fn sample_latents(&self, beliefs: &[LearnedBelief], count: usize, rngs: &mut [RngStream]) -> Result<Vec<Vec<Vec<f64>>>> {
        Ok(beliefs.iter().zip(rngs.iter_mut()).map(|(b, r)| b.phi.sample(count, r)).collect())
    }

    fn latent_log_densities(&self, beliefs: &[LearnedBelief], latents: &[Vec<Vec<f64>>]) -> Result<Vec<Vec<f64>>> {
        Ok(beliefs.iter().zip(latents).map(|(b, l)| l.iter().map(|m| b.phi.log_density(m)).collect()).collect())
    }

    fn sample_actions(&self, states: &[LearnedState], latents: &[Vec<f64>], rngs: &mut [RngStream]) -> Result<Vec<Action>> {
        let feats: Vec<Vec<f64>> = states.iter().map(|s| self.features(s)).collect();
        let pols = self.model.policies(&feats, latents)?;
        Ok(pols.iter().zip(rngs.iter_mut()).map(|(p, r)| p.sample(r)).collect())
    }

    fn reward_means(&self, states: &[LearnedState], actions: &[Action], latents: &[Vec<Vec<f64>>]) -> Result<Vec<Vec<f64>>> {
        let (idx, feats, zs) = self.pairs(states, latents);
        let acts: Vec<Action> = idx.iter().map(|(p, _)| actions[*p].clone()).collect();
        let zs: Vec<Vec<f64>> = zs.into_iter().cloned().collect();
        let mu = self.model.reward_means(&feats, &acts, &zs)?;
        Ok(self.scatter(latents, &idx, mu))
    }

    fn sample_outcomes(
        &self,
        states: &[LearnedState],
        actions: &[Action],
        latents: &[Vec<f64>],
        rngs: &mut [RngStream],
    ) -> Result<Vec<(f64, LearnedState)>> {
        let env = &self.model.env;
        let live: Vec<usize> = (0..states.len()).filter(|p| self.live(&states[*p])).collect();
        let feats: Vec<Vec<f64>> = live.iter().map(|p| self.features(&states[*p])).collect();
        let acts: Vec<Action> = live.iter().map(|p| actions[*p].clone()).collect();
        let zs: Vec<Vec<f64>> = live.iter().map(|p| latents[*p].clone()).collect();
        let (mu, logits) = self.model.outcome_heads(&feats, &acts, &zs)?;
        let mut out: Vec<(f64, LearnedState)> = states
            .iter()
            .map(|s| (0.0, LearnedState { t: s.t + 1, ..s.clone() }))
            .collect();
        for (k, &p) in live.iter().enumerate() {
            let s = &states[p];
            let reward = mu[k];
            let arrived = match (&logits, env.image_side()) {
                (Some(l), Some(side)) => {
                    let probs: Vec<f64> = l[k].iter().map(|x| sigmoid(*x)).collect();
                    let total: f64 = probs.iter().sum();
                    let mut u = rngs[p].gen::<f64>() * total;
                    let mut tile = probs.len() - 1;
                    for (i, q) in probs.iter().enumerate() {
                        if u < *q {
                            tile = i;
                            break;
                        }
                        u -= q;
                    }
                    tile_image(side, tile)
                }
                _ => vec![reward; env.obs_dim()],
            };
            let obs = if env.is_grid() && env.ends_inner(s.t) { s.start.clone() } else { arrived.clone() };
            out[p] = (reward, LearnedState { obs, arrived, t: s.t + 1, start: s.start.clone() });
        }
        Ok(out)
    }

    fn transition_log_likelihoods(
        &self,
        states: &[LearnedState],
        actions: &[Action],
        rewards: &[f64],
        next_states: &[LearnedState],
        latents: &[Vec<Vec<f64>>],
    ) -> Result<Vec<Vec<f64>>> {
        let (idx, _, zs) = self.pairs(states, latents);
        let rows: Vec<DecodeRow> = states
            .iter()
            .enumerate()
            .map(|(p, s)| DecodeRow {
                features: self.features(s),
                action: actions[p].clone(),
                reward: rewards[p],
                next_obs: next_states[p].arrived.clone(),
            })
            .collect();
        let refs: Vec<&DecodeRow> = idx.iter().map(|(p, _)| &rows[*p]).collect();
        let zs: Vec<Vec<f64>> = zs.into_iter().cloned().collect();
        let ll = self.model.decode_log_likelihoods(&zs, &refs)?;
        Ok(self.scatter(latents, &idx, ll))
    }

    fn update_beliefs(
        &self,
        beliefs: &[LearnedBelief],
        states: &[LearnedState],
        actions: &[Action],
        rewards: &[f64],
        next_states: &[LearnedState],
    ) -> Result<Vec<LearnedBelief>> {
        let env = &self.model.env;
        let live: Vec<usize> = (0..states.len()).filter(|p| self.live(&states[*p])).collect();
        let inputs: Vec<Vec<f64>> = live
            .iter()
            .map(|&p| {
                let done = env.ends_inner(states[p].t);
                self.model.step_input(Some((&actions[p], rewards[p], done)), &next_states[p].obs)
            })
            .collect();
        let hidden: Vec<&Hidden> = live.iter().map(|&p| &beliefs[p].hidden).collect();
        let (h, phi) = self.model.infer_step(&hidden, &inputs)?;
        let mut out = beliefs.to_vec();
        for ((p, h), phi) in live.into_iter().zip(h).zip(phi) {
            out[p] = LearnedBelief { hidden: h, phi };
        }
        Ok(out)
    }

    fn values(&self, states: &[LearnedState], latents: &[Vec<Vec<f64>>]) -> Result<Vec<Vec<f64>>> {
        let (idx, feats, zs) = self.pairs(states, latents);
        let zs: Vec<Vec<f64>> = zs.into_iter().cloned().collect();
        let v = self.model.values(&feats, &zs)?;
        Ok(self.scatter(latents, &idx, v))
    }
}
