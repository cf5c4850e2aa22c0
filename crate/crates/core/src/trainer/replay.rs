//! Per-environment circular replay with cached recurrent state, aligned
//! loss windows and TD(λ) targets.

use std::collections::VecDeque;

use rand::Rng;

use crate::envs::Action;
use crate::models::{DecodeRow, Hidden};
use crate::rng::RngStream;

/// One environment step.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayEntry {
    pub env_index: usize,
    pub lifetime: u64,
    /// Step index within the lifetime.
    pub offset: usize,
    /// Inference input consumed at this step.
    pub input: Vec<f64>,
    /// Head features of the state acted on.
    pub features: Vec<f64>,
    pub action: Action,
    pub reward: f64,
    /// Observation right after the action, before any inner reset.
    pub next_obs: Vec<f64>,
    pub inner_done: bool,
    pub meta_done: bool,
    /// Recurrent state before consuming `input`.
    pub hidden: Hidden,
    /// Iteration at which `hidden` was computed.
    pub cached_at: usize,
    /// Planner target `q̂*` as weighted actions.
    pub target: Vec<(Action, f64)>,
    /// Planner root value `V̂′`.
    pub value_estimate: f64,
    /// TD(λ) target, refreshed every iteration.
    pub td_target: f64,
}

impl ReplayEntry {
    pub fn decode_row(&self) -> DecodeRow {
        DecodeRow {
            features: self.features.clone(),
            action: self.action.clone(),
            reward: self.reward,
            next_obs: self.next_obs.clone(),
        }
    }
}

/// A loss window: `burn` burn-in steps followed by the loss steps, all
/// inside one lifetime.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowRef {
    pub env: usize,
    /// Ring position of the first burn-in step.
    pub start: usize,
    pub burn: usize,
}

#[derive(Clone, Debug)]
pub struct Replay {
    pub rings: Vec<VecDeque<ReplayEntry>>,
    capacity: usize,
}

impl Replay {
    pub fn new(envs: usize, capacity_per_env: usize) -> Self {
        Replay { rings: vec![VecDeque::with_capacity(capacity_per_env); envs], capacity: capacity_per_env }
    }

    pub fn capacity(&self) -> usize {
        self.capacity * self.rings.len()
    }

    pub fn len(&self) -> usize {
        self.rings.iter().map(|r| r.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn push(&mut self, entry: ReplayEntry) {
        let ring = &mut self.rings[entry.env_index];
        if ring.len() == self.capacity {
            ring.pop_front();
        }
        ring.push_back(entry);
    }

    /// All windows whose loss steps start at a multiple of `window` within
    /// a lifetime, with burn-in `min(burn_in, offset)`. Windows that run
    /// past the stored data or lose their burn-in to eviction are skipped.
    pub fn windows(&self, window: usize, burn_in: usize) -> Vec<WindowRef> {
        let mut out = Vec::new();
        for (e, ring) in self.rings.iter().enumerate() {
            for (i, entry) in ring.iter().enumerate() {
                if entry.offset % window != 0 || i + window > ring.len() {
                    continue;
                }
                let last = &ring[i + window - 1];
                if last.lifetime != entry.lifetime || last.offset != entry.offset + window - 1 {
                    continue;
                }
                let burn = burn_in.min(entry.offset);
                if burn > i || ring[i - burn].lifetime != entry.lifetime {
                    continue;
                }
                out.push(WindowRef { env: e, start: i - burn, burn });
            }
        }
        out
    }

    pub fn sample_windows(&self, all: &[WindowRef], count: usize, rng: &mut RngStream) -> Vec<WindowRef> {
        if all.is_empty() {
            return Vec::new();
        }
        (0..count).map(|_| all[rng.gen_range(0..all.len())]).collect()
    }

    pub fn window_entries(&self, w: &WindowRef, window: usize) -> Vec<&ReplayEntry> {
        self.rings[w.env].range(w.start..w.start + w.burn + window).collect()
    }
}

/// λ-returns `G_t = r_t + γ((1-λ) V_{t+1} + λ G_{t+1})`, cut only where
/// `meta_done` is set. `bootstrap` values the state after the last step.
pub fn td_lambda_targets(rewards: &[f64], values: &[f64], meta_done: &[bool], bootstrap: f64, gamma: f64, lambda: f64) -> Vec<f64> {
    let n = rewards.len();
    let mut out = vec![0.0; n];
    let mut next_g = bootstrap;
    let mut next_v = bootstrap;
    for t in (0..n).rev() {
        out[t] = if meta_done[t] { rewards[t] } else { rewards[t] + gamma * ((1.0 - lambda) * next_v + lambda * next_g) };
        next_g = out[t];
        next_v = values[t];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(env: usize, lifetime: u64, offset: usize) -> ReplayEntry {
        ReplayEntry {
            env_index: env,
            lifetime,
            offset,
            input: vec![],
            features: vec![],
            action: Action::Discrete(0),
            reward: 0.0,
            next_obs: vec![],
            inner_done: false,
            meta_done: false,
            hidden: Hidden { layers: vec![] },
            cached_at: 0,
            target: vec![],
            value_estimate: 0.0,
            td_target: 0.0,
        }
    }

    #[test]
    fn lambda_one_is_discounted_return_plus_bootstrap() {
        let g = td_lambda_targets(&[1.0, 2.0, 3.0], &[9.0, 9.0, 9.0], &[false; 3], 10.0, 0.5, 1.0);
        assert_eq!(g[0], 1.0 + 0.5 * 2.0 + 0.25 * 3.0 + 0.125 * 10.0);
    }

    #[test]
    fn lambda_zero_is_one_step_target() {
        let g = td_lambda_targets(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0], &[false; 3], 7.0, 0.9, 0.0);
        assert_eq!(g, vec![1.0 + 0.9 * 5.0, 2.0 + 0.9 * 6.0, 3.0 + 0.9 * 7.0]);
    }

    #[test]
    fn zero_discount_gives_rewards_and_meta_reset_cuts() {
        assert_eq!(td_lambda_targets(&[1.0, -2.0], &[5.0, 5.0], &[false, false], 3.0, 0.0, 1.0), vec![1.0, -2.0]);
        let g = td_lambda_targets(&[1.0, 2.0, 3.0], &[0.0; 3], &[false, true, false], 100.0, 1.0, 1.0);
        assert_eq!(g, vec![3.0, 2.0, 103.0]);
    }

    #[test]
    fn windows_align_and_stay_inside_lifetimes() {
        let mut r = Replay::new(1, 100);
        for lt in 0..3u64 {
            for o in 0..20 {
                let mut e = entry(0, lt, o);
                e.meta_done = o == 19;
                r.push(e);
            }
        }
        let ws = r.windows(4, 8);
        assert_eq!(ws.len(), 15);
        for w in &ws {
            let es = r.window_entries(w, 4);
            assert!(es.iter().all(|e| e.lifetime == es[0].lifetime));
            assert_eq!(es[w.burn].offset % 4, 0);
            assert_eq!(w.burn, es[w.burn].offset.min(8));
        }
    }

    #[test]
    fn eviction_drops_windows_without_burn_in() {
        let mut r = Replay::new(1, 10);
        for o in 0..20 {
            r.push(entry(0, 0, o));
        }
        assert_eq!(r.len(), 10);
        // ring holds offsets 10..19; the window at 16 needs burn-in from 8
        let ws = r.windows(4, 8);
        assert!(ws.is_empty(), "{ws:?}");
        let ws = r.windows(4, 2);
        assert_eq!(ws.len(), 2);
    }
}
