//! Evaluation rollouts for trained agents and the random baseline.

use crate::envs::{Action, EnvSpec, MetaEnv, Task};
use crate::error::Result;
use crate::models::{Hidden, Model};
use crate::planner::learned::{LearnedBelief, LearnedModel, LearnedState};
use crate::planner::{plan_batch, sample_index, PlannerConfig};
use crate::rng::RngStream;

#[derive(Clone, Copy)]
pub enum Agent<'a> {
    Random,
    Planner { model: &'a Model, planner: &'a PlannerConfig },
}

/// One evaluated lifetime.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRecord {
    pub rewards: Vec<f64>,
    /// Per step, the gridworld tile the agent acted from.
    pub tiles: Vec<usize>,
    /// Best achievable per-step reward (function env).
    pub max_reward: Option<f64>,
}

impl EpisodeRecord {
    pub fn total_return(&self) -> f64 {
        self.rewards.iter().sum()
    }

    /// Cumulative regret against the best constant action.
    pub fn regret(&self) -> Option<f64> {
        self.max_reward.map(|m| self.rewards.iter().map(|r| m - r).sum())
    }
}

/// Runs `episodes` lifetimes side by side. Tasks depend only on `seed` and
/// the episode index, so different agents meet the same tasks.
pub fn evaluate(agent: Agent, env: &EnvSpec, episodes: usize, seed: u64) -> Result<Vec<EpisodeRecord>> {
    let root = RngStream::new(seed).split_named("eval");
    let mut envs: Vec<MetaEnv> = (0..episodes).map(|e| MetaEnv::new(env.clone(), &mut root.split_named("tasks").split(e as u64))).collect();
    let mut records: Vec<EpisodeRecord> = envs
        .iter()
        .map(|m| EpisodeRecord {
            rewards: Vec::new(),
            tiles: Vec::new(),
            max_reward: match &m.task {
                Task::Fourier(f) => Some(f.max_reward()),
                Task::Grid(_) => None,
            },
        })
        .collect();
    let starts: Vec<Vec<f64>> = envs.iter().map(|m| m.obs().to_vec()).collect();
    let mut beliefs: Vec<LearnedBelief> = Vec::new();
    if let Agent::Planner { model, .. } = agent {
        let h0 = model.initial_hidden();
        let hidden: Vec<&Hidden> = vec![&h0; episodes];
        let inputs: Vec<Vec<f64>> = envs.iter().map(|m| model.step_input(None, m.obs())).collect();
        let (h, phi) = model.infer_step(&hidden, &inputs)?;
        beliefs = h.into_iter().zip(phi).map(|(hidden, phi)| LearnedBelief { hidden, phi }).collect();
    }
    let act_root = root.split_named("act");
    for t in 0..env.horizon() {
        let actions: Vec<Action> = match agent {
            Agent::Random => (0..episodes).map(|e| Action::random(env.action_space(), &mut act_root.split(t as u64).split(e as u64))).collect(),
            Agent::Planner { model, planner } => {
                let roots: Vec<(LearnedState, LearnedBelief)> = envs
                    .iter()
                    .zip(&beliefs)
                    .zip(&starts)
                    .map(|((m, b), s)| (LearnedState::new(m.obs().to_vec(), m.t, s.clone()), b.clone()))
                    .collect();
                let rngs: Vec<RngStream> = (0..episodes).map(|e| root.split_named("plan").split(t as u64).split(e as u64)).collect();
                let plans = plan_batch(&LearnedModel { model }, &roots, planner, &rngs)?;
                plans
                    .into_iter()
                    .enumerate()
                    .map(|(e, p)| {
                        let w: Vec<f64> = p.samples.iter().map(|s| s.1).collect();
                        p.samples[sample_index(&w, &mut act_root.split(t as u64).split(e as u64))].0.clone()
                    })
                    .collect()
            }
        };
        let mut inputs = Vec::with_capacity(episodes);
        for ((m, rec), a) in envs.iter_mut().zip(records.iter_mut()).zip(&actions) {
            if let Some(tile) = m.tile() {
                rec.tiles.push(tile);
            }
            let out = m.step(a);
            rec.rewards.push(out.reward);
            if let Agent::Planner { model, .. } = agent {
                inputs.push(model.step_input(Some((a, out.reward, out.inner_done)), &out.obs));
            }
        }
        if let Agent::Planner { model, .. } = agent {
            if t + 1 < env.horizon() {
                let hidden: Vec<&Hidden> = beliefs.iter().map(|b| &b.hidden).collect();
                let (h, phi) = model.infer_step(&hidden, &inputs)?;
                beliefs = h.into_iter().zip(phi).map(|(hidden, phi)| LearnedBelief { hidden, phi }).collect();
            }
        }
    }
    Ok(records)
}

/// Visit fractions per `(inner episode, tile)`: the share of steps of that
/// inner episode, pooled over lifetimes, spent acting from the tile.
pub fn occupancy(env: &EnvSpec, records: &[EpisodeRecord]) -> Vec<(usize, usize, f64)> {
    let (Some(side), inner) = (env.image_side(), env.inner_len()) else { return Vec::new() };
    let episodes = env.horizon() / inner;
    let mut counts = vec![vec![0usize; side * side]; episodes];
    for r in records {
        for (t, &tile) in r.tiles.iter().enumerate() {
            counts[t / inner][tile] += 1;
        }
    }
    let mut out = Vec::new();
    for (e, row) in counts.iter().enumerate() {
        let total: usize = row.iter().sum();
        for (tile, &c) in row.iter().enumerate() {
            out.push((e, tile, if total > 0 { c as f64 / total as f64 } else { 0.0 }));
        }
    }
    out
}
