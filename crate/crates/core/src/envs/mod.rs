//! Task distributions and the meta-episode wrapper.
//!
//! A meta-episode (lifetime) holds one sampled task fixed across its inner
//! episodes; only the wrapper's caller resamples the task when the lifetime
//! ends.

pub mod fourier;
pub mod grid;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::RngStream;
pub use fourier::FourierTask;
pub use grid::{GridTask, Move, GRID_ACTIONS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActionSpace {
    Discrete(usize),
    Continuous(usize),
}

impl ActionSpace {
    /// Width of the action encoding fed to the networks.
    pub fn encoding_dim(&self) -> usize {
        match *self {
            ActionSpace::Discrete(n) | ActionSpace::Continuous(n) => n,
        }
    }
}

/// An action. Continuous actions hold the pre-squash value `u`; the
/// environment receives `tanh(u)`.
#[derive(Clone, Debug, PartialEq)]
pub enum Action {
    Discrete(usize),
    Continuous(Vec<f64>),
}

impl Action {
    /// Network encoding: one-hot for discrete, squashed value for continuous.
    pub fn encode(&self, space: ActionSpace, out: &mut Vec<f64>) {
        match (self, space) {
            (Action::Discrete(a), ActionSpace::Discrete(n)) => {
                out.extend((0..n).map(|i| if i == *a { 1.0 } else { 0.0 }));
            }
            (Action::Continuous(u), ActionSpace::Continuous(_)) => out.extend(u.iter().map(|v| v.tanh())),
            _ => panic!("action {self:?} does not belong to {space:?}"),
        }
    }

    pub fn random(space: ActionSpace, rng: &mut RngStream) -> Action {
        match space {
            ActionSpace::Discrete(n) => Action::Discrete(rng.gen_range(0..n)),
            ActionSpace::Continuous(d) => {
                Action::Continuous((0..d).map(|_| rng.gen_range(-1.0f64..1.0).max(-1.0 + 1e-12).atanh()).collect())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvSpec {
    Fourier {
        #[serde(default = "one")]
        dim: usize,
        #[serde(default = "twenty")]
        steps: usize,
    },
    Grid {
        #[serde(default = "five")]
        side: usize,
        #[serde(default = "ten")]
        inner_steps: usize,
        #[serde(default = "six")]
        inner_episodes: usize,
        #[serde(default)]
        allow_goal_at_start: bool,
    },
}

fn one() -> usize {
    1
}
fn five() -> usize {
    5
}
fn six() -> usize {
    6
}
fn ten() -> usize {
    10
}
fn twenty() -> usize {
    20
}

impl Default for EnvSpec {
    fn default() -> Self {
        EnvSpec::fourier()
    }
}

impl EnvSpec {
    pub fn fourier() -> Self {
        EnvSpec::Fourier { dim: 1, steps: 20 }
    }

    pub fn grid() -> Self {
        EnvSpec::Grid { side: 5, inner_steps: 10, inner_episodes: 6, allow_goal_at_start: false }
    }

    pub fn is_grid(&self) -> bool {
        matches!(self, EnvSpec::Grid { .. })
    }

    pub fn action_space(&self) -> ActionSpace {
        match *self {
            EnvSpec::Fourier { dim, .. } => ActionSpace::Continuous(dim),
            EnvSpec::Grid { .. } => ActionSpace::Discrete(GRID_ACTIONS),
        }
    }

    pub fn obs_dim(&self) -> usize {
        match *self {
            EnvSpec::Fourier { dim, .. } => dim,
            EnvSpec::Grid { side, .. } => side * side,
        }
    }

    pub fn image_side(&self) -> Option<usize> {
        match *self {
            EnvSpec::Grid { side, .. } => Some(side),
            EnvSpec::Fourier { .. } => None,
        }
    }

    /// Width of the state features seen by the policy, value and decoder heads.
    pub fn feature_dim(&self) -> usize {
        match *self {
            EnvSpec::Fourier { .. } => 1,
            EnvSpec::Grid { side, .. } => side * side + 2,
        }
    }

    pub fn horizon(&self) -> usize {
        match *self {
            EnvSpec::Fourier { steps, .. } => steps,
            EnvSpec::Grid { inner_steps, inner_episodes, .. } => inner_steps * inner_episodes,
        }
    }

    pub fn inner_len(&self) -> usize {
        match *self {
            EnvSpec::Fourier { steps, .. } => steps,
            EnvSpec::Grid { inner_steps, .. } => inner_steps,
        }
    }

    /// Head features at lifetime step `t` (steps already taken).
    /// The observation is augmented with elapsed-time fractions so the
    /// value and reward heads see the clock.
    pub fn features(&self, obs: &[f64], t: usize) -> Vec<f64> {
        match *self {
            EnvSpec::Fourier { steps, .. } => vec![t as f64 / steps as f64],
            EnvSpec::Grid { inner_steps, inner_episodes, .. } => {
                let mut f = obs.to_vec();
                f.push((t % inner_steps) as f64 / inner_steps as f64);
                f.push((t / inner_steps) as f64 / inner_episodes as f64);
                f
            }
        }
    }

    /// Whether the step taken at lifetime step `t` ends an inner episode.
    pub fn ends_inner(&self, t: usize) -> bool {
        (t + 1) % self.inner_len() == 0
    }

    pub fn validate(&self) -> Result<(), String> {
        match *self {
            EnvSpec::Fourier { dim, steps } => {
                if dim == 0 || steps == 0 {
                    return Err("fourier env needs dim > 0 and steps > 0".into());
                }
            }
            EnvSpec::Grid { side, inner_steps, inner_episodes, .. } => {
                if side < 2 || inner_steps == 0 || inner_episodes == 0 {
                    return Err("grid env needs side >= 2 and positive episode lengths".into());
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Task {
    Fourier(FourierTask),
    Grid(GridTask),
}

/// Result of one environment step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    /// Observation right after the action (before any inner reset).
    pub next_obs: Vec<f64>,
    /// Observation the agent acts on next (after an inner reset if any).
    pub obs: Vec<f64>,
    pub inner_done: bool,
    pub meta_done: bool,
}

/// One lifetime of a task.
#[derive(Clone, Debug)]
pub struct MetaEnv {
    pub spec: EnvSpec,
    pub task: Task,
    /// Steps taken in this lifetime.
    pub t: usize,
    obs: Vec<f64>,
}

impl MetaEnv {
    pub fn new(spec: EnvSpec, rng: &mut RngStream) -> Self {
        let task = match spec {
            EnvSpec::Fourier { dim, .. } => Task::Fourier(FourierTask::sample(rng, dim)),
            EnvSpec::Grid { side, allow_goal_at_start, .. } => Task::Grid(GridTask::sample(rng, side, allow_goal_at_start)),
        };
        Self::with_task(spec, task)
    }

    pub fn with_task(spec: EnvSpec, task: Task) -> Self {
        let obs = match &task {
            Task::Fourier(f) => vec![0.0; f.dim()],
            Task::Grid(g) => g.observe(),
        };
        MetaEnv { spec, task, t: 0, obs }
    }

    pub fn obs(&self) -> &[f64] {
        &self.obs
    }

    pub fn features(&self) -> Vec<f64> {
        self.spec.features(&self.obs, self.t)
    }

    pub fn is_done(&self) -> bool {
        self.t >= self.spec.horizon()
    }

    pub fn step(&mut self, action: &Action) -> StepOutcome {
        assert!(!self.is_done(), "step after the end of the lifetime");
        let inner_done = self.spec.ends_inner(self.t);
        let (reward, next_obs, obs) = match (&mut self.task, action) {
            (Task::Fourier(f), Action::Continuous(u)) => {
                let x: Vec<f64> = u.iter().map(|v| v.tanh()).collect();
                let (o, r) = f.step(&x);
                (r, o.clone(), o)
            }
            (Task::Grid(g), Action::Discrete(a)) => {
                let r = g.step(Move::from_index(*a));
                let next = g.observe();
                if inner_done {
                    g.reset_inner();
                }
                (r, next, g.observe())
            }
            (_, a) => panic!("action {a:?} does not match the environment"),
        };
        self.t += 1;
        self.obs = obs.clone();
        StepOutcome { reward, next_obs, obs, inner_done, meta_done: self.is_done() }
    }

    /// Agent tile for gridworlds.
    pub fn tile(&self) -> Option<usize> {
        match &self.task {
            Task::Grid(g) => Some(g.pos),
            Task::Fourier(_) => None,
        }
    }
}
