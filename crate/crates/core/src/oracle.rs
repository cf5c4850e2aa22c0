//! Exact Bayes-adaptive ground truth on small finite task sets.
//!
//! Beliefs are probability vectors over a handful of fully specified
//! hypotheses with deterministic rewards. Soft values are computed by
//! backward induction over the belief tree:
//!
//! ```text
//! Q(s, b, a) = E_b[r(s, a)] + γ T ln Σ_o p_b(o | s, a) exp(V(s', b') / T)
//! V(s, b)    = T ln Σ_a π⁺(a | s) exp(Q(s, b, a) / T)
//! ```
//!
//! which is the log-partition of the reward-tilted trajectory density.

use std::cell::RefCell;
use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::planner::{plan, PlannerConfig, PlanningModel};
use crate::rng::RngStream;
use crate::tensor::log_sum_exp;

pub const MAX_STATES: usize = 4;
pub const MAX_ACTIONS: usize = 3;
pub const MAX_HYPOTHESES: usize = 4;
pub const MAX_HORIZON: usize = 6;
const REWARD_TOL: f64 = 1e-12;

/// A prior over fully specified small MDPs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FiniteTaskSet {
    pub states: usize,
    pub actions: usize,
    /// `rewards[h][s][a]`.
    pub rewards: Vec<Vec<Vec<f64>>>,
    /// `transitions[h][s][a][s']`.
    pub transitions: Vec<Vec<Vec<Vec<f64>>>>,
    pub prior: Vec<f64>,
    /// `π⁺(a | s)`; uniform when absent.
    #[serde(default)]
    pub prior_policy: Option<Vec<Vec<f64>>>,
}

/// One observed step `(s, a, r, s')`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transition {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub next: usize,
}

impl FiniteTaskSet {
    pub fn hypotheses(&self) -> usize {
        self.prior.len()
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::TaskSet(m));
        let (ns, na, nh) = (self.states, self.actions, self.hypotheses());
        if ns == 0 || ns > MAX_STATES {
            return err(format!("states must be in 1..={MAX_STATES}, got {ns}"));
        }
        if na == 0 || na > MAX_ACTIONS {
            return err(format!("actions must be in 1..={MAX_ACTIONS}, got {na}"));
        }
        if nh == 0 || nh > MAX_HYPOTHESES {
            return err(format!("hypotheses must be in 1..={MAX_HYPOTHESES}, got {nh}"));
        }
        if (self.prior.iter().sum::<f64>() - 1.0).abs() > 1e-9 || self.prior.iter().any(|p| *p < 0.0) {
            return err("prior must be a probability vector".into());
        }
        if self.rewards.len() != nh || self.transitions.len() != nh {
            return err("reward and transition tables need one entry per hypothesis".into());
        }
        for h in 0..nh {
            if self.rewards[h].len() != ns || self.transitions[h].len() != ns {
                return err(format!("hypothesis {h}: tables need {ns} states"));
            }
            for s in 0..ns {
                if self.rewards[h][s].len() != na || self.transitions[h][s].len() != na {
                    return err(format!("hypothesis {h}, state {s}: tables need {na} actions"));
                }
                for a in 0..na {
                    let row = &self.transitions[h][s][a];
                    if row.len() != ns || row.iter().any(|p| *p < 0.0) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                        return err(format!("transition row ({h}, {s}, {a}) is not a distribution"));
                    }
                    if !self.rewards[h][s][a].is_finite() {
                        return err(format!("reward ({h}, {s}, {a}) is not finite"));
                    }
                }
            }
        }
        if let Some(pp) = &self.prior_policy {
            if pp.len() != ns || pp.iter().any(|r| r.len() != na || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9) {
                return err("prior_policy must hold one distribution per state".into());
            }
        }
        Ok(())
    }

    pub fn prior_policy(&self, s: usize, a: usize) -> f64 {
        match &self.prior_policy {
            Some(pp) => pp[s][a],
            None => 1.0 / self.actions as f64,
        }
    }

    /// `E_b[r(s, a)]`.
    pub fn expected_reward(&self, s: usize, a: usize, b: &[f64]) -> f64 {
        b.iter().enumerate().map(|(h, p)| p * self.rewards[h][s][a]).sum()
    }

    /// Likelihood of `(r, s')` after `(s, a)` under hypothesis `h`.
    pub fn likelihood(&self, h: usize, s: usize, a: usize, r: f64, next: usize) -> f64 {
        if (self.rewards[h][s][a] - r).abs() <= REWARD_TOL {
            self.transitions[h][s][a][next]
        } else {
            0.0
        }
    }

    /// Distinct outcomes `((r, s'), p_b(o), b')` of taking `a` in `s`.
    pub fn outcomes(&self, s: usize, a: usize, b: &[f64]) -> Vec<(f64, usize, f64, Vec<f64>)> {
        let mut out: Vec<(f64, usize, f64, Vec<f64>)> = Vec::new();
        for h in 0..self.hypotheses() {
            if b[h] == 0.0 {
                continue;
            }
            let r = self.rewards[h][s][a];
            for next in 0..self.states {
                if self.transitions[h][s][a][next] == 0.0 {
                    continue;
                }
                if out.iter().any(|(r2, n2, ..)| *n2 == next && (r2 - r).abs() <= REWARD_TOL) {
                    continue;
                }
                let joint: Vec<f64> = (0..self.hypotheses()).map(|g| b[g] * self.likelihood(g, s, a, r, next)).collect();
                let p: f64 = joint.iter().sum();
                out.push((r, next, p, joint.iter().map(|j| j / p).collect()));
            }
        }
        out
    }
}

/// Bayes rule over a history.
pub fn exact_posterior(tasks: &FiniteTaskSet, prior: &[f64], history: &[Transition]) -> Result<Vec<f64>> {
    let mut b = prior.to_vec();
    for tr in history {
        let joint: Vec<f64> = (0..tasks.hypotheses())
            .map(|h| b[h] * tasks.likelihood(h, tr.state, tr.action, tr.reward, tr.next))
            .collect();
        let z: f64 = joint.iter().sum();
        if z <= 0.0 {
            return Err(Error::ImpossibleHistory);
        }
        b = joint.iter().map(|j| j / z).collect();
    }
    Ok(b)
}

type Key = (usize, usize, Vec<i64>);

/// Memoized soft-value solver for one task set, discount and temperature.
pub struct SoftSolver<'a> {
    tasks: &'a FiniteTaskSet,
    discount: f64,
    temperature: f64,
    memo: RefCell<HashMap<Key, f64>>,
}

impl<'a> SoftSolver<'a> {
    pub fn new(tasks: &'a FiniteTaskSet, discount: f64, temperature: f64) -> Self {
        SoftSolver { tasks, discount, temperature, memo: RefCell::new(HashMap::new()) }
    }

    fn key(s: usize, horizon: usize, b: &[f64]) -> Key {
        (s, horizon, b.iter().map(|p| (p * 1e12).round() as i64).collect())
    }

    pub fn q(&self, s: usize, b: &[f64], a: usize, horizon: usize) -> f64 {
        let t = self.temperature;
        let r = self.tasks.expected_reward(s, a, b);
        if horizon <= 1 {
            return r;
        }
        let terms: Vec<f64> = self
            .tasks
            .outcomes(s, a, b)
            .into_iter()
            .map(|(_, next, p, post)| p.ln() + self.value(next, &post, horizon - 1) / t)
            .collect();
        r + self.discount * t * log_sum_exp(&terms)
    }

    pub fn value(&self, s: usize, b: &[f64], horizon: usize) -> f64 {
        if horizon == 0 {
            return 0.0;
        }
        let key = Self::key(s, horizon, b);
        if let Some(v) = self.memo.borrow().get(&key) {
            return *v;
        }
        let t = self.temperature;
        let terms: Vec<f64> = (0..self.tasks.actions)
            .map(|a| self.tasks.prior_policy(s, a).ln() + self.q(s, b, a, horizon) / t)
            .collect();
        let v = t * log_sum_exp(&terms);
        self.memo.borrow_mut().insert(key, v);
        v
    }

    pub fn tilted_policy(&self, s: usize, b: &[f64], horizon: usize) -> Vec<f64> {
        let t = self.temperature;
        let logits: Vec<f64> = (0..self.tasks.actions)
            .map(|a| self.tasks.prior_policy(s, a).ln() + self.q(s, b, a, horizon) / t)
            .collect();
        crate::tensor::softmax(&logits)
    }
}

pub fn exact_soft_value(tasks: &FiniteTaskSet, s: usize, b: &[f64], horizon: usize, discount: f64, temperature: f64) -> f64 {
    SoftSolver::new(tasks, discount, temperature).value(s, b, horizon)
}

/// `q*(a) ∝ π⁺(a|s) exp(Q(s, b, a)/T)`.
pub fn exact_tilted_policy(tasks: &FiniteTaskSet, s: usize, b: &[f64], horizon: usize, discount: f64, temperature: f64) -> Vec<f64> {
    SoftSolver::new(tasks, discount, temperature).tilted_policy(s, b, horizon)
}

/// Planning model with the exact belief. The nested latent is a copy of the
/// belief itself, so nested weights stay uniform and reward means are exact
/// belief expectations. Values are zero: the search horizon must cover the
/// whole problem.
pub struct ExactBeliefModel<'a> {
    pub tasks: &'a FiniteTaskSet,
}

impl PlanningModel for ExactBeliefModel<'_> {
    type State = usize;
    type Action = usize;
    type Belief = Vec<f64>;
    type Latent = Vec<f64>;

    fn sample_latents(&self, beliefs: &[Vec<f64>], count: usize, _: &mut [RngStream]) -> Result<Vec<Vec<Vec<f64>>>> {
        Ok(beliefs.iter().map(|b| vec![b.clone(); count]).collect())
    }

    fn latent_log_densities(&self, _: &[Vec<f64>], latents: &[Vec<Vec<f64>>]) -> Result<Vec<Vec<f64>>> {
        Ok(latents.iter().map(|l| vec![0.0; l.len()]).collect())
    }

    fn sample_actions(&self, states: &[usize], _: &[Vec<f64>], rngs: &mut [RngStream]) -> Result<Vec<usize>> {
        Ok(states
            .iter()
            .zip(rngs.iter_mut())
            .map(|(&s, rng)| {
                let probs: Vec<f64> = (0..self.tasks.actions).map(|a| self.tasks.prior_policy(s, a)).collect();
                crate::planner::sample_index(&probs, rng)
            })
            .collect())
    }

    fn reward_means(&self, states: &[usize], actions: &[usize], latents: &[Vec<Vec<f64>>]) -> Result<Vec<Vec<f64>>> {
        Ok((0..states.len())
            .map(|p| latents[p].iter().map(|b| self.tasks.expected_reward(states[p], actions[p], b)).collect())
            .collect())
    }

    fn sample_outcomes(&self, states: &[usize], actions: &[usize], latents: &[Vec<f64>], rngs: &mut [RngStream]) -> Result<Vec<(f64, usize)>> {
        Ok((0..states.len())
            .map(|p| {
                let rng = &mut rngs[p];
                let h = crate::planner::sample_index(&latents[p], rng);
                let (s, a) = (states[p], actions[p]);
                let next = crate::planner::sample_index(&self.tasks.transitions[h][s][a], rng);
                (self.tasks.rewards[h][s][a], next)
            })
            .collect())
    }

    fn transition_log_likelihoods(
        &self,
        states: &[usize],
        actions: &[usize],
        rewards: &[f64],
        next_states: &[usize],
        latents: &[Vec<Vec<f64>>],
    ) -> Result<Vec<Vec<f64>>> {
        Ok((0..states.len())
            .map(|p| {
                let (s, a) = (states[p], actions[p]);
                let pi = self.tasks.prior_policy(s, a).ln();
                latents[p]
                    .iter()
                    .map(|b| {
                        let lik: f64 = (0..self.tasks.hypotheses())
                            .map(|h| b[h] * self.tasks.likelihood(h, s, a, rewards[p], next_states[p]))
                            .sum();
                        lik.ln() + pi
                    })
                    .collect()
            })
            .collect())
    }

    fn update_beliefs(
        &self,
        beliefs: &[Vec<f64>],
        states: &[usize],
        actions: &[usize],
        rewards: &[f64],
        next_states: &[usize],
    ) -> Result<Vec<Vec<f64>>> {
        (0..beliefs.len())
            .map(|p| {
                let tr = Transition { state: states[p], action: actions[p], reward: rewards[p], next: next_states[p] };
                exact_posterior(self.tasks, &beliefs[p], &[tr])
            })
            .collect()
    }

    fn values(&self, _: &[usize], latents: &[Vec<Vec<f64>>]) -> Result<Vec<Vec<f64>>> {
        Ok(latents.iter().map(|l| vec![0.0; l.len()]).collect())
    }
}

/// Two arms, two hypotheses: arm 0 pays 0.5 under both; arm 1 pays 1 under
/// the first hypothesis and 0 under the second. Uniform prior.
pub fn bandit_task_set() -> FiniteTaskSet {
    FiniteTaskSet {
        states: 1,
        actions: 2,
        rewards: vec![vec![vec![0.5, 1.0]], vec![vec![0.5, 0.0]]],
        transitions: vec![vec![vec![vec![1.0], vec![1.0]]]; 2],
        prior: vec![0.5, 0.5],
        prior_policy: None,
    }
}

/// Settings of the planner-versus-oracle benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub tasks: FiniteTaskSet,
    pub horizon: usize,
    pub temperature: f64,
    pub resample_period: usize,
    pub particle_counts: Vec<usize>,
    pub seeds: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            tasks: bandit_task_set(),
            horizon: 3,
            temperature: 0.5,
            resample_period: 2,
            particle_counts: vec![64, 256, 1024, 4096],
            seeds: 20,
        }
    }
}

/// Total-variation distances between the planner's root policy and the
/// exact tilted policy, `[count][seed]`.
#[derive(Clone, Debug)]
pub struct BenchmarkResult {
    pub exact: Vec<f64>,
    pub tv: Vec<Vec<f64>>,
}

impl BenchmarkResult {
    pub fn mean_tv(&self, i: usize) -> f64 {
        self.tv[i].iter().sum::<f64>() / self.tv[i].len() as f64
    }

    /// One-sided Mann-Whitney p-values for "TV grows from each particle
    /// count to the next".
    pub fn increase_pvalues(&self) -> Vec<f64> {
        self.tv.windows(2).map(|w| crate::stats::mann_whitney_greater(&w[1], &w[0])).collect()
    }
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Runs the exact-belief planner against the exact tilted policy at the
/// root (state 0, prior belief) with undiscounted rewards.
pub fn run_benchmark(cfg: &BenchmarkConfig, seed: u64) -> Result<BenchmarkResult> {
    use rayon::prelude::*;
    cfg.tasks.validate()?;
    let tasks = &cfg.tasks;
    let exact = exact_tilted_policy(tasks, 0, &tasks.prior, cfg.horizon, 1.0, cfg.temperature);
    let root = RngStream::new(seed);
    let tv = cfg
        .particle_counts
        .iter()
        .map(|&k| {
            let pc = PlannerConfig {
                particles: k,
                nested: 1,
                depth: cfg.horizon,
                resample_period: cfg.resample_period,
                temperature: cfg.temperature,
                discount: 1.0,
            };
            (0..cfg.seeds)
                .into_par_iter()
                .map(|s| {
                    let model = ExactBeliefModel { tasks };
                    let rng = root.split(k as u64).split(s);
                    let res = plan(&model, 0, tasks.prior.clone(), &pc, &rng)?;
                    let mut q = vec![0.0; tasks.actions];
                    for (a, w) in res.policy {
                        q[a] += w;
                    }
                    Ok(total_variation(&q, &exact))
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BenchmarkResult { exact, tv })
}

/// Random task set within the size limits, with rewards on a coarse grid.
pub fn random_task_set(rng: &mut RngStream) -> FiniteTaskSet {
    let ns = rng.gen_range(1..=MAX_STATES);
    let na = rng.gen_range(1..=MAX_ACTIONS);
    let nh = rng.gen_range(1..=MAX_HYPOTHESES);
    let dist = |rng: &mut RngStream, n: usize| {
        let v: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.3) { 0.0 } else { rng.gen_range(0.1..1.0) }).collect();
        let mut v = v;
        if v.iter().sum::<f64>() == 0.0 {
            v[rng.gen_range(0..n)] = 1.0;
        }
        let z: f64 = v.iter().sum();
        v.into_iter().map(|x| x / z).collect::<Vec<f64>>()
    };
    let rewards = (0..nh)
        .map(|_| (0..ns).map(|_| (0..na).map(|_| rng.gen_range(0..4) as f64 / 4.0).collect()).collect())
        .collect();
    let transitions = (0..nh).map(|_| (0..ns).map(|_| (0..na).map(|_| dist(rng, ns)).collect()).collect()).collect();
    let prior = dist(rng, nh);
    FiniteTaskSet { states: ns, actions: na, rewards, transitions, prior, prior_policy: None }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bernoulli_pair() -> FiniteTaskSet {
        // two states; action 0 moves to state 1 w.p. 0.8 under h0 and 0.3 under h1
        FiniteTaskSet {
            states: 2,
            actions: 1,
            rewards: vec![vec![vec![0.0], vec![0.0]]; 2],
            transitions: vec![
                vec![vec![vec![0.2, 0.8]], vec![vec![0.2, 0.8]]],
                vec![vec![vec![0.7, 0.3]], vec![vec![0.7, 0.3]]],
            ],
            prior: vec![0.4, 0.6],
            prior_policy: None,
        }
    }

    #[test]
    fn uninformative_step_keeps_posterior() {
        let t = bandit_task_set();
        let tr = Transition { state: 0, action: 0, reward: 0.5, next: 0 };
        assert_eq!(exact_posterior(&t, &t.prior, &[tr, tr]).unwrap(), t.prior);
    }

    #[test]
    fn bayes_rule_ratio() {
        let t = bernoulli_pair();
        let tr = Transition { state: 0, action: 0, reward: 0.0, next: 1 };
        let b = exact_posterior(&t, &t.prior, &[tr]).unwrap();
        assert!((b[0] / b[1] - (0.4 / 0.6) * (0.8 / 0.3)).abs() < 1e-12);
        assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn impossible_history_errors() {
        let t = bandit_task_set();
        let tr = Transition { state: 0, action: 1, reward: 0.7, next: 0 };
        assert!(matches!(exact_posterior(&t, &t.prior, &[tr]), Err(Error::ImpossibleHistory)));
    }

    #[test]
    fn posterior_relabelling_symmetry() {
        let mut rng = RngStream::new(3);
        for _ in 0..200 {
            let t = random_task_set(&mut rng);
            let s = rng.gen_range(0..t.states);
            let a = rng.gen_range(0..t.actions);
            let outs = t.outcomes(s, a, &t.prior);
            let (r, next, ..) = outs[0].clone();
            let tr = Transition { state: s, action: a, reward: r, next };
            let b = exact_posterior(&t, &t.prior, &[tr]).unwrap();
            // reverse hypothesis order
            let mut rev = t.clone();
            rev.rewards.reverse();
            rev.transitions.reverse();
            rev.prior.reverse();
            let mut b2 = exact_posterior(&rev, &rev.prior, &[tr]).unwrap();
            b2.reverse();
            for (x, y) in b.iter().zip(&b2) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn horizon_zero_and_single_action_chain() {
        let t = bandit_task_set();
        assert_eq!(exact_soft_value(&t, 0, &t.prior, 0, 0.9, 0.3), 0.0);
        let chain = FiniteTaskSet {
            states: 2,
            actions: 1,
            rewards: vec![vec![vec![1.0], vec![2.0]]],
            transitions: vec![vec![vec![vec![0.0, 1.0]], vec![vec![1.0, 0.0]]]],
            prior: vec![1.0],
            prior_policy: None,
        };
        for temp in [0.01, 1.0, 7.0] {
            let v = exact_soft_value(&chain, 0, &[1.0], 3, 0.5, temp);
            assert!((v - (1.0 + 0.5 * 2.0 + 0.25 * 1.0)).abs() < 1e-12);
        }
    }

    fn expected_return(t: &FiniteTaskSet, s: usize, b: &[f64], horizon: usize) -> f64 {
        if horizon == 0 {
            return 0.0;
        }
        (0..t.actions)
            .map(|a| {
                let future: f64 = t
                    .outcomes(s, a, b)
                    .into_iter()
                    .map(|(_, next, p, post)| p * expected_return(t, next, &post, horizon - 1))
                    .sum();
                t.prior_policy(s, a) * (t.expected_reward(s, a, b) + future)
            })
            .sum()
    }

    #[test]
    fn soft_value_dominates_prior_policy_return() {
        let mut rng = RngStream::new(4);
        for _ in 0..100 {
            let t = random_task_set(&mut rng);
            let h = rng.gen_range(1..=4);
            let v = exact_soft_value(&t, 0, &t.prior, h, 1.0, 0.5);
            assert!(v >= expected_return(&t, 0, &t.prior, h) - 1e-10);
        }
    }

    #[test]
    fn soft_value_monotone_in_horizon() {
        let mut rng = RngStream::new(5);
        for _ in 0..100 {
            let t = random_task_set(&mut rng);
            let solver = SoftSolver::new(&t, 0.9, 0.4);
            let vs: Vec<f64> = (0..=5).map(|h| solver.value(0, &t.prior, h)).collect();
            assert!(vs.windows(2).all(|w| w[1] >= w[0] - 1e-12), "{vs:?}");
        }
    }

    #[test]
    fn tilted_policy_limits() {
        let flat = FiniteTaskSet {
            states: 1,
            actions: 3,
            rewards: vec![vec![vec![0.25; 3]]],
            transitions: vec![vec![vec![vec![1.0]; 3]]],
            prior: vec![1.0],
            prior_policy: Some(vec![vec![0.2, 0.3, 0.5]]),
        };
        let q = exact_tilted_policy(&flat, 0, &[1.0], 3, 1.0, 0.7);
        for (a, b) in q.iter().zip([0.2, 0.3, 0.5]) {
            assert!((a - b).abs() < 1e-12);
        }
        let t = bandit_task_set();
        let q = exact_tilted_policy(&t, 0, &t.prior, 3, 1.0, 1e-6);
        let solver = SoftSolver::new(&t, 1.0, 1e-6);
        let best = if solver.q(0, &t.prior, 0, 3) > solver.q(0, &t.prior, 1, 3) { 0 } else { 1 };
        assert!(q[best] > 1.0 - 1e-9);
    }

    #[test]
    fn tilted_policy_normalizes_on_random_tasks() {
        let mut rng = RngStream::new(6);
        for _ in 0..1000 {
            let t = random_task_set(&mut rng);
            t.validate().unwrap();
            let q = exact_tilted_policy(&t, 0, &t.prior, rng.gen_range(0..=3), 0.95, rng.gen_range(0.1..2.0));
            assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    /// Enumerates every `(a₀, o₀, a₁, o₁)` path and tilts by `exp(Σ E_b[r]/T)`.
    fn brute_force_root_marginal(t: &FiniteTaskSet, temp: f64) -> Vec<f64> {
        let mut marg = vec![0.0; t.actions];
        for a0 in 0..t.actions {
            let r0 = t.expected_reward(0, a0, &t.prior);
            for (_, s1, p0, b1) in t.outcomes(0, a0, &t.prior) {
                for a1 in 0..t.actions {
                    let r1 = t.expected_reward(s1, a1, &b1);
                    for (_, _, p1, _) in t.outcomes(s1, a1, &b1) {
                        let path = t.prior_policy(0, a0) * p0 * t.prior_policy(s1, a1) * p1;
                        marg[a0] += path * ((r0 + r1) / temp).exp();
                    }
                }
            }
        }
        let z: f64 = marg.iter().sum();
        marg.iter().map(|m| m / z).collect()
    }

    #[test]
    fn tilted_policy_matches_trajectory_enumeration() {
        let t = FiniteTaskSet {
            states: 2,
            actions: 2,
            rewards: vec![vec![vec![0.0, 1.0], vec![0.5, 0.0]], vec![vec![1.0, 0.0], vec![0.0, 0.25]]],
            transitions: vec![
                vec![vec![vec![0.5, 0.5], vec![0.1, 0.9]], vec![vec![1.0, 0.0], vec![0.3, 0.7]]],
                vec![vec![vec![0.2, 0.8], vec![0.6, 0.4]], vec![vec![0.5, 0.5], vec![0.0, 1.0]]],
            ],
            prior: vec![0.35, 0.65],
            prior_policy: Some(vec![vec![0.4, 0.6], vec![0.7, 0.3]]),
        };
        t.validate().unwrap();
        for temp in [0.3, 1.0, 2.5] {
            let q = exact_tilted_policy(&t, 0, &t.prior, 2, 1.0, temp);
            let b = brute_force_root_marginal(&t, temp);
            for (x, y) in q.iter().zip(&b) {
                assert!((x - y).abs() < 1e-9, "{q:?} vs {b:?}");
            }
        }
    }

    #[test]
    fn validation_rejects_oversized_and_bad_rows() {
        let mut t = bandit_task_set();
        t.actions = 4;
        assert!(t.validate().is_err());
        let mut t = bandit_task_set();
        t.transitions[0][0][0] = vec![0.5];
        assert!(t.validate().is_err());
        let mut t = bandit_task_set();
        t.prior = vec![0.7, 0.7];
        assert!(t.validate().is_err());
    }

    #[test]
    fn bandit_benchmark_target_is_not_degenerate() {
        let cfg = BenchmarkConfig::default();
        let q = exact_tilted_policy(&cfg.tasks, 0, &cfg.tasks.prior, cfg.horizon, 1.0, cfg.temperature);
        assert!(q.iter().all(|p| *p > 0.1 && *p < 0.9), "{q:?}");
    }
}
