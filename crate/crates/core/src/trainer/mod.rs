//! The outer EM loop: batched interaction with planner-improved policies,
//! a circular replay of recurrent windows, TD(λ) targets and gradient
//! steps on the joint loss.

pub mod eval;
pub mod loss;
pub mod optim;
pub mod replay;

#[cfg(test)]
mod tests;

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{param_gradcheck, GradCheckReport, Graph};
use crate::envs::{Action, EnvSpec, MetaEnv};
use crate::error::{Error, Result};
use crate::models::{Hidden, Model, ModelConfig};
use crate::planner::learned::{LearnedBelief, LearnedModel, LearnedState};
use crate::planner::{plan_batch, sample_index, PlannerConfig};
use crate::rng::RngStream;

pub use loss::{batch_loss, Detach, LossCoefficients, LossParts, WindowGroup};
pub use optim::{clip_gradients, AdamW, AdamWConfig};
pub use replay::{td_lambda_targets, Replay, ReplayEntry, WindowRef};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Loss steps per gradient step.
    pub minibatch: usize,
    pub sgd_steps: usize,
    /// Environment steps per iteration.
    pub unroll: usize,
    pub parallel_envs: usize,
    pub td_lambda: f64,
    pub discount: f64,
    pub value_coef: f64,
    pub policy_coef: f64,
    pub entropy_coef: f64,
    pub belief_coef: f64,
    pub belief_kl: f64,
    pub belief_entropy: f64,
    pub elbo_samples: usize,
    pub burn_in: usize,
    pub decode_window: usize,
    pub unroll_window: usize,
    /// Iterations an entry stays in the replay.
    pub max_age: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub clip_value: f64,
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_env(&EnvSpec::fourier())
    }
}

/// Fields whose defaults differ between the function and grid envs.
pub const ENV_DEPENDENT_FIELDS: [&str; 5] = ["unroll", "entropy_coef", "burn_in", "decode_window", "unroll_window"];

impl TrainConfig {
    /// Replaces the env-dependent fields not listed in `explicit` with the
    /// defaults for `env`.
    pub fn apply_env_defaults(&mut self, env: &EnvSpec, explicit: &[&str]) {
        let d = Self::for_env(env);
        let keep = |f: &str| explicit.contains(&f);
        if !keep("unroll") {
            self.unroll = d.unroll;
        }
        if !keep("entropy_coef") {
            self.entropy_coef = d.entropy_coef;
        }
        if !keep("burn_in") {
            self.burn_in = d.burn_in;
        }
        if !keep("decode_window") {
            self.decode_window = d.decode_window;
        }
        if !keep("unroll_window") {
            self.unroll_window = d.unroll_window;
        }
    }

    pub fn for_env(env: &EnvSpec) -> Self {
        let grid = env.is_grid();
        TrainConfig {
            minibatch: 1024,
            sgd_steps: 32,
            unroll: if grid { 128 } else { 64 },
            parallel_envs: 32,
            td_lambda: 1.0,
            discount: 0.99,
            value_coef: 0.5,
            policy_coef: 1.0,
            entropy_coef: if grid { 0.1 } else { 3e-4 },
            belief_coef: 1.0,
            belief_kl: 0.01,
            belief_entropy: 1e-5,
            elbo_samples: 10,
            burn_in: if grid { 12 } else { 8 },
            decode_window: if grid { 6 } else { 4 },
            unroll_window: if grid { 6 } else { 4 },
            max_age: 16,
            learning_rate: 3e-3,
            weight_decay: 1e-6,
            clip_value: 1.0,
            clip_norm: 1.0,
        }
    }

    /// Replay capacity in entries.
    pub fn buffer_capacity(&self) -> usize {
        self.max_age * self.parallel_envs * self.unroll
    }

    pub fn coefficients(&self) -> LossCoefficients {
        LossCoefficients {
            value: self.value_coef,
            policy: self.policy_coef,
            entropy: self.entropy_coef,
            belief: self.belief_coef,
            belief_kl: self.belief_kl,
            belief_entropy: self.belief_entropy,
            elbo_samples: self.elbo_samples,
            decode_window: self.decode_window,
        }
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            clip_value: self.clip_value,
            clip_norm: self.clip_norm,
            ..AdamWConfig::default()
        }
    }

    pub fn validate(&self, env: &EnvSpec) -> std::result::Result<(), String> {
        let positive = [
            ("minibatch", self.minibatch),
            ("sgd_steps", self.sgd_steps),
            ("unroll", self.unroll),
            ("parallel_envs", self.parallel_envs),
            ("elbo_samples", self.elbo_samples),
            ("decode_window", self.decode_window),
            ("unroll_window", self.unroll_window),
            ("max_age", self.max_age),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(format!("train.{name} must be >= 1"));
            }
        }
        let nonneg = [
            ("value_coef", self.value_coef),
            ("policy_coef", self.policy_coef),
            ("entropy_coef", self.entropy_coef),
            ("belief_coef", self.belief_coef),
            ("belief_kl", self.belief_kl),
            ("belief_entropy", self.belief_entropy),
            ("weight_decay", self.weight_decay),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(format!("train.{name} must be a finite value >= 0"));
            }
        }
        for (name, v) in [("learning_rate", self.learning_rate), ("clip_value", self.clip_value), ("clip_norm", self.clip_norm)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(format!("train.{name} must be > 0"));
            }
        }
        for (name, v) in [("td_lambda", self.td_lambda), ("discount", self.discount)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("train.{name} must lie in [0, 1]"));
            }
        }
        if self.unroll_window > self.unroll {
            return Err("train.unroll_window must not exceed train.unroll".into());
        }
        if self.unroll_window > env.horizon() {
            return Err("train.unroll_window must not exceed the lifetime length".into());
        }
        if self.decode_window > self.burn_in {
            return Err("train.decode_window must not exceed train.burn_in".into());
        }
        Ok(())
    }
}

/// Instrumentation of belief resets during interaction.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BeliefAudit {
    pub steps: u64,
    pub inner_resets: u64,
    pub meta_resets: u64,
    pub belief_resets: u64,
    /// Inner resets across which the belief carried over bit-identically.
    pub preserved_across_inner: u64,
    pub violations: u64,
}

impl BeliefAudit {
    pub fn is_clean(&self) -> bool {
        self.violations == 0 && self.belief_resets == self.meta_resets && self.preserved_across_inner == self.inner_resets
    }
}

/// Per-iteration training metrics; every field is deterministic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub env_steps: u64,
    pub lifetimes: usize,
    /// Mean return of lifetimes that ended this iteration.
    pub mean_return: Option<f64>,
    pub loss: f64,
    pub parts: LossParts,
    pub grad_norm: f64,
    /// Mean planner ESS as a fraction of the particle count.
    pub ess: f64,
    pub audit_violations: u64,
}

impl IterationMetrics {
    pub const CSV_HEADER: &'static str =
        "iteration,env_steps,lifetimes,mean_return,loss,loss_value,loss_policy,loss_belief,loss_entropy,grad_norm,ess,audit_violations";

    pub fn csv_row(&self) -> String {
        let ret = self.mean_return.map(|r| format!("{r:.9}")).unwrap_or_default();
        format!(
            "{},{},{},{},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.6},{}",
            self.iteration,
            self.env_steps,
            self.lifetimes,
            ret,
            self.loss,
            self.parts.value,
            self.parts.policy,
            self.parts.belief,
            self.parts.entropy,
            self.grad_norm,
            self.ess,
            self.audit_violations
        )
    }
}

/// Wall-clock seconds of one iteration, kept apart from the metrics so
/// those stay reproducible.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterationTiming {
    pub collect: f64,
    pub train: f64,
}

struct Slot {
    env: MetaEnv,
    lifetime: u64,
    count: u64,
    start: Vec<f64>,
    /// Recurrent state before consuming `input`.
    hidden_before: Hidden,
    input: Vec<f64>,
    /// Belief after consuming `input`.
    belief: Option<LearnedBelief>,
    ret: f64,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub planner: PlannerConfig,
    pub env: EnvSpec,
    pub model: Model,
    pub opt: AdamW,
    pub replay: Replay,
    pub audit: BeliefAudit,
    pub iteration: usize,
    pub env_steps: u64,
    /// Returns of every finished lifetime, in completion order.
    pub returns: Vec<f64>,
    slots: Vec<Slot>,
    root: RngStream,
}

impl Trainer {
    pub fn new(env: &EnvSpec, model_cfg: &ModelConfig, planner: &PlannerConfig, cfg: &TrainConfig, seed: u64) -> Result<Self> {
        let model = Model::new(env, model_cfg, seed)?;
        Self::with_model(model, planner, cfg, seed)
    }

    pub fn with_model(model: Model, planner: &PlannerConfig, cfg: &TrainConfig, seed: u64) -> Result<Self> {
        let env = model.env.clone();
        env.validate().map_err(Error::Config)?;
        planner.validate().map_err(Error::Config)?;
        cfg.validate(&env).map_err(Error::Config)?;
        let root = RngStream::new(seed).split_named("trainer");
        let mut t = Trainer {
            cfg: cfg.clone(),
            planner: planner.clone(),
            opt: AdamW::new(cfg.optimizer()),
            replay: Replay::new(cfg.parallel_envs, cfg.max_age * cfg.unroll),
            audit: BeliefAudit::default(),
            iteration: 0,
            env_steps: 0,
            returns: Vec::new(),
            slots: Vec::new(),
            env,
            model,
            root,
        };
        t.slots = (0..cfg.parallel_envs).map(|i| t.fresh_slot(i, 0)).collect();
        t.refresh_beliefs()?;
        Ok(t)
    }

    fn fresh_slot(&self, index: usize, count: u64) -> Slot {
        let mut rng = self.root.split_named("tasks").split(index as u64).split(count);
        let env = MetaEnv::new(self.env.clone(), &mut rng);
        let obs = env.obs().to_vec();
        Slot {
            lifetime: count * self.cfg.parallel_envs as u64 + index as u64,
            count,
            start: obs.clone(),
            hidden_before: self.model.initial_hidden(),
            input: self.model.step_input(None, &obs),
            belief: None,
            ret: 0.0,
            env,
        }
    }

    /// Consumes the pending input of every slot that lacks a belief.
    fn refresh_beliefs(&mut self) -> Result<()> {
        let todo: Vec<usize> = (0..self.slots.len()).filter(|&i| self.slots[i].belief.is_none()).collect();
        let hidden: Vec<&Hidden> = todo.iter().map(|&i| &self.slots[i].hidden_before).collect();
        let inputs: Vec<Vec<f64>> = todo.iter().map(|&i| self.slots[i].input.clone()).collect();
        let (h, phi) = self.model.infer_step(&hidden, &inputs)?;
        for ((i, hidden), phi) in todo.into_iter().zip(h).zip(phi) {
            self.slots[i].belief = Some(LearnedBelief { hidden, phi });
        }
        Ok(())
    }

    fn iteration_rng(&self, label: &str) -> RngStream {
        self.root.split_named(label).split(self.iteration as u64)
    }

    /// Runs `unroll` environment steps and returns the lifetime returns
    /// finished along the way and the mean normalized ESS.
    fn collect(&mut self) -> Result<(Vec<f64>, f64)> {
        let plan_rng = self.iteration_rng("plan");
        let act_rng = self.iteration_rng("act");
        let mut finished = Vec::new();
        let mut ess_sum = 0.0;
        let mut ess_n = 0usize;
        for step in 0..self.cfg.unroll {
            let roots: Vec<(LearnedState, LearnedBelief)> = self
                .slots
                .iter()
                .map(|s| {
                    let state = LearnedState::new(s.env.obs().to_vec(), s.env.t, s.start.clone());
                    (state, s.belief.clone().expect("belief is refreshed before planning"))
                })
                .collect();
            let rngs: Vec<RngStream> = (0..self.slots.len()).map(|i| plan_rng.split(step as u64).split(i as u64)).collect();
            let learned = LearnedModel { model: &self.model };
            let plans = plan_batch(&learned, &roots, &self.planner, &rngs)?;
            for (i, plan) in plans.into_iter().enumerate() {
                let mut rng = act_rng.split(step as u64).split(i as u64);
                let weights: Vec<f64> = plan.samples.iter().map(|s| s.1).collect();
                let action: Action = plan.samples[sample_index(&weights, &mut rng)].0.clone();
                ess_sum += plan.ess.iter().sum::<f64>() / (plan.ess.len().max(1) * self.planner.particles) as f64;
                ess_n += 1;
                if let Some(r) = self.step_slot(i, action, plan.policy, plan.value)? {
                    finished.push(r);
                }
            }
            self.refresh_beliefs()?;
        }
        Ok((finished, if ess_n > 0 { ess_sum / ess_n as f64 } else { 0.0 }))
    }

    /// Acts in slot `i`, stores the step, and prepares the next belief
    /// input. Returns the lifetime return when the lifetime ends.
    fn step_slot(&mut self, i: usize, action: Action, target: Vec<(Action, f64)>, value: f64) -> Result<Option<f64>> {
        let iteration = self.iteration;
        let slot = &mut self.slots[i];
        let belief = slot.belief.take().expect("belief is refreshed before acting");
        let features = slot.env.features();
        let offset = slot.env.t;
        let out = slot.env.step(&action);
        self.env_steps += 1;
        slot.ret += out.reward;
        let carried = belief.hidden;
        let entry = ReplayEntry {
            env_index: i,
            lifetime: slot.lifetime,
            offset,
            input: std::mem::take(&mut slot.input),
            features,
            action: action.clone(),
            reward: out.reward,
            next_obs: out.next_obs.clone(),
            inner_done: out.inner_done,
            meta_done: out.meta_done,
            hidden: std::mem::replace(&mut slot.hidden_before, carried.clone()),
            cached_at: iteration,
            target,
            value_estimate: value,
            td_target: 0.0,
        };
        self.replay.push(entry);

        let finished = if out.meta_done {
            let (ret, count) = (slot.ret, slot.count + 1);
            self.slots[i] = self.fresh_slot(i, count);
            Some(ret)
        } else {
            slot.input = self.model.step_input(Some((&action, out.reward, out.inner_done)), &out.obs);
            None
        };
        self.audit_step(i, &carried, out.inner_done, out.meta_done);
        Ok(finished)
    }

    /// Checks from the slot's state alone that the belief was reset exactly
    /// at a meta reset and carried over unchanged otherwise.
    fn audit_step(&mut self, i: usize, carried: &Hidden, inner_done: bool, meta_done: bool) {
        let slot = &self.slots[i];
        let a = &mut self.audit;
        a.steps += 1;
        let reset = slot.env.t == 0
            && slot.hidden_before == self.model.initial_hidden()
            && slot.input == self.model.step_input(None, slot.env.obs());
        let continued = slot.hidden_before == *carried;
        if meta_done {
            a.meta_resets += 1;
        }
        if reset {
            a.belief_resets += 1;
        }
        if inner_done && !meta_done {
            a.inner_resets += 1;
            if continued {
                a.preserved_across_inner += 1;
            }
        }
        if reset != meta_done || (!meta_done && !continued) {
            a.violations += 1;
        }
    }

    /// TD(λ) targets over each environment's stored trajectory.
    fn update_targets(&mut self) -> Result<()> {
        let feats: Vec<Vec<f64>> = self.slots.iter().map(|s| s.env.features()).collect();
        let z: Vec<Vec<f64>> = self.slots.iter().map(|s| s.belief.as_ref().expect("belief").phi.mean.clone()).collect();
        let boot = self.model.values(&feats, &z)?;
        for (ring, b) in self.replay.rings.iter_mut().zip(boot) {
            let rewards: Vec<f64> = ring.iter().map(|e| e.reward).collect();
            let values: Vec<f64> = ring.iter().map(|e| e.value_estimate).collect();
            let done: Vec<bool> = ring.iter().map(|e| e.meta_done).collect();
            let g = td_lambda_targets(&rewards, &values, &done, b, self.cfg.discount, self.cfg.td_lambda);
            for (e, t) in ring.iter_mut().zip(g) {
                e.td_target = t;
            }
        }
        Ok(())
    }

    /// Recomputes cached states that are older than `max_age / 2`, running
    /// the inference network from the earliest retained step of the
    /// lifetime.
    fn refresh_stale(&mut self, w: &WindowRef) -> Result<()> {
        let now = self.iteration;
        let limit = self.cfg.max_age / 2;
        let ring = &self.replay.rings[w.env];
        let start = &ring[w.start];
        if start.offset == 0 || now - start.cached_at <= limit {
            return Ok(());
        }
        let mut first = w.start;
        while first > 0 && ring[first - 1].lifetime == start.lifetime {
            first -= 1;
        }
        let init = if ring[first].offset == 0 { None } else { Some(ring[first].hidden.clone()) };
        let inputs: Vec<Vec<f64>> = (first..w.start).map(|j| ring[j].input.clone()).collect();
        let states = self.model.infer_sequences(&[init.as_ref()], &[inputs])?.remove(0);
        let ring = &mut self.replay.rings[w.env];
        for (j, (h, _)) in (first + 1..=w.start).zip(states) {
            ring[j].hidden = h;
            ring[j].cached_at = now;
        }
        Ok(())
    }

    /// One gradient step on a freshly sampled minibatch.
    fn sgd_step(&mut self, windows: &[WindowRef], rng: &mut RngStream) -> Result<(f64, LossParts, f64)> {
        let u = self.cfg.unroll_window;
        let count = (self.cfg.minibatch / u).max(1);
        let mut picked = self.replay.sample_windows(windows, count, rng);
        picked.sort_by_key(|w| w.burn);
        for w in &picked {
            self.refresh_stale(w)?;
        }
        let mut groups: Vec<WindowGroup> = Vec::new();
        for w in &picked {
            let entries = self.replay.window_entries(w, u);
            match groups.last_mut() {
                Some(gr) if gr.burn == w.burn => gr.windows.push(entries),
                _ => groups.push(WindowGroup { burn: w.burn, windows: vec![entries] }),
            }
        }
        let mut g = Graph::new();
        let mut noise = rng.split(0);
        let out = batch_loss(&self.model, &mut g, &self.model.params, Detach::StopGradient, &groups, &self.cfg.coefficients(), &mut noise)?;
        let loss = g.value(out.total).item()?;
        let grads = g.backward(out.total)?;
        drop(groups);
        let norm = self.opt.step(&mut self.model.params, grads);
        Ok((loss, out.parts, norm))
    }

    /// Collects one unroll and trains on the replay.
    pub fn iterate(&mut self) -> Result<(IterationMetrics, IterationTiming)> {
        let t0 = Instant::now();
        let (finished, ess) = self.collect()?;
        self.returns.extend(&finished);
        self.update_targets()?;
        let t1 = Instant::now();
        let windows = self.replay.windows(self.cfg.unroll_window, self.cfg.burn_in);
        let rng = self.iteration_rng("sgd");
        let (mut loss, mut parts, mut norm) = (0.0, LossParts::default(), 0.0);
        let mut steps = 0usize;
        if !windows.is_empty() {
            for s in 0..self.cfg.sgd_steps {
                let mut r = rng.split(s as u64);
                let (l, p, n) = self.sgd_step(&windows, &mut r)?;
                loss += l;
                parts.value += p.value;
                parts.policy += p.policy;
                parts.belief += p.belief;
                parts.entropy += p.entropy;
                norm += n;
                steps += 1;
            }
        }
        let k = steps.max(1) as f64;
        let metrics = IterationMetrics {
            iteration: self.iteration,
            env_steps: self.env_steps,
            lifetimes: finished.len(),
            mean_return: (!finished.is_empty()).then(|| finished.iter().sum::<f64>() / finished.len() as f64),
            loss: loss / k,
            parts: LossParts { value: parts.value / k, policy: parts.policy / k, belief: parts.belief / k, entropy: parts.entropy / k },
            grad_norm: norm / k,
            ess,
            audit_violations: self.audit.violations,
        };
        let timing = IterationTiming { collect: (t1 - t0).as_secs_f64(), train: t1.elapsed().as_secs_f64() };
        self.iteration += 1;
        Ok((metrics, timing))
    }
}

/// Trains for `iterations` and returns the metrics series with the final
/// trainer.
pub fn train_run(
    env: &EnvSpec,
    model_cfg: &ModelConfig,
    planner: &PlannerConfig,
    cfg: &TrainConfig,
    iterations: usize,
    seed: u64,
) -> Result<(Vec<IterationMetrics>, Trainer)> {
    let mut trainer = Trainer::new(env, model_cfg, planner, cfg, seed)?;
    let mut out = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        out.push(trainer.iterate()?.0);
    }
    Ok((out, trainer))
}

/// Finite-difference check of the full loss on a miniature model, after
/// one iteration of real interaction fills the replay. Detached terms are
/// recomputed from a fixed parameter copy so they stay constant under
/// perturbation.
pub fn full_loss_gradcheck(env: &EnvSpec, seed: u64, per_param: usize) -> Result<GradCheckReport> {
    use rand_distr::{Distribution, StandardNormal};
    let planner = PlannerConfig { particles: 4, nested: 2, depth: 2, resample_period: 1, temperature: 0.5, discount: 0.99 };
    let cfg = TrainConfig {
        minibatch: 12,
        sgd_steps: 2,
        unroll: env.horizon(),
        parallel_envs: 2,
        elbo_samples: 2,
        burn_in: 3,
        decode_window: 2,
        unroll_window: 2,
        max_age: 4,
        entropy_coef: 0.05,
        belief_entropy: 0.01,
        ..TrainConfig::for_env(env)
    };
    let mut t = Trainer::new(env, &ModelConfig::miniature(), &planner, &cfg, seed)?;
    t.iterate()?;
    // zero biases put zero-input rows exactly on the rectifier kink
    let mut rng = RngStream::new(seed).split_named("biases");
    let names: Vec<String> = t.model.params.names().filter(|n| n.ends_with(".b")).map(String::from).collect();
    for name in names {
        let p = t.model.params.get_mut(&name)?;
        for v in p.data_mut() {
            let n: f64 = StandardNormal.sample(&mut rng);
            *v = 0.3 * n;
        }
    }
    let u = cfg.unroll_window;
    let all = t.replay.windows(u, cfg.burn_in);
    let mut groups: Vec<WindowGroup> = Vec::new();
    for burn in 0..=cfg.burn_in {
        let ws: Vec<_> = all.iter().filter(|w| w.burn == burn).take(2).map(|w| t.replay.window_entries(w, u)).collect();
        if !ws.is_empty() {
            groups.push(WindowGroup { burn, windows: ws });
        }
    }
    let coef = cfg.coefficients();
    let reference = t.model.params.clone();
    param_gradcheck(
        &t.model.params,
        |g, s| Ok(batch_loss(&t.model, g, s, Detach::Reference(&reference), &groups, &coef, &mut RngStream::new(seed).split_named("noise"))?.total),
        1e-6,
        per_param,
    )
}
