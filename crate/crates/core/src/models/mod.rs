//! Learned components: the recurrent belief-inference network, the
//! belief-conditioned policy and value heads, and the reward and state
//! decoders.
//!
//! Inference input at lifetime step `t` is the previous action, previous
//! reward, current observation and previous inner-done flag (zeros at the
//! start of a lifetime). The belief after that input is `φ_t`.

pub mod policy;
pub mod ssm;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Var};
use crate::belief::{BeliefParams, LOG_STD_MAX, LOG_STD_MIN};
use crate::envs::{Action, ActionSpace, EnvSpec};
use crate::error::{Error, Result};
use crate::nn::{ConvNet, Linear, Mlp};
use crate::rng::RngStream;
use crate::tensor::{log_tanh_jacobian, Tensor};
pub use policy::{PolicyDist, POLICY_LOG_STD_MAX, POLICY_LOG_STD_MIN};
pub use ssm::SsmLayer;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Dimension of the latent task variable.
    pub latent_dim: usize,
    /// Hidden widths of the action, reward and observation embedders.
    pub embed_widths: Vec<usize>,
    pub embed_dim: usize,
    pub model_dim: usize,
    pub state_dim: usize,
    pub ssm_layers: usize,
    /// Hidden widths of the policy, value and decoder heads.
    pub head_widths: Vec<usize>,
    pub conv_channels: usize,
    /// Fixed standard deviation of the reward decoder.
    pub reward_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            latent_dim: 32,
            embed_widths: vec![128, 64],
            embed_dim: 32,
            model_dim: 64,
            state_dim: 64,
            ssm_layers: 4,
            head_widths: vec![128, 64],
            conv_channels: 4,
            reward_scale: 0.1,
        }
    }
}

impl ModelConfig {
    /// A model small enough for finite-difference checks (all widths <= 8).
    pub fn miniature() -> Self {
        ModelConfig {
            latent_dim: 3,
            embed_widths: vec![4],
            embed_dim: 3,
            model_dim: 4,
            state_dim: 3,
            ssm_layers: 2,
            head_widths: vec![5],
            conv_channels: 2,
            reward_scale: 0.1,
        }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        let positive = [
            ("model.latent_dim", self.latent_dim),
            ("model.embed_dim", self.embed_dim),
            ("model.model_dim", self.model_dim),
            ("model.state_dim", self.state_dim),
            ("model.ssm_layers", self.ssm_layers),
            ("model.conv_channels", self.conv_channels),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(format!("{name} must be >= 1"));
            }
        }
        if self.embed_widths.iter().chain(&self.head_widths).any(|w| *w == 0) {
            return Err("model widths must be >= 1".into());
        }
        if !(self.reward_scale > 0.0 && self.reward_scale.is_finite()) {
            return Err("model.reward_scale must be > 0".into());
        }
        Ok(())
    }
}

/// Per-layer recurrent state of one sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hidden {
    pub layers: Vec<Vec<f64>>,
}

/// Graph handles produced by the inference network.
pub struct Inference {
    /// `[B·T, d_M]`, batch-major.
    pub mean: Var,
    pub log_std: Var,
    /// Per-layer states after the last step, `[B, N]`.
    pub finals: Vec<Var>,
}

/// One observed or imagined transition to decode.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeRow {
    pub features: Vec<f64>,
    pub action: Action,
    pub reward: f64,
    /// Observation right after the action (before any inner reset).
    pub next_obs: Vec<f64>,
}

#[derive(Clone, Debug)]
struct Nets {
    act_embed: Mlp,
    rew_embed: Mlp,
    obs_embed: Mlp,
    cnn: Option<ConvNet>,
    in_proj: Mlp,
    ssm: Vec<SsmLayer>,
    belief: Linear,
    policy: Mlp,
    value: Mlp,
    reward: Mlp,
    state: Option<Mlp>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub env: EnvSpec,
    pub params: ParamStore,
    nets: Nets,
}

impl Model {
    pub fn new(env: &EnvSpec, cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate().map_err(Error::Config)?;
        env.validate().map_err(Error::Config)?;
        let mut p = ParamStore::new();
        let root = RngStream::new(seed).split_named("model-init");
        let rng = |label: &str| root.split_named(label);
        let space = env.action_space();
        let (a, o, f, d) = (space.encoding_dim(), env.obs_dim(), env.feature_dim(), cfg.latent_dim);
        let ew = &cfg.embed_widths;
        let act_embed = Mlp::init(&mut p, &mut rng("act"), "embed.act", a, ew, cfg.embed_dim, 1.0);
        let rew_embed = Mlp::init(&mut p, &mut rng("rew"), "embed.rew", 1, ew, cfg.embed_dim, 1.0);
        let cnn = env.image_side().map(|side| ConvNet::init(&mut p, &mut rng("cnn"), "embed.cnn", side, cfg.conv_channels));
        let obs_in = cnn.as_ref().map_or(o, |c| c.out_dim());
        let obs_embed = Mlp::init(&mut p, &mut rng("obs"), "embed.obs", obs_in, ew, cfg.embed_dim, 1.0);
        let in_proj = Mlp::init(&mut p, &mut rng("in"), "in_proj", 3 * cfg.embed_dim + 1, &[cfg.model_dim], cfg.model_dim, 1.0);
        let ssm = (0..cfg.ssm_layers)
            .map(|i| SsmLayer::init(&mut p, &mut rng(&format!("ssm{i}")), &format!("ssm{i}"), cfg.model_dim, cfg.state_dim))
            .collect();
        let belief = Linear::init(&mut p, &mut rng("belief"), "belief", cfg.model_dim, 2 * d, 0.1);
        let hw = &cfg.head_widths;
        let policy_out = match space {
            ActionSpace::Discrete(n) => n,
            ActionSpace::Continuous(n) => 2 * n,
        };
        let policy = Mlp::init(&mut p, &mut rng("policy"), "policy", f + d, hw, policy_out, 0.01);
        let value = Mlp::init(&mut p, &mut rng("value"), "value", f + d, hw, 1, 1.0);
        let reward = Mlp::init(&mut p, &mut rng("reward"), "reward", f + a + d, hw, 1, 1.0);
        let state = env.image_side().map(|_| Mlp::init(&mut p, &mut rng("state"), "state", f + a + d, hw, o, 1.0));
        let nets = Nets { act_embed, rew_embed, obs_embed, cnn, in_proj, ssm, belief, policy, value, reward, state };
        Ok(Model { cfg: cfg.clone(), env: env.clone(), params: p, nets })
    }

    /// Same architecture with parameters taken from `params`, which must
    /// match the freshly initialized names and shapes exactly.
    pub fn with_params(env: &EnvSpec, cfg: &ModelConfig, params: ParamStore) -> Result<Self> {
        let mut m = Self::new(env, cfg, 0)?;
        if m.params.len() != params.len() {
            return Err(Error::Checkpoint(format!("expected {} parameters, found {}", m.params.len(), params.len())));
        }
        for (name, t) in m.params.iter() {
            match params.get(name) {
                Ok(p) if p.shape() == t.shape() => {}
                Ok(p) => {
                    return Err(Error::Checkpoint(format!("parameter `{name}` has shape {:?}, expected {:?}", p.shape(), t.shape())))
                }
                Err(_) => return Err(Error::Checkpoint(format!("missing parameter `{name}`"))),
            }
        }
        m.params = params;
        Ok(m)
    }

    pub fn action_space(&self) -> ActionSpace {
        self.env.action_space()
    }

    pub fn latent_dim(&self) -> usize {
        self.cfg.latent_dim
    }

    /// Width of one raw inference input row.
    pub fn input_width(&self) -> usize {
        self.action_space().encoding_dim() + 1 + self.env.obs_dim() + 1
    }

    /// Raw inference input for the current observation. `prev` holds the
    /// previous action, reward and inner-done flag, or `None` at the start
    /// of a lifetime.
    pub fn step_input(&self, prev: Option<(&Action, f64, bool)>, obs: &[f64]) -> Vec<f64> {
        let space = self.action_space();
        let mut row = Vec::with_capacity(self.input_width());
        match prev {
            Some((a, r, done)) => {
                a.encode(space, &mut row);
                row.push(r);
                row.extend_from_slice(obs);
                row.push(if done { 1.0 } else { 0.0 });
            }
            None => {
                row.extend(std::iter::repeat(0.0).take(space.encoding_dim() + 1));
                row.extend_from_slice(obs);
                row.push(0.0);
            }
        }
        row
    }

    // ---- graph builders ---------------------------------------------------

    fn embed(&self, g: &mut Graph, store: &ParamStore, x: Var, frozen: bool) -> Result<Var> {
        let (a, o) = (self.action_space().encoding_dim(), self.env.obs_dim());
        let n = &self.nets;
        let xa = g.slice(x, 0, a)?;
        let xr = g.slice(x, a, 1)?;
        let xo = g.slice(x, a + 1, o)?;
        let xd = g.slice(x, a + 1 + o, 1)?;
        let ea = n.act_embed.forward(g, store, xa, frozen)?;
        let er = n.rew_embed.forward(g, store, xr, frozen)?;
        let xo = match &n.cnn {
            Some(c) => c.forward(g, store, xo, frozen)?,
            None => xo,
        };
        let eo = n.obs_embed.forward(g, store, xo, frozen)?;
        let e = g.concat(&[ea, er, eo, xd])?;
        n.in_proj.forward(g, store, e, frozen)
    }

    /// Runs the inference network over `inputs: [B·T, input_width]`
    /// (batch-major). Sequence `b` starts from `init[b]`, or from the
    /// learned initial state when `None`.
    pub fn infer_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        inputs: Var,
        batch: usize,
        steps: usize,
        init: &[Option<&Hidden>],
        frozen: bool,
    ) -> Result<Inference> {
        assert_eq!(init.len(), batch);
        let mut u = self.embed(g, store, inputs, frozen)?;
        let mut finals = Vec::with_capacity(self.nets.ssm.len());
        let last: Vec<usize> = (0..batch).map(|b| b * steps + steps - 1).collect();
        for (l, layer) in self.nets.ssm.iter().enumerate() {
            let n = layer.state_dim;
            let learned_rows = init.iter().filter(|h| h.is_none()).count();
            let mut cached = Tensor::zeros(&[batch, n]);
            for (b, h) in init.iter().enumerate() {
                if let Some(h) = h {
                    cached.data_mut()[b * n..(b + 1) * n].copy_from_slice(&h.layers[l]);
                }
            }
            let start = if learned_rows == 0 {
                g.constant(cached)
            } else {
                let h0 = layer.initial_state(g, store, batch, frozen)?;
                let h0 = if learned_rows < batch {
                    let mut mask = Tensor::zeros(&[batch, n]);
                    for (b, h) in init.iter().enumerate() {
                        if h.is_none() {
                            mask.data_mut()[b * n..(b + 1) * n].fill(1.0);
                        }
                    }
                    let m = g.constant(mask);
                    let h0 = g.mul(h0, m)?;
                    let c = g.constant(cached);
                    g.add(h0, c)?
                } else {
                    h0
                };
                h0
            };
            let (y, x) = layer.forward(g, store, u, batch, steps, start, frozen)?;
            finals.push(g.gather_rows(x, last.clone())?);
            u = y;
        }
        let head = self.nets.belief.forward(g, store, u, frozen)?;
        let d = self.cfg.latent_dim;
        let mean = g.slice(head, 0, d)?;
        let log_std = g.slice(head, d, d)?;
        let log_std = g.clamp(log_std, LOG_STD_MIN, LOG_STD_MAX)?;
        Ok(Inference { mean, log_std, finals })
    }

    pub fn policy_head(&self, g: &mut Graph, store: &ParamStore, features: Var, z: Var, frozen: bool) -> Result<Var> {
        let x = g.concat(&[features, z])?;
        let out = self.nets.policy.forward(g, store, x, frozen)?;
        match self.action_space() {
            ActionSpace::Discrete(_) => Ok(out),
            ActionSpace::Continuous(n) => {
                let mean = g.slice(out, 0, n)?;
                let ls = g.slice(out, n, n)?;
                let ls = g.clamp(ls, POLICY_LOG_STD_MIN, POLICY_LOG_STD_MAX)?;
                g.concat(&[mean, ls])
            }
        }
    }

    /// `[R]` values.
    pub fn value_head(&self, g: &mut Graph, store: &ParamStore, features: Var, z: Var, frozen: bool) -> Result<Var> {
        let rows = g.shape(features)[0];
        let x = g.concat(&[features, z])?;
        let v = self.nets.value.forward(g, store, x, frozen)?;
        g.reshape(v, &[rows])
    }

    /// `[R, 1]` reward means.
    pub fn reward_head(&self, g: &mut Graph, store: &ParamStore, features: Var, action: Var, z: Var, frozen: bool) -> Result<Var> {
        let x = g.concat(&[features, action, z])?;
        self.nets.reward.forward(g, store, x, frozen)
    }

    /// `[R, side²]` per-tile Bernoulli logits of the next observation.
    pub fn state_head(&self, g: &mut Graph, store: &ParamStore, features: Var, action: Var, z: Var, frozen: bool) -> Result<Option<Var>> {
        match &self.nets.state {
            Some(net) => {
                let x = g.concat(&[features, action, z])?;
                Ok(Some(net.forward(g, store, x, frozen)?))
            }
            None => Ok(None),
        }
    }

    /// `[R]` log-probabilities of `actions` under policy-head output `head`.
    pub fn policy_log_prob(&self, g: &mut Graph, head: Var, actions: &[Action]) -> Result<Var> {
        let rows = actions.len();
        match self.action_space() {
            ActionSpace::Discrete(n) => {
                let mut onehot = Tensor::zeros(&[rows, n]);
                for (r, a) in actions.iter().enumerate() {
                    let Action::Discrete(i) = a else { return Err(Error::Shape("continuous action for a discrete policy".into())) };
                    onehot.data_mut()[r * n + i] = 1.0;
                }
                let lp = g.log_softmax(head)?;
                let m = g.constant(onehot);
                let picked = g.mul(lp, m)?;
                g.sum_last(picked)
            }
            ActionSpace::Continuous(n) => {
                let mut u = Vec::with_capacity(rows * n);
                let mut jac = Vec::with_capacity(rows);
                for a in actions {
                    let Action::Continuous(x) = a else { return Err(Error::Shape("discrete action for a continuous policy".into())) };
                    u.extend_from_slice(x);
                    jac.push(x.iter().map(|v| log_tanh_jacobian(*v)).sum::<f64>());
                }
                let mean = g.slice(head, 0, n)?;
                let ls = g.slice(head, n, n)?;
                let uv = g.constant(Tensor::matrix(rows, n, u)?);
                let lp = g.gaussian_log_density(uv, mean, ls)?;
                let j = g.constant(Tensor::vector(jac));
                g.sub(lp, j)
            }
        }
    }

    /// `[R]` policy entropies (pre-squash for continuous actions).
    pub fn policy_entropy(&self, g: &mut Graph, head: Var) -> Result<Var> {
        match self.action_space() {
            ActionSpace::Discrete(_) => {
                let lp = g.log_softmax(head)?;
                let p = g.softmax(head)?;
                let plp = g.mul(p, lp)?;
                let s = g.sum_last(plp)?;
                g.neg(s)
            }
            ActionSpace::Continuous(n) => {
                let ls = g.slice(head, n, n)?;
                let s = g.sum_last(ls)?;
                g.offset(s, n as f64 * (0.5 + HALF_LN_2PI))
            }
        }
    }

    fn action_matrix(&self, actions: &[Action]) -> Result<Tensor> {
        let space = self.action_space();
        let mut data = Vec::with_capacity(actions.len() * space.encoding_dim());
        for a in actions {
            a.encode(space, &mut data);
        }
        Tensor::matrix(actions.len(), space.encoding_dim(), data)
    }

    /// `[R]` transition log-likelihoods `ln p(r, s' | s, a, M) + ln π(a | s, M)`
    /// for latents `z: [R, d_M]`. Policy parameters are read from
    /// `policy_store` as constants.
    pub fn decode_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        policy_store: &ParamStore,
        z: Var,
        rows: &[&DecodeRow],
        frozen: bool,
    ) -> Result<Var> {
        let r = rows.len();
        let feats = g.constant(Tensor::from_rows(&rows.iter().map(|d| &d.features[..]).collect::<Vec<_>>(), self.env.feature_dim())?);
        let actions: Vec<Action> = rows.iter().map(|d| d.action.clone()).collect();
        let act = g.constant(self.action_matrix(&actions)?);
        let mu = self.reward_head(g, store, feats, act, z, frozen)?;
        let rew = g.constant(Tensor::matrix(r, 1, rows.iter().map(|d| d.reward).collect())?);
        let ls = g.scalar(self.cfg.reward_scale.ln());
        let mut ll = g.gaussian_log_density(rew, mu, ls)?;
        if let Some(logits) = self.state_head(g, store, feats, act, z, frozen)? {
            let y = Tensor::from_rows(&rows.iter().map(|d| &d.next_obs[..]).collect::<Vec<_>>(), self.env.obs_dim())?;
            let y = g.constant(y);
            let yl = g.mul(y, logits)?;
            let sp = g.softplus(logits)?;
            let bern = g.sub(yl, sp)?;
            let bern = g.sum_last(bern)?;
            ll = g.add(ll, bern)?;
        }
        let head = self.policy_head(g, policy_store, feats, z, true)?;
        let lp = self.policy_log_prob(g, head, &actions)?;
        g.add(ll, lp)
    }

    // ---- tensor-level evaluation --------------------------------------------

    pub fn initial_hidden(&self) -> Hidden {
        let layers = self
            .nets
            .ssm
            .iter()
            .map(|l| self.params.get(&format!("{}.h0", l.name)).expect("initial state").data().to_vec())
            .collect();
        Hidden { layers }
    }

    /// One inference step for a batch of sequences.
    pub fn infer_step(&self, hidden: &[&Hidden], inputs: &[Vec<f64>]) -> Result<(Vec<Hidden>, Vec<BeliefParams>)> {
        let b = hidden.len();
        assert_eq!(b, inputs.len());
        if b == 0 {
            return Ok((Vec::new(), Vec::new()));
        }
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(inputs, self.input_width())?);
        let init: Vec<Option<&Hidden>> = hidden.iter().map(|h| Some(*h)).collect();
        let inf = self.infer_graph(&mut g, &self.params, x, b, 1, &init, true)?;
        Ok((self.collect_hidden(&g, &inf, b), self.collect_beliefs(&g, &inf)))
    }

    /// Runs whole sequences of equal length and returns the state after
    /// every step, `[batch][step]`.
    pub fn infer_sequences(&self, init: &[Option<&Hidden>], inputs: &[Vec<Vec<f64>>]) -> Result<Vec<Vec<(Hidden, BeliefParams)>>> {
        let b = inputs.len();
        if b == 0 {
            return Ok(Vec::new());
        }
        let steps = inputs[0].len();
        // states are needed after every step, so run step by step
        let mut hidden: Vec<Hidden> = init.iter().map(|h| h.cloned().unwrap_or_else(|| self.initial_hidden())).collect();
        let mut out: Vec<Vec<(Hidden, BeliefParams)>> = vec![Vec::with_capacity(steps); b];
        for t in 0..steps {
            let rows: Vec<Vec<f64>> = inputs.iter().map(|s| s[t].clone()).collect();
            let refs: Vec<&Hidden> = hidden.iter().collect();
            let (h, phi) = self.infer_step(&refs, &rows)?;
            for (i, (hi, pi)) in h.iter().zip(phi).enumerate() {
                out[i].push((hi.clone(), pi));
            }
            hidden = h;
        }
        Ok(out)
    }

    fn collect_hidden(&self, g: &Graph, inf: &Inference, batch: usize) -> Vec<Hidden> {
        (0..batch)
            .map(|b| Hidden { layers: inf.finals.iter().map(|v| g.value(*v).row(b).to_vec()).collect() })
            .collect()
    }

    fn collect_beliefs(&self, g: &Graph, inf: &Inference) -> Vec<BeliefParams> {
        let (m, s) = (g.value(inf.mean), g.value(inf.log_std));
        (0..m.rows()).map(|r| BeliefParams::new(m.row(r).to_vec(), s.row(r).to_vec())).collect()
    }

    fn feature_latent(&self, g: &mut Graph, features: &[Vec<f64>], z: &[Vec<f64>]) -> Result<(Var, Var)> {
        let f = g.constant(Tensor::from_rows(features, self.env.feature_dim())?);
        let zv = g.constant(Tensor::from_rows(z, self.cfg.latent_dim)?);
        Ok((f, zv))
    }

    pub fn policies(&self, features: &[Vec<f64>], z: &[Vec<f64>]) -> Result<Vec<PolicyDist>> {
        if features.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let (f, zv) = self.feature_latent(&mut g, features, z)?;
        let h = self.policy_head(&mut g, &self.params, f, zv, true)?;
        let t = g.value(h);
        Ok((0..t.rows()).map(|r| PolicyDist::from_head(self.action_space(), t.row(r))).collect())
    }

    pub fn values(&self, features: &[Vec<f64>], z: &[Vec<f64>]) -> Result<Vec<f64>> {
        if features.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let (f, zv) = self.feature_latent(&mut g, features, z)?;
        let v = self.value_head(&mut g, &self.params, f, zv, true)?;
        Ok(g.value(v).data().to_vec())
    }

    pub fn reward_means(&self, features: &[Vec<f64>], actions: &[Action], z: &[Vec<f64>]) -> Result<Vec<f64>> {
        if features.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let (f, zv) = self.feature_latent(&mut g, features, z)?;
        let a = g.constant(self.action_matrix(actions)?);
        let r = self.reward_head(&mut g, &self.params, f, a, zv, true)?;
        Ok(g.value(r).data().to_vec())
    }

    /// Reward means and, for gridworlds, next-tile logits.
    pub fn outcome_heads(&self, features: &[Vec<f64>], actions: &[Action], z: &[Vec<f64>]) -> Result<(Vec<f64>, Option<Vec<Vec<f64>>>)> {
        if features.is_empty() {
            return Ok((Vec::new(), None));
        }
        let mut g = Graph::new();
        let (f, zv) = self.feature_latent(&mut g, features, z)?;
        let a = g.constant(self.action_matrix(actions)?);
        let r = self.reward_head(&mut g, &self.params, f, a, zv, true)?;
        let s = self.state_head(&mut g, &self.params, f, a, zv, true)?;
        let logits = s.map(|s| {
            let t = g.value(s);
            (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
        });
        Ok((g.value(r).data().to_vec(), logits))
    }

    pub fn decode_log_likelihoods(&self, z: &[Vec<f64>], rows: &[&DecodeRow]) -> Result<Vec<f64>> {
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let zv = g.constant(Tensor::from_rows(z, self.cfg.latent_dim)?);
        let ll = self.decode_graph(&mut g, &self.params, &self.params, zv, rows, true)?;
        Ok(g.value(ll).data().to_vec())
    }
}

#[cfg(test)]
pub(crate) mod tests;
