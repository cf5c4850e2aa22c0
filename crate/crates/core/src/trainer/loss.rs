//! The joint training loss over batches of replay windows.
//!
//! Per loss step `k` of a window:
//!
//! ```text
//! c_v·½(V̂_k − V(f_k, sg μ_k))²
//!   + c_π·CE(q̂*_k, π(·|f_k, sg μ_k))
//!   − c_b·(−κ·KL(φ_k ‖ sg φ_{k−W}) + E_{M~φ_k} Σ_{j=k−W}^{k−1} ln p(τ_j | M) + η·H(φ_k))
//!   − c_ent·H(π(·|f_k, sg μ_k))
//! ```
//!
//! averaged over all loss steps. The prior is `N(0, I)` when fewer than
//! `W` transitions precede the step.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::replay::ReplayEntry;
use crate::autodiff::{Graph, ParamStore, Var};
use crate::belief::HALF_LN_2PI;
use crate::envs::{Action, ActionSpace};
use crate::error::{Error, Result};
use crate::models::{DecodeRow, Hidden, Model};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct LossCoefficients {
    pub value: f64,
    pub policy: f64,
    pub entropy: f64,
    pub belief: f64,
    pub belief_kl: f64,
    pub belief_entropy: f64,
    pub elbo_samples: usize,
    pub decode_window: usize,
}

/// Batch means of the unweighted loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    /// `½(V̂ − V)²`
    pub value: f64,
    /// Cross-entropy of the policy against `q̂*`.
    pub policy: f64,
    /// Belief evidence bound `L_Z` (higher is better).
    pub belief: f64,
    /// Policy entropy.
    pub entropy: f64,
}

impl LossParts {
    pub fn total(&self, c: &LossCoefficients) -> f64 {
        c.value * self.value + c.policy * self.policy - c.belief * self.belief - c.entropy * self.entropy
    }
}

/// How `sg[·]` is realized. `Reference` recomputes detached quantities
/// from a fixed parameter copy, so finite differences see them as
/// constants too.
#[derive(Clone, Copy)]
pub enum Detach<'a> {
    StopGradient,
    Reference(&'a ParamStore),
}

/// Windows sharing one burn-in length. Each window holds `burn` burn-in
/// entries followed by the loss entries.
pub struct WindowGroup<'a> {
    pub burn: usize,
    pub windows: Vec<Vec<&'a ReplayEntry>>,
}

pub struct BatchLoss {
    pub total: Var,
    pub parts: LossParts,
    pub rows: usize,
}

struct GroupLoss {
    sum: Var,
    parts: LossParts,
    rows: usize,
}

fn window_label(w: &[&ReplayEntry]) -> String {
    let e = w[0];
    format!("env {} lifetime {} offset {}", e.env_index, e.lifetime, e.offset)
}

fn non_finite<'g>(group: &'g WindowGroup<'_>) -> impl Fn(Error) -> Error + 'g {
    move |e| match e {
        Error::NonFinite { .. } => {
            Error::NonFiniteLoss(group.windows.iter().map(|w| window_label(w)).collect::<Vec<_>>().join("; "))
        }
        other => other,
    }
}

/// Builds the mean loss over all loss steps of `groups`.
pub fn batch_loss(
    model: &Model,
    g: &mut Graph,
    store: &ParamStore,
    detach: Detach,
    groups: &[WindowGroup],
    coef: &LossCoefficients,
    noise: &mut RngStream,
) -> Result<BatchLoss> {
    let mut sum: Option<Var> = None;
    let mut parts = LossParts::default();
    let mut rows = 0;
    for group in groups.iter().filter(|gr| !gr.windows.is_empty()) {
        let gl = group_loss(model, g, store, detach, group, coef, noise).map_err(non_finite(group))?;
        sum = Some(match sum {
            Some(s) => g.add(s, gl.sum)?,
            None => gl.sum,
        });
        parts.value += gl.parts.value;
        parts.policy += gl.parts.policy;
        parts.belief += gl.parts.belief;
        parts.entropy += gl.parts.entropy;
        rows += gl.rows;
    }
    let Some(sum) = sum else { return Err(Error::Config("empty loss batch".into())) };
    let n = rows as f64;
    let total = g.scale(sum, 1.0 / n)?;
    if !g.value(total).all_finite() {
        let labels: Vec<String> = groups.iter().flat_map(|gr| gr.windows.iter().map(|w| window_label(w))).collect();
        return Err(Error::NonFiniteLoss(labels.join("; ")));
    }
    parts.value /= n;
    parts.policy /= n;
    parts.belief /= n;
    parts.entropy /= n;
    Ok(BatchLoss { total, parts, rows })
}

fn group_loss(
    model: &Model,
    g: &mut Graph,
    store: &ParamStore,
    detach: Detach,
    group: &WindowGroup,
    coef: &LossCoefficients,
    noise: &mut RngStream,
) -> Result<GroupLoss> {
    let n = group.windows.len();
    let steps = group.windows[0].len();
    let burn = group.burn;
    assert!(steps > burn && group.windows.iter().all(|w| w.len() == steps));
    let d = model.latent_dim();

    let inputs: Vec<&[f64]> = group.windows.iter().flat_map(|w| w.iter().map(|e| &e.input[..])).collect();
    let x = g.constant(Tensor::from_rows(&inputs, model.input_width())?);
    let init: Vec<Option<&Hidden>> =
        group.windows.iter().map(|w| if w[0].offset == 0 { None } else { Some(&w[0].hidden) }).collect();
    let inf = model.infer_graph(g, store, x, n, steps, &init, false)?;
    let (sg_mean, sg_log_std, policy_store) = match detach {
        Detach::StopGradient => (g.stop_gradient(inf.mean)?, g.stop_gradient(inf.log_std)?, store),
        Detach::Reference(r) => {
            let x2 = g.constant(Tensor::from_rows(&inputs, model.input_width())?);
            let fixed = model.infer_graph(g, r, x2, n, steps, &init, true)?;
            (fixed.mean, fixed.log_std, r)
        }
    };

    // loss rows, window-major
    let loss_idx: Vec<usize> = (0..n).flat_map(|w| (burn..steps).map(move |k| w * steps + k)).collect();
    let loss_entries: Vec<&ReplayEntry> = group.windows.iter().flat_map(|w| w[burn..].iter().copied()).collect();
    let rows = loss_idx.len();
    let mean = g.gather_rows(inf.mean, loss_idx.clone())?;
    let log_std = g.gather_rows(inf.log_std, loss_idx.clone())?;
    let sg_mu = g.gather_rows(sg_mean, loss_idx.clone())?;
    let feats = g.constant(Tensor::from_rows(&loss_entries.iter().map(|e| &e.features[..]).collect::<Vec<_>>(), model.env.feature_dim())?);

    // value
    let v = model.value_head(g, store, feats, sg_mu, false)?;
    let vt = g.constant(Tensor::vector(loss_entries.iter().map(|e| e.td_target).collect()));
    let dv = g.sub(v, vt)?;
    let dv2 = g.square(dv)?;
    let value = g.scale(dv2, 0.5)?;

    // policy cross-entropy and entropy
    let head = model.policy_head(g, store, feats, sg_mu, false)?;
    let ce = match model.action_space() {
        ActionSpace::Discrete(na) => {
            let mut q = Tensor::zeros(&[rows, na]);
            for (r, e) in loss_entries.iter().enumerate() {
                for (a, w) in &e.target {
                    let Action::Discrete(i) = a else { return Err(Error::Shape("continuous target for a discrete policy".into())) };
                    q.data_mut()[r * na + i] += w;
                }
            }
            let q = g.constant(q);
            let lsm = g.log_softmax(head)?;
            let ql = g.mul(q, lsm)?;
            let s = g.sum_last(ql)?;
            g.neg(s)?
        }
        ActionSpace::Continuous(_) => {
            let (mut idx, mut acts, mut weights, mut seg) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            for (r, e) in loss_entries.iter().enumerate() {
                for (a, w) in &e.target {
                    idx.push(r);
                    acts.push(a.clone());
                    weights.push(*w);
                    seg.push(r);
                }
            }
            let hr = g.gather_rows(head, idx)?;
            let lp = model.policy_log_prob(g, hr, &acts)?;
            let wv = g.constant(Tensor::vector(weights));
            let wlp = g.mul(lp, wv)?;
            let s = g.segment_sum(wlp, seg, rows)?;
            g.neg(s)?
        }
    };
    let entropy = model.policy_entropy(g, head)?;

    // belief evidence bound
    let k_s = coef.elbo_samples;
    let rep: Vec<usize> = (0..rows).flat_map(|r| std::iter::repeat(r).take(k_s)).collect();
    let eps: Vec<f64> = (0..rows * k_s * d).map(|_| StandardNormal.sample(noise)).collect();
    let eps = g.constant(Tensor::matrix(rows * k_s, d, eps)?);
    let m_rep = g.gather_rows(mean, rep.clone())?;
    let s_rep = g.gather_rows(log_std, rep)?;
    let sd = g.exp(s_rep)?;
    let noise_term = g.mul(sd, eps)?;
    let z = g.add(m_rep, noise_term)?;

    let win = coef.decode_window;
    let (mut z_idx, mut dec_rows, mut dec_seg) = (Vec::new(), Vec::<DecodeRow>::new(), Vec::new());
    let mut prior_idx = Vec::with_capacity(rows);
    let mut prior_mask = Tensor::zeros(&[rows, d]);
    for (r, (w, k)) in (0..n).flat_map(|w| (burn..steps).map(move |k| (w, k))).enumerate() {
        let window = &group.windows[w];
        let first = k.saturating_sub(win);
        for kappa in 0..k_s {
            for entry in &window[first..k] {
                z_idx.push(r * k_s + kappa);
                dec_rows.push(entry.decode_row());
                dec_seg.push(r);
            }
        }
        if k >= win {
            prior_idx.push(w * steps + k - win);
            prior_mask.data_mut()[r * d..(r + 1) * d].fill(1.0);
        } else {
            prior_idx.push(w * steps);
        }
    }
    let recon = if dec_rows.is_empty() {
        g.constant(Tensor::zeros(&[rows]))
    } else {
        let zr = g.gather_rows(z, z_idx)?;
        let refs: Vec<&DecodeRow> = dec_rows.iter().collect();
        let ll = model.decode_graph(g, store, policy_store, zr, &refs, false)?;
        let s = g.segment_sum(ll, dec_seg, rows)?;
        g.scale(s, 1.0 / k_s as f64)?
    };
    let mask = g.constant(prior_mask);
    let pm = g.gather_rows(sg_mean, prior_idx.clone())?;
    let pm = g.mul(pm, mask)?;
    let ps = g.gather_rows(sg_log_std, prior_idx)?;
    let ps = g.mul(ps, mask)?;
    let kl = gaussian_kl_graph(g, mean, log_std, pm, ps)?;
    let s_sum = g.sum_last(log_std)?;
    let h_q = g.offset(s_sum, d as f64 * (0.5 + HALF_LN_2PI))?;
    let kl_term = g.scale(kl, -coef.belief_kl)?;
    let h_term = g.scale(h_q, coef.belief_entropy)?;
    let lz = g.add(kl_term, recon)?;
    let lz = g.add(lz, h_term)?;

    let a = g.scale(value, coef.value)?;
    let b = g.scale(ce, coef.policy)?;
    let c = g.scale(lz, -coef.belief)?;
    let e = g.scale(entropy, -coef.entropy)?;
    let per_row = g.add(a, b)?;
    let per_row = g.add(per_row, c)?;
    let per_row = g.add(per_row, e)?;
    let sum = g.sum(per_row)?;

    let total_of = |g: &Graph, v: Var| g.value(v).sum();
    let parts = LossParts {
        value: total_of(g, value),
        policy: total_of(g, ce),
        belief: total_of(g, lz),
        entropy: total_of(g, entropy),
    };
    Ok(GroupLoss { sum, parts, rows })
}

/// `[R]` closed-form `KL(N(mq, e^{sq}) ‖ N(mp, e^{sp}))` summed over the
/// last axis.
pub fn gaussian_kl_graph(g: &mut Graph, mq: Var, sq: Var, mp: Var, sp: Var) -> Result<Var> {
    let ds = g.sub(sp, sq)?;
    let r = g.sub(sq, sp)?;
    let r2 = g.scale(r, 2.0)?;
    let ratio = g.exp(r2)?;
    let dm = g.sub(mq, mp)?;
    let dm2 = g.square(dm)?;
    let sp2 = g.scale(sp, -2.0)?;
    let inv = g.exp(sp2)?;
    let m_term = g.mul(dm2, inv)?;
    let t = g.add(ratio, m_term)?;
    let t = g.offset(t, -1.0)?;
    let t = g.scale(t, 0.5)?;
    let t = g.add(ds, t)?;
    g.sum_last(t)
}
