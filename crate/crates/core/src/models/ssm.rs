//! Diagonal linear state-space layer.
//!
//! `x_t = A ⊙ x_{t-1} + u_t B + c` with `A = exp(-exp(a))`, followed by a
//! residual readout `y_t = LN(u_t + leaky(x_t W + b))`. Sequences are
//! processed with a parallel prefix scan; a single step is a scan of
//! length one, so both modes share every operation.

use rand::Rng;

use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::nn::{affine_layer_norm, bind, Linear, LEAKY_SLOPE};
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub const DECAY_MIN: f64 = 0.5;
pub const DECAY_MAX: f64 = 0.95;

#[derive(Clone, Debug, PartialEq)]
pub struct SsmLayer {
    pub name: String,
    pub model_dim: usize,
    pub state_dim: usize,
    input: Linear,
    readout: Linear,
}

impl SsmLayer {
    pub fn init(store: &mut ParamStore, rng: &mut RngStream, name: &str, model_dim: usize, state_dim: usize) -> Self {
        let a: Vec<f64> = (0..state_dim)
            .map(|_| {
                let decay: f64 = rng.gen_range(DECAY_MIN..DECAY_MAX);
                (-decay.ln()).ln()
            })
            .collect();
        store.insert(format!("{name}.a"), Tensor::vector(a));
        store.insert(format!("{name}.h0"), Tensor::zeros(&[state_dim]));
        store.insert(format!("{name}.ln.g"), Tensor::full(&[model_dim], 1.0));
        store.insert(format!("{name}.ln.b"), Tensor::zeros(&[model_dim]));
        let input = Linear::init(store, rng, &format!("{name}.in"), model_dim, state_dim, 1.0);
        let readout = Linear::init(store, rng, &format!("{name}.out"), state_dim, model_dim, 1.0);
        SsmLayer { name: name.to_string(), model_dim, state_dim, input, readout }
    }

    /// `A = exp(-exp(a))`, shape `[N]`.
    pub fn decay(&self, g: &mut Graph, store: &ParamStore, frozen: bool) -> Result<Var> {
        let a = bind(g, store, &format!("{}.a", self.name), frozen)?;
        let e = g.exp(a)?;
        let n = g.neg(e)?;
        g.exp(n)
    }

    /// Learned initial state broadcast to `[batch, N]`.
    pub fn initial_state(&self, g: &mut Graph, store: &ParamStore, batch: usize, frozen: bool) -> Result<Var> {
        let h0 = bind(g, store, &format!("{}.h0", self.name), frozen)?;
        let h0 = g.reshape(h0, &[1, self.state_dim])?;
        g.gather_rows(h0, vec![0; batch])
    }

    /// `u: [B·T, D]` in batch-major row order, `init: [B, N]`.
    /// Returns outputs `[B·T, D]` and states `[B·T, N]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        u: Var,
        batch: usize,
        steps: usize,
        init: Var,
        frozen: bool,
    ) -> Result<(Var, Var)> {
        let us = g.shape(u).to_vec();
        if us != [batch * steps, self.model_dim] {
            return Err(Error::Shape(format!(
                "{}: expected input [{}, {}], got {us:?}",
                self.name,
                batch * steps,
                self.model_dim
            )));
        }
        if g.shape(init) != [batch, self.state_dim] {
            return Err(Error::Shape(format!(
                "{}: expected state [{batch}, {}], got {:?}",
                self.name,
                self.state_dim,
                g.shape(init)
            )));
        }
        let decay = self.decay(g, store, frozen)?;
        let drive = self.input.forward(g, store, u, frozen)?;
        let drive = g.reshape(drive, &[batch, steps, self.state_dim])?;
        let x = g.linear_scan(decay, drive, init)?;
        let x = g.reshape(x, &[batch * steps, self.state_dim])?;
        let y = self.readout.forward(g, store, x, frozen)?;
        let y = g.leaky_relu(y, LEAKY_SLOPE)?;
        let y = g.add(u, y)?;
        let y = affine_layer_norm(g, store, &format!("{}.ln", self.name), y, frozen)?;
        Ok((y, x))
    }
}
