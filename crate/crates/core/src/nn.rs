//! Parameterized building blocks on top of the autodiff graph.

use rand::Rng;

use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::Result;
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.01;

/// Binds `name` from `store`, optionally with its gradient blocked.
pub fn bind(g: &mut Graph, store: &ParamStore, name: &str, frozen: bool) -> Result<Var> {
    if frozen {
        g.frozen_param(store, name)
    } else {
        g.param(store, name)
    }
}

fn glorot(rng: &mut RngStream, fan_in: usize, fan_out: usize, gain: f64) -> Tensor {
    let limit = gain * (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-limit..=limit)).collect();
    Tensor::matrix(fan_in, fan_out, data).expect("glorot shape")
}

/// Affine map `x W + b` over rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn init(store: &mut ParamStore, rng: &mut RngStream, name: &str, in_dim: usize, out_dim: usize, gain: f64) -> Self {
        store.insert(format!("{name}.w"), glorot(rng, in_dim, out_dim, gain));
        store.insert(format!("{name}.b"), Tensor::zeros(&[out_dim]));
        Linear { name: name.to_string(), in_dim, out_dim }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, frozen: bool) -> Result<Var> {
        let w = bind(g, store, &format!("{}.w", self.name), frozen)?;
        let b = bind(g, store, &format!("{}.b", self.name), frozen)?;
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }
}

/// Stack of `Linear -> LeakyReLU -> LayerNorm(gain, bias)` blocks and a
/// final linear projection.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub name: String,
    hidden: Vec<Linear>,
    out: Linear,
}

impl Mlp {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut RngStream,
        name: &str,
        in_dim: usize,
        widths: &[usize],
        out_dim: usize,
        out_gain: f64,
    ) -> Self {
        let mut hidden = Vec::new();
        let mut d = in_dim;
        for (i, &w) in widths.iter().enumerate() {
            hidden.push(Linear::init(store, rng, &format!("{name}.l{i}"), d, w, 1.0));
            store.insert(format!("{name}.ln{i}.g"), Tensor::full(&[w], 1.0));
            store.insert(format!("{name}.ln{i}.b"), Tensor::zeros(&[w]));
            d = w;
        }
        let out = Linear::init(store, rng, &format!("{name}.out"), d, out_dim, out_gain);
        Mlp { name: name.to_string(), hidden, out }
    }

    pub fn in_dim(&self) -> usize {
        self.hidden.first().unwrap_or(&self.out).in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out.out_dim
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, frozen: bool) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.hidden.iter().enumerate() {
            h = layer.forward(g, store, h, frozen)?;
            h = g.leaky_relu(h, LEAKY_SLOPE)?;
            h = affine_layer_norm(g, store, &format!("{}.ln{i}", self.name), h, frozen)?;
        }
        self.out.forward(g, store, h, frozen)
    }
}

/// Layer normalization followed by a learned per-feature gain and bias
/// stored as `{prefix}.g` and `{prefix}.b`.
pub fn affine_layer_norm(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var, frozen: bool) -> Result<Var> {
    let n = g.layer_norm(x)?;
    let gain = bind(g, store, &format!("{prefix}.g"), frozen)?;
    let bias = bind(g, store, &format!("{prefix}.b"), frozen)?;
    let y = g.mul(n, gain)?;
    g.add(y, bias)
}

/// Two stride-2, 3x3, padding-1 convolutions over a single-channel square
/// image, each followed by a leaky rectifier. Convolutions are lowered to
/// a constant 0/1 patch-extraction matrix, a matmul and a reshape.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvNet {
    pub name: String,
    side: usize,
    channels: usize,
    layers: Vec<ConvLayer>,
}

#[derive(Clone, Debug, PartialEq)]
struct ConvLayer {
    in_side: usize,
    in_ch: usize,
    out_side: usize,
    /// `[in_side² · in_ch, out_side² · 9 · in_ch]`
    patches: Tensor,
}

fn conv_out_side(side: usize) -> usize {
    (side + 2 - 3) / 2 + 1
}

fn patch_matrix(in_side: usize, in_ch: usize) -> (usize, Tensor) {
    let out_side = conv_out_side(in_side);
    let patch = 9 * in_ch;
    let cols = out_side * out_side * patch;
    let mut m = Tensor::zeros(&[in_side * in_side * in_ch, cols]);
    for oy in 0..out_side {
        for ox in 0..out_side {
            let p = oy * out_side + ox;
            for ky in 0..3 {
                for kx in 0..3 {
                    let iy = (2 * oy + ky) as isize - 1;
                    let ix = (2 * ox + kx) as isize - 1;
                    if iy < 0 || ix < 0 || iy >= in_side as isize || ix >= in_side as isize {
                        continue;
                    }
                    for c in 0..in_ch {
                        let row = ((iy as usize) * in_side + ix as usize) * in_ch + c;
                        let col = p * patch + (ky * 3 + kx) * in_ch + c;
                        m.data_mut()[row * cols + col] = 1.0;
                    }
                }
            }
        }
    }
    (out_side, m)
}

impl ConvNet {
    pub fn init(store: &mut ParamStore, rng: &mut RngStream, name: &str, side: usize, channels: usize) -> Self {
        let mut layers = Vec::new();
        let (mut s, mut c) = (side, 1);
        for i in 0..2 {
            let (out_side, patches) = patch_matrix(s, c);
            store.insert(format!("{name}.c{i}.w"), glorot(rng, 9 * c, channels, 1.0));
            store.insert(format!("{name}.c{i}.b"), Tensor::zeros(&[channels]));
            layers.push(ConvLayer { in_side: s, in_ch: c, out_side, patches });
            s = out_side;
            c = channels;
        }
        ConvNet { name: name.to_string(), side, channels, layers }
    }

    pub fn out_dim(&self) -> usize {
        let s = self.layers.last().map_or(self.side, |l| l.out_side);
        s * s * self.channels
    }

    /// `x: [B, side²]` → `[B, out_dim]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, frozen: bool) -> Result<Var> {
        let batch = g.shape(x)[0];
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            debug_assert_eq!(g.shape(h)[1], layer.in_side * layer.in_side * layer.in_ch);
            let sel = g.constant(layer.patches.clone());
            let p = g.matmul(h, sel)?;
            let positions = layer.out_side * layer.out_side;
            let p = g.reshape(p, &[batch * positions, 9 * layer.in_ch])?;
            let w = bind(g, store, &format!("{}.c{i}.w", self.name), frozen)?;
            let b = bind(g, store, &format!("{}.c{i}.b", self.name), frozen)?;
            let y = g.matmul(p, w)?;
            let y = g.add(y, b)?;
            let y = g.leaky_relu(y, LEAKY_SLOPE)?;
            h = g.reshape(y, &[batch, positions * self.channels])?;
        }
        Ok(h)
    }
}
