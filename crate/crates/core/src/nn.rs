//! Parameterized layers shared by the model modules.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Bound, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

pub(crate) fn normal_tensor(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

/// `x·W + b` with `W` stored `in×out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, group: usize, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let std = (1.0 / fan_in as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), group, normal_tensor(rng, &[fan_in, fan_out], std));
        let bias = store.add(format!("{name}.bias"), group, Tensor::zeros(&[fan_out]));
        Linear {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let xw = g.matmul(x, p[self.weight])?;
        g.add(xw, p[self.bias])
    }
}

/// Layer normalization over the last axis with learnable gain and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(store: &mut ParamStore, group: usize, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), group, Tensor::full(&[dim], 1.0)),
            shift: store.add(format!("{name}.shift"), group, Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let n = g.layer_norm(x, LN_EPS);
        let scaled = g.mul(n, p[self.gain])?;
        g.add(scaled, p[self.shift])
    }
}

/// Position-wise two-layer network with ReLU.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, group: usize, name: &str, dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        FeedForward {
            up: Linear::new(store, group, &format!("{name}.up"), dim, hidden, rng),
            down: Linear::new(store, group, &format!("{name}.down"), hidden, dim, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let h = self.up.forward(g, p, x)?;
        let h = g.relu(h);
        self.down.forward(g, p, h)
    }
}

/// Multi-head scaled dot-product self-attention with an optional additive
/// score bias shared by all heads.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub dim: usize,
}

/// Attention output and the per-head weight matrices (`T×T` each).
pub struct AttentionOutput {
    pub out: Var,
    pub weights: Vec<Var>,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, group: usize, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::invalid(format!("model dim {dim} not divisible by {heads} heads")));
        }
        Ok(MultiHeadAttention {
            query: Linear::new(store, group, &format!("{name}.q"), dim, dim, rng),
            key: Linear::new(store, group, &format!("{name}.k"), dim, dim, rng),
            value: Linear::new(store, group, &format!("{name}.v"), dim, dim, rng),
            output: Linear::new(store, group, &format!("{name}.o"), dim, dim, rng),
            heads,
            dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, bias: Option<Var>) -> Result<AttentionOutput> {
        let q = self.query.forward(g, p, x)?;
        let k = self.key.forward(g, p, x)?;
        let v = self.value.forward(g, p, x)?;
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = g.slice(q, 1, lo, hi)?;
            let kh = g.slice(k, 1, lo, hi)?;
            let vh = g.slice(v, 1, lo, hi)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let mut scores = g.scalar_mul(scores, scale);
            if let Some(b) = bias {
                scores = g.add(scores, b)?;
            }
            let w = g.softmax(scores, 1)?;
            outs.push(g.matmul(w, vh)?);
            weights.push(w);
        }
        let cat = g.concat(&outs, 1)?;
        let out = self.output.forward(g, p, cat)?;
        Ok(AttentionOutput { out, weights })
    }
}

/// Pre-norm transformer encoder block: `x + MHA(LN(x))`, then
/// `x + FFN(LN(x))`.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub norm_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl EncoderBlock {
    pub fn new(
        store: &mut ParamStore,
        group: usize,
        name: &str,
        dim: usize,
        heads: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(EncoderBlock {
            norm_attn: LayerNorm::new(store, group, &format!("{name}.ln_attn"), dim),
            attn: MultiHeadAttention::new(store, group, &format!("{name}.attn"), dim, heads, rng)?,
            norm_ffn: LayerNorm::new(store, group, &format!("{name}.ln_ffn"), dim),
            ffn: FeedForward::new(store, group, &format!("{name}.ffn"), dim, hidden, rng),
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, bias: Option<Var>) -> Result<Var> {
        let n = self.norm_attn.forward(g, p, x)?;
        let a = self.attn.forward(g, p, n, bias)?.out;
        let x = g.add(x, a)?;
        let n = self.norm_ffn.forward(g, p, x)?;
        let f = self.ffn.forward(g, p, n)?;
        g.add(x, f)
    }
}
