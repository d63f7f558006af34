//! Signer removal branch: statistics pooling, signer embedding and a signer
//! classifier attached to the backbone through a gradient reversal node.

use rand::Rng;

use crate::autodiff::{Bound, CustomOp, Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::visual::global_avg_pool;

pub const DEFAULT_LAMBDA: f64 = 0.75;
pub const STD_EPS: f64 = 1e-8;

fn sorted_sum(mut v: Vec<f64>) -> f64 {
    v.sort_unstable_by(f64::total_cmp);
    v.iter().sum()
}

struct StatsPool {
    frames: usize,
    channels: usize,
}

impl CustomOp for StatsPool {
    fn name(&self) -> &'static str {
        "statistics_pooling"
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, out_grad: &[f64]) -> Vec<Vec<f64>> {
        let (t, c) = (self.frames, self.channels);
        let x = inputs[0].data();
        let y = output.data();
        let mut dx = vec![0.0; t * c];
        for ch in 0..c {
            let (mean, std) = (y[ch], y[c + ch]);
            let (gm, gs) = (out_grad[ch], out_grad[c + ch]);
            for f in 0..t {
                let dev = x[f * c + ch] - mean;
                dx[f * c + ch] = gm / t as f64 + gs * dev / (t as f64 * std);
            }
        }
        vec![dx]
    }
}

/// `T×C` → `[2C]`: temporal mean then population std (eps inside the root).
/// Sums run in sorted order so the result is exactly invariant to frame
/// permutations.
pub fn statistics_pooling(g: &mut Graph, f: Var) -> Result<Var> {
    let s = g.shape(f).to_vec();
    if s.len() != 2 {
        return Err(Error::invalid(format!("statistics pooling expects T×C, got {s:?}")));
    }
    let (t, c) = (s[0], s[1]);
    let x = g.data(f);
    let mut out = vec![0.0; 2 * c];
    for ch in 0..c {
        let col: Vec<f64> = (0..t).map(|i| x[i * c + ch]).collect();
        let mean = sorted_sum(col.clone()) / t as f64;
        let var = sorted_sum(col.iter().map(|v| (v - mean) * (v - mean)).collect()) / t as f64;
        out[ch] = mean;
        out[c + ch] = (var + STD_EPS).sqrt();
    }
    let out = Tensor::new(&[2 * c], out)?;
    Ok(g.custom(&[f], out, Box::new(StatsPool { frames: t, channels: c })))
}

/// `-log softmax(logits)[label]` for a single row of logits.
pub fn signer_loss(g: &mut Graph, logits: Var, label: usize) -> Result<Var> {
    let n = g.value(logits).numel();
    if label >= n {
        return Err(Error::invalid(format!("signer label {label} out of range for {n} signers")));
    }
    let row = g.reshape(logits, &[1, n])?;
    let lp = g.log_softmax(row, 1)?;
    let picked = g.select(lp, &[label])?;
    Ok(g.neg(picked))
}

#[derive(Clone, Debug)]
pub struct SignerRemoval {
    pub fc1: Linear,
    pub fc2: Linear,
    pub classifier: Linear,
    pub channels: usize,
    pub num_signers: usize,
}

pub struct SrmOutput {
    pub loss: Var,
    /// Signer posterior `[N_sig]`.
    pub probs: Var,
    /// Signer embedding `[C]`.
    pub embedding: Var,
}

impl SignerRemoval {
    pub fn new(store: &mut ParamStore, group: usize, channels: usize, num_signers: usize, rng: &mut impl Rng) -> Result<Self> {
        if num_signers < 2 {
            return Err(Error::invalid(format!("signer classifier needs at least 2 signers, got {num_signers}")));
        }
        Ok(SignerRemoval {
            fc1: Linear::new(store, group, "srm.fc1", 2 * channels, channels, rng),
            fc2: Linear::new(store, group, "srm.fc2", channels, channels, rng),
            classifier: Linear::new(store, group, "srm.classifier", channels, num_signers, rng),
            channels,
            num_signers,
        })
    }

    /// `ReLU(W2 ReLU(W1 stats + b1) + b2)` on a `[2C]` statistics vector.
    pub fn signer_embedding(&self, g: &mut Graph, p: &Bound, stats: Var) -> Result<Var> {
        let x = g.reshape(stats, &[1, 2 * self.channels])?;
        let h = self.fc1.forward(g, p, x)?;
        let h = g.relu(h);
        let h = self.fc2.forward(g, p, h)?;
        let h = g.relu(h);
        g.reshape(h, &[self.channels])
    }

    /// Runs the branch on tapped `T×C×J×K` maps. With `reverse` the pooled
    /// features pass through a unit gradient reversal; the loss weight λ is
    /// applied by the caller.
    pub fn forward(&self, g: &mut Graph, p: &Bound, tap: Var, label: usize, reverse: bool) -> Result<SrmOutput> {
        let s = g.shape(tap).to_vec();
        if s.len() != 4 || s[1] != self.channels {
            return Err(Error::Shape {
                op: "srm_branch",
                lhs: s,
                rhs: vec![0, self.channels, 0, 0],
            });
        }
        let pooled = global_avg_pool(g, tap)?;
        let x = if reverse { g.gradient_reversal(pooled, 1.0) } else { pooled };
        let stats = statistics_pooling(g, x)?;
        let embedding = self.signer_embedding(g, p, stats)?;
        let logits = self.features_to_logits(g, p, embedding)?;
        let loss = signer_loss(g, logits, label)?;
        let probs = g.softmax(logits, 0)?;
        Ok(SrmOutput { loss, probs, embedding })
    }

    fn features_to_logits(&self, g: &mut Graph, p: &Bound, embedding: Var) -> Result<Var> {
        let row = g.reshape(embedding, &[1, self.channels])?;
        let l = self.classifier.forward(g, p, row)?;
        g.reshape(l, &[self.num_signers])
    }
}
