//! Sentence embedding extractor and the triplet consistency loss.

use rand::Rng;

use crate::autodiff::{Bound, Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::nn::{normal_tensor, EncoderBlock};
use crate::sequential::DepthwiseTcn;

pub const DEFAULT_MARGIN: f64 = 2.0;
pub const SEE_LR_SCALE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct SeeConfig {
    pub dim: usize,
    pub heads: usize,
    pub max_len: usize,
    pub dtcn_kernel: usize,
    pub ffn_hidden: usize,
}

/// Shared extractor: `[SEN]` token, learnable positions, a DTCN residual and
/// one encoder block.
#[derive(Clone, Debug)]
pub struct SentenceEmbedding {
    pub config: SeeConfig,
    pub sen_token: ParamId,
    pub pos_embed: ParamId,
    pub dtcn: DepthwiseTcn,
    pub encoder: EncoderBlock,
}

impl SentenceEmbedding {
    pub fn new(config: SeeConfig, store: &mut ParamStore, group: usize, rng: &mut impl Rng) -> Result<Self> {
        let d = config.dim;
        if config.max_len == 0 {
            return Err(Error::invalid("positional table needs at least one frame"));
        }
        let sen_token = store.add("see.sen", group, normal_tensor(rng, &[1, d], 0.02));
        let pos_embed = store.add("see.pos", group, normal_tensor(rng, &[config.max_len + 1, d], 0.02));
        let dtcn = DepthwiseTcn::new(store, group, "see.dtcn", d, config.dtcn_kernel, rng);
        let encoder = EncoderBlock::new(store, group, "see.enc", d, config.heads, config.ffn_hidden, rng)?;
        Ok(SentenceEmbedding {
            config,
            sen_token,
            pos_embed,
            dtcn,
            encoder,
        })
    }

    /// `T×d` features → `[d]` sentence embedding.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let t = g.shape(x)[0];
        if t > self.config.max_len {
            return Err(Error::invalid(format!(
                "sequence of {t} frames exceeds positional table of {}",
                self.config.max_len
            )));
        }
        let s = g.concat(&[p[self.sen_token], x], 0)?;
        let pos = g.slice(p[self.pos_embed], 0, 0, t + 1)?;
        let s = g.add(s, pos)?;
        let c = self.dtcn.forward(g, p, s)?;
        let s = g.add(s, c)?;
        let h = self.encoder.forward(g, p, s, None)?;
        let sen = g.slice(h, 0, 0, 1)?;
        g.reshape(sen, &[self.config.dim])
    }
}

/// Derangement used to pick negatives: a swap for two, a cyclic shift above.
pub fn negative_indices(batch: usize) -> Result<Vec<usize>> {
    if batch < 2 {
        return Err(Error::NoNegative(batch));
    }
    Ok((0..batch).map(|i| (i + 1) % batch).collect())
}

/// `1 − x1·x2 / (‖x1‖‖x2‖)` as a graph node.
pub fn cosine_distance(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    if g.data(a).iter().all(|&v| v == 0.0) || g.data(b).iter().all(|&v| v == 0.0) {
        return Err(Error::ZeroVector);
    }
    let ab = g.mul(a, b)?;
    let dot = g.sum(ab);
    let aa = g.mul(a, a)?;
    let na = g.sum(aa);
    let bb = g.mul(b, b)?;
    let nb = g.sum(bb);
    let nn = g.mul(na, nb)?;
    let denom = g.sqrt(nn);
    let cos = g.div(dot, denom)?;
    let neg = g.neg(cos);
    Ok(g.add_scalar(neg, 1.0))
}

/// Plain cosine distance on slices.
pub fn cosine_distance_values(a: &[f64], b: &[f64]) -> Result<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok(1.0 - dot / (na * nb).sqrt())
}

/// `max{d(anchor, positive) − d(anchor, negative) + α, 0}`.
pub fn sec_loss(g: &mut Graph, anchor: Var, positive: Var, negative: Var, margin: f64) -> Result<Var> {
    let dp = cosine_distance(g, anchor, positive)?;
    let dn = cosine_distance(g, anchor, negative)?;
    let diff = g.sub(dp, dn)?;
    let shifted = g.add_scalar(diff, margin);
    Ok(g.relu(shifted))
}

/// Mean triplet loss over a batch of paired visual/sequential embeddings.
pub fn batch_sec_loss(g: &mut Graph, visual: &[Var], sequential: &[Var], margin: f64) -> Result<Var> {
    if visual.len() != sequential.len() {
        return Err(Error::invalid("visual and sequential embedding counts differ"));
    }
    let neg = negative_indices(visual.len())?;
    let mut total = None;
    for (i, &j) in neg.iter().enumerate() {
        let l = sec_loss(g, visual[i], sequential[i], sequential[j], margin)?;
        total = Some(match total {
            None => l,
            Some(t) => g.add(t, l)?,
        });
    }
    let total = total.expect("batch of at least two");
    Ok(g.scalar_mul(total, 1.0 / visual.len() as f64))
}
