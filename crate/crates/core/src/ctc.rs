//! Connectionist temporal classification: loss, exhaustive oracle, and
//! greedy / prefix beam-search decoding.
//!
//! Class 0 is the blank. All probability arithmetic is in log space.

use std::collections::HashMap;

use crate::autodiff::linalg::{log_add, log_softmax_rows, log_sum_exp};
use crate::autodiff::{CustomOp, Graph, Tensor, Var};
use crate::error::{Error, Result};

pub const BLANK: usize = 0;

/// Default beam width used at inference.
pub const DEFAULT_BEAM: usize = 10;

/// Frame-level unnormalized scores, `T×(|V|+1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitsSeq {
    frames: usize,
    classes: usize,
    data: Vec<f64>,
}

impl LogitsSeq {
    pub fn new(frames: usize, classes: usize, data: Vec<f64>) -> Result<Self> {
        if frames == 0 || classes < 2 || data.len() != frames * classes {
            return Err(Error::Shape {
                op: "logits",
                lhs: vec![frames, classes],
                rhs: vec![data.len()],
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("logits".into()));
        }
        Ok(LogitsSeq {
            frames,
            classes,
            data,
        })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            [f, c] => Self::new(*f, *c, t.data().to_vec()),
            s => Err(Error::invalid(format!("logits must be 2-D, got {s:?}"))),
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn log_probs(&self) -> Vec<f64> {
        log_softmax_rows(&self.data, self.classes)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMethod {
    Greedy,
    Beam(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeResult {
    pub glosses: Vec<usize>,
    pub log_prob: f64,
    pub method: DecodeMethod,
}

/// Merges adjacent repeats, then removes blanks.
pub fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &p in path {
        if Some(p) != prev && p != BLANK {
            out.push(p);
        }
        prev = Some(p);
    }
    out
}

/// Minimum frames needed to emit `label`: one per gloss plus a separating
/// blank between adjacent repeats.
pub fn min_frames(label: &[usize]) -> usize {
    label.len() + label.windows(2).filter(|w| w[0] == w[1]).count()
}

fn check_label(label: &[usize], classes: usize) -> Result<()> {
    if let Some(&bad) = label.iter().find(|&&l| l == BLANK || l >= classes) {
        return Err(Error::invalid(format!(
            "label id {bad} outside 1..{}",
            classes - 1
        )));
    }
    Ok(())
}

/// Forward/backward variables over the blank-interleaved label.
struct Lattice {
    ext: Vec<usize>,
    alpha: Vec<f64>,
    beta: Vec<f64>,
    log_p: f64,
}

fn lattice(lp: &[f64], frames: usize, classes: usize, label: &[usize]) -> Lattice {
    let mut ext = Vec::with_capacity(2 * label.len() + 1);
    ext.push(BLANK);
    for &l in label {
        ext.push(l);
        ext.push(BLANK);
    }
    let s = ext.len();
    let ninf = f64::NEG_INFINITY;
    let y = |t: usize, k: usize| lp[t * classes + k];
    // can we jump from s-2 to s (skipping a blank)?
    let skip = |i: usize| i >= 2 && ext[i] != BLANK && ext[i] != ext[i - 2];

    let mut alpha = vec![ninf; frames * s];
    alpha[0] = y(0, ext[0]);
    if s > 1 {
        alpha[1] = y(0, ext[1]);
    }
    for t in 1..frames {
        for i in 0..s {
            let mut a = alpha[(t - 1) * s + i];
            if i >= 1 {
                a = log_add(a, alpha[(t - 1) * s + i - 1]);
            }
            if skip(i) {
                a = log_add(a, alpha[(t - 1) * s + i - 2]);
            }
            alpha[t * s + i] = a + y(t, ext[i]);
        }
    }
    let last = (frames - 1) * s;
    let log_p = if s > 1 {
        log_add(alpha[last + s - 1], alpha[last + s - 2])
    } else {
        alpha[last]
    };

    let mut beta = vec![ninf; frames * s];
    beta[last + s - 1] = y(frames - 1, ext[s - 1]);
    if s > 1 {
        beta[last + s - 2] = y(frames - 1, ext[s - 2]);
    }
    for t in (0..frames - 1).rev() {
        for i in 0..s {
            let mut b = beta[(t + 1) * s + i];
            if i + 1 < s {
                b = log_add(b, beta[(t + 1) * s + i + 1]);
            }
            if i + 2 < s && skip(i + 2) {
                b = log_add(b, beta[(t + 1) * s + i + 2]);
            }
            beta[t * s + i] = b + y(t, ext[i]);
        }
    }
    Lattice {
        ext,
        alpha,
        beta,
        log_p,
    }
}

/// `-log p(label | logits)` summed over every alignment.
pub fn ctc_loss(logits: &LogitsSeq, label: &[usize]) -> Result<f64> {
    ctc_loss_and_grad(logits, label).map(|(l, _)| l)
}

/// Loss together with its gradient w.r.t. the raw logits.
pub fn ctc_loss_and_grad(logits: &LogitsSeq, label: &[usize]) -> Result<(f64, Vec<f64>)> {
    let (frames, classes) = (logits.frames, logits.classes);
    check_label(label, classes)?;
    if min_frames(label) > frames {
        return Err(Error::Infeasible {
            frames,
            label_len: label.len(),
        });
    }
    let lp = logits.log_probs();
    let lat = lattice(&lp, frames, classes, label);
    let s = lat.ext.len();
    let mut grad: Vec<f64> = lp.iter().map(|v| v.exp()).collect();
    let mut occ = vec![f64::NEG_INFINITY; classes];
    for t in 0..frames {
        occ.iter_mut().for_each(|v| *v = f64::NEG_INFINITY);
        for i in 0..s {
            let k = lat.ext[i];
            // alpha and beta both include frame t's emission; divide once
            let v = lat.alpha[t * s + i] + lat.beta[t * s + i] - lp[t * classes + k];
            occ[k] = log_add(occ[k], v);
        }
        for k in 0..classes {
            grad[t * classes + k] -= (occ[k] - lat.log_p).exp();
        }
    }
    Ok((-lat.log_p, grad))
}

/// Exhaustive-path reference for the CTC loss; refuses more than 8 frames.
pub fn ctc_bruteforce(logits: &LogitsSeq, label: &[usize]) -> Result<f64> {
    let dist = label_log_probs(logits)?;
    Ok(-dist.get(label).copied().unwrap_or(f64::NEG_INFINITY))
}

/// Log-probability of every collapsed label sequence reachable from the
/// logits, by enumerating all `classes^T` paths.
pub fn label_log_probs(logits: &LogitsSeq) -> Result<HashMap<Vec<usize>, f64>> {
    const MAX_FRAMES: usize = 8;
    let (frames, classes) = (logits.frames, logits.classes);
    if frames > MAX_FRAMES {
        return Err(Error::invalid(format!(
            "exhaustive enumeration limited to {MAX_FRAMES} frames, got {frames}"
        )));
    }
    let lp = logits.log_probs();
    let mut terms: HashMap<Vec<usize>, Vec<f64>> = HashMap::new();
    let mut path = vec![0usize; frames];
    loop {
        let score: f64 = path.iter().enumerate().map(|(t, &k)| lp[t * classes + k]).sum();
        terms.entry(collapse(&path)).or_default().push(score);
        // odometer increment
        let mut t = frames;
        loop {
            if t == 0 {
                return Ok(terms.into_iter().map(|(k, v)| (k, log_sum_exp(&v))).collect());
            }
            t -= 1;
            path[t] += 1;
            if path[t] < classes {
                break;
            }
            path[t] = 0;
        }
    }
}

/// Best path: per-frame argmax (ties to the lowest id), then collapse.
pub fn greedy_decode(logits: &LogitsSeq) -> DecodeResult {
    let lp = logits.log_probs();
    let mut path = Vec::with_capacity(logits.frames);
    let mut score = 0.0;
    for row in lp.chunks(logits.classes) {
        let (k, v) = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (k, &v)| if v > best.1 { (k, v) } else { best });
        path.push(k);
        score += v;
    }
    DecodeResult {
        glosses: collapse(&path),
        log_prob: score,
        method: DecodeMethod::Greedy,
    }
}

/// Beam entry: a collapsed prefix together with whether the paths it holds
/// end in a blank.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
struct BeamKey {
    prefix: Vec<usize>,
    ends_blank: bool,
}

/// CTC prefix beam search.
///
/// Hypotheses are merged per (prefix, blank-ending) state, summing path
/// probabilities; the `width` best states survive each frame. The answer is
/// the prefix with the largest merged probability in the final beam. With
/// width 1 the search follows exactly the best path.
pub fn beam_decode(logits: &LogitsSeq, width: usize) -> Result<DecodeResult> {
    if width < 1 {
        return Err(Error::invalid("beam width must be at least 1"));
    }
    let classes = logits.classes;
    let lp = logits.log_probs();
    let mut beam: Vec<(BeamKey, f64)> = vec![(
        BeamKey {
            prefix: Vec::new(),
            ends_blank: true,
        },
        0.0,
    )];
    for row in lp.chunks(classes) {
        let mut next: Vec<(BeamKey, f64)> = Vec::new();
        let mut index: HashMap<BeamKey, usize> = HashMap::new();
        let mut push = |key: BeamKey, score: f64| match index.get(&key) {
            Some(&i) => next[i].1 = log_add(next[i].1, score),
            None => {
                index.insert(key.clone(), next.len());
                next.push((key, score));
            }
        };
        for (key, score) in &beam {
            for (k, &y) in row.iter().enumerate() {
                let s = score + y;
                if k == BLANK {
                    push(
                        BeamKey {
                            prefix: key.prefix.clone(),
                            ends_blank: true,
                        },
                        s,
                    );
                } else if !key.ends_blank && key.prefix.last() == Some(&k) {
                    // repeat of the last symbol without a separating blank
                    push(
                        BeamKey {
                            prefix: key.prefix.clone(),
                            ends_blank: false,
                        },
                        s,
                    );
                } else {
                    let mut prefix = key.prefix.clone();
                    prefix.push(k);
                    push(
                        BeamKey {
                            prefix,
                            ends_blank: false,
                        },
                        s,
                    );
                }
            }
        }
        // stable: ties keep generation order (lower class ids first)
        next.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
        next.truncate(width);
        beam = next;
    }

    let mut merged: Vec<(Vec<usize>, f64)> = Vec::new();
    for (key, score) in beam {
        match merged.iter_mut().find(|(p, _)| *p == key.prefix) {
            Some(entry) => entry.1 = log_add(entry.1, score),
            None => merged.push((key.prefix, score)),
        }
    }
    let (glosses, log_prob) = merged
        .into_iter()
        .fold((Vec::new(), f64::NEG_INFINITY), |best, cand| if cand.1 > best.1 { cand } else { best });
    Ok(DecodeResult {
        glosses,
        log_prob,
        method: DecodeMethod::Beam(width),
    })
}

struct CtcNode {
    grad: Vec<f64>,
}

impl CustomOp for CtcNode {
    fn name(&self) -> &'static str {
        "ctc_loss"
    }

    fn backward(&self, _inputs: &[&Tensor], _output: &Tensor, out_grad: &[f64]) -> Vec<Vec<f64>> {
        vec![self.grad.iter().map(|g| g * out_grad[0]).collect()]
    }
}

pub fn decode(logits: &LogitsSeq, method: DecodeMethod) -> Result<DecodeResult> {
    match method {
        DecodeMethod::Greedy => Ok(greedy_decode(logits)),
        DecodeMethod::Beam(w) => beam_decode(logits, w),
    }
}

/// CTC loss of a `T×(|V|+1)` logits node as a differentiable scalar node.
pub fn ctc_loss_node(g: &mut Graph, logits: Var, label: &[usize]) -> Result<Var> {
    let seq = LogitsSeq::from_tensor(g.value(logits))?;
    let (loss, grad) = ctc_loss_and_grad(&seq, label)?;
    Ok(g.custom(&[logits], Tensor::scalar(loss), Box::new(CtcNode { grad })))
}
