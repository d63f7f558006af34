//! Optimization: Adam with per-group learning-rate scales, LR schedules, the
//! training loop, evaluation, the signer probe and checkpoints.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamStore, Tensor};
use crate::config::RunConfig;
use crate::ctc::{decode, DecodeMethod, LogitsSeq};
use crate::data::{decode_tensor, encode_tensor_f64, sfd_infer, sfd_train, seg_and_drop, Clip, Dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::metrics::{edit_alignment, Alignment, CorpusWer};
use crate::model::{BatchItem, Model};
use crate::srm::statistics_pooling;
use crate::visual::global_avg_pool;

#[derive(Clone, Debug, PartialEq)]
pub enum Schedule {
    Plateau { factor: f64, patience: usize },
    Milestones { epochs: Vec<usize>, factor: f64 },
    Constant,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Augment {
    Sfd,
    SegDrop,
    None,
}

impl Augment {
    pub fn name(self) -> &'static str {
        match self {
            Augment::Sfd => "sfd",
            Augment::SegDrop => "seg",
            Augment::None => "none",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sfd" => Ok(Augment::Sfd),
            "seg" => Ok(Augment::SegDrop),
            "none" => Ok(Augment::None),
            _ => Err(Error::Config(format!("unknown augmentation '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub schedule: Schedule,
    pub seed: u64,
    pub augment: Augment,
    pub train_drop: f64,
    pub infer_drop: f64,
    /// Beam width for dev evaluation; 0 decodes greedily.
    pub beam: usize,
    pub dev_eval: bool,
    /// Use only the first `max_train` training samples (0 = all).
    pub max_train: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            weight_decay: 1e-4,
            batch_size: 2,
            epochs: 60,
            schedule: Schedule::Plateau {
                factor: 0.7,
                patience: 6,
            },
            seed: 0,
            augment: Augment::Sfd,
            train_drop: 0.5,
            infer_drop: 0.5,
            beam: crate::ctc::DEFAULT_BEAM,
            dev_eval: true,
            max_train: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, sec_on: bool) -> Result<()> {
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("lr must be positive and weight_decay nonnegative".into()));
        }
        if self.batch_size == 0 || (sec_on && self.batch_size < 2) {
            return Err(Error::Config(format!(
                "batch_size {} too small (SEC needs at least 2)",
                self.batch_size
            )));
        }
        for p in [self.train_drop, self.infer_drop] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("drop ratio {p} not in [0, 1)")));
            }
        }
        Ok(())
    }

    pub fn decode_method(&self) -> DecodeMethod {
        if self.beam == 0 {
            DecodeMethod::Greedy
        } else {
            DecodeMethod::Beam(self.beam)
        }
    }
}

/// Milestones 15, 25, then every 5 epochs from 30 up to `last`.
pub fn stepped_milestones(last: usize) -> Vec<usize> {
    let mut v = vec![15, 25];
    v.extend((30..=last).step_by(5));
    v.retain(|&e| e <= last);
    v
}

/// Multiplies `lr` by `factor` when `epoch` is a milestone.
pub fn milestone_step(lr: f64, epoch: usize, milestones: &[usize], factor: f64) -> f64 {
    if milestones.contains(&epoch) {
        lr * factor
    } else {
        lr
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlateauState {
    pub best: f64,
    pub counter: usize,
}

impl Default for PlateauState {
    fn default() -> Self {
        PlateauState {
            best: f64::INFINITY,
            counter: 0,
        }
    }
}

/// Counter resets on strict improvement; at `patience` misses the LR is
/// scaled by `factor` and the counter resets.
pub fn plateau_step(state: &mut PlateauState, lr: f64, dev_wer: f64, factor: f64, patience: usize) -> f64 {
    if dev_wer < state.best {
        state.best = dev_wer;
        state.counter = 0;
        return lr;
    }
    state.counter += 1;
    if state.counter >= patience {
        state.counter = 0;
        lr * factor
    } else {
        lr
    }
}

/// Adam moments per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.ids().map(|id| vec![0.0; store.get(id).numel()]).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update from the gradients stored in `store`. Each group uses
    /// `lr·lr_scale`; weight decay enters the update as `lr·wd·p`.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64, weight_decay: f64) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for &id in &ids {
            let t = store.get(id);
            if let Some(g) = &t.grad {
                if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of {} at index {i}", store.name(id))));
                }
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (k, &id) in ids.iter().enumerate() {
            let step = lr * store.group_of(id).lr_scale;
            let t = store.get_mut(id);
            let grad = t.grad.take();
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let data = t.data_mut();
            for i in 0..data.len() {
                let gi = grad.as_ref().map_or(0.0, |g| g[i]);
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                data[i] -= step * (mh / (vh.sqrt() + self.eps) + weight_decay * data[i]);
            }
            t.grad = grad;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub best_dev_wer: Option<f64>,
    pub plateau: PlateauState,
}

/// Loss values of one optimizer step. Disabled terms are 0.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub total: f64,
    pub ctc: f64,
    pub sac: f64,
    pub sec: f64,
    pub srm: f64,
    pub skipped: usize,
    pub applied: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FitSummary {
    pub steps: u64,
    pub skipped: usize,
    /// Mean CTC loss per epoch run.
    pub epoch_ctc: Vec<f64>,
    pub dev_wer: Vec<f64>,
}

/// Deterministic generator for a `(seed, a, b)` triple.
pub fn rng_for(seed: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut bytes = [0u8; 32];
    bytes[..8].copy_from_slice(&seed.to_le_bytes());
    bytes[8..16].copy_from_slice(&a.to_le_bytes());
    bytes[16..24].copy_from_slice(&b.to_le_bytes());
    bytes[24..].copy_from_slice(b"cslrtrn1");
    ChaCha8Rng::from_seed(bytes)
}

pub fn augment_clip(clip: &Clip, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Clip> {
    match cfg.augment {
        Augment::None => Ok(clip.clone()),
        Augment::Sfd => sfd_train(clip, cfg.train_drop, rng),
        Augment::SegDrop if clip.len() >= 2 => seg_and_drop(clip, rng),
        Augment::SegDrop => Ok(clip.clone()),
    }
}

pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    pub adam: Adam,
    pub state: TrainState,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate(model.config.sec)?;
        let adam = Adam::new(&model.store);
        let state = TrainState {
            epoch: 0,
            step: 0,
            lr: config.lr,
            best_dev_wer: None,
            plateau: PlateauState::default(),
        };
        Ok(Trainer {
            model,
            config,
            adam,
            state,
        })
    }

    /// Forward, backward and one Adam update on a prepared batch.
    pub fn train_step(&mut self, items: &[BatchItem]) -> Result<StepLosses> {
        let mut g = Graph::new();
        let p = self.model.store.bind(&mut g);
        let lv = match self.model.batch_loss(&mut g, &p, items) {
            Ok(lv) => lv,
            Err(Error::Infeasible { .. }) => {
                return Ok(StepLosses {
                    skipped: items.len(),
                    ..StepLosses::default()
                })
            }
            Err(e) => return Err(e),
        };
        let val = |v: Option<crate::autodiff::Var>| v.map_or(0.0, |v| g.value(v).item());
        let out = StepLosses {
            total: g.value(lv.total).item(),
            ctc: g.value(lv.ctc).item(),
            sac: val(lv.sac),
            sec: val(lv.sec),
            srm: val(lv.srm),
            skipped: lv.skipped,
            applied: true,
        };
        if !out.total.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss at step {}: total {} ctc {} sac {} sec {} srm {}",
                self.state.step, out.total, out.ctc, out.sac, out.sec, out.srm
            )));
        }
        let grads = g.backward(lv.total)?;
        self.model.store.zero_grad();
        self.model.store.accumulate(&grads, &p);
        self.adam.step(&mut self.model.store, self.state.lr, self.config.weight_decay)?;
        self.state.step += 1;
        Ok(out)
    }

    fn training_samples<'a>(&self, ds: &'a Dataset) -> Vec<&'a Sample> {
        let mut train = ds.split(Split::Train);
        if self.config.max_train > 0 {
            train.truncate(self.config.max_train);
        }
        train
    }

    /// Runs the remaining epochs. Writes `last.ckpt` each epoch and
    /// `best.ckpt` on dev improvement when `out` is given.
    pub fn fit(&mut self, ds: &Dataset, out: Option<&Path>, log: &mut dyn Write) -> Result<FitSummary> {
        let mc = &self.model.config;
        if mc.vocab_size != ds.vocab.len() || mc.num_signers != ds.num_signers {
            return Err(Error::Config(format!(
                "model expects {} glosses and {} signers, data has {} and {}",
                mc.vocab_size,
                mc.num_signers,
                ds.vocab.len(),
                ds.num_signers
            )));
        }
        let train = self.training_samples(ds);
        if train.is_empty() {
            return Err(Error::invalid("no training samples"));
        }
        let dev = ds.split(Split::Dev);
        let mut summary = FitSummary::default();
        while self.state.epoch < self.config.epochs {
            let epoch = self.state.epoch;
            let mut order: Vec<usize> = (0..train.len()).collect();
            order.shuffle(&mut rng_for(self.config.seed, epoch as u64, u64::MAX));
            let (mut ctc_sum, mut ctc_n) = (0.0, 0usize);
            for chunk in order.chunks(self.config.batch_size) {
                let mut rng = rng_for(self.config.seed, epoch as u64, self.state.step);
                let items = chunk
                    .iter()
                    .map(|&i| {
                        Ok(BatchItem {
                            clip: augment_clip(&train[i].clip, &self.config, &mut rng)?,
                            glosses: train[i].glosses.clone(),
                            signer: train[i].signer,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let lr = self.state.lr;
                let s = self.train_step(&items)?;
                summary.skipped += s.skipped;
                if s.skipped > 0 {
                    log::warn!("epoch {epoch}: skipped {} infeasible sample(s)", s.skipped);
                }
                if s.applied {
                    summary.steps += 1;
                    ctc_sum += s.ctc;
                    ctc_n += 1;
                    writeln!(
                        log,
                        "{} {} {:.6} {:.6} {:.6} {:.6} {:.6} {:e}",
                        epoch + 1,
                        self.state.step,
                        s.total,
                        s.ctc,
                        s.sac,
                        s.sec,
                        s.srm,
                        lr
                    )
                    .map_err(|e| Error::io("<log>", e))?;
                }
            }
            summary.epoch_ctc.push(if ctc_n > 0 { ctc_sum / ctc_n as f64 } else { f64::NAN });
            self.state.epoch += 1;

            let mut improved = false;
            if self.config.dev_eval && !dev.is_empty() {
                let rep = evaluate(&self.model, &dev, &ds.vocab, self.config.decode_method(), self.config.infer_drop)?;
                summary.dev_wer.push(rep.wer);
                log::info!("epoch {} dev WER {:.2}%", self.state.epoch, 100.0 * rep.wer);
                if self.state.best_dev_wer.is_none_or(|b| rep.wer < b) {
                    self.state.best_dev_wer = Some(rep.wer);
                    improved = true;
                }
                if let Schedule::Plateau { factor, patience } = self.config.schedule {
                    self.state.lr = plateau_step(&mut self.state.plateau, self.state.lr, rep.wer, factor, patience);
                }
            }
            if let Schedule::Milestones { epochs, factor } = &self.config.schedule {
                self.state.lr = milestone_step(self.state.lr, self.state.epoch, epochs, *factor);
            }
            if let Some(dir) = out {
                self.save(&dir.join("last.ckpt"))?;
                if improved || !self.config.dev_eval {
                    self.save(&dir.join("best.ckpt"))?;
                }
            }
        }
        Ok(summary)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        load_checkpoint(path)
    }
}

// ---- evaluation ----

#[derive(Clone, Debug, PartialEq)]
pub struct EvalLine {
    pub id: String,
    pub reference: Vec<String>,
    pub hypothesis: Vec<String>,
    pub alignment: Alignment,
}

impl EvalLine {
    pub fn wer(&self) -> f64 {
        self.alignment.errors() as f64 / self.alignment.ref_len as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub wer: f64,
    pub totals: Alignment,
    pub lines: Vec<EvalLine>,
}

impl EvalReport {
    /// One `id\tref\thyp\twer` line per sample.
    pub fn to_text(&self) -> String {
        let mut o = String::new();
        for l in &self.lines {
            let _ = writeln!(
                o,
                "{}\t{}\t{}\t{:.4}",
                l.id,
                l.reference.join(" "),
                l.hypothesis.join(" "),
                l.wer()
            );
        }
        o
    }
}

/// Gloss ids recognized from a clip after deterministic frame dropping.
pub fn recognize(model: &Model, clip: &Clip, method: DecodeMethod, infer_drop: f64) -> Result<Vec<usize>> {
    let clip = sfd_infer(clip, infer_drop)?;
    let logits = model.logits(&clip.frames)?;
    Ok(decode(&LogitsSeq::from_tensor(&logits)?, method)?.glosses)
}

pub fn evaluate(
    model: &Model,
    samples: &[&Sample],
    vocab: &crate::data::Vocab,
    method: DecodeMethod,
    infer_drop: f64,
) -> Result<EvalReport> {
    let mut corpus = CorpusWer::default();
    let mut lines = Vec::with_capacity(samples.len());
    for s in samples {
        let hyp = recognize(model, &s.clip, method, infer_drop)?;
        let alignment = edit_alignment(&s.glosses, &hyp);
        corpus.add(&s.glosses, &hyp);
        lines.push(EvalLine {
            id: s.id.clone(),
            reference: vocab.decode(&s.glosses),
            hypothesis: vocab.decode(&hyp),
            alignment,
        });
    }
    Ok(EvalReport {
        wer: corpus.wer()?,
        totals: corpus.totals,
        lines,
    })
}

// ---- signer probe ----

/// Statistics-pooled tap features (`[2C]`) of a clip.
pub fn tap_statistics(model: &Model, clip: &Clip) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let p = model.store.bind(&mut g);
    let x = g.constant(clip.frames.clone());
    let vo = model.visual.forward(&mut g, &p, x)?;
    let pooled = global_avg_pool(&mut g, vo.tap)?;
    let stats = statistics_pooling(&mut g, pooled)?;
    Ok(g.data(stats).to_vec())
}

/// Held-out accuracy of a softmax-regression probe. Even-indexed rows fit
/// the probe, odd-indexed rows score it.
pub fn probe_accuracy(features: &[Vec<f64>], labels: &[usize], classes: usize) -> Result<f64> {
    if features.len() != labels.len() || features.len() < 2 {
        return Err(Error::invalid("probe needs at least two labeled feature rows"));
    }
    let d = features[0].len();
    let fit: Vec<usize> = (0..features.len()).step_by(2).collect();
    let held: Vec<usize> = (1..features.len()).step_by(2).collect();
    let mut mean = vec![0.0; d];
    let mut sd = vec![0.0; d];
    for &i in &fit {
        for k in 0..d {
            mean[k] += features[i][k] / fit.len() as f64;
        }
    }
    for &i in &fit {
        for k in 0..d {
            sd[k] += (features[i][k] - mean[k]).powi(2) / fit.len() as f64;
        }
    }
    sd.iter_mut().for_each(|s| *s = s.sqrt().max(1e-6));
    let norm = |i: usize| -> Vec<f64> { (0..d).map(|k| (features[i][k] - mean[k]) / sd[k]).collect() };
    let xs: Vec<Vec<f64>> = fit.iter().map(|&i| norm(i)).collect();

    let mut w = vec![0.0; d * classes];
    let mut b = vec![0.0; classes];
    let (mut mw, mut vw) = (vec![0.0; d * classes], vec![0.0; d * classes]);
    let (mut mb, mut vb) = (vec![0.0; classes], vec![0.0; classes]);
    let (lr, l2, b1, b2) = (0.05, 1e-3, 0.9, 0.999);
    let scores = |w: &[f64], b: &[f64], x: &[f64]| -> Vec<f64> {
        (0..classes)
            .map(|c| b[c] + (0..d).map(|k| x[k] * w[k * classes + c]).sum::<f64>())
            .collect()
    };
    for it in 1..=300 {
        let mut gw = vec![0.0; d * classes];
        let mut gb = vec![0.0; classes];
        for (x, &i) in xs.iter().zip(&fit) {
            let s = scores(&w, &b, x);
            let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|v| (v - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..classes {
                let delta = e[c] / z - f64::from(u8::from(c == labels[i]));
                gb[c] += delta / xs.len() as f64;
                for k in 0..d {
                    gw[k * classes + c] += delta * x[k] / xs.len() as f64;
                }
            }
        }
        for (j, gj) in gw.iter_mut().enumerate() {
            *gj += l2 * w[j];
        }
        let (c1, c2) = (1.0 - f64::powi(b1, it), 1.0 - f64::powi(b2, it));
        for j in 0..w.len() {
            mw[j] = b1 * mw[j] + (1.0 - b1) * gw[j];
            vw[j] = b2 * vw[j] + (1.0 - b2) * gw[j] * gw[j];
            w[j] -= lr * (mw[j] / c1) / ((vw[j] / c2).sqrt() + 1e-8);
        }
        for j in 0..classes {
            mb[j] = b1 * mb[j] + (1.0 - b1) * gb[j];
            vb[j] = b2 * vb[j] + (1.0 - b2) * gb[j] * gb[j];
            b[j] -= lr * (mb[j] / c1) / ((vb[j] / c2).sqrt() + 1e-8);
        }
    }
    let correct = held
        .iter()
        .filter(|&&i| {
            let s = scores(&w, &b, &norm(i));
            let best = (0..classes).fold(0, |a, c| if s[c] > s[a] { c } else { a });
            best == labels[i]
        })
        .count();
    Ok(correct as f64 / held.len() as f64)
}

/// Signer-probe accuracy on frozen tap features of the training split.
pub fn probe_signer_accuracy(model: &Model, ds: &Dataset) -> Result<f64> {
    let samples = ds.split(Split::Train);
    let feats = samples
        .iter()
        .map(|s| tap_statistics(model, &s.clip))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = samples.iter().map(|s| s.signer).collect();
    probe_accuracy(&feats, &labels, ds.num_signers)
}

// ---- checkpoints ----

const CKPT_MAGIC: &str = "CSLR-CHECKPOINT 1";

fn save_checkpoint(path: &Path, tr: &Trainer) -> Result<()> {
    let m = &tr.model;
    let run = RunConfig {
        model: m.config.clone(),
        window: Some(m.config.lt.window),
        train: tr.config.clone(),
        ..RunConfig::default()
    };
    let mut blobs: Vec<(String, Vec<u8>)> = Vec::new();
    for (k, id) in m.store.ids().enumerate() {
        let name = m.store.name(id);
        let shape = m.store.get(id).shape().to_vec();
        blobs.push((format!("param.{name}"), encode_tensor_f64(m.store.get(id))));
        blobs.push((format!("adam.m.{name}"), encode_tensor_f64(&Tensor::new(&shape, tr.adam.m[k].clone())?)));
        blobs.push((format!("adam.v.{name}"), encode_tensor_f64(&Tensor::new(&shape, tr.adam.v[k].clone())?)));
    }
    let config_text = run.to_text();
    let st = &tr.state;
    let meta = format!(
        "vocab_size={}\nnum_signers={}\nmax_frames={}\nheight={}\nwidth={}\nepoch={}\nstep={}\nlr={}\nbest_dev_wer={}\nplateau_best={}\nplateau_counter={}\nadam_t={}\n",
        m.config.vocab_size,
        m.config.num_signers,
        m.config.max_frames,
        m.config.visual.height,
        m.config.visual.width,
        st.epoch,
        st.step,
        st.lr,
        st.best_dev_wer.map_or_else(|| "none".to_string(), |w| w.to_string()),
        st.plateau.best,
        st.plateau.counter,
        tr.adam.t
    );
    let mut header = String::new();
    let _ = writeln!(header, "{CKPT_MAGIC}");
    let _ = writeln!(header, "config {}", config_text.lines().count());
    header.push_str(&config_text);
    let _ = writeln!(header, "meta {}", meta.lines().count());
    header.push_str(&meta);
    let _ = writeln!(header, "tensors {}", blobs.len());
    let mut offset = 0;
    for (name, b) in &blobs {
        let _ = writeln!(header, "{name} {offset} {}", b.len());
        offset += b.len();
    }
    let _ = writeln!(header, "end");
    let mut bytes = header.into_bytes();
    for (_, b) in blobs {
        bytes.extend_from_slice(&b);
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn load_checkpoint(path: &Path) -> Result<Trainer> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: String| Error::format(path, m);
    let mut pos = 0;
    let mut next_line = || -> Result<String> {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("truncated header".into()))?;
        let line = std::str::from_utf8(&bytes[pos..pos + end])
            .map_err(|_| bad("header is not UTF-8".into()))?
            .to_string();
        pos += end + 1;
        Ok(line)
    };
    if next_line()? != CKPT_MAGIC {
        return Err(bad("not a checkpoint".into()));
    }
    let mut section = |name: &str| -> Result<Vec<String>> {
        let head = next_line()?;
        let n: usize = head
            .strip_prefix(name)
            .and_then(|r| r.trim().parse().ok())
            .ok_or_else(|| bad(format!("expected '{name} <count>', got '{head}'")))?;
        (0..n).map(|_| next_line()).collect()
    };
    let config_lines = section("config")?;
    let meta_lines = section("meta")?;
    let tensor_lines = section("tensors")?;
    if next_line()? != "end" {
        return Err(bad("missing header end".into()));
    }
    let body = &bytes[pos..];

    let run = RunConfig::parse(&config_lines.join("\n"))?;
    let meta: std::collections::HashMap<&str, &str> = meta_lines.iter().filter_map(|l| l.split_once('=')).collect();
    let get = |k: &str| meta.get(k).copied().ok_or_else(|| bad(format!("missing meta key {k}")));
    fn num<T: std::str::FromStr>(v: &str, k: &str, path: &Path) -> Result<T> {
        v.parse().map_err(|_| Error::format(path, format!("bad meta value for {k}")))
    }
    let mut mc = run.model.clone();
    mc.vocab_size = num(get("vocab_size")?, "vocab_size", path)?;
    mc.num_signers = num(get("num_signers")?, "num_signers", path)?;
    mc.max_frames = num(get("max_frames")?, "max_frames", path)?;
    mc.visual.height = num(get("height")?, "height", path)?;
    mc.visual.width = num(get("width")?, "width", path)?;
    mc.lt.window = run.window.ok_or_else(|| bad("checkpoint window not concrete".into()))?;
    let mut model = Model::new(mc)?;

    let mut blobs = std::collections::HashMap::new();
    for l in &tensor_lines {
        let parts: Vec<&str> = l.split(' ').collect();
        if parts.len() != 3 {
            return Err(bad(format!("bad tensor entry '{l}'")));
        }
        let off: usize = num(parts[1], "offset", path)?;
        let len: usize = num(parts[2], "length", path)?;
        let slice = body
            .get(off..off + len)
            .ok_or_else(|| bad(format!("tensor {} out of bounds", parts[0])))?;
        let (t, used) = decode_tensor(slice, path)?;
        if used != len {
            return Err(bad(format!("tensor {} length mismatch", parts[0])));
        }
        blobs.insert(parts[0].to_string(), t);
    }
    let mut take = |key: String, shape: &[usize]| -> Result<Tensor> {
        let t = blobs.remove(&key).ok_or_else(|| bad(format!("missing tensor {key}")))?;
        if t.shape() != shape {
            return Err(bad(format!("tensor {key} has shape {:?}, expected {shape:?}", t.shape())));
        }
        Ok(t)
    };
    let ids: Vec<_> = model.store.ids().collect();
    let mut adam = Adam::new(&model.store);
    for (k, &id) in ids.iter().enumerate() {
        let name = model.store.name(id).to_string();
        let shape = model.store.get(id).shape().to_vec();
        let p = take(format!("param.{name}"), &shape)?;
        model.store.get_mut(id).data_mut().copy_from_slice(p.data());
        adam.m[k] = take(format!("adam.m.{name}"), &shape)?.into_data();
        adam.v[k] = take(format!("adam.v.{name}"), &shape)?.into_data();
    }
    if let Some(extra) = blobs.keys().next() {
        return Err(bad(format!("unexpected tensor {extra}")));
    }
    adam.t = num(get("adam_t")?, "adam_t", path)?;
    let mut trainer = Trainer::new(model, run.train)?;
    trainer.adam = adam;
    let best = get("best_dev_wer")?;
    trainer.state = TrainState {
        epoch: num(get("epoch")?, "epoch", path)?,
        step: num(get("step")?, "step", path)?,
        lr: num(get("lr")?, "lr", path)?,
        best_dev_wer: if best == "none" { None } else { Some(num(best, "best_dev_wer", path)?) },
        plateau: PlateauState {
            best: num(get("plateau_best")?, "plateau_best", path)?,
            counter: num(get("plateau_counter")?, "plateau_counter", path)?,
        },
    };
    Ok(trainer)
}
