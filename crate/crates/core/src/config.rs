//! Plain-text `key=value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are
//! rejected. [`RunConfig::to_text`] writes every key, so the output can be
//! parsed back into an identical configuration.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::data::{Dataset, Split, SynthSpec};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::sequential::compute_window_d;
use crate::train::{Augment, Schedule, TrainConfig};
use crate::visual::ConvSpec;

#[derive(Clone, Debug, PartialEq)]
#[derive(Default)]
pub struct RunConfig {
    pub synth: SynthSpec,
    pub model: ModelConfig,
    /// `None` computes the Gaussian-bias window from the training set.
    pub window: Option<f64>,
    pub train: TrainConfig,
}


fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("bad value '{v}' for {key}")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|x| parse(key, x.trim())).collect()
}

fn join<T: ToString>(xs: impl IntoIterator<Item = T>) -> String {
    xs.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let s = &mut self.synth;
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "synth.vocab_size" => s.vocab_size = parse(key, v)?,
            "synth.signers" => s.signers = parse(key, v)?,
            "synth.train_signers" => s.train_signers = parse(key, v)?,
            "synth.signer_independent" => s.signer_independent = parse(key, v)?,
            "synth.frames_mean" => s.frames_mean = parse(key, v)?,
            "synth.frames_jitter" => s.frames_jitter = parse(key, v)?,
            "synth.appearance_jitter" => s.appearance_jitter = parse(key, v)?,
            "synth.height" => s.height = parse(key, v)?,
            "synth.width" => s.width = parse(key, v)?,
            "synth.train" => s.train = parse(key, v)?,
            "synth.dev" => s.dev = parse(key, v)?,
            "synth.test" => s.test = parse(key, v)?,
            "synth.min_glosses" => s.min_glosses = parse(key, v)?,
            "synth.max_glosses" => s.max_glosses = parse(key, v)?,
            "synth.seed" => s.seed = parse(key, v)?,

            "visual.channels" => {
                let ch: Vec<usize> = parse_list(key, v)?;
                let old = std::mem::take(&mut m.visual.conv_stack);
                m.visual.conv_stack = ch
                    .iter()
                    .enumerate()
                    .map(|(i, &c)| ConvSpec {
                        out_channels: c,
                        ..old.get(i).copied().unwrap_or(ConvSpec {
                            out_channels: c,
                            kernel: 3,
                            stride: 1,
                            pad: 1,
                        })
                    })
                    .collect();
                m.lt.model_dim = ch.last().copied().unwrap_or(0);
            }
            "visual.strides" => {
                let st: Vec<usize> = parse_list(key, v)?;
                if st.len() != m.visual.conv_stack.len() {
                    return Err(Error::Config(format!(
                        "visual.strides has {} entries for {} conv layers",
                        st.len(),
                        m.visual.conv_stack.len()
                    )));
                }
                for (c, s) in m.visual.conv_stack.iter_mut().zip(st) {
                    c.stride = s;
                }
            }
            "visual.kernel" => {
                let k: usize = parse(key, v)?;
                for c in &mut m.visual.conv_stack {
                    c.kernel = k;
                    c.pad = k / 2;
                }
            }
            "visual.attention_after" => m.visual.attention_after = parse(key, v)?,
            "visual.input_mean" => m.visual.input_mean = parse(key, v)?,
            "visual.input_std" => m.visual.input_std = parse(key, v)?,

            "lt.layers" => m.lt.layers = parse(key, v)?,
            "lt.heads" => m.lt.heads = parse(key, v)?,
            "lt.dtcn_kernel" => m.lt.dtcn_kernel = parse(key, v)?,
            "lt.ffn_hidden" => m.lt.ffn_hidden = parse(key, v)?,
            "lt.window" => {
                self.window = if v == "auto" { None } else { Some(parse(key, v)?) };
            }

            "see.heads" => m.see_heads = parse(key, v)?,
            "see.ffn_hidden" => m.see_ffn_hidden = parse(key, v)?,
            "see.dtcn_kernel" => m.see_dtcn_kernel = parse(key, v)?,
            "see.lr_scale" => m.see_lr_scale = parse(key, v)?,
            "see.margin" => m.margin = parse(key, v)?,

            "sac.gamma" => m.gamma = parse(key, v)?,
            "loss.sac" => m.sac = parse(key, v)?,
            "loss.sec" => m.sec = parse(key, v)?,
            "loss.srm" => m.srm = parse(key, v)?,
            "srm.lambda" => m.lambda = parse(key, v)?,
            "srm.reversal" => m.reversal = parse(key, v)?,
            "model.seed" => m.seed = parse(key, v)?,

            "train.lr" => t.lr = parse(key, v)?,
            "train.weight_decay" => t.weight_decay = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.epochs" => t.epochs = parse(key, v)?,
            "train.seed" => t.seed = parse(key, v)?,
            "train.schedule" => {
                t.schedule = match v {
                    "plateau" => Schedule::Plateau {
                        factor: 0.7,
                        patience: 6,
                    },
                    "milestones" => Schedule::Milestones {
                        epochs: crate::train::stepped_milestones(t.epochs),
                        factor: 0.7,
                    },
                    "constant" => Schedule::Constant,
                    _ => return Err(Error::Config(format!("unknown schedule '{v}'"))),
                }
            }
            "train.schedule_factor" => match &mut t.schedule {
                Schedule::Plateau { factor, .. } | Schedule::Milestones { factor, .. } => *factor = parse(key, v)?,
                Schedule::Constant => {}
            },
            "train.plateau_patience" => {
                if let Schedule::Plateau { patience, .. } = &mut t.schedule {
                    *patience = parse(key, v)?;
                }
            }
            "train.milestones" => {
                if let Schedule::Milestones { epochs, .. } = &mut t.schedule {
                    *epochs = parse_list(key, v)?;
                }
            }
            "train.augment" => t.augment = Augment::parse(v)?,
            "train.drop" => t.train_drop = parse(key, v)?,
            "train.infer_drop" => t.infer_drop = parse(key, v)?,
            "train.beam" => t.beam = parse(key, v)?,
            "train.dev_eval" => t.dev_eval = parse(key, v)?,
            "train.max_train" => t.max_train = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let s = &self.synth;
        let m = &self.model;
        let t = &self.train;
        let mut o = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(o, "{k}={v}");
        };
        kv("synth.vocab_size", s.vocab_size.to_string());
        kv("synth.signers", s.signers.to_string());
        kv("synth.train_signers", s.train_signers.to_string());
        kv("synth.signer_independent", s.signer_independent.to_string());
        kv("synth.frames_mean", s.frames_mean.to_string());
        kv("synth.frames_jitter", s.frames_jitter.to_string());
        kv("synth.appearance_jitter", s.appearance_jitter.to_string());
        kv("synth.height", s.height.to_string());
        kv("synth.width", s.width.to_string());
        kv("synth.train", s.train.to_string());
        kv("synth.dev", s.dev.to_string());
        kv("synth.test", s.test.to_string());
        kv("synth.min_glosses", s.min_glosses.to_string());
        kv("synth.max_glosses", s.max_glosses.to_string());
        kv("synth.seed", s.seed.to_string());
        kv("visual.channels", join(m.visual.conv_stack.iter().map(|c| c.out_channels)));
        kv("visual.strides", join(m.visual.conv_stack.iter().map(|c| c.stride)));
        kv("visual.kernel", m.visual.conv_stack.first().map_or(3, |c| c.kernel).to_string());
        kv("visual.attention_after", m.visual.attention_after.to_string());
        kv("visual.input_mean", m.visual.input_mean.to_string());
        kv("visual.input_std", m.visual.input_std.to_string());
        kv("lt.layers", m.lt.layers.to_string());
        kv("lt.heads", m.lt.heads.to_string());
        kv("lt.dtcn_kernel", m.lt.dtcn_kernel.to_string());
        kv("lt.ffn_hidden", m.lt.ffn_hidden.to_string());
        kv("lt.window", self.window.map_or_else(|| "auto".to_string(), |w| w.to_string()));
        kv("see.heads", m.see_heads.to_string());
        kv("see.ffn_hidden", m.see_ffn_hidden.to_string());
        kv("see.dtcn_kernel", m.see_dtcn_kernel.to_string());
        kv("see.lr_scale", m.see_lr_scale.to_string());
        kv("see.margin", m.margin.to_string());
        kv("sac.gamma", m.gamma.to_string());
        kv("loss.sac", m.sac.to_string());
        kv("loss.sec", m.sec.to_string());
        kv("loss.srm", m.srm.to_string());
        kv("srm.lambda", m.lambda.to_string());
        kv("srm.reversal", m.reversal.to_string());
        kv("model.seed", m.seed.to_string());
        kv("train.lr", t.lr.to_string());
        kv("train.weight_decay", t.weight_decay.to_string());
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.epochs", t.epochs.to_string());
        kv("train.seed", t.seed.to_string());
        match &t.schedule {
            Schedule::Plateau { factor, patience } => {
                kv("train.schedule", "plateau".into());
                kv("train.schedule_factor", factor.to_string());
                kv("train.plateau_patience", patience.to_string());
            }
            Schedule::Milestones { epochs, factor } => {
                kv("train.schedule", "milestones".into());
                kv("train.schedule_factor", factor.to_string());
                kv("train.milestones", join(epochs));
            }
            Schedule::Constant => kv("train.schedule", "constant".into()),
        }
        kv("train.augment", t.augment.name().into());
        kv("train.drop", t.train_drop.to_string());
        kv("train.infer_drop", t.infer_drop.to_string());
        kv("train.beam", t.beam.to_string());
        kv("train.dev_eval", t.dev_eval.to_string());
        kv("train.max_train", t.max_train.to_string());
        o
    }

    /// Model configuration with vocabulary, signers, sequence bound and
    /// window taken from the dataset.
    pub fn model_for(&self, ds: &Dataset) -> Result<ModelConfig> {
        let mut m = self.model.clone();
        m.vocab_size = ds.vocab.len();
        m.num_signers = ds.num_signers;
        m.visual.height = ds.height;
        m.visual.width = ds.width;
        m.max_frames = ds
            .split(Split::Train)
            .iter()
            .map(|s| s.clip.len())
            .max()
            .ok_or_else(|| Error::Config("dataset has no training samples".into()))?;
        m.lt.window = match self.window {
            Some(w) => w,
            None => compute_window_d(&ds.train_lengths())?,
        };
        m.validate()?;
        Ok(m)
    }
}
