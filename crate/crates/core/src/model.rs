//! Full recognition model: visual module, local transformer, gloss head and
//! the training-only SEC and SRM branches.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Bound, Graph, GroupRole, ParamStore, Tensor, Var};
use crate::ctc::{ctc_loss_node, min_frames};
use crate::data::Clip;
use crate::error::{Error, Result};
use crate::heatmap::{track_targets, DEFAULT_GAMMA};
use crate::sec::{batch_sec_loss, SeeConfig, SentenceEmbedding, DEFAULT_MARGIN, SEE_LR_SCALE};
use crate::sequential::{GlossHead, LtConfig, SequentialModule};
use crate::srm::{SignerRemoval, DEFAULT_LAMBDA};
use crate::visual::{sac_loss, VisualConfig, VisualModule};

pub const BACKBONE_GROUP: &str = "backbone";
pub const SEE_GROUP: &str = "see";
pub const SRM_GROUP: &str = "srm";

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub visual: VisualConfig,
    pub lt: LtConfig,
    pub vocab_size: usize,
    pub num_signers: usize,
    /// Longest sequence the sentence extractor accepts.
    pub max_frames: usize,
    pub see_heads: usize,
    pub see_ffn_hidden: usize,
    pub see_dtcn_kernel: usize,
    pub see_lr_scale: f64,
    pub gamma: f64,
    pub margin: f64,
    pub sac: bool,
    pub sec: bool,
    pub srm: bool,
    pub lambda: f64,
    /// Gradient reversal between backbone and SRM; off gives plain multi-task
    /// training.
    pub reversal: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            visual: VisualConfig::default(),
            lt: LtConfig::default(),
            vocab_size: 5,
            num_signers: 6,
            max_frames: 64,
            see_heads: 4,
            see_ffn_hidden: 256,
            see_dtcn_kernel: 5,
            see_lr_scale: SEE_LR_SCALE,
            gamma: DEFAULT_GAMMA,
            margin: DEFAULT_MARGIN,
            sac: true,
            sec: true,
            srm: true,
            lambda: DEFAULT_LAMBDA,
            reversal: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.visual.validate()?;
        self.lt.validate()?;
        if self.visual.feature_dim() != self.lt.model_dim {
            return Err(Error::Config(format!(
                "visual feature dim {} differs from sequential model dim {}",
                self.visual.feature_dim(),
                self.lt.model_dim
            )));
        }
        if self.vocab_size == 0 {
            return Err(Error::Config("vocab_size must be positive".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be nonnegative, got {}", self.lambda)));
        }
        if self.srm && self.num_signers < 2 {
            return Err(Error::Config("signer removal needs at least 2 signers".into()));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::Config(format!("gamma must be positive, got {}", self.gamma)));
        }
        Ok(())
    }

    /// λ actually applied: zero when the SRM branch is off.
    pub fn effective_lambda(&self) -> f64 {
        if self.srm {
            self.lambda
        } else {
            0.0
        }
    }
}

/// Which auxiliary terms enter the total loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossFlags {
    pub sac: bool,
    pub sec: bool,
    pub srm: bool,
}

/// `L = L_ctc + L_sac + L_sec + λ·L_srm` with disabled terms contributing 0.
pub fn overall_loss(ctc: f64, sac: Option<f64>, sec: Option<f64>, srm: Option<f64>, lambda: f64, flags: LossFlags) -> Result<f64> {
    let term = |on: bool, v: Option<f64>, name: &str| -> Result<f64> {
        match (on, v) {
            (false, _) => Ok(0.0),
            (true, Some(v)) => Ok(v),
            (true, None) => Err(Error::invalid(format!("enabled loss term {name} missing"))),
        }
    };
    let lambda = if flags.srm { lambda } else { 0.0 };
    Ok(ctc + term(flags.sac, sac, "sac")? + term(flags.sec, sec, "sec")? + lambda * term(flags.srm, srm, "srm")?)
}

/// One training example after augmentation.
#[derive(Clone, Debug)]
pub struct BatchItem {
    pub clip: Clip,
    pub glosses: Vec<usize>,
    pub signer: usize,
}

/// Graph nodes of a batch loss.
pub struct LossVars {
    pub total: Var,
    pub ctc: Var,
    pub sac: Option<Var>,
    pub sec: Option<Var>,
    pub srm: Option<Var>,
    /// Samples dropped because their label needs more frames than remain.
    pub skipped: usize,
}

pub struct ForwardOutput {
    pub logits: Var,
    pub visual: Var,
    pub sequential: Var,
    pub mask: Var,
    pub tap: Var,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub visual: VisualModule,
    pub sequential: SequentialModule,
    pub head: GlossHead,
    pub see: Option<SentenceEmbedding>,
    pub srm: Option<SignerRemoval>,
}

fn module_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let backbone = store.add_group(BACKBONE_GROUP, GroupRole::Backbone, 1.0);
        let visual = VisualModule::new(config.visual.clone(), &mut store, backbone, &mut module_rng(config.seed, 1))?;
        let sequential = SequentialModule::new(config.lt.clone(), &mut store, backbone, &mut module_rng(config.seed, 2))?;
        let head = GlossHead::new(&mut store, backbone, config.lt.model_dim, config.vocab_size, &mut module_rng(config.seed, 3));
        let see = if config.sec {
            let grp = store.add_group(SEE_GROUP, GroupRole::Backbone, config.see_lr_scale);
            let cfg = SeeConfig {
                dim: config.lt.model_dim,
                heads: config.see_heads,
                max_len: config.max_frames,
                dtcn_kernel: config.see_dtcn_kernel,
                ffn_hidden: config.see_ffn_hidden,
            };
            Some(SentenceEmbedding::new(cfg, &mut store, grp, &mut module_rng(config.seed, 4))?)
        } else {
            None
        };
        let srm = if config.srm {
            let grp = store.add_group(SRM_GROUP, GroupRole::Srm, 1.0);
            Some(SignerRemoval::new(
                &mut store,
                grp,
                config.visual.tap_channels(),
                config.num_signers,
                &mut module_rng(config.seed, 5),
            )?)
        } else {
            None
        };
        Ok(Model {
            config,
            store,
            visual,
            sequential,
            head,
            see,
            srm,
        })
    }

    pub fn flags(&self) -> LossFlags {
        LossFlags {
            sac: self.config.sac,
            sec: self.config.sec,
            srm: self.config.srm,
        }
    }

    /// Recognition path on `T×3×H×W` frames.
    pub fn forward(&self, g: &mut Graph, p: &Bound, frames: Var) -> Result<ForwardOutput> {
        let vo = self.visual.forward(g, p, frames)?;
        let s = self.sequential.forward(g, p, vo.features)?;
        let logits = self.head.forward(g, p, s)?;
        Ok(ForwardOutput {
            logits,
            visual: vo.features,
            sequential: s,
            mask: vo.mask,
            tap: vo.tap,
        })
    }

    /// Frame logits `T×(|V|+1)` of a clip.
    pub fn logits(&self, frames: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g);
        let x = g.constant(frames.clone());
        let out = self.forward(&mut g, &p, x)?;
        Ok(g.value(out.logits).clone())
    }

    /// SAC supervision `T×J×K` for the keypoints of a clip.
    pub fn sac_target(&self, clip: &Clip) -> Result<Tensor> {
        let (j, k) = self.config.visual.attention_grid()?;
        let data = track_targets(&clip.keypoints, j, k, (self.config.gamma, self.config.gamma))?;
        Tensor::new(&[clip.len(), j, k], data)
    }

    /// Builds the batch loss graph. Terms are means over usable samples.
    pub fn batch_loss(&self, g: &mut Graph, p: &Bound, items: &[BatchItem]) -> Result<LossVars> {
        let mut ctc_terms = Vec::new();
        let mut sac_terms = Vec::new();
        let mut srm_terms = Vec::new();
        let mut see_v = Vec::new();
        let mut see_s = Vec::new();
        let mut skipped = 0;
        for item in items {
            if item.clip.len() < min_frames(&item.glosses) {
                skipped += 1;
                continue;
            }
            let x = g.constant(item.clip.frames.clone());
            let out = self.forward(g, p, x)?;
            ctc_terms.push(ctc_loss_node(g, out.logits, &item.glosses)?);
            if self.config.sac {
                let target = g.constant(self.sac_target(&item.clip)?);
                sac_terms.push(sac_loss(g, out.mask, target)?);
            }
            if let Some(see) = &self.see {
                see_v.push(see.forward(g, p, out.visual)?);
                see_s.push(see.forward(g, p, out.sequential)?);
            }
            if let Some(srm) = &self.srm {
                srm_terms.push(srm.forward(g, p, out.tap, item.signer, self.config.reversal)?.loss);
            }
        }
        if ctc_terms.is_empty() {
            return Err(Error::Infeasible {
                frames: items.iter().map(|i| i.clip.len()).max().unwrap_or(0),
                label_len: items.iter().map(|i| i.glosses.len()).max().unwrap_or(0),
            });
        }
        let ctc = mean_of(g, &ctc_terms)?;
        let sac = if sac_terms.is_empty() { None } else { Some(mean_of(g, &sac_terms)?) };
        let sec = if see_v.len() >= 2 {
            Some(batch_sec_loss(g, &see_v, &see_s, self.config.margin)?)
        } else {
            None
        };
        let srm = if srm_terms.is_empty() { None } else { Some(mean_of(g, &srm_terms)?) };

        let mut total = ctc;
        for t in [sac, sec].into_iter().flatten() {
            total = g.add(total, t)?;
        }
        if let Some(s) = srm {
            let w = g.scalar_mul(s, self.config.effective_lambda());
            total = g.add(total, w)?;
        }
        Ok(LossVars {
            total,
            ctc,
            sac,
            sec,
            srm,
            skipped,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }
}

fn mean_of(g: &mut Graph, xs: &[Var]) -> Result<Var> {
    let mut acc = xs[0];
    for &x in &xs[1..] {
        acc = g.add(acc, x)?;
    }
    Ok(g.scalar_mul(acc, 1.0 / xs.len() as f64))
}
