//! Convolutional visual module with keypoint-guided spatial attention.
//!
//! Feature maps are laid out `T×C×J×K` (frames first). The attention module
//! sits after conv layer `attention_after` (1-based) and multiplies the maps
//! by a mask computed from a channel-max squeeze and a softmax-weighted
//! channel squeeze, passed through a 7×7 convolution and a sigmoid.

use rand::Rng;

use crate::autodiff::{Bound, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::normal_tensor;

/// Kernel size of the attention-mask convolution.
pub const MASK_KERNEL: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VisualConfig {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub conv_stack: Vec<ConvSpec>,
    /// 1-based index of the conv layer after which attention is applied.
    pub attention_after: usize,
    /// Pixels enter the stack as `(x - input_mean) / input_std`.
    pub input_mean: f64,
    pub input_std: f64,
}

impl Default for VisualConfig {
    fn default() -> Self {
        let conv = |out_channels, stride| ConvSpec {
            out_channels,
            kernel: 3,
            stride,
            pad: 1,
        };
        VisualConfig {
            in_channels: 3,
            height: 32,
            width: 32,
            conv_stack: vec![conv(16, 2), conv(32, 2), conv(64, 2), conv(64, 1)],
            attention_after: 2,
            input_mean: 0.3,
            input_std: 0.15,
        }
    }
}

impl VisualConfig {
    /// Spatial size after each conv layer.
    pub fn spatial_sizes(&self) -> Result<Vec<(usize, usize)>> {
        let (mut h, mut w) = (self.height, self.width);
        let mut out = Vec::with_capacity(self.conv_stack.len());
        for (i, c) in self.conv_stack.iter().enumerate() {
            let step = |n: usize| {
                let padded = n + 2 * c.pad;
                (c.stride > 0 && padded >= c.kernel).then(|| (padded - c.kernel) / c.stride + 1)
            };
            match (step(h), step(w)) {
                (Some(a), Some(b)) => (h, w) = (a, b),
                _ => return Err(Error::invalid(format!("conv layer {} has empty output", i + 1))),
            }
            out.push((h, w));
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv_stack.is_empty() {
            return Err(Error::invalid("visual conv stack is empty"));
        }
        if !(self.input_mean.is_finite() && self.input_std.is_finite() && self.input_std > 0.0) {
            return Err(Error::invalid("input_std must be positive and finite"));
        }
        if self.attention_after == 0 || self.attention_after > self.conv_stack.len() {
            return Err(Error::invalid(format!(
                "attention_after {} not a layer index in 1..={}",
                self.attention_after,
                self.conv_stack.len()
            )));
        }
        let (j, k) = self.attention_grid()?;
        if j < 2 || k < 2 {
            return Err(Error::invalid(format!("attention grid {j}x{k} smaller than 2x2")));
        }
        Ok(())
    }

    /// `(J, K)` of the feature maps at the attention insertion point.
    pub fn attention_grid(&self) -> Result<(usize, usize)> {
        let sizes = self.spatial_sizes()?;
        sizes
            .get(self.attention_after.wrapping_sub(1))
            .copied()
            .ok_or_else(|| Error::invalid("attention_after out of range"))
    }

    /// Channels of the tapped feature maps.
    pub fn tap_channels(&self) -> usize {
        self.conv_stack[self.attention_after - 1].out_channels
    }

    /// Output feature dimension `d` after global average pooling.
    pub fn feature_dim(&self) -> usize {
        self.conv_stack.last().map_or(0, |c| c.out_channels)
    }
}

#[derive(Clone, Debug)]
pub struct VisualModule {
    pub config: VisualConfig,
    pub convs: Vec<(ParamId, ParamId)>,
    pub mask_weight: ParamId,
    pub mask_bias: ParamId,
}

/// Everything the visual forward exposes downstream.
pub struct VisualOutput {
    /// Per-frame features `T×d`.
    pub features: Var,
    /// Feature maps after layer `attention_after`, before the mask (`T×C×J×K`).
    pub tap: Var,
    /// Attention mask `T×J×K`.
    pub mask: Var,
}

impl VisualModule {
    pub fn new(config: VisualConfig, store: &mut ParamStore, group: usize, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut convs = Vec::new();
        let mut c_in = config.in_channels;
        for (i, c) in config.conv_stack.iter().enumerate() {
            let fan_in = c_in * c.kernel * c.kernel;
            let w = normal_tensor(rng, &[c.out_channels, c_in, c.kernel, c.kernel], (2.0 / fan_in as f64).sqrt());
            let w = store.add(format!("visual.conv{}.weight", i + 1), group, w);
            let b = store.add(format!("visual.conv{}.bias", i + 1), group, Tensor::zeros(&[c.out_channels]));
            convs.push((w, b));
            c_in = c.out_channels;
        }
        let fan_in = 2 * MASK_KERNEL * MASK_KERNEL;
        let mask_weight = store.add(
            "visual.attention.weight",
            group,
            normal_tensor(rng, &[1, 2, MASK_KERNEL, MASK_KERNEL], (1.0 / fan_in as f64).sqrt()),
        );
        let mask_bias = store.add("visual.attention.bias", group, Tensor::zeros(&[1]));
        Ok(VisualModule {
            config,
            convs,
            mask_weight,
            mask_bias,
        })
    }

    /// Scalars owned by the attention module.
    pub fn attention_param_count(&self, store: &ParamStore) -> usize {
        store.get(self.mask_weight).numel() + store.get(self.mask_bias).numel()
    }

    /// Runs `T×C_in×H×W` frames through the stack.
    pub fn forward(&self, g: &mut Graph, p: &Bound, frames: Var) -> Result<VisualOutput> {
        let s = g.shape(frames).to_vec();
        let cfg = &self.config;
        if s.len() != 4 || s[1] != cfg.in_channels || s[2] != cfg.height || s[3] != cfg.width {
            return Err(Error::Shape {
                op: "visual_forward",
                lhs: s,
                rhs: vec![0, cfg.in_channels, cfg.height, cfg.width],
            });
        }
        let shifted = g.add_scalar(frames, -cfg.input_mean);
        let mut x = g.scalar_mul(shifted, 1.0 / cfg.input_std);
        let mut tap_mask = None;
        for (i, (spec, &(w, b))) in cfg.conv_stack.iter().zip(&self.convs).enumerate() {
            let y = g.conv2d(x, p[w], Some(p[b]), spec.stride, spec.pad)?;
            x = g.relu(y);
            if i + 1 == cfg.attention_after {
                let tap = x;
                let m1 = cmp_squeeze(g, tap)?;
                let e = channel_weights(g, tap)?;
                let m2 = weighted_squeeze(g, tap, e)?;
                let mask = attention_mask(g, m1, m2, p[self.mask_weight], p[self.mask_bias])?;
                x = apply_attention(g, tap, mask)?;
                tap_mask = Some((tap, mask));
            }
        }
        let (tap, mask) = tap_mask.expect("attention layer validated");
        let features = global_avg_pool(g, x)?;
        Ok(VisualOutput { features, tap, mask })
    }
}

/// `T×C×J×K` → `T×C` spatial mean.
pub fn global_avg_pool(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let flat = g.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
    g.reduce_mean(flat, 2)
}

/// Channel-wise max: `T×C×J×K` → `T×1×J×K`.
pub fn cmp_squeeze(g: &mut Graph, f: Var) -> Result<Var> {
    let s = g.shape(f).to_vec();
    let m = g.reduce_max(f, 1)?;
    g.reshape(m, &[s[0], 1, s[2], s[3]])
}

/// Softmax over channels of the spatial means: `T×C×J×K` → `T×C`.
pub fn channel_weights(g: &mut Graph, f: Var) -> Result<Var> {
    let m = global_avg_pool(g, f)?;
    g.softmax(m, 1)
}

/// `Σ_c F_c · E_c`: `T×C×J×K`, `T×C` → `T×1×J×K`.
pub fn weighted_squeeze(g: &mut Graph, f: Var, e: Var) -> Result<Var> {
    let s = g.shape(f).to_vec();
    let e4 = g.reshape(e, &[s[0], s[1], 1, 1])?;
    let prod = g.mul(f, e4)?;
    let sum = g.reduce_sum(prod, 1)?;
    g.reshape(sum, &[s[0], 1, s[2], s[3]])
}

/// `sigmoid(conv7x7(cat(M1, M2)))` with same padding: → `T×J×K`.
pub fn attention_mask(g: &mut Graph, m1: Var, m2: Var, weight: Var, bias: Var) -> Result<Var> {
    let s = g.shape(m1).to_vec();
    if s.len() != 4 || s[2] < 1 || s[3] < 1 {
        return Err(Error::invalid(format!("attention mask input {s:?} has no spatial extent")));
    }
    if g.shape(m2) != s.as_slice() {
        return Err(Error::Shape {
            op: "attention_mask",
            lhs: s,
            rhs: g.shape(m2).to_vec(),
        });
    }
    let cat = g.concat(&[m1, m2], 1)?;
    let conv = g.conv2d(cat, weight, Some(bias), 1, MASK_KERNEL / 2)?;
    let m = g.sigmoid(conv);
    g.reshape(m, &[s[0], s[2], s[3]])
}

/// Broadcast product of `T×C×J×K` maps with a `T×J×K` mask.
pub fn apply_attention(g: &mut Graph, f: Var, mask: Var) -> Result<Var> {
    let s = g.shape(mask).to_vec();
    let m4 = g.reshape(mask, &[s[0], 1, s[1], s[2]])?;
    g.mul(f, m4)
}

/// Mean over frames of `‖M − H_r‖² / (J·K)`.
pub fn sac_loss(g: &mut Graph, mask: Var, target: Var) -> Result<Var> {
    if g.shape(mask) != g.shape(target) {
        return Err(Error::Shape {
            op: "sac_loss",
            lhs: g.shape(mask).to_vec(),
            rhs: g.shape(target).to_vec(),
        });
    }
    let d = g.sub(mask, target)?;
    let sq = g.mul(d, d)?;
    Ok(g.mean(sq))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_check_many, GroupRole};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_maps(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn cmp_squeeze_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::new();
        let one = g.constant(rand_maps(&mut rng, &[1, 1, 3, 3]));
        let m = cmp_squeeze(&mut g, one).unwrap();
        assert_eq!(g.data(m), g.data(one));

        let f = rand_maps(&mut rng, &[2, 4, 3, 3]);
        let x = g.constant(f.clone());
        let m = cmp_squeeze(&mut g, x).unwrap();
        for t in 0..2 {
            for cell in 0..9 {
                let want = (0..4).map(|c| f.data()[(t * 4 + c) * 9 + cell]).fold(f64::NEG_INFINITY, f64::max);
                assert_eq!(g.data(m)[t * 9 + cell], want);
            }
        }
    }

    #[test]
    fn channel_weight_examples() {
        let mut g = Graph::new();
        let one = g.constant(Tensor::full(&[1, 1, 2, 2], 3.0));
        let e = channel_weights(&mut g, one).unwrap();
        assert_eq!(g.data(e), &[1.0]);
        let equal = g.constant(Tensor::from_fn(&[1, 2, 2, 2], |i| [1.0, 3.0, 3.0, 1.0][i % 4]));
        let e = channel_weights(&mut g, equal).unwrap();
        assert!(g.data(e).iter().all(|&v| (v - 0.5).abs() < 1e-15));
        let ln3 = 3f64.ln();
        let f = g.constant(Tensor::from_fn(&[1, 2, 2, 2], |i| if i < 4 { 0.0 } else { ln3 }));
        let e = channel_weights(&mut g, f).unwrap();
        assert!((g.data(e)[0] - 0.25).abs() < 1e-15 && (g.data(e)[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn weighted_squeeze_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = rand_maps(&mut rng, &[1, 3, 2, 2]);
        let mut g = Graph::new();
        let x = g.constant(f.clone());
        let onehot = g.constant(Tensor::new(&[1, 3], vec![0.0, 1.0, 0.0]).unwrap());
        let m = weighted_squeeze(&mut g, x, onehot).unwrap();
        assert_eq!(g.data(m), &f.data()[4..8]);

        let w = [0.2, 0.5, 0.3];
        let e = g.constant(Tensor::new(&[1, 3], w.to_vec()).unwrap());
        let m = weighted_squeeze(&mut g, x, e).unwrap();
        for cell in 0..4 {
            let want: f64 = (0..3).map(|c| f.data()[c * 4 + cell] * w[c]).sum();
            assert!((g.data(m)[cell] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn mask_range_and_saturation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::new();
        let m1 = g.constant(rand_maps(&mut rng, &[2, 1, 5, 4]));
        let m2 = g.constant(rand_maps(&mut rng, &[2, 1, 5, 4]));
        let zw = g.constant(Tensor::zeros(&[1, 2, 7, 7]));
        let zb = g.constant(Tensor::zeros(&[1]));
        let m = attention_mask(&mut g, m1, m2, zw, zb).unwrap();
        assert_eq!(g.shape(m), &[2, 5, 4]);
        assert!(g.data(m).iter().all(|&v| v == 0.5));
        let big = g.constant(Tensor::scalar(50.0));
        let m = attention_mask(&mut g, m1, m2, zw, big).unwrap();
        assert!(g.data(m).iter().all(|&v| v > 1.0 - 1e-12));
        let rw = g.constant(rand_maps(&mut rng, &[1, 2, 7, 7]));
        let m = attention_mask(&mut g, m1, m2, rw, zb).unwrap();
        assert!(g.data(m).iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn apply_attention_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = rand_maps(&mut rng, &[1, 2, 2, 2]);
        let mut g = Graph::new();
        let x = g.constant(f.clone());
        let ones = g.constant(Tensor::full(&[1, 2, 2], 1.0));
        let y = apply_attention(&mut g, x, ones).unwrap();
        assert_eq!(g.data(y), f.data());
        let zeros = g.constant(Tensor::zeros(&[1, 2, 2]));
        let y = apply_attention(&mut g, x, zeros).unwrap();
        assert!(g.data(y).iter().all(|&v| v == 0.0));
        let spike = g.constant(Tensor::new(&[1, 2, 2], vec![0.0, 0.0, 0.7, 0.0]).unwrap());
        let y = apply_attention(&mut g, x, spike).unwrap();
        for c in 0..2 {
            for cell in 0..4 {
                let want = if cell == 2 { 0.7 * f.data()[c * 4 + cell] } else { 0.0 };
                assert_eq!(g.data(y)[c * 4 + cell], want);
            }
        }
    }

    #[test]
    fn sac_loss_examples() {
        let mut g = Graph::new();
        let h = g.constant(Tensor::full(&[1, 2, 2], 1.0));
        let l = sac_loss(&mut g, h, h).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        let zero = g.constant(Tensor::zeros(&[1, 2, 2]));
        let l = sac_loss(&mut g, zero, h).unwrap();
        assert_eq!(g.value(l).item(), 1.0);
        let half = g.constant(Tensor::full(&[1, 2, 2], 0.5));
        let l = sac_loss(&mut g, half, h).unwrap();
        assert_eq!(g.value(l).item(), 0.25);
        let other = g.constant(Tensor::zeros(&[1, 2, 3]));
        assert!(sac_loss(&mut g, half, other).is_err());
    }

    #[test]
    fn sac_loss_frame_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = Tensor::from_fn(&[3, 2, 2], |_| rng.random_range(0.01..0.99));
        let h = Tensor::from_fn(&[3, 2, 2], |_| rng.random_range(0.01..1.0));
        let permute = |t: &Tensor| {
            let d = t.data();
            let mut out = d[8..12].to_vec();
            out.extend_from_slice(&d[0..8]);
            Tensor::new(&[3, 2, 2], out).unwrap()
        };
        let eval = |m: Tensor, h: Tensor| {
            let mut g = Graph::new();
            let (m, h) = (g.constant(m), g.constant(h));
            let l = sac_loss(&mut g, m, h).unwrap();
            g.value(l).item()
        };
        let a = eval(m.clone(), h.clone());
        let b = eval(permute(&m), permute(&h));
        assert!((a - b).abs() < 1e-15 && a > 0.0);
    }

    #[test]
    fn attention_adds_99_parameters() {
        let mut store = ParamStore::new();
        let grp = store.add_group("backbone", GroupRole::Backbone, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v = VisualModule::new(VisualConfig::default(), &mut store, grp, &mut rng).unwrap();
        assert_eq!(v.attention_param_count(&store), 99);
        assert_eq!(v.config.attention_grid().unwrap(), (8, 8));
        assert_eq!(v.config.feature_dim(), 64);
    }

    #[test]
    fn forward_shapes_and_frame_independence() {
        let mut store = ParamStore::new();
        let grp = store.add_group("backbone", GroupRole::Backbone, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = VisualModule::new(VisualConfig::default(), &mut store, grp, &mut rng).unwrap();
        let frames = Tensor::from_fn(&[3, 3, 32, 32], |_| rng.random_range(0.0..1.0));
        let run = |frames: Tensor| {
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let x = g.constant(frames);
            let out = v.forward(&mut g, &p, x).unwrap();
            (g.value(out.features).clone(), g.shape(out.mask).to_vec())
        };
        let (feat, mshape) = run(frames.clone());
        assert_eq!(feat.shape(), &[3, 64]);
        assert_eq!(mshape, vec![3, 8, 8]);
        // move frame 2 to the front
        let per = 3 * 32 * 32;
        let mut swapped = frames.data()[2 * per..].to_vec();
        swapped.extend_from_slice(&frames.data()[..2 * per]);
        let (feat2, _) = run(Tensor::new(&[3, 3, 32, 32], swapped).unwrap());
        assert_eq!(&feat2.data()[..64], &feat.data()[128..]);
        assert_eq!(&feat2.data()[64..], &feat.data()[..128]);
        let (one, _) = run(Tensor::new(&[1, 3, 32, 32], frames.data()[..per].to_vec()).unwrap());
        assert_eq!(one.shape(), &[1, 64]);
    }

    #[test]
    fn sac_gradient_wrt_mask_conv() {
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = rand_maps(&mut rng, &[2, 3, 5, 5]);
            let w = Tensor::from_fn(&[1, 2, 7, 7], |_| rng.random_range(-0.3..0.3));
            let b = Tensor::from_fn(&[1], |_| rng.random_range(-0.3..0.3));
            let h = Tensor::from_fn(&[2, 5, 5], |_| rng.random_range(0.01..1.0));
            let err = finite_diff_check_many(
                |g, v| {
                    let m1 = cmp_squeeze(g, v[0])?;
                    let e = channel_weights(g, v[0])?;
                    let m2 = weighted_squeeze(g, v[0], e)?;
                    let m = attention_mask(g, m1, m2, v[1], v[2])?;
                    let target = g.constant(h.clone());
                    sac_loss(g, m, target)
                },
                &[f, w, b],
                1e-5,
            )
            .unwrap();
            assert!(err <= 1e-5, "seed {seed}: {err}");
        }
    }
}
