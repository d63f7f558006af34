//! Local transformer sequential module and gloss classification head.

use rand::Rng;

use crate::autodiff::{Bound, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{normal_tensor, FeedForward, LayerNorm, Linear, MultiHeadAttention};

#[derive(Clone, Debug, PartialEq)]
pub struct LtConfig {
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub dtcn_kernel: usize,
    pub ffn_hidden: usize,
    pub window: f64,
}

impl Default for LtConfig {
    fn default() -> Self {
        LtConfig {
            layers: 2,
            model_dim: 64,
            heads: 4,
            dtcn_kernel: 5,
            ffn_hidden: 256,
            window: 6.0,
        }
    }
}

impl LtConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!(
                "model dim {} not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        if self.dtcn_kernel.is_multiple_of(2) {
            return Err(Error::invalid(format!("dtcn kernel {} must be odd", self.dtcn_kernel)));
        }
        if !(self.window > 0.0 && self.window.is_finite()) {
            return Err(Error::invalid(format!("window D must be positive, got {}", self.window)));
        }
        Ok(())
    }
}

/// Mean frames-per-gloss ratio over `(frames, glosses)` pairs.
pub fn compute_window_d(lengths: &[(usize, usize)]) -> Result<f64> {
    if lengths.is_empty() {
        return Err(Error::invalid("no training lengths to compute D from"));
    }
    let mut sum = 0.0;
    for &(t, n) in lengths {
        if n == 0 {
            return Err(Error::invalid("sample with zero glosses"));
        }
        sum += t as f64 / n as f64;
    }
    Ok(sum / lengths.len() as f64)
}

/// `GB[i][j] = −(j−i)² / (2σ²)` with `σ = D/2`, flattened `T×T`.
pub fn gaussian_bias(t: usize, window: f64) -> Tensor {
    let sigma = window / 2.0;
    let denom = 2.0 * sigma * sigma;
    Tensor::from_fn(&[t, t], |idx| {
        let (i, j) = (idx / t, idx % t);
        let d = j as f64 - i as f64;
        -(d * d) / denom
    })
}

/// Depth-wise temporal convolution with per-channel bias.
#[derive(Clone, Debug)]
pub struct DepthwiseTcn {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl DepthwiseTcn {
    pub fn new(store: &mut ParamStore, group: usize, name: &str, dim: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        let std = (1.0 / kernel as f64).sqrt();
        DepthwiseTcn {
            weight: store.add(format!("{name}.weight"), group, normal_tensor(rng, &[dim, kernel], std)),
            bias: store.add(format!("{name}.bias"), group, Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.depthwise_conv1d(x, p[self.weight])?;
        g.add(y, p[self.bias])
    }
}

/// One layer: `x + DTCN(x)`, then `+ LSA(LN(·))`, then `+ FFN(LN(·))`.
#[derive(Clone, Debug)]
pub struct LtLayer {
    pub dtcn: DepthwiseTcn,
    pub norm_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl LtLayer {
    pub fn new(store: &mut ParamStore, group: usize, name: &str, cfg: &LtConfig, rng: &mut impl Rng) -> Result<Self> {
        let d = cfg.model_dim;
        Ok(LtLayer {
            dtcn: DepthwiseTcn::new(store, group, &format!("{name}.dtcn"), d, cfg.dtcn_kernel, rng),
            norm_attn: LayerNorm::new(store, group, &format!("{name}.ln_attn"), d),
            attn: MultiHeadAttention::new(store, group, &format!("{name}.lsa"), d, cfg.heads, rng)?,
            norm_ffn: LayerNorm::new(store, group, &format!("{name}.ln_ffn"), d),
            ffn: FeedForward::new(store, group, &format!("{name}.ffn"), d, cfg.ffn_hidden, rng),
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, bias: Var) -> Result<Var> {
        let c = self.dtcn.forward(g, p, x)?;
        let x = g.add(x, c)?;
        let n = self.norm_attn.forward(g, p, x)?;
        let a = local_self_attention(g, p, &self.attn, n, bias)?;
        let x = g.add(x, a)?;
        let n = self.norm_ffn.forward(g, p, x)?;
        let f = self.ffn.forward(g, p, n)?;
        g.add(x, f)
    }
}

/// Multi-head attention with the Gaussian bias added to every head's scores.
pub fn local_self_attention(g: &mut Graph, p: &Bound, attn: &MultiHeadAttention, x: Var, bias: Var) -> Result<Var> {
    Ok(attn.forward(g, p, x, Some(bias))?.out)
}

#[derive(Clone, Debug)]
pub struct SequentialModule {
    pub config: LtConfig,
    pub layers: Vec<LtLayer>,
}

impl SequentialModule {
    pub fn new(config: LtConfig, store: &mut ParamStore, group: usize, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let layers = (0..config.layers)
            .map(|i| LtLayer::new(store, group, &format!("lt{i}"), &config, rng))
            .collect::<Result<_>>()?;
        Ok(SequentialModule { config, layers })
    }

    /// `T×d` visual features → `T×d` sequential features.
    pub fn forward(&self, g: &mut Graph, p: &Bound, v: Var) -> Result<Var> {
        let s = g.shape(v).to_vec();
        if s.len() != 2 || s[1] != self.config.model_dim {
            return Err(Error::Shape {
                op: "sequential_forward",
                lhs: s,
                rhs: vec![0, self.config.model_dim],
            });
        }
        if self.layers.is_empty() {
            return Ok(v);
        }
        let bias = g.constant(gaussian_bias(s[0], self.config.window));
        let mut x = v;
        for layer in &self.layers {
            x = layer.forward(g, p, x, bias)?;
        }
        Ok(x)
    }
}

/// Affine projection to `|V|+1` classes, blank at index 0.
#[derive(Clone, Debug)]
pub struct GlossHead {
    pub proj: Linear,
    pub classes: usize,
}

impl GlossHead {
    pub fn new(store: &mut ParamStore, group: usize, dim: usize, vocab_size: usize, rng: &mut impl Rng) -> Self {
        GlossHead {
            proj: Linear::new(store, group, "gloss_head", dim, vocab_size + 1, rng),
            classes: vocab_size + 1,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, s: Var) -> Result<Var> {
        self.proj.forward(g, p, s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_check_many, GroupRole};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store() -> (ParamStore, usize) {
        let mut s = ParamStore::new();
        let grp = s.add_group("backbone", GroupRole::Backbone, 1.0);
        (s, grp)
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn window_examples() {
        assert_eq!(compute_window_d(&[(10, 2), (20, 4)]).unwrap(), 5.0);
        assert_eq!(compute_window_d(&[(7, 2), (9, 3)]).unwrap(), 3.25);
        assert!(compute_window_d(&[]).is_err());
        assert!(compute_window_d(&[(3, 0)]).is_err());
    }

    #[test]
    fn gaussian_bias_properties() {
        let gb = gaussian_bias(6, 2.0);
        let d = gb.data();
        for i in 0..6 {
            assert_eq!(d[i * 6 + i], 0.0);
            for j in 0..6 {
                assert_eq!(d[i * 6 + j], d[j * 6 + i]);
                if j + 1 < 6 && j >= i {
                    assert!(d[i * 6 + j + 1] < d[i * 6 + j]);
                }
            }
        }
        assert_eq!(d[1], -0.5);
    }

    fn plain_attention(x: &Tensor, attn: &MultiHeadAttention, store: &ParamStore, bias: Option<&Tensor>) -> Vec<f64> {
        let (t, d) = (x.shape()[0], x.shape()[1]);
        let proj = |l: &Linear, inp: &[f64], rows: usize| {
            let w = store.get(l.weight).data();
            let b = store.get(l.bias).data();
            let (fi, fo) = (l.fan_in, l.fan_out);
            let mut out = vec![0.0; rows * fo];
            for r in 0..rows {
                for o in 0..fo {
                    out[r * fo + o] = b[o] + (0..fi).map(|i| inp[r * fi + i] * w[i * fo + o]).sum::<f64>();
                }
            }
            out
        };
        let q = proj(&attn.query, x.data(), t);
        let k = proj(&attn.key, x.data(), t);
        let v = proj(&attn.value, x.data(), t);
        let dh = d / attn.heads;
        let mut cat = vec![0.0; t * d];
        for h in 0..attn.heads {
            for i in 0..t {
                let mut s: Vec<f64> = (0..t)
                    .map(|j| {
                        let dot: f64 = (0..dh).map(|c| q[i * d + h * dh + c] * k[j * d + h * dh + c]).sum();
                        dot / (dh as f64).sqrt() + bias.map_or(0.0, |b| b.data()[i * t + j])
                    })
                    .collect();
                let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                s.iter_mut().for_each(|e| *e = (*e - m).exp());
                let z: f64 = s.iter().sum();
                for c in 0..dh {
                    cat[i * d + h * dh + c] = (0..t).map(|j| s[j] / z * v[j * d + h * dh + c]).sum();
                }
            }
        }
        proj(&attn.output, &cat, t)
    }

    #[test]
    fn zero_bias_matches_plain_attention() {
        let (mut st, grp) = store();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let attn = MultiHeadAttention::new(&mut st, grp, "a", 8, 2, &mut rng).unwrap();
        let x = rand_tensor(&mut rng, &[5, 8]);
        let mut g = Graph::new();
        let p = st.bind(&mut g);
        let xv = g.constant(x.clone());
        let zero = g.constant(Tensor::zeros(&[5, 5]));
        let out = local_self_attention(&mut g, &p, &attn, xv, zero).unwrap();
        let want = plain_attention(&x, &attn, &st, None);
        for (a, b) in g.data(out).iter().zip(&want) {
            assert!((a - b).abs() <= 1e-12);
        }
        let gb = gaussian_bias(5, 3.0);
        let bv = g.constant(gb.clone());
        let out = local_self_attention(&mut g, &p, &attn, xv, bv).unwrap();
        let want = plain_attention(&x, &attn, &st, Some(&gb));
        for (a, b) in g.data(out).iter().zip(&want) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn tiny_window_is_diagonal_attention() {
        let (mut st, grp) = store();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let attn = MultiHeadAttention::new(&mut st, grp, "a", 8, 2, &mut rng).unwrap();
        let x = rand_tensor(&mut rng, &[4, 8]);
        let mut g = Graph::new();
        let p = st.bind(&mut g);
        let xv = g.constant(x);
        let bias = g.constant(gaussian_bias(4, 1e-3));
        let res = attn.forward(&mut g, &p, xv, Some(bias)).unwrap();
        // diagonal-only oracle: each position attends to itself, out = x Wv W^O
        let v = attn.value.forward(&mut g, &p, xv).unwrap();
        let want = attn.output.forward(&mut g, &p, v).unwrap();
        for (a, b) in g.data(res.out).iter().zip(g.data(want)) {
            assert!((a - b).abs() <= 1e-6);
        }
        for w in res.weights {
            for row in g.data(w).chunks(4) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                assert!(row.iter().all(|&e| e >= 0.0));
            }
        }
    }

    #[test]
    fn zero_params_layer_is_identity() {
        let (mut st, grp) = store();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = LtConfig {
            model_dim: 8,
            heads: 2,
            ffn_hidden: 16,
            ..LtConfig::default()
        };
        let m = SequentialModule::new(cfg, &mut st, grp, &mut rng).unwrap();
        for id in st.ids().collect::<Vec<_>>() {
            st.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        for t in [1, 3] {
            let x = rand_tensor(&mut rng, &[t, 8]);
            let mut g = Graph::new();
            let p = st.bind(&mut g);
            let xv = g.constant(x.clone());
            let y = m.forward(&mut g, &p, xv).unwrap();
            assert_eq!(g.data(y), x.data());
        }
    }

    #[test]
    fn forward_contracts() {
        let (mut st, grp) = store();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let empty = SequentialModule::new(
            LtConfig {
                layers: 0,
                ..LtConfig::default()
            },
            &mut st,
            grp,
            &mut rng,
        )
        .unwrap();
        let m = SequentialModule::new(LtConfig::default(), &mut st, grp, &mut rng).unwrap();
        let n_params = st.num_scalars();
        let x = rand_tensor(&mut rng, &[6, 64]);
        let x2 = rand_tensor(&mut rng, &[12, 64]);
        let mut g = Graph::new();
        let p = st.bind(&mut g);
        let xv = g.constant(x.clone());
        let same = empty.forward(&mut g, &p, xv).unwrap();
        assert_eq!(g.data(same), x.data());
        let a = m.forward(&mut g, &p, xv).unwrap();
        let b = m.forward(&mut g, &p, xv).unwrap();
        assert_eq!(g.data(a), g.data(b));
        let x2v = g.constant(x2);
        let c = m.forward(&mut g, &p, x2v).unwrap();
        assert_eq!(g.shape(c), &[12, 64]);
        assert_eq!(st.num_scalars(), n_params);
    }

    #[test]
    fn gloss_head_shapes() {
        let (mut st, grp) = store();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let head = GlossHead::new(&mut st, grp, 8, 3, &mut rng);
        st.get_mut(head.proj.weight).data_mut().iter_mut().for_each(|v| *v = 0.0);
        let mut g = Graph::new();
        let p = st.bind(&mut g);
        let x = g.constant(rand_tensor(&mut rng, &[2, 8]));
        let l = head.forward(&mut g, &p, x).unwrap();
        assert_eq!(g.shape(l), &[2, 4]);
        let sm = g.softmax(l, 1).unwrap();
        assert!(g.data(sm).iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn sequential_gradient_check() {
        let cfg = LtConfig {
            layers: 2,
            model_dim: 8,
            heads: 2,
            dtcn_kernel: 3,
            ffn_hidden: 16,
            window: 2.5,
        };
        let (mut st, grp) = store();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = SequentialModule::new(cfg, &mut st, grp, &mut rng).unwrap();
        let ids: Vec<_> = st.ids().collect();
        let mut inputs = vec![rand_tensor(&mut rng, &[4, 8])];
        inputs.extend(ids.iter().map(|&id| st.get(id).clone()));
        let probe = rand_tensor(&mut rng, &[4, 8]);
        let err = finite_diff_check_many(
            |g, vars| {
                let bound = Bound::from_vars(vars[1..].to_vec());
                let y = m.forward(g, &bound, vars[0])?;
                let w = g.constant(probe.clone());
                let prod = g.mul(y, w)?;
                Ok(g.sum(prod))
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-5, "{err}");
    }
}
