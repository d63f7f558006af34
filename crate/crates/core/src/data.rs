//! Synthetic multi-signer sign data, on-disk formats and frame-dropping
//! augmentations.
//!
//! Each gloss is a template trajectory for two hand blobs; a face blob stays
//! near the top-center. Blobs are drawn in separate color channels (face red,
//! left hand green, right hand blue) over a gray background. Signers differ by
//! a static background tint and a blob size factor.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::heatmap::{read_keypoints, write_keypoints, KeypointTrack};

pub const TENSOR_MAGIC: &[u8; 4] = b"SLT1";
pub const TENSOR_MAGIC_F64: &[u8; 4] = b"SLT2";

const BACKGROUND: f64 = 0.25;
const BLOB_AMPLITUDE: f64 = 0.7;
const HAND_SIGMA: f64 = 1.6;
const FACE_SIGMA: f64 = 2.2;
const KEYPOINT_NOISE: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            _ => Err(Error::invalid(format!("unknown split '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub vocab_size: usize,
    pub signers: usize,
    /// Signers `0..train_signers` appear in training; the rest only in dev
    /// and test when `signer_independent` is set.
    pub train_signers: usize,
    pub signer_independent: bool,
    pub frames_mean: usize,
    pub frames_jitter: usize,
    /// Per-video tint offset range (uniform ±), independent of the signer.
    pub appearance_jitter: f64,
    pub height: usize,
    pub width: usize,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub min_glosses: usize,
    pub max_glosses: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            vocab_size: 5,
            signers: 6,
            train_signers: 4,
            signer_independent: true,
            frames_mean: 6,
            frames_jitter: 2,
            appearance_jitter: 0.0,
            height: 32,
            width: 32,
            train: 200,
            dev: 40,
            test: 40,
            min_glosses: 2,
            max_glosses: 5,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.vocab_size == 0 {
            return fail("vocab_size must be positive".into());
        }
        if self.frames_jitter >= self.frames_mean {
            return fail(format!(
                "frames_jitter {} must be below frames_mean {}",
                self.frames_jitter, self.frames_mean
            ));
        }
        if !(0.0..=0.5).contains(&self.appearance_jitter) {
            return fail(format!("appearance_jitter {} not in [0, 0.5]", self.appearance_jitter));
        }
        if self.min_glosses == 0 || self.min_glosses > self.max_glosses {
            return fail(format!("gloss count range {}..={} invalid", self.min_glosses, self.max_glosses));
        }
        if self.height < 8 || self.width < 8 {
            return fail(format!("frame size {}x{} below 8x8", self.height, self.width));
        }
        if self.signers == 0 || self.train_signers == 0 || self.train_signers > self.signers {
            return fail(format!("train_signers {} not in 1..={}", self.train_signers, self.signers));
        }
        if self.signer_independent && self.train_signers == self.signers && self.dev + self.test > 0 {
            return fail("signer-independent split needs unseen signers".into());
        }
        Ok(())
    }

    fn signers_for(&self, split: Split) -> std::ops::Range<usize> {
        match (split, self.signer_independent) {
            (Split::Train, true) => 0..self.train_signers,
            (_, true) => self.train_signers..self.signers,
            (_, false) => 0..self.signers,
        }
    }

    fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Dev => self.dev,
            Split::Test => self.test,
        }
    }
}

/// Gloss strings; id `i+1` is `glosses[i]`, id 0 is the CTC blank.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    pub glosses: Vec<String>,
}

impl Vocab {
    pub fn len(&self) -> usize {
        self.glosses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.glosses.is_empty()
    }

    pub fn id(&self, gloss: &str) -> Option<usize> {
        self.glosses.iter().position(|g| g == gloss).map(|i| i + 1)
    }

    pub fn gloss(&self, id: usize) -> Option<&str> {
        id.checked_sub(1).and_then(|i| self.glosses.get(i)).map(String::as_str)
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .map(|&i| self.gloss(i).map_or_else(|| format!("<{i}>"), str::to_string))
            .collect()
    }
}

/// Frames `T×3×H×W` with co-indexed keypoints.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub frames: Tensor,
    pub keypoints: KeypointTrack,
}

impl Clip {
    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Keeps the listed frame indices, in the given order.
    pub fn select(&self, keep: &[usize]) -> Result<Clip> {
        if keep.is_empty() {
            return Err(Error::invalid("all frames dropped"));
        }
        let s = self.frames.shape();
        let per: usize = s[1..].iter().product();
        let src = self.frames.data();
        let mut data = Vec::with_capacity(keep.len() * per);
        for &t in keep {
            data.extend_from_slice(&src[t * per..(t + 1) * per]);
        }
        let mut shape = s.to_vec();
        shape[0] = keep.len();
        Ok(Clip {
            frames: Tensor::new(&shape, data)?,
            keypoints: self.keypoints.select(keep),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub split: Split,
    pub signer: usize,
    pub glosses: Vec<usize>,
    pub clip: Clip,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub vocab: Vocab,
    pub num_signers: usize,
    pub height: usize,
    pub width: usize,
    pub signer_independent: bool,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    /// `(frames, glosses)` of every training sample.
    pub fn train_lengths(&self) -> Vec<(usize, usize)> {
        self.split(Split::Train)
            .iter()
            .map(|s| (s.clip.len(), s.glosses.len()))
            .collect()
    }

    pub fn max_frames(&self) -> usize {
        self.samples.iter().map(|s| s.clip.len()).max().unwrap_or(0)
    }

    pub fn signer_set(&self, split: Split) -> Vec<usize> {
        let mut v: Vec<usize> = self.split(split).iter().map(|s| s.signer).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    fn check(&self) -> Result<()> {
        for s in &self.samples {
            if s.glosses.iter().any(|&g| g == 0 || g > self.vocab.len()) {
                return Err(Error::invalid(format!("sample {} has gloss id outside vocabulary", s.id)));
            }
            if s.signer >= self.num_signers {
                return Err(Error::invalid(format!("sample {} signer {} out of range", s.id, s.signer)));
            }
            if s.clip.keypoints.len() != s.clip.len() {
                return Err(Error::invalid(format!("sample {} keypoints not co-indexed with frames", s.id)));
            }
        }
        if self.signer_independent {
            let train = self.signer_set(Split::Train);
            for split in [Split::Dev, Split::Test] {
                if self.signer_set(split).iter().any(|s| train.contains(s)) {
                    return Err(Error::invalid(format!(
                        "signer-independent split has training signers in {}",
                        split.name()
                    )));
                }
            }
        }
        Ok(())
    }
}

struct GlossTemplate {
    // start, control, end per hand
    hands: [[(f64, f64); 3]; 2],
}

struct SignerLook {
    tint: [f64; 3],
    size: f64,
}

fn f32_round(v: f64) -> f64 {
    f64::from(v as f32)
}

fn bezier(p: &[(f64, f64); 3], u: f64) -> (f64, f64) {
    let a = (1.0 - u) * (1.0 - u);
    let b = 2.0 * u * (1.0 - u);
    let c = u * u;
    (a * p[0].0 + b * p[1].0 + c * p[2].0, a * p[0].1 + b * p[1].1 + c * p[2].1)
}

fn render_frame(out: &mut [f64], h: usize, w: usize, centers: &[(f64, f64); 3], look: &SignerLook) {
    let sigmas = [FACE_SIGMA, HAND_SIGMA, HAND_SIGMA];
    for c in 0..3 {
        let (cx, cy) = centers[c];
        let s = sigmas[c] * look.size;
        let inv = 1.0 / (2.0 * s * s);
        for a in 0..h {
            for b in 0..w {
                let d2 = (a as f64 - cx).powi(2) + (b as f64 - cy).powi(2);
                let v = BACKGROUND + look.tint[c] + BLOB_AMPLITUDE * (-d2 * inv).exp();
                out[(c * h + a) * w + b] = f32_round(v);
            }
        }
    }
}

/// Generates the whole dataset in memory. A pure function of `spec`.
pub fn synth_generate(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (h, w) = (spec.height, spec.width);
    let (hm, wm) = ((h - 1) as f64, (w - 1) as f64);

    let templates: Vec<GlossTemplate> = (0..spec.vocab_size)
        .map(|_| {
            let mut hand = |col_lo: f64, col_hi: f64| {
                let mut pt = || (rng.random_range(0.4..0.92) * hm, rng.random_range(col_lo..col_hi) * wm);
                [pt(), pt(), pt()]
            };
            GlossTemplate {
                hands: [hand(0.08, 0.6), hand(0.4, 0.92)],
            }
        })
        .collect();
    let looks: Vec<SignerLook> = (0..spec.signers)
        .map(|_| SignerLook {
            tint: [
                rng.random_range(-0.12..0.12),
                rng.random_range(-0.12..0.12),
                rng.random_range(-0.12..0.12),
            ],
            size: rng.random_range(0.85..1.15),
        })
        .collect();
    let face = (0.2 * hm, 0.5 * wm);

    let mut samples = Vec::new();
    for split in Split::ALL {
        let signers = spec.signers_for(split);
        for n in 0..spec.count(split) {
            let signer = rng.random_range(signers.clone());
            let len = rng.random_range(spec.min_glosses..=spec.max_glosses);
            let glosses: Vec<usize> = (0..len).map(|_| rng.random_range(1..=spec.vocab_size)).collect();
            let base = &looks[signer];
            let mut look = SignerLook {
                tint: base.tint,
                size: base.size,
            };
            for t in &mut look.tint {
                *t += spec.appearance_jitter * rng.random_range(-1.0..1.0);
            }
            let mut kps = Vec::new();
            for &gid in &glosses {
                let frames = rng.random_range(spec.frames_mean - spec.frames_jitter..=spec.frames_mean + spec.frames_jitter);
                let tpl = &templates[gid - 1];
                for f in 0..frames {
                    let u = if frames > 1 { f as f64 / (frames - 1) as f64 } else { 0.5 };
                    let mut jitter = |(x, y): (f64, f64)| {
                        let x = x + rng.random_range(-KEYPOINT_NOISE..KEYPOINT_NOISE);
                        let y = y + rng.random_range(-KEYPOINT_NOISE..KEYPOINT_NOISE);
                        (x.clamp(0.0, hm), y.clamp(0.0, wm))
                    };
                    let f = jitter(face);
                    let l = jitter(bezier(&tpl.hands[0], u));
                    let r = jitter(bezier(&tpl.hands[1], u));
                    kps.push([f, l, r]);
                }
            }
            let t = kps.len();
            let per = 3 * h * w;
            let mut data = vec![0.0; t * per];
            for (i, centers) in kps.iter().enumerate() {
                render_frame(&mut data[i * per..(i + 1) * per], h, w, centers, &look);
            }
            samples.push(Sample {
                id: format!("{}-{n:04}", split.name()),
                split,
                signer,
                glosses,
                clip: Clip {
                    frames: Tensor::new(&[t, 3, h, w], data)?,
                    keypoints: KeypointTrack::new(h, w, kps)?,
                },
            });
        }
    }
    let ds = Dataset {
        vocab: Vocab {
            glosses: (1..=spec.vocab_size).map(|i| format!("G{i}")).collect(),
        },
        num_signers: spec.signers,
        height: h,
        width: w,
        signer_independent: spec.signer_independent,
        samples,
    };
    ds.check()?;
    Ok(ds)
}

// ---- tensor files ----

/// Serializes in the `f32` format (`SLT1`).
pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    encode_with(t, TENSOR_MAGIC, |v, out| out.extend_from_slice(&(v as f32).to_le_bytes()))
}

/// Serializes in the lossless `f64` variant (`SLT2`).
pub fn encode_tensor_f64(t: &Tensor) -> Vec<u8> {
    encode_with(t, TENSOR_MAGIC_F64, |v, out| out.extend_from_slice(&v.to_le_bytes()))
}

fn encode_with(t: &Tensor, magic: &[u8; 4], put: impl Fn(f64, &mut Vec<u8>)) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.ndim() + 8 * t.numel());
    out.extend_from_slice(magic);
    out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        put(v, &mut out);
    }
    out
}

/// Decodes one tensor from the front of `bytes`, returning it with the byte
/// count consumed. Accepts both magics.
pub fn decode_tensor(bytes: &[u8], path: &Path) -> Result<(Tensor, usize)> {
    let bad = |m: &str| Error::format(path, m);
    let word = |at: usize| -> Result<u32> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
            .ok_or_else(|| bad("truncated header"))
    };
    let magic = bytes.get(..4).ok_or_else(|| bad("truncated header"))?;
    let width = match magic {
        m if m == TENSOR_MAGIC => 4,
        m if m == TENSOR_MAGIC_F64 => 8,
        _ => return Err(bad("bad magic")),
    };
    let rank = word(4)? as usize;
    if rank == 0 {
        return Err(bad("rank 0 tensors are not supported"));
    }
    if rank > 8 {
        return Err(bad("rank too large"));
    }
    let dims: Vec<usize> = (0..rank).map(|i| word(8 + 4 * i).map(|d| d as usize)).collect::<Result<_>>()?;
    let n = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| bad("dimension overflow"))?;
    let start = 8 + 4 * rank;
    let end = n
        .checked_mul(width)
        .and_then(|b| b.checked_add(start))
        .ok_or_else(|| bad("dimension overflow"))?;
    let body = bytes.get(start..end).ok_or_else(|| bad("truncated data"))?;
    let data = if width == 4 {
        body.chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect()
    } else {
        body.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect()
    };
    let t = Tensor::new(&dims, data).map_err(|e| bad(&e.to_string()))?;
    Ok((t, end))
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, encode_tensor(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (t, used) = decode_tensor(&bytes, path)?;
    if used != bytes.len() {
        return Err(Error::format(path, "trailing bytes after tensor"));
    }
    Ok(t)
}

// ---- dataset directories ----

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes `videos/`, `keypoints/`, `labels.tsv`, `vocab.txt` and `meta.txt`.
pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    create_dir(&dir.join("videos"))?;
    create_dir(&dir.join("keypoints"))?;
    let mut labels = String::new();
    for s in &ds.samples {
        write_tensor(&dir.join("videos").join(format!("{}.slt", s.id)), &s.clip.frames)?;
        write_keypoints(&dir.join("keypoints").join(format!("{}.csv", s.id)), &s.clip.keypoints)?;
        let _ = writeln!(labels, "{}\t{}\t{}", s.id, s.signer, ds.vocab.decode(&s.glosses).join(" "));
    }
    write_text(&dir.join("labels.tsv"), &labels)?;
    let mut vocab = ds.vocab.glosses.join("\n");
    vocab.push('\n');
    write_text(&dir.join("vocab.txt"), &vocab)?;
    let meta = format!(
        "num_signers={}\nsigner_independent={}\nheight={}\nwidth={}\n",
        ds.num_signers, ds.signer_independent, ds.height, ds.width
    );
    write_text(&dir.join("meta.txt"), &meta)
}

fn parse_meta(text: &str, path: &Path) -> Result<(usize, bool, usize, usize)> {
    let mut signers = None;
    let mut si = None;
    let mut h = None;
    let mut w = None;
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(path, format!("expected key=value, got '{line}'")))?;
        let num = || v.trim().parse::<usize>().map_err(|_| Error::format(path, format!("bad value for {k}")));
        match k.trim() {
            "num_signers" => signers = Some(num()?),
            "height" => h = Some(num()?),
            "width" => w = Some(num()?),
            "signer_independent" => {
                si = Some(
                    v.trim()
                        .parse::<bool>()
                        .map_err(|_| Error::format(path, "bad value for signer_independent"))?,
                )
            }
            other => return Err(Error::format(path, format!("unknown key '{other}'"))),
        }
    }
    match (signers, si, h, w) {
        (Some(a), Some(b), Some(c), Some(d)) => Ok((a, b, c, d)),
        _ => Err(Error::format(path, "missing keys")),
    }
}

/// Loads a directory written by [`write_dataset`]. The split of each sample
/// comes from its id prefix (`train-`, `dev-`, `test-`).
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let meta_path = dir.join("meta.txt");
    let (num_signers, signer_independent, height, width) = parse_meta(&read_text(&meta_path)?, &meta_path)?;
    let vocab_path = dir.join("vocab.txt");
    let glosses: Vec<String> = read_text(&vocab_path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect();
    if glosses.is_empty() {
        return Err(Error::format(&vocab_path, "empty vocabulary"));
    }
    let vocab = Vocab { glosses };
    let labels_path = dir.join("labels.tsv");
    let mut samples = Vec::new();
    for (ln, line) in read_text(&labels_path)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |m: String| Error::format(&labels_path, format!("line {}: {m}", ln + 1));
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(bad(format!("expected 3 tab-separated columns, got {}", cols.len())));
        }
        let id = cols[0].to_string();
        let split = Split::parse(id.split('-').next().unwrap_or("")).map_err(|e| bad(e.to_string()))?;
        let signer: usize = cols[1].parse().map_err(|_| bad(format!("bad signer id '{}'", cols[1])))?;
        let gl = cols[2]
            .split_whitespace()
            .map(|g| vocab.id(g).ok_or_else(|| bad(format!("unknown gloss '{g}'"))))
            .collect::<Result<Vec<_>>>()?;
        if gl.is_empty() {
            return Err(bad("empty gloss sequence".into()));
        }
        let video: PathBuf = dir.join("videos").join(format!("{id}.slt"));
        let frames = read_tensor(&video)?;
        let s = frames.shape();
        if s.len() != 4 || s[1] != 3 || s[2] != height || s[3] != width {
            return Err(Error::format(&video, format!("expected T×3×{height}×{width}, got {s:?}")));
        }
        let keypoints = read_keypoints(&dir.join("keypoints").join(format!("{id}.csv")), height, width)?;
        samples.push(Sample {
            id,
            split,
            signer,
            glosses: gl,
            clip: Clip { frames, keypoints },
        });
    }
    let ds = Dataset {
        vocab,
        num_signers,
        height,
        width,
        signer_independent,
        samples,
    };
    ds.check()?;
    Ok(ds)
}

// ---- augmentation ----

fn check_ratio(p_d: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p_d) {
        return Err(Error::invalid(format!("drop ratio {p_d} not in [0, 1)")));
    }
    Ok(())
}

/// Kept indices after dropping `⌊p_d·T⌋` uniformly random frames.
pub fn sfd_train_indices(t: usize, p_d: f64, rng: &mut impl Rng) -> Result<Vec<usize>> {
    check_ratio(p_d)?;
    let drop = (p_d * t as f64).floor() as usize;
    if drop >= t {
        return Err(Error::invalid("all frames dropped"));
    }
    let mut idx: Vec<usize> = (0..t).collect();
    idx.shuffle(rng);
    let mut keep = idx.split_off(drop);
    keep.sort_unstable();
    Ok(keep)
}

/// Two-frame clips with one random frame dropped from each (odd tail kept),
/// then a 40% random drop.
pub fn seg_and_drop_indices(t: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if t < 2 {
        return Err(Error::invalid("segment-and-drop needs at least 2 frames"));
    }
    let mut kept: Vec<usize> = (0..t / 2).map(|c| 2 * c + rng.random_range(0..2)).collect();
    if t % 2 == 1 {
        kept.push(t - 1);
    }
    let second = sfd_train_indices(kept.len(), 0.4, rng)?;
    Ok(second.into_iter().map(|i| kept[i]).collect())
}

/// Deterministic inference dropping of indices `⌊k/p_d⌋`.
pub fn sfd_infer_indices(t: usize, p_d: f64) -> Result<Vec<usize>> {
    check_ratio(p_d)?;
    if p_d == 0.0 {
        return Ok((0..t).collect());
    }
    let mut dropped = vec![false; t];
    for k in 0.. {
        let i = (k as f64 / p_d).floor() as usize;
        if i >= t {
            break;
        }
        dropped[i] = true;
    }
    let keep: Vec<usize> = (0..t).filter(|&i| !dropped[i]).collect();
    if keep.is_empty() {
        return Err(Error::invalid("all frames dropped"));
    }
    Ok(keep)
}

pub fn sfd_train(clip: &Clip, p_d: f64, rng: &mut impl Rng) -> Result<Clip> {
    clip.select(&sfd_train_indices(clip.len(), p_d, rng)?)
}

pub fn seg_and_drop(clip: &Clip, rng: &mut impl Rng) -> Result<Clip> {
    clip.select(&seg_and_drop_indices(clip.len(), rng)?)
}

pub fn sfd_infer(clip: &Clip, p_d: f64) -> Result<Clip> {
    clip.select(&sfd_infer_indices(clip.len(), p_d)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_spec() -> SynthSpec {
        SynthSpec {
            train: 6,
            dev: 2,
            test: 2,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = synth_generate(&small_spec()).unwrap();
        let b = synth_generate(&small_spec()).unwrap();
        assert_eq!(a, b);
        let c = synth_generate(&SynthSpec { seed: 1, ..small_spec() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn lengths_and_signers() {
        let spec = small_spec();
        let ds = synth_generate(&spec).unwrap();
        assert_eq!(ds.samples.len(), 10);
        for s in &ds.samples {
            assert!((2..=5).contains(&s.glosses.len()));
            assert!(s.clip.len() >= s.glosses.len() * 4 && s.clip.len() <= s.glosses.len() * 8);
            assert_eq!(s.clip.keypoints.len(), s.clip.len());
            match s.split {
                Split::Train => assert!(s.signer < 4),
                _ => assert!(s.signer >= 4),
            }
        }
    }

    #[test]
    fn keypoints_match_blob_argmax() {
        let ds = synth_generate(&small_spec()).unwrap();
        let (h, w) = (ds.height, ds.width);
        for s in ds.samples.iter().take(4) {
            let d = s.clip.frames.data();
            for (t, kp) in s.clip.keypoints.frames.iter().enumerate() {
                for (c, &(x, y)) in kp.iter().enumerate() {
                    let base = (t * 3 + c) * h * w;
                    let (mut best, mut arg) = (f64::NEG_INFINITY, 0);
                    for i in 0..h * w {
                        if d[base + i] > best {
                            best = d[base + i];
                            arg = i;
                        }
                    }
                    let (a, b) = ((arg / w) as f64, (arg % w) as f64);
                    assert!((a - x).abs() <= 1.0 && (b - y).abs() <= 1.0, "{s:?}", s = s.id);
                }
            }
        }
    }

    #[test]
    fn dataset_roundtrip() {
        let ds = synth_generate(&small_spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &ds).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.vocab, ds.vocab);
        assert_eq!(back.samples.len(), ds.samples.len());
        for (a, b) in back.samples.iter().zip(&ds.samples) {
            assert_eq!((&a.id, a.split, a.signer, &a.glosses), (&b.id, b.split, b.signer, &b.glosses));
            assert_eq!(a.clip.frames, b.clip.frames);
            assert_eq!(a.clip.keypoints, b.clip.keypoints);
        }
        let labels = fs::read_to_string(dir.path().join("labels.tsv")).unwrap();
        assert!(labels.lines().next().unwrap().starts_with("train-0000\t"));
    }

    #[test]
    fn tensor_file_examples() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.slt");
        let t = Tensor::new(&[2, 3], vec![0.5, -1.25, 3.0, 0.0, 1e-3f32 as f64, 7.0]).unwrap();
        write_tensor(&p, &t).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"SLT1");
        assert_eq!(&bytes[4..8], &2u32.to_le_bytes());
        assert_eq!(bytes.len(), 8 + 8 + 24);
        assert_eq!(read_tensor(&p).unwrap(), t);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        fs::write(&p, &bad).unwrap();
        let err = read_tensor(&p).unwrap_err().to_string();
        assert!(err.contains("t.slt"), "{err}");
        fs::write(&p, &bytes[..bytes.len() - 2]).unwrap();
        assert!(read_tensor(&p).is_err());
        let mut zero = b"SLT1".to_vec();
        zero.extend_from_slice(&0u32.to_le_bytes());
        fs::write(&p, &zero).unwrap();
        assert!(read_tensor(&p).is_err());

        let exact = Tensor::new(&[1], vec![0.1]).unwrap();
        let (back, _) = decode_tensor(&encode_tensor_f64(&exact), &p).unwrap();
        assert_eq!(back, exact);
    }

    #[test]
    fn augmentation_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sfd_train_indices(7, 0.0, &mut rng).unwrap(), (0..7).collect::<Vec<_>>());
        assert_eq!(sfd_train_indices(10, 0.5, &mut rng).unwrap().len(), 5);
        assert_eq!(seg_and_drop_indices(10, &mut rng).unwrap().len(), 3);
        assert_eq!(seg_and_drop_indices(2, &mut rng).unwrap().len(), 1);
        assert_eq!(sfd_infer_indices(6, 0.5).unwrap(), vec![1, 3, 5]);
        assert_eq!(sfd_infer_indices(4, 0.0).unwrap(), vec![0, 1, 2, 3]);
        assert!(sfd_train_indices(4, 1.0, &mut rng).is_err());

        let ds = synth_generate(&small_spec()).unwrap();
        let clip = &ds.samples[0].clip;
        let c = sfd_train(clip, 0.5, &mut rng).unwrap();
        assert_eq!(c.keypoints.len(), c.len());
        assert_eq!(c.len(), clip.len() - clip.len() / 2);
        assert_eq!(sfd_infer(clip, 0.5).unwrap(), sfd_infer(clip, 0.5).unwrap());
    }

    proptest! {
        #[test]
        fn augmentations_preserve_order(t in 2usize..60, p in 0.0f64..0.95, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dropped = if p == 0.0 {
                0
            } else {
                (0..).map(|k| (k as f64 / p).floor()).take_while(|&i| i < t as f64).count()
            };
            let infer = sfd_infer_indices(t, p);
            if dropped == t {
                prop_assert!(infer.is_err());
            } else {
                prop_assert_eq!(infer.as_ref().unwrap().len(), t - dropped);
            }
            for keep in [
                sfd_train_indices(t, p, &mut rng).unwrap(),
                seg_and_drop_indices(t, &mut rng).unwrap(),
                infer.unwrap_or_default(),
            ] {
                prop_assert!(keep.windows(2).all(|w| w[0] < w[1]));
                prop_assert!(keep.iter().all(|&i| i < t));
            }
        }
    }
}
