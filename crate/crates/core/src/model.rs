//! Factorized spatio-temporal attention autoencoder with a residual latent
//! transition model and a quadratic Lyapunov head.
//!
//! Forward passes are recorded on a [`Graph`]; parameters live in a sorted
//! name → tensor map and are bound to graph leaves per pass, so the same code
//! serves training, inference and finite-difference checks.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::Path;

use lyt_numcore::{Graph, NumError, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::render::VideoClip;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"LYTC1";
const LN_EPS: f64 = 1e-5;
/// Spatial downsampling of the decoder seed relative to the frame.
const DECODER_STRIDE: usize = 8;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
    pub d_model: usize,
    pub depth: usize,
    pub heads: usize,
    pub d_z: usize,
    /// Rollout horizon K.
    pub horizon: usize,
    /// Frames seen by the encoder (T_ctx); also the temporal embedding size.
    pub context: usize,
    pub lite: bool,
    pub sparsify_stride: usize,
    pub decoder_channels: usize,
    pub lambda_pred: f64,
    pub lambda_lyap: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            channels: 1,
            patch: 8,
            d_model: 64,
            depth: 2,
            heads: 4,
            d_z: 16,
            horizon: 4,
            context: 8,
            lite: false,
            sparsify_stride: 1,
            decoder_channels: 32,
            lambda_pred: 1.0,
            lambda_lyap: 0.1,
        }
    }
}

impl ModelConfig {
    /// Lite variant: half the heads and width, every other patch token.
    pub fn lite_of(full: &ModelConfig) -> ModelConfig {
        ModelConfig {
            d_model: full.d_model / 2,
            heads: (full.heads / 2).max(1),
            lite: true,
            sparsify_stride: 2,
            d_z: full.d_z.min(full.d_model / 2),
            ..full.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return fail(format!(
                "frame {}x{} is not divisible by patch size {}",
                self.height, self.width, self.patch
            ));
        }
        if self.height % DECODER_STRIDE != 0 || self.width % DECODER_STRIDE != 0 {
            return fail(format!(
                "frame {}x{} must be divisible by {DECODER_STRIDE} for the decoder",
                self.height, self.width
            ));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return fail(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            ));
        }
        if self.d_z == 0 || self.d_z > self.d_model {
            return fail(format!("d_z {} must lie in 1..={}", self.d_z, self.d_model));
        }
        if self.horizon == 0 || self.context == 0 || self.depth == 0 || self.channels == 0 {
            return fail("horizon, context, depth and channels must be positive".into());
        }
        if self.decoder_channels < 4 {
            return fail("decoder_channels must be at least 4".into());
        }
        if !self.lite && self.sparsify_stride != 1 {
            return fail("sparsify_stride must be 1 unless lite".into());
        }
        if self.sparsify_stride == 0 || self.sparsify_stride >= self.num_patches() {
            return fail(format!(
                "sparsify_stride {} must lie in 1..{}",
                self.sparsify_stride,
                self.num_patches()
            ));
        }
        if !(self.lambda_pred >= 0.0 && self.lambda_lyap >= 0.0) {
            return fail("loss weights must be nonnegative".into());
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    /// Row-major positions of the patch tokens that enter attention.
    pub fn kept_patches(&self) -> Vec<usize> {
        (0..self.num_patches()).step_by(self.sparsify_stride).collect()
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    fn seed_hw(&self) -> (usize, usize) {
        (self.height / DECODER_STRIDE, self.width / DECODER_STRIDE)
    }

    fn seed_len(&self) -> usize {
        let (h, w) = self.seed_hw();
        h * w * self.decoder_channels
    }

    fn decoder_widths(&self) -> [usize; 4] {
        let c0 = self.decoder_channels;
        [c0, c0 / 2, c0 / 4, self.channels]
    }
}

// ----- patches -----------------------------------------------------------

/// Splits an `H × W × C` frame into row-major `P × P` patches, each flattened
/// row-major over (py, px, c).
pub fn patchify(frame: &[f64], h: usize, w: usize, c: usize, p: usize) -> Result<Vec<f64>> {
    if p == 0 || h % p != 0 || w % p != 0 || frame.len() != h * w * c {
        return Err(ModelError::Shape(format!(
            "cannot split {h}x{w}x{c} frame ({} values) into {p}x{p} patches",
            frame.len()
        )));
    }
    let (gh, gw) = (h / p, w / p);
    let mut out = Vec::with_capacity(frame.len());
    for by in 0..gh {
        for bx in 0..gw {
            for py in 0..p {
                let row = (by * p + py) * w + bx * p;
                out.extend_from_slice(&frame[row * c..(row + p) * c]);
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(tokens: &[f64], h: usize, w: usize, c: usize, p: usize) -> Result<Vec<f64>> {
    if p == 0 || h % p != 0 || w % p != 0 || tokens.len() != h * w * c {
        return Err(ModelError::Shape(format!(
            "{} token values cannot form a {h}x{w}x{c} frame",
            tokens.len()
        )));
    }
    let (gh, gw) = (h / p, w / p);
    let mut out = vec![0.0; tokens.len()];
    let mut k = 0;
    for by in 0..gh {
        for bx in 0..gw {
            for py in 0..p {
                let row = (by * p + py) * w + bx * p;
                out[row * c..(row + p) * c].copy_from_slice(&tokens[k..k + p * c]);
                k += p * c;
            }
        }
    }
    Ok(out)
}

/// Stacks clips (all with the same shape) into `[B, T, n_kept, P²C]` patch
/// tokens, keeping only `positions`.
pub fn clip_patches(cfg: &ModelConfig, clips: &[&VideoClip], positions: &[usize]) -> Result<Tensor> {
    let first = clips
        .first()
        .ok_or_else(|| ModelError::Shape("no clips".into()))?;
    let (t, pd) = (first.frames, cfg.patch_dim());
    let mut data = Vec::with_capacity(clips.len() * t * positions.len() * pd);
    for clip in clips {
        check_clip(cfg, clip)?;
        if clip.frames != t {
            return Err(ModelError::Shape("clips in a batch differ in length".into()));
        }
        for f in 0..t {
            let frame: Vec<f64> = clip.frame(f).iter().map(|&v| v as f64).collect();
            let tokens = patchify(&frame, cfg.height, cfg.width, cfg.channels, cfg.patch)?;
            for &pos in positions {
                data.extend_from_slice(&tokens[pos * pd..(pos + 1) * pd]);
            }
        }
    }
    Ok(Tensor::new([clips.len(), t, positions.len(), pd], data)?)
}

fn check_clip(cfg: &ModelConfig, clip: &VideoClip) -> Result<()> {
    if clip.height != cfg.height || clip.width != cfg.width || clip.channels != cfg.channels {
        return Err(ModelError::Shape(format!(
            "clip is {}x{}x{}, model expects {}x{}x{}",
            clip.height, clip.width, clip.channels, cfg.height, cfg.width, cfg.channels
        )));
    }
    Ok(())
}

/// Frames `range` of every clip as a `[B·len, H, W, C]` tensor.
pub fn frames_tensor(clips: &[&VideoClip], range: std::ops::Range<usize>) -> Result<Tensor> {
    let first = clips
        .first()
        .ok_or_else(|| ModelError::Shape("no clips".into()))?;
    let mut data = Vec::new();
    for clip in clips {
        if range.end > clip.frames {
            return Err(ModelError::Shape(format!(
                "frame range {range:?} exceeds clip of {} frames",
                clip.frames
            )));
        }
        for f in range.clone() {
            data.extend(clip.frame(f).iter().map(|&v| v as f64));
        }
    }
    Ok(Tensor::new(
        [clips.len() * range.len(), first.height, first.width, first.channels],
        data,
    )?)
}

// ----- parameters --------------------------------------------------------

/// Parameter group, used to decide what an optimizer phase may update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    Encoder,
    Decoder,
    Transition,
    Lyapunov,
}

pub fn group_of(name: &str) -> Group {
    if name.starts_with("dec.") {
        Group::Decoder
    } else if name.starts_with("trans.") {
        Group::Transition
    } else if name.starts_with("lyap.") {
        Group::Lyapunov
    } else {
        Group::Encoder
    }
}

/// Latent dimensions acted on by the Lyapunov head, and the latent mean they
/// are centered on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub dims: Vec<usize>,
    pub center: Vec<f64>,
}

impl Selection {
    pub fn validate(&self, d_z: usize) -> Result<()> {
        let mut seen = vec![false; d_z];
        let ok = !self.dims.is_empty()
            && self.dims.len() == self.center.len()
            && self
                .dims
                .iter()
                .all(|&d| d < d_z && !std::mem::replace(&mut seen[d], true));
        if ok {
            Ok(())
        } else {
            Err(ModelError::Config(format!(
                "selection {:?} is not a nonempty set of distinct dims below {d_z}",
                self.dims
            )))
        }
    }
}

pub type Params = BTreeMap<String, Tensor>;

/// Graph handles for every parameter of one forward pass.
pub type Bound = BTreeMap<String, Var>;

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Params,
    pub selection: Option<Selection>,
}

/// Rounds every value to the nearest 32-bit float.
pub fn round_f32(data: &mut [f64]) {
    for v in data {
        *v = *v as f32 as f64;
    }
}

struct Init {
    rng: ChaCha8Rng,
    params: Params,
}

impl Init {
    fn normal(&mut self, name: &str, shape: &[usize], std: f64) {
        let dist = Normal::new(0.0, std).expect("finite std");
        let t = Tensor::from_fn(shape.to_vec(), |_| dist.sample(&mut self.rng));
        self.params.insert(name.into(), t);
    }

    fn full(&mut self, name: &str, shape: &[usize], v: f64) {
        self.params.insert(name.into(), Tensor::full(shape.to_vec(), v));
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, gain: f64) {
        self.normal(&format!("{name}.w"), &[fan_in, fan_out], gain / (fan_in as f64).sqrt());
        self.full(&format!("{name}.b"), &[fan_out], 0.0);
    }

    fn norm(&mut self, name: &str, d: usize) {
        self.full(&format!("{name}.g"), &[d], 1.0);
        self.full(&format!("{name}.b"), &[d], 0.0);
    }
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let c = &config;
        let d = c.d_model;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: Params::new(),
        };
        init.linear("patch", c.patch_dim(), d, 1.0);
        init.normal("pos.space", &[c.num_patches(), d], 0.1);
        init.normal("pos.time", &[c.context, d], 0.1);
        let out_gain = 0.5;
        for l in 0..c.depth {
            for kind in ["t", "s"] {
                init.norm(&format!("block{l}.{kind}norm"), d);
                let qkv = format!("block{l}.{kind}attn.qkv");
                init.normal(&format!("{qkv}.w"), &[d, 3 * d], 1.0 / (d as f64).sqrt());
                // A key bias shifts every logit of a row equally, so only the
                // query and value biases exist.
                init.full(&format!("{qkv}.bq"), &[d], 0.0);
                init.full(&format!("{qkv}.bv"), &[d], 0.0);
                init.linear(&format!("block{l}.{kind}attn.out"), d, d, out_gain);
            }
            init.norm(&format!("block{l}.mnorm"), d);
            init.linear(&format!("block{l}.mlp.fc1"), d, 4 * d, 1.0);
            init.linear(&format!("block{l}.mlp.fc2"), 4 * d, d, out_gain);
        }
        init.norm("enc.norm", d);
        init.linear("enc.proj", d, c.d_z, out_gain);
        init.normal("skip.w", &[d, c.seed_len()], 0.1 / (d as f64).sqrt());
        init.linear("dec.seed", c.d_z, c.seed_len(), 1.0);
        let widths = c.decoder_widths();
        for i in 0..3 {
            let (ci, co) = (widths[i], widths[i + 1]);
            init.normal(&format!("dec.up{i}.w"), &[ci, 4, 4, co], 1.0 / ((4 * ci) as f64).sqrt());
            init.full(&format!("dec.up{i}.b"), &[co], if i == 2 { -4.0 } else { 0.0 });
        }
        init.norm("trans.norm", c.d_z);
        init.linear("trans.fc1", c.d_z, 4 * c.d_z, 1.0);
        init.full("trans.fc2.w", &[4 * c.d_z, c.d_z], 0.0);
        init.full("trans.fc2.b", &[c.d_z], 0.0);
        let mut params = init.params;
        for t in params.values_mut() {
            round_f32(t.data_mut());
        }
        Ok(Model {
            config,
            params,
            selection: None,
        })
    }

    pub fn param(&self, name: &str) -> &Tensor {
        &self.params[name]
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Installs a Lyapunov head with `W = I` on the selected dims.
    pub fn set_selection(&mut self, selection: Selection) -> Result<()> {
        selection.validate(self.config.d_z)?;
        self.params
            .insert("lyap.w".into(), Tensor::eye(selection.dims.len()));
        self.selection = Some(selection);
        Ok(())
    }

    /// Zeroes the attention and MLP output projections of every block.
    pub fn zero_residual_branches(&mut self) {
        for (name, t) in self.params.iter_mut() {
            if name.starts_with("block") && (name.contains("attn.out.") || name.contains("mlp.fc2.")) {
                t.data_mut().fill(0.0);
            }
        }
    }

    /// Replaces the transition's output layer with `N(0, std²)` draws, moving
    /// it off the identity map it starts at. Used to reach a point where no
    /// Lyapunov hinge sits exactly on its kink.
    pub fn perturb_transition(&mut self, std: f64, seed: u64) {
        let dist = Normal::new(0.0, std).expect("finite std");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for name in ["trans.fc2.w", "trans.fc2.b"] {
            let t = self.params.get_mut(name).expect("transition parameters exist");
            for v in t.data_mut() {
                *v = dist.sample(&mut rng) as f32 as f64;
            }
        }
    }

    /// Binds every parameter as a graph leaf; `trainable` decides which
    /// receive gradients.
    pub fn bind(&self, g: &mut Graph, trainable: impl Fn(&str) -> bool) -> Bound {
        self.params
            .iter()
            .map(|(name, t)| (name.clone(), g.leaf(t.clone(), trainable(name))))
            .collect()
    }

    // ----- inference helpers ---------------------------------------------

    /// Per-frame latents of a clip of any length.
    ///
    /// Clips longer than the context are encoded in consecutive windows of
    /// `context` frames; the final window is aligned to the clip end.
    pub fn encode_clip(&self, clip: &VideoClip) -> Result<LatentSequence> {
        let ctx = self.config.context;
        let starts: Vec<usize> = if clip.frames <= ctx {
            vec![0]
        } else {
            let mut s: Vec<usize> = (0..clip.frames - ctx).step_by(ctx).collect();
            s.push(clip.frames - ctx);
            s
        };
        let len = clip.frames.min(ctx);
        let windows: Vec<VideoClip> = starts
            .iter()
            .map(|&s| clip.window(s, len))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| ModelError::Shape(e.to_string()))?;
        let refs: Vec<&VideoClip> = windows.iter().collect();
        let mut g = Graph::new();
        let b = self.bind(&mut g, |_| false);
        let enc = encode(&mut g, &b, &self.config, &refs)?;
        let z = g.value(enc.z).data();
        let d_z = self.config.d_z;
        let mut data = vec![0.0; clip.frames * d_z];
        for (w, &s) in starts.iter().enumerate() {
            for f in 0..len {
                let row = (w * len + f) * d_z;
                data[(s + f) * d_z..(s + f + 1) * d_z].copy_from_slice(&z[row..row + d_z]);
            }
        }
        Ok(LatentSequence {
            frames: clip.frames,
            dim: d_z,
            data,
        })
    }

    /// Context latents and skip vector of one context window.
    pub fn encode_window(&self, clip: &VideoClip) -> Result<(LatentSequence, Vec<f64>)> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, |_| false);
        let enc = encode(&mut g, &b, &self.config, &[clip])?;
        let z = LatentSequence {
            frames: clip.frames,
            dim: self.config.d_z,
            data: g.value(enc.z).data().to_vec(),
        };
        Ok((z, g.value(enc.skip).data().to_vec()))
    }

    /// Decodes latents (rows) to frames; `skip` is the seed-space skip vector
    /// (zeros when `None`).
    pub fn decode(&self, z: &[f64], skip: Option<&[f64]>) -> Result<Tensor> {
        let d_z = self.config.d_z;
        if z.is_empty() || z.len() % d_z != 0 {
            return Err(ModelError::Shape(format!("latent length {} not a multiple of {d_z}", z.len())));
        }
        let m = z.len() / d_z;
        let mut g = Graph::new();
        let b = self.bind(&mut g, |_| false);
        let zv = g.constant(Tensor::new([m, d_z], z.to_vec())?);
        let seed = self.config.seed_len();
        let skip_rows = match skip {
            Some(s) if s.len() == seed => s.repeat(m),
            Some(s) => {
                return Err(ModelError::Shape(format!("skip has {} values, expected {seed}", s.len())))
            }
            None => vec![0.0; m * seed],
        };
        let sv = g.constant(Tensor::new([m, seed], skip_rows)?);
        let out = decode(&mut g, &b, &self.config, zv, sv)?;
        Ok(g.value(out).clone())
    }

    pub fn transition(&self, z: &[f64]) -> Result<Vec<f64>> {
        let d_z = self.config.d_z;
        if z.is_empty() || z.len() % d_z != 0 {
            return Err(ModelError::Shape(format!("latent length {} not a multiple of {d_z}", z.len())));
        }
        let mut g = Graph::new();
        let b = self.bind(&mut g, |_| false);
        let zv = g.constant(Tensor::new([z.len() / d_z, d_z], z.to_vec())?);
        let out = transition(&mut g, &b, zv)?;
        Ok(g.value(out).data().to_vec())
    }

    /// `K` successive transitions of `z`, stacked `K × d_z`.
    pub fn rollout(&self, z: &[f64], k: usize) -> Result<Vec<f64>> {
        if k == 0 {
            return Err(ModelError::Config("rollout horizon must be at least 1".into()));
        }
        let mut out = Vec::with_capacity(k * z.len());
        let mut cur = z.to_vec();
        for _ in 0..k {
            cur = self.transition(&cur)?;
            out.extend_from_slice(&cur);
        }
        Ok(out)
    }

    /// `V(z̃)` for a full latent `z` under the installed selection.
    pub fn lyapunov_energy(&self, z: &[f64]) -> Result<f64> {
        let sel = self
            .selection
            .as_ref()
            .ok_or_else(|| ModelError::Config("no Lyapunov head installed".into()))?;
        let zt: Vec<f64> = sel
            .dims
            .iter()
            .zip(&sel.center)
            .map(|(&d, c)| z[d] - c)
            .collect();
        Ok(lyapunov_value(&zt, self.param("lyap.w").data())?)
    }
}

/// Per-frame latent vectors, `frames × dim` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSequence {
    pub frames: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl LatentSequence {
    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    /// Keeps the listed columns.
    pub fn select(&self, dims: &[usize]) -> LatentSequence {
        let mut data = Vec::with_capacity(self.frames * dims.len());
        for t in 0..self.frames {
            let row = self.row(t);
            data.extend(dims.iter().map(|&d| row[d]));
        }
        LatentSequence {
            frames: self.frames,
            dim: dims.len(),
            data,
        }
    }
}

// ----- graph forward -----------------------------------------------------

/// Result of an encoder pass over `B` clips of `T` frames.
pub struct Encoded {
    /// `[B·T, d_z]`, rows ordered (clip, frame).
    pub z: Var,
    /// Seed-space skip vector per clip, `[B, seed_len]`.
    pub skip: Var,
    /// Softmax attention matrices, `[groups·heads, S, S]`, in evaluation order.
    pub attention: Vec<Var>,
    pub batch: usize,
    pub frames: usize,
}

fn linear(g: &mut Graph, b: &Bound, name: &str, x: Var) -> Result<Var> {
    let y = g.matmul(x, b[&format!("{name}.w")])?;
    Ok(g.add_bias(y, b[&format!("{name}.b")])?)
}

fn norm(g: &mut Graph, b: &Bound, name: &str, x: Var) -> Result<Var> {
    Ok(g.layernorm(x, b[&format!("{name}.g")], b[&format!("{name}.b")], LN_EPS)?)
}

/// Multi-head self-attention over `x` = `[G, S, d]`; returns the output and
/// the attention weights.
fn self_attention(
    g: &mut Graph,
    b: &Bound,
    name: &str,
    x: Var,
    heads: usize,
) -> Result<(Var, Var)> {
    let s = g.shape(x).to_vec();
    let (groups, seq, d) = (s[0], s[1], s[2]);
    let dh = d / heads;
    let flat = g.reshape(x, [groups * seq, d])?;
    let qkv = g.matmul(flat, b[&format!("{name}.qkv.w")])?;
    let no_key_bias = g.constant(Tensor::zeros(vec![d]));
    let bias = g.concat(&[b[&format!("{name}.qkv.bq")], no_key_bias, b[&format!("{name}.qkv.bv")]])?;
    let qkv = g.add_bias(qkv, bias)?;
    let qkv = g.reshape(qkv, [groups, seq, 3, heads, dh])?;
    let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?;
    let mut parts = Vec::with_capacity(3);
    for i in 0..3 {
        let p = g.index_select(qkv, 0, &[i])?;
        parts.push(g.reshape(p, [groups * heads, seq, dh])?);
    }
    let scores = g.batch_matmul(parts[0], parts[1], true)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
    let att = g.softmax(scores);
    let mixed = g.batch_matmul(att, parts[2], false)?;
    let mixed = g.reshape(mixed, [groups, heads, seq, dh])?;
    let mixed = g.permute(mixed, &[0, 2, 1, 3])?;
    let mixed = g.reshape(mixed, [groups * seq, d])?;
    let out = linear(g, b, &format!("{name}.out"), mixed)?;
    Ok((g.reshape(out, [groups, seq, d])?, att))
}

/// Encoder over explicit patch tokens `[B, T, n, P²C]` located at row-major
/// patch `positions` (length n).
pub fn encode_patches(
    g: &mut Graph,
    b: &Bound,
    cfg: &ModelConfig,
    patches: Tensor,
    positions: &[usize],
) -> Result<Encoded> {
    let s = patches.shape().to_vec();
    if s.len() != 4 || s[2] != positions.len() || s[3] != cfg.patch_dim() {
        return Err(ModelError::Shape(format!(
            "patch tensor {s:?} does not match {} positions of width {}",
            positions.len(),
            cfg.patch_dim()
        )));
    }
    let (bs, t, n, d) = (s[0], s[1], s[2], cfg.d_model);
    if t > cfg.context {
        return Err(ModelError::Shape(format!(
            "{t} frames exceed the encoder context of {}",
            cfg.context
        )));
    }
    if positions.iter().any(|&p| p >= cfg.num_patches()) {
        return Err(ModelError::Shape("patch position out of range".into()));
    }
    let rows = bs * t * n;
    let x = g.constant(patches.reshape([rows, cfg.patch_dim()])?);
    let tokens = linear(g, b, "patch", x)?;
    let mut space_idx = Vec::with_capacity(rows);
    let mut time_idx = Vec::with_capacity(rows);
    for _ in 0..bs {
        for f in 0..t {
            for &p in positions {
                space_idx.push(p);
                time_idx.push(f);
            }
        }
    }
    let ps = g.index_select(b["pos.space"], 0, &space_idx)?;
    let pt = g.index_select(b["pos.time"], 0, &time_idx)?;
    let tokens = g.add(tokens, ps)?;
    let tokens = g.add(tokens, pt)?;
    let mut x = g.reshape(tokens, [bs, t, n, d])?;

    let last = g.index_select(x, 1, &[t - 1])?;
    let last = g.mean_axis(last, 2)?;
    let last = g.reshape(last, [bs, d])?;
    let skip = g.matmul(last, b["skip.w"])?;

    let mut attention = Vec::new();
    for l in 0..cfg.depth {
        // Temporal attention: sequences over frames at each patch position.
        let xt = g.permute(x, &[0, 2, 1, 3])?;
        let xt = g.reshape(xt, [bs * n, t, d])?;
        let h = norm(g, b, &format!("block{l}.tnorm"), xt)?;
        let (a, att) = self_attention(g, b, &format!("block{l}.tattn"), h, cfg.heads)?;
        attention.push(att);
        let xt = g.add(xt, a)?;
        let xt = g.reshape(xt, [bs, n, t, d])?;
        x = g.permute(xt, &[0, 2, 1, 3])?;

        // Spatial attention: sequences over patches within each frame.
        let xs = g.reshape(x, [bs * t, n, d])?;
        let h = norm(g, b, &format!("block{l}.snorm"), xs)?;
        let (a, att) = self_attention(g, b, &format!("block{l}.sattn"), h, cfg.heads)?;
        attention.push(att);
        let xs = g.add(xs, a)?;

        let xm = g.reshape(xs, [rows, d])?;
        let h = norm(g, b, &format!("block{l}.mnorm"), xm)?;
        let h = linear(g, b, &format!("block{l}.mlp.fc1"), h)?;
        let h = g.gelu(h);
        let h = linear(g, b, &format!("block{l}.mlp.fc2"), h)?;
        let xm = g.add(xm, h)?;
        x = g.reshape(xm, [bs, t, n, d])?;
    }
    let x = norm(g, b, "enc.norm", x)?;
    let pooled = g.mean_axis(x, 2)?;
    let pooled = g.reshape(pooled, [bs * t, d])?;
    let z = linear(g, b, "enc.proj", pooled)?;
    Ok(Encoded {
        z,
        skip,
        attention,
        batch: bs,
        frames: t,
    })
}

/// Encoder over whole clips, honoring the Lite patch sparsification.
pub fn encode(g: &mut Graph, b: &Bound, cfg: &ModelConfig, clips: &[&VideoClip]) -> Result<Encoded> {
    let positions = cfg.kept_patches();
    let patches = clip_patches(cfg, clips, &positions)?;
    encode_patches(g, b, cfg, patches, &positions)
}

/// As [`encode`], but only valid for Lite configurations.
pub fn encode_lite(g: &mut Graph, b: &Bound, cfg: &ModelConfig, clips: &[&VideoClip]) -> Result<Encoded> {
    if !cfg.lite {
        return Err(ModelError::Config("encode_lite requires a lite configuration".into()));
    }
    encode(g, b, cfg, clips)
}

/// Expands per-clip skip vectors to one row per latent, given each row's clip.
pub fn expand_skip(g: &mut Graph, skip: Var, clip_of_row: &[usize]) -> Result<Var> {
    Ok(g.index_select(skip, 0, clip_of_row)?)
}

/// Decodes `z` (`[M, d_z]`) with per-row skip vectors (`[M, seed_len]`) into
/// `[M, H, W, C]` frames in `(0, 1)`.
pub fn decode(g: &mut Graph, b: &Bound, cfg: &ModelConfig, z: Var, skip_rows: Var) -> Result<Var> {
    let m = g.shape(z)[0];
    let (sh, sw) = cfg.seed_hw();
    let seed = linear(g, b, "dec.seed", z)?;
    let seed = g.add(seed, skip_rows)?;
    let mut x = g.gelu(seed);
    x = g.reshape(x, [m, sh, sw, cfg.decoder_channels])?;
    for i in 0..3 {
        x = g.conv_transpose2x(x, b[&format!("dec.up{i}.w")])?;
        x = g.add_bias(x, b[&format!("dec.up{i}.b")])?;
        x = if i < 2 { g.gelu(x) } else { g.sigmoid(x) };
    }
    Ok(x)
}

/// `z + W₂·GELU(W₁·LN(z) + b₁) + b₂` on rows of `z`.
pub fn transition(g: &mut Graph, b: &Bound, z: Var) -> Result<Var> {
    let h = norm(g, b, "trans.norm", z)?;
    let h = linear(g, b, "trans.fc1", h)?;
    let h = g.gelu(h);
    let h = linear(g, b, "trans.fc2", h)?;
    Ok(g.add(z, h)?)
}

/// `K` recursive transitions; element `k` is `f^{k+1}(z)`.
pub fn rollout(g: &mut Graph, b: &Bound, z: Var, k: usize) -> Result<Vec<Var>> {
    if k == 0 {
        return Err(ModelError::Config("rollout horizon must be at least 1".into()));
    }
    let mut out = Vec::with_capacity(k);
    let mut cur = z;
    for _ in 0..k {
        cur = transition(g, b, cur)?;
        out.push(cur);
    }
    Ok(out)
}

/// Projects rows of `z` onto the selected dims after centering.
pub fn select_latent(g: &mut Graph, sel: &Selection, d_z: usize, z: Var) -> Result<Var> {
    let mut shift = vec![0.0; d_z];
    for (&d, &c) in sel.dims.iter().zip(&sel.center) {
        shift[d] = -c;
    }
    let shift = g.constant(Tensor::new([d_z], shift)?);
    let centered = g.add_bias(z, shift)?;
    Ok(g.index_select(centered, 1, &sel.dims)?)
}

// ----- losses ------------------------------------------------------------

/// Mean over frames (leading axis) of the per-frame sum of squared errors.
pub fn loss_rec(g: &mut Graph, recon: Var, target: Var) -> Result<Var> {
    if g.shape(recon) != g.shape(target) {
        return Err(ModelError::Shape(format!(
            "reconstruction {:?} vs target {:?}",
            g.shape(recon),
            g.shape(target)
        )));
    }
    let frames = g.shape(recon)[0] as f64;
    let diff = g.sub(recon, target)?;
    let sq = g.square(diff);
    let total = g.sum(sq);
    Ok(g.scale(total, 1.0 / frames))
}

/// Same per-frame convention as [`loss_rec`], over predicted frames.
pub fn loss_pred(g: &mut Graph, predicted: Var, future: Var) -> Result<Var> {
    loss_rec(g, predicted, future)
}

/// `V(z̃) = ‖W z̃‖²` per row of `z̃` (`[M, d̃]`), giving `[M]`.
pub fn lyapunov_v(g: &mut Graph, ztilde: Var, w: Var) -> Result<Var> {
    let wt = g.permute(w, &[1, 0])?;
    let y = g.matmul(ztilde, wt)?;
    let sq = g.square(y);
    Ok(g.sum_axis(sq, 1)?)
}

/// Hinges `max(0, V_{k+1} − V_k)` for energies `V_0..V_K` (each `[M]`),
/// concatenated step-major into `[K·M]`.
pub fn lyap_hinges(g: &mut Graph, energies: &[Var]) -> Result<Var> {
    if energies.len() < 2 {
        return Err(ModelError::Config("need at least two energies (K >= 1)".into()));
    }
    let mut hinges = Vec::with_capacity(energies.len() - 1);
    for pair in energies.windows(2) {
        let inc = g.sub(pair[1], pair[0])?;
        hinges.push(g.relu(inc));
    }
    Ok(g.concat(&hinges)?)
}

/// Mean over steps and rows of `max(0, V_{k+1} − V_k)`.
pub fn loss_lyap(g: &mut Graph, energies: &[Var]) -> Result<Var> {
    let all = lyap_hinges(g, energies)?;
    Ok(g.mean(all))
}

/// Loss components of one objective evaluation.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub rec: Var,
    pub pred: Option<Var>,
    pub lyap: Option<Var>,
}

/// `L_rec + λ_pred·L_pred + λ_lyap·L_lyap`; terms with zero weight are left
/// out of the graph entirely.
pub fn loss_total(g: &mut Graph, parts: LossParts, lambda_pred: f64, lambda_lyap: f64) -> Result<Var> {
    let mut total = parts.rec;
    for (part, weight) in [(parts.pred, lambda_pred), (parts.lyap, lambda_lyap)] {
        if let (Some(p), true) = (part, weight != 0.0) {
            let weighted = g.scale(p, weight);
            total = g.add(total, weighted)?;
        }
    }
    Ok(total)
}

// ----- plain-number counterparts -----------------------------------------

/// `‖W z̃‖²` with `W` row-major `d̃ × d̃`.
pub fn lyapunov_value(ztilde: &[f64], w: &[f64]) -> Result<f64> {
    let n = ztilde.len();
    if w.len() != n * n {
        return Err(ModelError::Shape(format!(
            "W has {} entries, z̃ has {n} dims",
            w.len()
        )));
    }
    Ok((0..n)
        .map(|i| {
            let y: f64 = (0..n).map(|j| w[i * n + j] * ztilde[j]).sum();
            y * y
        })
        .sum())
}

/// Mean hinge `max(0, V_{k+1} − V_k)` over an energy sequence.
pub fn lyap_hinge_mean(energies: &[f64]) -> f64 {
    if energies.len() < 2 {
        return 0.0;
    }
    let k = energies.len() - 1;
    energies
        .windows(2)
        .map(|p| (p[1] - p[0]).max(0.0))
        .sum::<f64>()
        / k as f64
}

/// Hinge loss along a `K`-step rollout of an arbitrary map `f` from `z0`.
pub fn lyap_rollout_loss(f: impl Fn(&[f64]) -> Vec<f64>, z0: &[f64], w: &[f64], k: usize) -> Result<f64> {
    let mut energies = vec![lyapunov_value(z0, w)?];
    let mut z = z0.to_vec();
    for _ in 0..k {
        z = f(&z);
        energies.push(lyapunov_value(&z, w)?);
    }
    Ok(lyap_hinge_mean(&energies))
}

// ----- cost model --------------------------------------------------------

/// Attention score entries per block and head: factorized
/// `N·T² + T·N²` against joint `(N·T)²`.
pub fn attention_score_entries(n_patch: usize, frames: usize) -> (u64, u64) {
    let (n, t) = (n_patch as u64, frames as u64);
    (n * t * t + t * n * n, (n * t) * (n * t))
}

/// Analytic multiply-add FLOPs (2 per MAC) of one encoder pass over `frames`
/// frames, counting projections, attention products and the MLP.
pub fn encoder_flops(cfg: &ModelConfig, frames: usize) -> u64 {
    let n = cfg.kept_patches().len() as u64;
    let t = frames as u64;
    let d = cfg.d_model as u64;
    let tokens = n * t;
    let mut macs = tokens * cfg.patch_dim() as u64 * d;
    let (scores, _) = attention_score_entries(n as usize, frames);
    for _ in 0..cfg.depth {
        macs += 2 * (tokens * d * 3 * d + tokens * d * d);
        // QKᵀ and AV each cost one MAC per score entry per head dimension.
        macs += 2 * scores * d;
        macs += 2 * tokens * d * 4 * d;
    }
    macs += t * d * cfg.d_z as u64;
    2 * macs
}

// ----- checkpoints -------------------------------------------------------

/// JSON record stored at the head of a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub selection: Option<Selection>,
    pub phase: u8,
    pub step: u64,
    pub config_hash: String,
}

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

/// Serializes a header and named tensors (values stored as f32).
pub fn encode_checkpoint(header: &CheckpointHeader, tensors: &BTreeMap<String, Tensor>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    let json = serde_json::to_vec(header)?;
    put_u32(&mut buf, json.len());
    buf.extend_from_slice(&json);
    put_u32(&mut buf, tensors.len());
    for (name, t) in tensors {
        put_u32(&mut buf, name.len());
        buf.extend_from_slice(name.as_bytes());
        put_u32(&mut buf, t.rank());
        for &e in t.shape() {
            put_u32(&mut buf, e);
        }
        for &v in t.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(ModelError::Checkpoint("unexpected end of data".into()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(CheckpointHeader, BTreeMap<String, Tensor>)> {
    if bytes.len() < CHECKPOINT_MAGIC.len() + 4 || &bytes[..5] != CHECKPOINT_MAGIC {
        return Err(ModelError::Checkpoint("bad magic".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]);
    if crc32fast::hash(body) != stored {
        return Err(ModelError::Checkpoint("checksum mismatch".into()));
    }
    let mut cur = Cursor { bytes: body, pos: 5 };
    let len = cur.u32()?;
    let header: CheckpointHeader = serde_json::from_slice(cur.take(len)?)?;
    let count = cur.u32()?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let len = cur.u32()?;
        let name = String::from_utf8(cur.take(len)?.to_vec())
            .map_err(|_| ModelError::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = cur.u32()?;
        let shape: Vec<usize> = (0..rank).map(|_| cur.u32()).collect::<Result<_>>()?;
        let numel: usize = shape.iter().product();
        let raw = cur.take(numel * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        tensors.insert(name, Tensor::new(shape, data)?);
    }
    if cur.pos != body.len() {
        return Err(ModelError::Checkpoint("trailing bytes after tensors".into()));
    }
    Ok((header, tensors))
}

impl Model {
    pub fn save_checkpoint(
        &self,
        path: &Path,
        phase: u8,
        step: u64,
        config_hash: &str,
        extra: &BTreeMap<String, Tensor>,
    ) -> Result<()> {
        let header = CheckpointHeader {
            model: self.config.clone(),
            selection: self.selection.clone(),
            phase,
            step,
            config_hash: config_hash.to_string(),
        };
        let mut tensors = self.params.clone();
        for (k, v) in extra {
            tensors.insert(k.clone(), v.clone());
        }
        fs::write(path, encode_checkpoint(&header, &tensors)?)?;
        Ok(())
    }

    /// Loads a checkpoint; tensors not named like parameters (optimizer
    /// state) are returned separately.
    pub fn load_checkpoint(path: &Path) -> Result<(Model, CheckpointHeader, BTreeMap<String, Tensor>)> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        let (header, tensors) = decode_checkpoint(&bytes)?;
        header.model.validate()?;
        let reference = Model::new(header.model.clone(), 0)?;
        let mut params = Params::new();
        let mut extra = BTreeMap::new();
        for (name, t) in tensors {
            if reference.params.contains_key(&name) || name == "lyap.w" {
                params.insert(name, t);
            } else {
                extra.insert(name, t);
            }
        }
        for (name, t) in &reference.params {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                _ => {
                    return Err(ModelError::Checkpoint(format!(
                        "parameter {name} missing or misshapen"
                    )))
                }
            }
        }
        if let Some(sel) = &header.selection {
            sel.validate(header.model.d_z)?;
            if params.get("lyap.w").map(|w| w.shape().to_vec()) != Some(vec![sel.dims.len(); 2]) {
                return Err(ModelError::Checkpoint("Lyapunov head missing".into()));
            }
        }
        let model = Model {
            config: header.model.clone(),
            params,
            selection: header.selection.clone(),
        };
        Ok((model, header, extra))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::lite_of(&ModelConfig::default()).validate().unwrap();
    }

    #[test]
    fn invalid_configs() {
        let base = ModelConfig::default();
        for cfg in [
            ModelConfig { heads: 3, ..base.clone() },
            ModelConfig { d_z: 65, ..base.clone() },
            ModelConfig { horizon: 0, ..base.clone() },
            ModelConfig { sparsify_stride: 2, ..base.clone() },
            ModelConfig { lite: true, sparsify_stride: 16, ..base.clone() },
            ModelConfig { height: 36, ..base.clone() },
        ] {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn group_names() {
        assert_eq!(group_of("dec.up0.w"), Group::Decoder);
        assert_eq!(group_of("trans.fc1.b"), Group::Transition);
        assert_eq!(group_of("lyap.w"), Group::Lyapunov);
        assert_eq!(group_of("block0.tattn.qkv.w"), Group::Encoder);
        assert_eq!(group_of("skip.w"), Group::Encoder);
    }

    #[test]
    fn lyap_hinge_values() {
        assert_eq!(lyap_hinge_mean(&[1.0, 4.0]), 3.0);
        assert_eq!(lyap_hinge_mean(&[4.0, 1.0, 2.0]), 0.5);
        assert_eq!(lyapunov_value(&[1.0, 1.0], &[2.0, 0.0, 0.0, 2.0]).unwrap(), 8.0);
    }
}
