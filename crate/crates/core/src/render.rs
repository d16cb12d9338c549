//! Rasterization of state trajectories into grayscale clips, nuisance
//! augmentations, and the on-disk clip/dataset format.
//!
//! Pixel `(row i, col j)` has its center at image coordinates `(x=j, y=i)`.
//! Shapes are anti-aliased by a half-pixel linear ramp on the signed distance.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{self, DynamicsError, StateTrajectory, System, SystemSpec};

pub const CLIP_MAGIC: &[u8; 5] = b"LYTV1";
pub const POOL_SIZE: usize = 8;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid distractor configuration: {0}")]
    Config(String),
    #[error("malformed clip file: {0}")]
    Format(String),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, RenderError>;

/// Provenance of a clip.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct ClipMeta {
    pub system: String,
    pub seed: u64,
}

/// `T × H × W × C` pixels in `[0, 1]`, stored row-major as 32-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub fps: f64,
    pub data: Vec<f32>,
    pub meta: ClipMeta,
}

impl VideoClip {
    pub fn new(
        frames: usize,
        height: usize,
        width: usize,
        channels: usize,
        fps: f64,
        data: Vec<f32>,
    ) -> Result<Self> {
        if frames < 2 || height == 0 || width == 0 || channels == 0 {
            return Err(RenderError::Contract(format!(
                "clip needs T >= 2 and positive extents, got {frames}x{height}x{width}x{channels}"
            )));
        }
        if data.len() != frames * height * width * channels {
            return Err(RenderError::Contract(format!(
                "clip data has {} values, shape needs {}",
                data.len(),
                frames * height * width * channels
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(RenderError::Contract("pixel outside [0, 1]".into()));
        }
        Ok(Self {
            frames,
            height,
            width,
            channels,
            fps,
            data,
            meta: ClipMeta::default(),
        })
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.frame_len();
        &self.data[t * n..(t + 1) * n]
    }

    /// Frames `start..start + len` as a new clip.
    pub fn window(&self, start: usize, len: usize) -> Result<VideoClip> {
        if len < 2 || start + len > self.frames {
            return Err(RenderError::Contract(format!(
                "window {start}+{len} outside clip of {} frames",
                self.frames
            )));
        }
        let n = self.frame_len();
        Ok(VideoClip {
            frames: len,
            data: self.data[start * n..(start + len) * n].to_vec(),
            meta: self.meta.clone(),
            ..*self
        })
    }

    pub fn write_to(&self, mut out: impl Write) -> Result<()> {
        out.write_all(CLIP_MAGIC)?;
        for v in [self.frames, self.height, self.width, self.channels] {
            out.write_all(&(v as u32).to_le_bytes())?;
        }
        let mut bytes = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&bytes)?;
        Ok(())
    }

    /// Reads the binary clip format; fps and meta are not stored in the file.
    pub fn read_from(mut input: impl Read, fps: f64) -> Result<VideoClip> {
        let mut magic = [0u8; 5];
        input
            .read_exact(&mut magic)
            .map_err(|_| RenderError::Format("truncated header".into()))?;
        if &magic != CLIP_MAGIC {
            return Err(RenderError::Format("bad magic".into()));
        }
        let mut dims = [0usize; 4];
        for d in &mut dims {
            let mut b = [0u8; 4];
            input
                .read_exact(&mut b)
                .map_err(|_| RenderError::Format("truncated header".into()))?;
            *d = u32::from_le_bytes(b) as usize;
        }
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        let expected = dims.iter().product::<usize>() * 4;
        if bytes.len() != expected {
            return Err(RenderError::Format(format!(
                "payload has {} bytes, header implies {expected}",
                bytes.len()
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        VideoClip::new(dims[0], dims[1], dims[2], dims[3], fps, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path, fps: f64) -> Result<VideoClip> {
        VideoClip::read_from(&fs::read(path)?[..], fps)
    }
}

// ----- rasterization -----------------------------------------------------

fn coverage(radius: f64, dist: f64) -> f64 {
    (radius - dist + 0.5).clamp(0.0, 1.0)
}

fn segment_distance(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

enum Shape {
    Rod { a: (f64, f64), b: (f64, f64), half_width: f64 },
    Disc { center: (f64, f64), radius: f64 },
}

const ROD_INTENSITY: f64 = 0.8;

fn rasterize(shapes: &[Shape], h: usize, w: usize) -> Vec<f32> {
    let mut frame = vec![0.0f32; h * w];
    for i in 0..h {
        for j in 0..w {
            let (x, y) = (j as f64, i as f64);
            let mut value: f64 = 0.0;
            for shape in shapes {
                let v = match *shape {
                    Shape::Rod { a, b, half_width } => {
                        ROD_INTENSITY * coverage(half_width, segment_distance(x, y, a, b))
                    }
                    Shape::Disc { center, radius } => {
                        let d = ((x - center.0).powi(2) + (y - center.1).powi(2)).sqrt();
                        // Radial shading gives the disc a unique brightest pixel.
                        coverage(radius, d) * (1.0 - 0.3 * (d / radius).powi(2)).max(0.0)
                    }
                };
                value = value.max(v);
            }
            frame[i * w + j] = value.clamp(0.0, 1.0) as f32;
        }
    }
    frame
}

/// Pixel-space anchor points of the drawn objects: pivot first, then bobs.
pub fn object_layout(system: &System, state: &[f64], h: usize, w: usize) -> Vec<(f64, f64)> {
    let (hf, cx) = (h as f64, (w / 2) as f64);
    match *system {
        System::CircularMotion { radius, .. } => {
            let scale = 0.32 * hf / radius;
            let cy = (h / 2) as f64;
            vec![(cx, cy), (cx + scale * state[0], cy - scale * state[1])]
        }
        System::SinglePendulum { .. } => {
            let pivot = (cx, 0.2 * hf);
            let l = 0.45 * hf;
            vec![pivot, (pivot.0 + l * state[0].sin(), pivot.1 + l * state[0].cos())]
        }
        System::DoublePendulum { .. } => {
            let pivot = (cx, (h / 2) as f64);
            let l = 0.23 * hf;
            let b1 = (pivot.0 + l * state[0].sin(), pivot.1 + l * state[0].cos());
            let b2 = (b1.0 + l * state[1].sin(), b1.1 + l * state[1].cos());
            vec![pivot, b1, b2]
        }
        System::ElasticPendulum {
            g,
            mass,
            stiffness,
            rest_length,
        } => {
            let pivot = (cx, 0.15 * hf);
            let r_eq = rest_length + mass * g / stiffness;
            let scale = 0.45 * hf / r_eq;
            let r = scale * state[0];
            vec![pivot, (pivot.0 + r * state[1].sin(), pivot.1 + r * state[1].cos())]
        }
        System::ReactionDiffusion { .. } => Vec::new(),
    }
}

/// Renders one grayscale frame (`C = 1`) on a black background.
pub fn render_frame(spec: &SystemSpec, state: &[f64], h: usize, w: usize) -> Result<Vec<f32>> {
    if state.len() != spec.system.state_dim() {
        return Err(RenderError::Contract(format!(
            "state has {} values, system expects {}",
            state.len(),
            spec.system.state_dim()
        )));
    }
    if h < 4 || w < 4 {
        return Err(RenderError::Contract(format!("frame {h}x{w} too small")));
    }
    let hf = h as f64;
    if let System::ReactionDiffusion { model, .. } = &spec.system {
        let mut frame = vec![0.0f32; h * w];
        for i in 0..h {
            let gi = i * model.height / h;
            for j in 0..w {
                let gj = j * model.width / w;
                let u = state[gi * model.width + gj];
                frame[i * w + j] = (1.0 - u).clamp(0.0, 1.0) as f32;
            }
        }
        return Ok(frame);
    }
    let pts = object_layout(&spec.system, state, h, w);
    let rod = 0.03 * hf;
    let shapes: Vec<Shape> = match spec.system {
        System::CircularMotion { .. } => vec![Shape::Disc {
            center: pts[1],
            radius: 0.15 * hf,
        }],
        System::DoublePendulum { .. } => vec![
            Shape::Rod { a: pts[0], b: pts[1], half_width: rod },
            Shape::Rod { a: pts[1], b: pts[2], half_width: rod },
            Shape::Disc { center: pts[1], radius: 0.07 * hf },
            Shape::Disc { center: pts[2], radius: 0.07 * hf },
        ],
        _ => vec![
            Shape::Rod { a: pts[0], b: pts[1], half_width: rod },
            Shape::Disc { center: pts[1], radius: 0.15 * hf },
        ],
    };
    Ok(rasterize(&shapes, h, w))
}

/// Frame count for a clip covering `duration` seconds at `fps`.
pub fn frame_count(duration: f64, fps: f64) -> usize {
    (duration * fps + 1e-9).floor() as usize + 1
}

/// Nearest trajectory index for each frame time.
pub fn frame_indices(traj: &StateTrajectory, fps: f64) -> Result<Vec<usize>> {
    if traj.len() < 2 {
        return Err(RenderError::Contract(
            "trajectory needs at least two samples".into(),
        ));
    }
    if !(fps > 0.0) {
        return Err(RenderError::Contract(format!("fps must be positive, got {fps}")));
    }
    let dt = traj.dt();
    let count = frame_count(traj.duration(), fps);
    let idx: Vec<usize> = (0..count)
        .map(|k| ((k as f64 / fps) / dt).round() as usize)
        .collect();
    if idx.last().is_some_and(|&i| i >= traj.len()) {
        return Err(RenderError::Contract("trajectory too short for fps".into()));
    }
    Ok(idx)
}

/// Samples `traj` at `fps` and renders every sampled state.
pub fn render_clip(
    spec: &SystemSpec,
    traj: &StateTrajectory,
    fps: f64,
    h: usize,
    w: usize,
) -> Result<VideoClip> {
    let idx = frame_indices(traj, fps)?;
    if idx.len() < 2 {
        return Err(RenderError::Contract(
            "clip would have fewer than two frames".into(),
        ));
    }
    let mut data = Vec::with_capacity(idx.len() * h * w);
    for &i in &idx {
        data.extend(render_frame(spec, traj.state(i), h, w)?);
    }
    let mut clip = VideoClip::new(idx.len(), h, w, 1, fps, data)?;
    clip.meta.system = spec.kind().label().to_string();
    Ok(clip)
}

/// Frame geometry and timing of generated clips.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub height: usize,
    pub width: usize,
    pub fps: f64,
    pub duration: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            fps: 20.0,
            duration: 2.0,
        }
    }
}

/// Simulates from a seeded initial state and renders the clean clip, plus the
/// observables sampled at frame times.
pub fn generate_clip(
    spec: &SystemSpec,
    render: &RenderConfig,
    seed: u64,
) -> Result<(VideoClip, StateTrajectory)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = spec.sample_initial_state(&mut rng);
    let steps = (render.duration / spec.dt).round() as usize;
    let traj = dynamics::simulate(spec, &init, steps.max(1))?;
    let mut clip = render_clip(spec, &traj, render.fps, render.height, render.width)?;
    clip.meta.seed = seed;
    let idx = frame_indices(&traj, render.fps)?;
    let obs = dynamics::observable_trajectory(&spec.system, &traj.select(&idx));
    Ok((clip, obs))
}

// ----- augmentation ------------------------------------------------------

/// Nuisance augmentation strengths. All-zero magnitudes are the identity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistractorConfig {
    /// Probability that a clip's background is replaced by a pool texture.
    pub background_prob: f64,
    /// Seed of the procedural background pool.
    pub background_pool: u64,
    pub texture_amplitude: f64,
    /// Upper bound on the occluded fraction of the frame area.
    pub occlusion_max_fraction: f64,
    pub brightness_jitter: f64,
    pub seed: u64,
}

impl DistractorConfig {
    pub fn none() -> Self {
        Self {
            background_prob: 0.0,
            background_pool: 0,
            texture_amplitude: 0.0,
            occlusion_max_fraction: 0.0,
            brightness_jitter: 0.0,
            seed: 0,
        }
    }

    /// Calibrated desk-scale defaults.
    pub fn standard() -> Self {
        Self {
            background_prob: 0.5,
            background_pool: 0,
            texture_amplitude: 0.05,
            occlusion_max_fraction: 0.06,
            brightness_jitter: 0.1,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn is_identity(&self) -> bool {
        self.background_prob == 0.0
            && self.texture_amplitude == 0.0
            && self.occlusion_max_fraction == 0.0
            && self.brightness_jitter == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("background_prob", self.background_prob, 1.0),
            ("texture_amplitude", self.texture_amplitude, 1.0),
            ("occlusion_max_fraction", self.occlusion_max_fraction, 0.3),
            ("brightness_jitter", self.brightness_jitter, 0.5),
        ];
        for (name, v, hi) in checks {
            if !(0.0..=hi).contains(&v) {
                return Err(RenderError::Config(format!(
                    "{name} must lie in [0, {hi}], got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Augmented clip together with the static occlusion mask (`H × W`).
#[derive(Debug, Clone, PartialEq)]
pub struct Augmented {
    pub clip: VideoClip,
    pub occlusion_mask: Vec<bool>,
}

impl Augmented {
    pub fn occluded_fraction(&self) -> f64 {
        self.occlusion_mask.iter().filter(|&&m| m).count() as f64 / self.occlusion_mask.len() as f64
    }
}

const STREAM_BACKGROUND: u64 = 1;
const STREAM_OCCLUSION: u64 = 2;
const STREAM_TEXTURE: u64 = 3;
const STREAM_BRIGHTNESS: u64 = 4;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Bilinear value noise in `[-1, 1]` with `cell`-pixel lattice spacing.
fn value_noise(rng: &mut impl Rng, h: usize, w: usize, cell: usize) -> Vec<f64> {
    let (gh, gw) = (h / cell + 2, w / cell + 2);
    let lattice: Vec<f64> = (0..gh * gw).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        let fy = i as f64 / cell as f64;
        let (y0, ty) = (fy.floor() as usize, fy.fract());
        for j in 0..w {
            let fx = j as f64 / cell as f64;
            let (x0, tx) = (fx.floor() as usize, fx.fract());
            let at = |y: usize, x: usize| lattice[y * gw + x];
            let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
            let bottom = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
            out[i * w + j] = top * (1.0 - ty) + bottom * ty;
        }
    }
    out
}

/// The `index`-th procedural background (values in `[0.05, 0.55]`).
pub fn pool_texture(pool: u64, index: usize, h: usize, w: usize) -> Vec<f64> {
    let mut rng = stream(pool, 100 + index as u64);
    let (lo, span) = (0.05, 0.5);
    match index % 4 {
        0 => {
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let (c, s) = (angle.cos(), angle.sin());
            let norm = (h.max(w)) as f64 * std::f64::consts::SQRT_2;
            (0..h * w)
                .map(|p| {
                    let (i, j) = ((p / w) as f64, (p % w) as f64);
                    let t = ((j * c + i * s) / norm + 0.5).clamp(0.0, 1.0);
                    lo + span * t
                })
                .collect()
        }
        1 => {
            let size = rng.random_range(2..=6usize);
            let (a, b) = (rng.random_range(0.0..0.4), rng.random_range(0.6..1.0));
            (0..h * w)
                .map(|p| {
                    let even = ((p / w) / size + (p % w) / size) % 2 == 0;
                    lo + span * if even { a } else { b }
                })
                .collect()
        }
        _ => {
            let cell = if index % 4 == 2 { 4 } else { 8 };
            value_noise(&mut rng, h, w, cell)
                .into_iter()
                .map(|v| lo + span * 0.5 * (v + 1.0))
                .collect()
        }
    }
}

/// Applies the configured nuisance augmentations in the fixed order
/// background, occlusion, texture, brightness, then clamps to `[0, 1]`.
pub fn apply_distractors_with_mask(clip: &VideoClip, cfg: &DistractorConfig) -> Result<Augmented> {
    cfg.validate()?;
    let (h, w, c) = (clip.height, clip.width, clip.channels);
    let plane = h * w;
    let mut data: Vec<f64> = clip.data.iter().map(|&v| v as f64).collect();
    let mut mask = vec![false; plane];

    if cfg.background_prob > 0.0 {
        let mut rng = stream(cfg.seed, STREAM_BACKGROUND);
        if rng.random::<f64>() < cfg.background_prob {
            let tex = pool_texture(cfg.background_pool, rng.random_range(0..POOL_SIZE), h, w);
            for (k, v) in data.iter_mut().enumerate() {
                if *v == 0.0 {
                    *v = tex[(k / c) % plane];
                }
            }
        }
    }

    if cfg.occlusion_max_fraction > 0.0 {
        let mut rng = stream(cfg.seed, STREAM_OCCLUSION);
        let budget = (cfg.occlusion_max_fraction * plane as f64).floor() as usize;
        let count = rng.random_range(1..=2usize);
        let mut remaining = budget;
        for _ in 0..count {
            let area = remaining.min(budget / count);
            if area == 0 {
                break;
            }
            let side = (area as f64).sqrt();
            let lo = ((side / 2.0).ceil() as usize).clamp(1, h);
            let rh = rng.random_range(lo..=h.min((2.0 * side) as usize).max(lo));
            let rw = (area / rh).clamp(1, w);
            let (y0, x0) = (rng.random_range(0..=h - rh), rng.random_range(0..=w - rw));
            let shade = rng.random_range(0.2..0.6);
            for y in y0..y0 + rh {
                for x in x0..x0 + rw {
                    mask[y * w + x] = true;
                }
            }
            remaining -= rh * rw;
            for t in 0..clip.frames {
                for y in y0..y0 + rh {
                    for x in x0..x0 + rw {
                        for ch in 0..c {
                            data[((t * h + y) * w + x) * c + ch] = shade;
                        }
                    }
                }
            }
        }
    }

    if cfg.texture_amplitude > 0.0 {
        let mut rng = stream(cfg.seed, STREAM_TEXTURE);
        let noise = value_noise(&mut rng, h, w, 4);
        for (k, v) in data.iter_mut().enumerate() {
            *v += cfg.texture_amplitude * noise[(k / c) % plane];
        }
    }

    if cfg.brightness_jitter > 0.0 {
        let mut rng = stream(cfg.seed, STREAM_BRIGHTNESS);
        let delta = rng.random_range(-cfg.brightness_jitter..=cfg.brightness_jitter);
        for v in &mut data {
            *v += delta;
        }
    }

    let out = VideoClip {
        data: data.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect(),
        meta: clip.meta.clone(),
        ..*clip
    };
    Ok(Augmented {
        clip: out,
        occlusion_mask: mask,
    })
}

pub fn apply_distractors(clip: &VideoClip, cfg: &DistractorConfig) -> Result<VideoClip> {
    Ok(apply_distractors_with_mask(clip, cfg)?.clip)
}

// ----- datasets on disk --------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipEntry {
    pub file: String,
    pub truth_file: String,
    pub seed: u64,
}

/// `manifest.json` of a generated split. Stored clips are clean; the
/// distractor config is applied on the fly during training and evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub spec: SystemSpec,
    pub seed: u64,
    pub fps: f64,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub distractors: DistractorConfig,
    pub clips: Vec<ClipEntry>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub clips: Vec<VideoClip>,
    /// Observables at frame times, one per clip.
    pub truths: Vec<StateTrajectory>,
}

impl Dataset {
    /// Renders `count` clips; clip `i` uses a seed derived from `(seed, i)`.
    pub fn generate(
        spec: &SystemSpec,
        render: &RenderConfig,
        distractors: DistractorConfig,
        count: usize,
        seed: u64,
        config_hash: &str,
    ) -> Result<Dataset> {
        if count == 0 {
            return Err(RenderError::Contract("dataset needs at least one clip".into()));
        }
        distractors.validate()?;
        let mut clips = Vec::with_capacity(count);
        let mut truths = Vec::with_capacity(count);
        let mut entries = Vec::with_capacity(count);
        let mut seeder = ChaCha8Rng::seed_from_u64(seed);
        for i in 0..count {
            let clip_seed = seeder.random::<u64>();
            let (clip, truth) = generate_clip(spec, render, clip_seed)?;
            entries.push(ClipEntry {
                file: format!("clip_{i:05}.lytv"),
                truth_file: format!("clip_{i:05}_truth.csv"),
                seed: clip_seed,
            });
            clips.push(clip);
            truths.push(truth);
        }
        let manifest = Manifest {
            config_hash: config_hash.to_string(),
            spec: spec.clone(),
            seed,
            fps: render.fps,
            height: render.height,
            width: render.width,
            frames: clips[0].frames,
            distractors,
            clips: entries,
        };
        Ok(Dataset {
            manifest,
            clips,
            truths,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for ((entry, clip), truth) in self.manifest.clips.iter().zip(&self.clips).zip(&self.truths) {
            clip.save(&dir.join(&entry.file))?;
            let mut buf = format!("# config_hash={}\n", self.manifest.config_hash).into_bytes();
            truth.write_csv(&mut buf)?;
            fs::write(dir.join(&entry.truth_file), buf)?;
        }
        let json = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(dir.join("manifest.json"), json + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
        let mut clips = Vec::new();
        let mut truths = Vec::new();
        for entry in &manifest.clips {
            let mut clip = VideoClip::load(&dir.join(&entry.file), manifest.fps)?;
            clip.meta = ClipMeta {
                system: manifest.spec.kind().label().to_string(),
                seed: entry.seed,
            };
            clips.push(clip);
            truths.push(StateTrajectory::read_csv(fs::File::open(
                dir.join(&entry.truth_file),
            )?)?);
        }
        Ok(Dataset {
            manifest,
            clips,
            truths,
        })
    }
}
