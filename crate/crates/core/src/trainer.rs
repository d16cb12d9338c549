//! Optimization loops for both training phases, Adam, the shared windowed
//! objective, and the finite-difference gradient audit.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::time::Instant;

use lyt_numcore::{check_decomposed_gradients, Graph, GradCheckReport, LossTerm, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    self, decode, encode, expand_skip, group_of, loss_pred, loss_rec, loss_total,
    lyap_hinges, lyapunov_v, round_f32, rollout, select_latent, Bound, Group, LossParts, Model, ModelError,
    Params, Selection,
};
use crate::render::{apply_distractors, DistractorConfig, RenderError, VideoClip};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("non-finite loss at step {}: {record:?}", record.step)]
    NonFinite { record: StepRecord },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Num(#[from] lyt_numcore::NumError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    One,
    Two,
}

/// Which context latents seed the K-step rollouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutStarts {
    /// Every context frame whose K-step future lies inside the window.
    All,
    /// Only the last context frame.
    Last,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: u64,
    pub batch: usize,
    pub seed: u64,
    pub phase: Phase,
    pub lambda_pred: f64,
    pub lambda_lyap: f64,
    pub augment: DistractorConfig,
    pub grad_clip: Option<f64>,
    pub rollout_starts: RolloutStarts,
    /// Phase 2 only: let the Lyapunov term update the encoder too.
    pub unfreeze_encoder: bool,
    /// Record wall-clock milliseconds per step (breaks byte-identical logs).
    pub timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            steps: 2000,
            batch: 8,
            seed: 0,
            phase: Phase::One,
            lambda_pred: 1.0,
            lambda_lyap: 0.1,
            augment: DistractorConfig::standard(),
            grad_clip: Some(1.0),
            rollout_starts: RolloutStarts::All,
            unfreeze_encoder: false,
            timing: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.steps == 0 || self.batch == 0 {
            return Err(TrainError::Config("steps and batch must be at least 1".into()));
        }
        if !(self.lambda_pred >= 0.0 && self.lambda_lyap >= 0.0) {
            return Err(TrainError::Config("loss weights must be nonnegative".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(TrainError::Config(format!("grad_clip must be positive, got {c}")));
            }
        }
        self.augment.validate()?;
        Ok(())
    }

    fn trainable(&self, name: &str) -> bool {
        match (self.phase, group_of(name)) {
            (Phase::One, Group::Lyapunov) => false,
            (Phase::One, _) => true,
            (Phase::Two, Group::Transition | Group::Lyapunov) => true,
            (Phase::Two, Group::Encoder) => self.unfreeze_encoder,
            (Phase::Two, Group::Decoder) => false,
        }
    }
}

// ----- Adam ----------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub step: u64,
    pub m: Params,
    pub v: Params,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    /// Moments as checkpoint tensors named `adam.m.*` / `adam.v.*`, plus the
    /// step counter.
    pub fn to_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (prefix, map) in [("adam.m.", &self.m), ("adam.v.", &self.v)] {
            for (k, t) in map {
                out.insert(format!("{prefix}{k}"), t.clone());
            }
        }
        out
    }

    pub fn from_tensors(step: u64, tensors: &BTreeMap<String, Tensor>) -> AdamState {
        let mut state = AdamState {
            step,
            ..AdamState::default()
        };
        for (k, t) in tensors {
            if let Some(name) = k.strip_prefix("adam.m.") {
                state.m.insert(name.to_string(), t.clone());
            } else if let Some(name) = k.strip_prefix("adam.v.") {
                state.v.insert(name.to_string(), t.clone());
            }
        }
        state
    }
}

/// One bias-corrected Adam update of every parameter that has a gradient.
/// Parameters and moments are rounded to 32-bit floats afterwards so that
/// checkpoints reproduce the in-memory state exactly.
pub fn adam_step(params: &mut Params, grads: &BTreeMap<String, Vec<f64>>, state: &mut AdamState, lr: f64) -> Result<()> {
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| TrainError::Config(format!("gradient for unknown parameter {name}")))?;
        if p.len() != g.len() {
            return Err(TrainError::Config(format!("gradient shape mismatch for {name}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked above");
        let shape = p.shape().to_vec();
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(shape.clone()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(shape));
        let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
        for i in 0..g.len() {
            md[i] = ADAM_BETA1 * md[i] + (1.0 - ADAM_BETA1) * g[i];
            vd[i] = ADAM_BETA2 * vd[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
            let mhat = md[i] / c1;
            let vhat = vd[i] / c2;
            pd[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
        round_f32(md);
        round_f32(vd);
        round_f32(pd);
    }
    Ok(())
}

/// Global L2 norm of a gradient set.
pub fn grad_norm(grads: &BTreeMap<String, Vec<f64>>) -> f64 {
    grads
        .values()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

// ----- objective -----------------------------------------------------------

/// Options of the windowed objective.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveOptions<'a> {
    pub lambda_pred: f64,
    pub lambda_lyap: f64,
    pub starts: RolloutStarts,
    /// Lyapunov selection; the hinge is measured whenever one is given.
    pub selection: Option<&'a Selection>,
}

#[derive(Debug, Clone, Copy)]
pub struct ObjectiveVars {
    pub rec: Var,
    pub pred: Var,
    pub lyap: Option<Var>,
    pub total: Var,
    /// `x̂ − x` over context frames; `rec` is its per-frame squared norm.
    pub rec_residual: Var,
    /// Predicted minus true future frames.
    pub pred_residual: Var,
    /// Unreduced hinges whose mean is `lyap`.
    pub hinges: Option<Var>,
}

/// Start indices (within the context) whose `K`-step futures fit the window.
pub fn rollout_starts(context: usize, horizon: usize, window: usize, mode: RolloutStarts) -> Vec<usize> {
    let last = (window - horizon - 1).min(context - 1);
    match mode {
        RolloutStarts::All => (0..=last).collect(),
        RolloutStarts::Last => vec![last],
    }
}

/// Builds `L_rec`, `L_pred`, optionally `L_lyap`, and their weighted sum for
/// windows of `context + K` frames.
pub fn objective(
    g: &mut Graph,
    b: &Bound,
    cfg: &model::ModelConfig,
    windows: &[&VideoClip],
    opts: ObjectiveOptions,
) -> Result<ObjectiveVars> {
    let (ctx, k) = (cfg.context, cfg.horizon);
    let frames = windows
        .first()
        .ok_or_else(|| TrainError::Config("empty batch".into()))?
        .frames;
    if frames < ctx + k || windows.iter().any(|w| w.frames != frames) {
        return Err(TrainError::Config(format!(
            "windows need {} frames each",
            ctx + k
        )));
    }
    let contexts: Vec<VideoClip> = windows
        .iter()
        .map(|w| w.window(0, ctx))
        .collect::<std::result::Result<_, _>>()?;
    let ctx_refs: Vec<&VideoClip> = contexts.iter().collect();
    let enc = encode(g, b, cfg, &ctx_refs)?;
    let bs = windows.len();

    let rows: Vec<usize> = (0..bs * ctx).map(|r| r / ctx).collect();
    let skip_rows = expand_skip(g, enc.skip, &rows)?;
    let recon = decode(g, b, cfg, enc.z, skip_rows)?;
    let target = g.constant(model::frames_tensor(&ctx_refs, 0..ctx)?);
    let rec = loss_rec(g, recon, target)?;
    let rec_residual = g.sub(recon, target)?;

    let starts = rollout_starts(ctx, k, frames, opts.starts);
    let start_rows: Vec<usize> = (0..bs)
        .flat_map(|c| starts.iter().map(move |&s| c * ctx + s))
        .collect();
    let z0 = g.index_select(enc.z, 0, &start_rows)?;
    let zs = rollout(g, b, z0, k)?;
    let all = g.concat(&zs)?;
    let m = start_rows.len();
    let pred_rows: Vec<usize> = (0..k).flat_map(|_| start_rows.iter().map(|&r| r / ctx)).collect();
    let skip_pred = expand_skip(g, enc.skip, &pred_rows)?;
    let predicted = decode(g, b, cfg, all, skip_pred)?;
    let mut future = Vec::with_capacity(k * m * windows[0].frame_len());
    for step in 1..=k {
        for w in windows {
            for &s in &starts {
                future.extend(w.frame(s + step).iter().map(|&v| v as f64));
            }
        }
    }
    let shape = g.shape(predicted).to_vec();
    let future = g.constant(Tensor::new(shape, future).map_err(ModelError::from)?);
    let pred = loss_pred(g, predicted, future)?;
    let pred_residual = g.sub(predicted, future)?;

    let hinges = match opts.selection {
        Some(sel) => {
            let w = b
                .get("lyap.w")
                .copied()
                .ok_or_else(|| TrainError::Config("selection without a Lyapunov head".into()))?;
            let mut energies = Vec::with_capacity(k + 1);
            for &z in std::iter::once(&z0).chain(&zs) {
                let zt = select_latent(g, sel, cfg.d_z, z)?;
                energies.push(lyapunov_v(g, zt, w)?);
            }
            Some(lyap_hinges(g, &energies)?)
        }
        None => None,
    };
    let lyap = hinges.map(|h| g.mean(h));
    let total = loss_total(
        g,
        LossParts {
            rec,
            pred: Some(pred),
            lyap,
        },
        opts.lambda_pred,
        if lyap.is_some() { opts.lambda_lyap } else { 0.0 },
    )?;
    Ok(ObjectiveVars {
        rec,
        pred,
        lyap,
        total,
        rec_residual,
        pred_residual,
        hinges,
    })
}

// ----- training loop -------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub l_rec: f64,
    pub l_pred: f64,
    pub l_lyap: f64,
    pub l_total: f64,
    pub gnorm: f64,
    pub ms: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub config_hash: String,
    pub records: Vec<StepRecord>,
}

impl TrainLog {
    pub const HEADER: &'static str = "step,l_rec,l_pred,l_lyap,l_total,gnorm,ms";

    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        let mut text = format!("# config_hash={}\n{}\n", self.config_hash, Self::HEADER);
        for r in &self.records {
            writeln!(
                text,
                "{},{},{},{},{},{},{}",
                r.step, r.l_rec, r.l_pred, r.l_lyap, r.l_total, r.gnorm, r.ms
            )
            .expect("write to string");
        }
        out.write_all(text.as_bytes())
    }

    /// Mean of a column over the last `n` records.
    pub fn tail_mean(&self, n: usize, f: impl Fn(&StepRecord) -> f64) -> f64 {
        let tail = &self.records[self.records.len().saturating_sub(n)..];
        tail.iter().map(f).sum::<f64>() / tail.len().max(1) as f64
    }
}

/// Per-step random stream, derived from `(seed, step)` only.
fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// Samples `batch` windows of `len` frames with fresh distractor seeds.
pub fn sample_batch(
    dataset: &[VideoClip],
    len: usize,
    batch: usize,
    augment: &DistractorConfig,
    rng: &mut impl Rng,
) -> Result<Vec<VideoClip>> {
    let mut out = Vec::with_capacity(batch);
    for _ in 0..batch {
        let clip = &dataset[rng.random_range(0..dataset.len())];
        let start = rng.random_range(0..=clip.frames - len);
        let seed = rng.random::<u64>();
        let window = clip.window(start, len)?;
        out.push(if augment.is_identity() {
            window
        } else {
            apply_distractors(&window, &augment.with_seed(seed))?
        });
    }
    Ok(out)
}

/// Runs steps `state.step + 1 ..= cfg.steps` of the configured phase.
pub fn train(
    dataset: &[VideoClip],
    mut model: Model,
    cfg: &TrainConfig,
    mut state: AdamState,
    config_hash: &str,
) -> Result<(Model, TrainLog, AdamState)> {
    cfg.validate()?;
    let mc = model.config.clone();
    let len = mc.context + mc.horizon;
    if dataset.is_empty() || dataset.iter().any(|c| c.frames < len) {
        return Err(TrainError::Config(format!(
            "every clip needs at least {len} frames"
        )));
    }
    if cfg.phase == Phase::Two && model.selection.is_none() {
        return Err(TrainError::Config("phase two needs selected dims".into()));
    }
    let mut log = TrainLog {
        config_hash: config_hash.to_string(),
        records: Vec::new(),
    };
    while state.step < cfg.steps {
        let step = state.step + 1;
        let started = Instant::now();
        let mut rng = step_rng(cfg.seed, step);
        let batch = sample_batch(dataset, len, cfg.batch, &cfg.augment, &mut rng)?;
        let refs: Vec<&VideoClip> = batch.iter().collect();
        let mut g = Graph::new();
        let b = model.bind(&mut g, |n| cfg.trainable(n));
        let selection = model.selection.clone();
        let vars = objective(
            &mut g,
            &b,
            &mc,
            &refs,
            ObjectiveOptions {
                lambda_pred: cfg.lambda_pred,
                lambda_lyap: cfg.lambda_lyap,
                starts: cfg.rollout_starts,
                selection: selection.as_ref(),
            },
        )?;
        let value = |v| g.value(v).item();
        let mut record = StepRecord {
            step,
            l_rec: value(vars.rec),
            l_pred: value(vars.pred),
            l_lyap: vars.lyap.map(value).unwrap_or(0.0),
            l_total: value(vars.total),
            gnorm: f64::NAN,
            ms: 0.0,
        };
        if ![record.l_rec, record.l_pred, record.l_lyap, record.l_total]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(TrainError::NonFinite { record });
        }
        g.backward(vars.total).map_err(ModelError::from)?;
        let mut grads = BTreeMap::new();
        for (name, &var) in &b {
            if g.requires_grad(var) {
                let grad = g
                    .grad(var)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; g.value(var).len()]);
                grads.insert(name.clone(), grad);
            }
        }
        let norm = grad_norm(&grads);
        record.gnorm = norm;
        if !norm.is_finite() {
            return Err(TrainError::NonFinite { record });
        }
        if let Some(clip) = cfg.grad_clip {
            if norm > clip {
                let s = clip / norm;
                grads.values_mut().flatten().for_each(|v| *v *= s);
            }
        }
        adam_step(&mut model.params, &grads, &mut state, cfg.lr)?;
        if cfg.timing {
            record.ms = started.elapsed().as_secs_f64() * 1e3;
        }
        log.records.push(record);
    }
    Ok((model, log, state))
}

/// Phase 1: all encoder, decoder and transition weights on
/// `L_rec + λ_pred·L_pred`.
pub fn train_phase1(
    dataset: &[VideoClip],
    model: Model,
    cfg: &TrainConfig,
    config_hash: &str,
) -> Result<(Model, TrainLog)> {
    let cfg = TrainConfig {
        phase: Phase::One,
        ..cfg.clone()
    };
    let mut model = model;
    // Phase 1 optimizes no Lyapunov head; drop one left over from loading.
    model.selection = None;
    model.params.remove("lyap.w");
    let (model, log, _) = train(dataset, model, &cfg, AdamState::default(), config_hash)?;
    Ok((model, log))
}

/// Phase 2: installs the Lyapunov head on `selection` (unless the model
/// already carries one on the same dims) and refines the transition model.
pub fn train_phase2(
    dataset: &[VideoClip],
    model: Model,
    selection: Selection,
    cfg: &TrainConfig,
    config_hash: &str,
) -> Result<(Model, TrainLog)> {
    let cfg = TrainConfig {
        phase: Phase::Two,
        ..cfg.clone()
    };
    let mut model = model;
    if model.selection.as_ref() != Some(&selection) {
        model.set_selection(selection)?;
    }
    let (model, log, _) = train(dataset, model, &cfg, AdamState::default(), config_hash)?;
    Ok((model, log))
}

// ----- evaluation helpers ----------------------------------------------------

/// Mean over held-out windows of the per-frame squared error of decoding an
/// `horizon`-step rollout from the last context latent.
pub fn rollout_error(model: &Model, windows: &[VideoClip], horizon: usize) -> Result<f64> {
    let ctx = model.config.context;
    let mut total = 0.0;
    let mut count = 0usize;
    for w in windows {
        if w.frames < ctx + horizon {
            return Err(TrainError::Config(format!(
                "window of {} frames too short for horizon {horizon}",
                w.frames
            )));
        }
        let (z, skip) = model.encode_window(&w.window(0, ctx)?)?;
        let preds = model.rollout(z.row(ctx - 1), horizon)?;
        let frames = model.decode(&preds, Some(&skip))?;
        let n = w.frame_len();
        for k in 0..horizon {
            let target = w.frame(ctx + k);
            let pred = &frames.data()[k * n..(k + 1) * n];
            total += pred
                .iter()
                .zip(target)
                .map(|(p, &t)| (p - t as f64).powi(2))
                .sum::<f64>();
            count += 1;
        }
    }
    Ok(total / count.max(1) as f64)
}

/// Error of repeating the last context frame for `horizon` frames.
pub fn static_baseline_error(context: usize, windows: &[VideoClip], horizon: usize) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for w in windows {
        let last = w.frame(context - 1);
        for k in 0..horizon {
            total += w
                .frame(context + k)
                .iter()
                .zip(last)
                .map(|(&a, &b)| ((a - b) as f64).powi(2))
                .sum::<f64>();
            count += 1;
        }
    }
    total / count.max(1) as f64
}

/// Mean Lyapunov hinge along `horizon`-step rollouts started from every
/// context latent of each window.
pub fn measured_lyap(model: &Model, windows: &[VideoClip], horizon: usize) -> Result<f64> {
    let ctx = model.config.context;
    let mut total = 0.0;
    let mut count = 0usize;
    for w in windows {
        let (z, _) = model.encode_window(&w.window(0, ctx)?)?;
        for t in 0..ctx {
            let mut energies = vec![model.lyapunov_energy(z.row(t))?];
            let steps = model.rollout(z.row(t), horizon)?;
            for k in 0..horizon {
                energies.push(model.lyapunov_energy(&steps[k * z.dim..(k + 1) * z.dim])?);
            }
            total += model::lyap_hinge_mean(&energies);
            count += 1;
        }
    }
    Ok(total / count.max(1) as f64)
}

// ----- gradient audit --------------------------------------------------------

#[derive(Debug, Clone)]
pub struct LossGradCheck {
    pub loss: &'static str,
    pub report: GradCheckReport,
    /// Parameter name of each checked entry, aligned with `report.entries`.
    pub names: Vec<String>,
}

impl LossGradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.report.passes(tol)
    }

    /// Name and element of the worst entry.
    pub fn worst(&self) -> Option<(String, usize, f64)> {
        let (i, e) = self
            .report
            .entries
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.rel_error.total_cmp(&b.1.rel_error))?;
        Some((self.names[i].clone(), e.element, e.rel_error))
    }
}

pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_TOL: f64 = 1e-4;

/// Central-difference audit of `L_rec`, `L_pred` and `L_lyap` on `samples`
/// random parameter entries each, using one window of `clip`.
///
/// Each loss is differenced per residual or hinge element before reduction
/// (see [`check_decomposed_gradients`]). Entries are drawn only from
/// parameters the loss can depend on. A model without a Lyapunov head gets
/// one on all latent dims, centered at zero, for the `L_lyap` check; the
/// check is only meaningful where no hinge sits within a step of its kink.
pub fn gradcheck(model: &Model, clip: &VideoClip, samples: usize, seed: u64) -> Result<Vec<LossGradCheck>> {
    gradcheck_with_step(model, clip, samples, seed, GRADCHECK_STEP)
}

/// [`gradcheck`] with an explicit difference step.
pub fn gradcheck_with_step(
    model: &Model,
    clip: &VideoClip,
    samples: usize,
    seed: u64,
    step: f64,
) -> Result<Vec<LossGradCheck>> {
    let mc = &model.config;
    let window = clip.window(0, mc.context + mc.horizon)?;
    let mut model = model.clone();
    if model.selection.is_none() {
        model.set_selection(Selection {
            dims: (0..mc.d_z).collect(),
            center: vec![0.0; mc.d_z],
        })?;
    }
    let names: Vec<String> = model.params.keys().cloned().collect();
    let inputs: Vec<Tensor> = model.params.values().cloned().collect();
    let selection = model.selection.clone().expect("installed above");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (loss, groups) in [
        ("l_rec", &[Group::Encoder, Group::Decoder][..]),
        ("l_pred", &[Group::Encoder, Group::Decoder, Group::Transition][..]),
        ("l_lyap", &[Group::Encoder, Group::Transition, Group::Lyapunov][..]),
    ] {
        let pool: Vec<(usize, usize)> = names
            .iter()
            .enumerate()
            .filter(|(_, n)| groups.contains(&group_of(n)))
            .filter(|(_, n)| loss != "l_lyap" || !n.starts_with("skip."))
            .flat_map(|(i, _)| (0..inputs[i].len()).map(move |e| (i, e)))
            .collect();
        let mut chosen: Vec<(usize, usize)> = (0..samples.min(pool.len()))
            .map(|_| pool[rng.random_range(0..pool.len())])
            .collect();
        chosen.sort_unstable();
        chosen.dedup();
        let report = check_decomposed_gradients(&inputs, step, Some(&chosen), |g, vars| {
            let b: Bound = names.iter().cloned().zip(vars.iter().copied()).collect();
            let v = objective(
                g,
                &b,
                mc,
                &[&window],
                ObjectiveOptions {
                    lambda_pred: 1.0,
                    lambda_lyap: 1.0,
                    starts: RolloutStarts::All,
                    selection: Some(&selection),
                },
            )
            .map_err(|e| lyt_numcore::NumError::Invalid {
                op: "objective",
                detail: e.to_string(),
            })?;
            let rows = |g: &Graph, r: Var| g.shape(r)[0] as f64;
            Ok(vec![match loss {
                "l_rec" => LossTerm::squared(v.rec_residual, 1.0 / rows(g, v.rec_residual)),
                "l_pred" => LossTerm::squared(v.pred_residual, 1.0 / rows(g, v.pred_residual)),
                _ => {
                    let h = v.hinges.expect("selection present");
                    LossTerm::sum(h, 1.0 / g.value(h).len() as f64)
                }
            }])
        })
        .map_err(ModelError::from)?;
        let entry_names = report
            .entries
            .iter()
            .map(|e| names[e.input].clone())
            .collect();
        out.push(LossGradCheck {
            loss,
            report,
            names: entry_names,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn start_indices() {
        assert_eq!(rollout_starts(8, 4, 12, RolloutStarts::All), (0..8).collect::<Vec<_>>());
        assert_eq!(rollout_starts(8, 4, 12, RolloutStarts::Last), vec![7]);
        assert_eq!(rollout_starts(8, 4, 10, RolloutStarts::All), (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { lr: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { steps: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { batch: 0, ..TrainConfig::default() }.validate().is_err());
    }

    #[test]
    fn phase_two_freezes_decoder_and_encoder() {
        let cfg = TrainConfig { phase: Phase::Two, ..TrainConfig::default() };
        assert!(!cfg.trainable("dec.up0.w"));
        assert!(!cfg.trainable("patch.w"));
        assert!(cfg.trainable("trans.fc1.w"));
        assert!(cfg.trainable("lyap.w"));
        let open = TrainConfig { unfreeze_encoder: true, ..cfg };
        assert!(open.trainable("patch.w"));
    }
}
