//! The subcommands. Each one reads and writes a fixed layout under the
//! configured output directory:
//!
//! ```text
//! config.toml                  resolved configuration
//! data/{train,eval}/           generated clips, truths and manifest
//! checkpoints/{phase1,phase2,final}.lytc
//! logs/{phase1,phase2}.csv
//! selection.json               probed dims and center
//! eval/{report,ranking,mi_grid,latents}.csv
//! ablate/                      grid cells and summary tables
//! plots/*.svg
//! gradcheck.csv
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use lyt_core::model::{encoder_flops, LatentSequence, Model, ModelConfig, Selection};
use lyt_core::probe::{
    disentanglement_overlap, intrinsic_dimension_2nn, probe_latents, select_columns, total_mi,
    MiResult, Ranking,
};
use lyt_core::render::{apply_distractors, Dataset, DistractorConfig, VideoClip};
use lyt_core::trainer::{
    self, gradcheck, measured_lyap, rollout_error, static_baseline_error, AdamState, LossGradCheck, Phase,
    TrainLog, GRADCHECK_TOL,
};
use lyt_numcore::Tensor;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};
use crate::plot;
use crate::report::{read_train_log, table_text, train_log_text, ExperimentReport, ReportRow, Table};

/// Paths of every artifact under one output root.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }
    pub fn data_train(&self) -> PathBuf {
        self.root.join("data/train")
    }
    pub fn data_eval(&self) -> PathBuf {
        self.root.join("data/eval")
    }
    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{name}.lytc"))
    }
    pub fn log(&self, name: &str) -> PathBuf {
        self.root.join("logs").join(format!("{name}.csv"))
    }
    pub fn selection(&self) -> PathBuf {
        self.root.join("selection.json")
    }
    pub fn eval(&self, name: &str) -> PathBuf {
        self.root.join("eval").join(format!("{name}.csv"))
    }
    pub fn ablate(&self) -> PathBuf {
        self.root.join("ablate")
    }
    pub fn plots(&self) -> PathBuf {
        self.root.join("plots")
    }
    pub fn gradcheck(&self) -> PathBuf {
        self.root.join("gradcheck.csv")
    }
}

/// Command-line switches that are not part of the hashed configuration.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Skip a command whose output already exists.
    pub no_overwrite: bool,
    /// Run only this training phase.
    pub phase: Option<u8>,
    /// Continue from the phase checkpoints found on disk.
    pub resume: bool,
    /// Checkpoint to evaluate or audit instead of `checkpoints/final`.
    pub checkpoint: Option<PathBuf>,
    /// Worker threads for `ablate`.
    pub threads: usize,
    /// Print progress to stderr.
    pub verbose: bool,
}

/// Whether a command ran or was skipped under `--no-overwrite`.
#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Done,
    Exists(PathBuf),
}

/// Worker count from `LYT_THREADS`, defaulting to one.
pub fn threads_from_env() -> usize {
    std::env::var("LYT_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn exists_notice(marker: PathBuf, opts: &RunOptions) -> Option<Outcome> {
    if opts.no_overwrite && marker.exists() {
        println!("exists: {} (use without --no-overwrite to regenerate)", marker.display());
        Some(Outcome::Exists(marker))
    } else {
        None
    }
}

/// Writes a checkpoint, creating its directory first.
fn save_model(model: &Model, path: &Path, phase: u8, step: u64, hash: &str, extra: &BTreeMap<String, Tensor>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    Ok(model.save_checkpoint(path, phase, step, hash, extra)?)
}

fn write_config(cfg: &ExperimentConfig, layout: &Layout) -> Result<()> {
    let text = format!("# config_hash={}\n{}", cfg.hash(), cfg.to_toml()?);
    write(&layout.config(), text)
}

fn progress(opts: &RunOptions, msg: impl AsRef<str>) {
    if opts.verbose {
        eprintln!("{}", msg.as_ref());
    }
}

// ----- generate --------------------------------------------------------------

pub fn generate_datasets(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let hash = cfg.hash();
    let train = Dataset::generate(
        &cfg.system,
        &cfg.render,
        cfg.distractors.train,
        cfg.data.train_clips,
        cfg.train_data_seed(),
        &hash,
    )?;
    let eval = Dataset::generate(
        &cfg.system,
        &cfg.render,
        DistractorConfig::none(),
        cfg.data.eval_clips,
        cfg.eval_data_seed(),
        &hash,
    )?;
    Ok((train, eval))
}

pub fn generate(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Outcome> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.output_dir);
    if let Some(o) = exists_notice(layout.data_train().join("manifest.json"), opts) {
        return Ok(o);
    }
    let (train, eval) = generate_datasets(cfg)?;
    write_config(cfg, &layout)?;
    train.save(&layout.data_train())?;
    eval.save(&layout.data_eval())?;
    progress(opts, format!("wrote {} + {} clips", train.clips.len(), eval.clips.len()));
    Ok(Outcome::Done)
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    if !dir.join("manifest.json").exists() {
        return Err(CliError::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset not found; run `lyt generate` first"),
        ));
    }
    Ok(Dataset::load(dir)?)
}

// ----- train -----------------------------------------------------------------

/// Rows of all clips stacked: latents `Σframes × d_z` and truths
/// `Σframes × d_s`.
pub fn latent_and_truth(model: &Model, data: &Dataset) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let seqs: Vec<LatentSequence> = data
        .clips
        .iter()
        .map(|c| model.encode_clip(c))
        .collect::<std::result::Result<_, _>>()?;
    let z = stack_latents(&seqs);
    let mut s_rows = Vec::new();
    let d_s = data.truths[0].dim;
    for (clip, truth) in data.clips.iter().zip(&data.truths) {
        if truth.len() != clip.frames {
            return Err(CliError::Input(format!(
                "truth has {} rows for a {}-frame clip",
                truth.len(),
                clip.frames
            )));
        }
        s_rows.extend_from_slice(&truth.states);
    }
    let s = DMatrix::from_row_slice(s_rows.len() / d_s, d_s, &s_rows);
    Ok((z, s))
}

pub fn stack_latents(seqs: &[LatentSequence]) -> DMatrix<f64> {
    let dim = seqs[0].dim;
    let data: Vec<f64> = seqs.iter().flat_map(|s| s.data.iter().copied()).collect();
    DMatrix::from_row_slice(data.len() / dim, dim, &data)
}

/// Selection record written next to the checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub config_hash: String,
    pub ranking: Ranking,
    pub selection: Selection,
}

/// Probes the training latents and keeps the top `d_select` dims, centered
/// on their training mean.
pub fn select_dims(cfg: &ExperimentConfig, model: &Model, data: &Dataset) -> Result<SelectionRecord> {
    let (z, s) = latent_and_truth(model, data)?;
    let probe = probe_latents(&z, &s, cfg.metrics.criterion, Some(cfg.d_select()))?;
    let picked = select_columns(&z, &probe.selected);
    let center: Vec<f64> = picked.column_iter().map(|c| c.mean()).collect();
    Ok(SelectionRecord {
        config_hash: cfg.hash(),
        ranking: probe.ranking,
        selection: Selection {
            dims: probe.selected,
            center,
        },
    })
}

/// Runs one phase from `start` (or from its own checkpoint under
/// `--resume`), then writes the phase checkpoint with optimizer state and
/// the full log.
fn run_phase(
    cfg: &ExperimentConfig,
    layout: &Layout,
    phase: Phase,
    start: Model,
    data: &Dataset,
    opts: &RunOptions,
) -> Result<(Model, TrainLog, u64)> {
    let name = match phase {
        Phase::One => "phase1",
        Phase::Two => "phase2",
    };
    let hash = cfg.hash();
    let tc = cfg.train_config(phase);
    let ckpt = layout.checkpoint(name);
    let (model, state, mut log) = if opts.resume && ckpt.exists() {
        let (model, header, extra) = Model::load_checkpoint(&ckpt)?;
        if header.model != start.config {
            return Err(CliError::Config(format!(
                "{} was trained with a different model configuration",
                ckpt.display()
            )));
        }
        let mut log = read_train_log(&layout.log(name))?;
        log.records.retain(|r| r.step <= header.step);
        progress(opts, format!("{name}: resuming at step {}", header.step));
        (model, AdamState::from_tensors(header.step, &extra), log)
    } else {
        (start, AdamState::default(), TrainLog::default())
    };
    progress(opts, format!("{name}: {} steps", tc.steps.saturating_sub(state.step)));
    let (model, more, state) = trainer::train(&data.clips, model, &tc, state, &hash)?;
    let new_steps = more.records.len() as u64;
    log.config_hash = hash.clone();
    log.records.extend(more.records);
    let phase_no = if phase == Phase::One { 1 } else { 2 };
    save_model(&model, &ckpt, phase_no, state.step, &hash, &state.to_tensors())?;
    write(&layout.log(name), train_log_text(&log))?;
    Ok((model, log, new_steps))
}

/// Final model plus the logs of the phases that ran.
#[derive(Debug, Clone)]
pub struct Trained {
    pub model: Model,
    pub selection: SelectionRecord,
    pub phase1: Option<TrainLog>,
    pub phase2: Option<TrainLog>,
}

/// Phase 1, probing and selection, then Phase 2 when `λ_lyap > 0`.
///
/// Phase 2 optimizes nothing but the Lyapunov term on top of Phase 1 when it
/// runs, so with `λ_lyap = 0` it is skipped and the final model is the Phase
/// 1 model with an identity Lyapunov head installed for measurement.
pub fn train_in(cfg: &ExperimentConfig, layout: &Layout, data: &Dataset, opts: &RunOptions) -> Result<Trained> {
    let hash = cfg.hash();
    let (model, phase1, phase1_moved) = if opts.phase == Some(2) {
        let ckpt = layout.checkpoint("phase1");
        let (model, _, _) = Model::load_checkpoint(&ckpt)?;
        (model, None, false)
    } else {
        let fresh = Model::new(cfg.model.clone(), cfg.seed)?;
        let (m, log, new_steps) = run_phase(cfg, layout, Phase::One, fresh, data, opts)?;
        (m, Some(log), new_steps > 0)
    };
    let selection = select_dims(cfg, &model, data)?;
    write(
        &layout.selection(),
        serde_json::to_string_pretty(&selection).expect("selection serializes") + "\n",
    )?;
    let mut model = model;
    model.set_selection(selection.selection.clone())?;
    let mut phase2 = None;
    let mut final_phase = 1;
    if opts.phase != Some(1) && cfg.model.lambda_lyap > 0.0 {
        // A Phase 2 checkpoint is stale once Phase 1 has moved on.
        let phase2_opts = RunOptions {
            resume: opts.resume && !phase1_moved,
            ..opts.clone()
        };
        let (m, log, _) = run_phase(cfg, layout, Phase::Two, model, data, &phase2_opts)?;
        model = m;
        phase2 = Some(log);
        final_phase = 2;
    }
    let step = phase2
        .as_ref()
        .or(phase1.as_ref())
        .and_then(|l| l.records.last())
        .map_or(0, |r| r.step);
    save_model(&model, &layout.checkpoint("final"), final_phase, step, &hash, &BTreeMap::new())?;
    Ok(Trained {
        model,
        selection,
        phase1,
        phase2,
    })
}

pub fn train(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Outcome> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.output_dir);
    let marker = if opts.phase == Some(1) {
        layout.checkpoint("phase1")
    } else {
        layout.checkpoint("final")
    };
    if let Some(o) = exists_notice(marker, opts) {
        return Ok(o);
    }
    let data = load_dataset(&layout.data_train())?;
    write_config(cfg, &layout)?;
    train_in(cfg, &layout, &data, opts)?;
    Ok(Outcome::Done)
}

// ----- evaluate --------------------------------------------------------------

/// Every quantity `evaluate` reports, plus the raw latents behind them.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub row: ReportRow,
    pub ranking: Ranking,
    pub mi: MiResult,
    pub r2: Vec<f64>,
    /// Clean latents, `Σframes × d_z`.
    pub z: DMatrix<f64>,
    /// Ground-truth observables aligned with `z`.
    pub s: DMatrix<f64>,
    /// `latents[clip][0]` is clean; `latents[clip][1 + v]` uses eval variant `v`.
    pub latents: Vec<Vec<LatentSequence>>,
}

/// Consecutive windows of `len` frames every `stride` frames.
pub fn eval_windows(clips: &[VideoClip], len: usize, stride: usize) -> Result<Vec<VideoClip>> {
    let mut out = Vec::new();
    for c in clips {
        let mut s = 0;
        while s + len <= c.frames {
            out.push(c.window(s, len)?);
            s += stride;
        }
    }
    Ok(out)
}

pub fn evaluate_model(cfg: &ExperimentConfig, model: &Model, data: &Dataset, variant: &str) -> Result<Evaluation> {
    let mc = &model.config;
    let (z, s) = latent_and_truth(model, data)?;
    let ranking_probe = probe_latents(&z, &s, cfg.metrics.criterion, Some(cfg.d_select()))?;
    let selected = match &model.selection {
        Some(sel) => sel.dims.clone(),
        None => ranking_probe.selected.clone(),
    };
    let zs = select_columns(&z, &selected);
    let probe = lyt_core::probe::fit_linear_probe(&zs, &s)?;
    let mi = total_mi(&z, &s)?;
    let mi_total: f64 = selected.iter().map(|&d| mi.pairwise.row(d).sum()).sum();
    let id = intrinsic_dimension_2nn(&zs, cfg.metrics.id_seed)?;
    let (id_mean, id_std) = id.split_summary().unwrap_or((id.d_hat, 0.0));
    let id_truth = intrinsic_dimension_2nn(&s, cfg.metrics.id_seed)?.d_hat;

    let k = mc.horizon;
    let windows = eval_windows(&data.clips, mc.context + 4 * k, mc.context)?;
    if windows.is_empty() {
        return Err(CliError::Config("eval clips are shorter than context + 4K".into()));
    }
    let err_k = rollout_error(model, &windows, k)?;
    let err_4k = rollout_error(model, &windows, 4 * k)?;
    let static_k = static_baseline_error(mc.context, &windows, k);
    let static_4k = static_baseline_error(mc.context, &windows, 4 * k);

    let mut latents = Vec::with_capacity(data.clips.len());
    let mut overlap = 0.0;
    for clip in &data.clips {
        let mut runs = vec![model.encode_clip(clip)?];
        for v in &cfg.distractors.eval {
            runs.push(model.encode_clip(&apply_distractors(clip, v)?)?);
        }
        overlap += disentanglement_overlap(&runs[1..], &selected)?;
        latents.push(runs);
    }
    overlap /= data.clips.len() as f64;

    let measured = match &model.selection {
        Some(_) => measured_lyap(model, &windows, k)?,
        None => {
            let mut m = model.clone();
            m.set_selection(Selection {
                dims: selected.clone(),
                center: zs.column_iter().map(|c| c.mean()).collect(),
            })?;
            measured_lyap(&m, &windows, k)?
        }
    };

    let row = ReportRow {
        dataset: cfg.system.kind().label().to_string(),
        variant: variant.to_string(),
        seed: cfg.seed,
        config_hash: cfg.hash(),
        selected,
        mi_total,
        amse: probe.amse,
        r2_mean: probe.mean_r2(),
        id: id.d_hat,
        id_mean,
        id_std,
        id_splits: id.splits.map(|s| s.to_vec()).unwrap_or_default(),
        id_truth,
        err_k,
        static_k,
        err_4k,
        static_4k,
        overlap,
        measured_lyap: measured,
        flops: encoder_flops(mc, mc.context),
        params: model.parameter_count(),
    };
    let values = [row.mi_total, row.amse, row.r2_mean, row.id, row.err_k, row.err_4k, row.overlap, row.measured_lyap];
    if values.iter().any(|v| !v.is_finite()) {
        return Err(CliError::Numeric(format!("non-finite metric in {row:?}")));
    }
    Ok(Evaluation {
        row,
        ranking: ranking_probe.ranking,
        mi,
        r2: probe.r2,
        z,
        s,
        latents,
    })
}

fn ranking_text(hash: &str, ranking: &Ranking, selected: &[usize]) -> String {
    let rows: Vec<String> = ranking
        .order
        .iter()
        .enumerate()
        .map(|(rank, &d)| format!("{d},{rank},{},{}", ranking.scores[d], selected.contains(&d) as u8))
        .collect();
    table_text(hash, "dim,rank,score,selected", &rows)
}

fn mi_grid_text(hash: &str, mi: &MiResult) -> String {
    let header = std::iter::once("dim".to_string())
        .chain((0..mi.pairwise.ncols()).map(|j| format!("s{j}")))
        .collect::<Vec<_>>()
        .join(",");
    let rows: Vec<String> = (0..mi.pairwise.nrows())
        .map(|i| {
            std::iter::once(i.to_string())
                .chain(mi.pairwise.row(i).iter().map(f64::to_string))
                .collect::<Vec<_>>()
                .join(",")
        })
        .collect();
    table_text(hash, &header, &rows)
}

fn latents_text(hash: &str, latents: &[Vec<LatentSequence>]) -> String {
    let dim = latents[0][0].dim;
    let header = ["clip", "variant", "frame"]
        .iter()
        .map(|s| s.to_string())
        .chain((0..dim).map(|d| format!("z{d}")))
        .collect::<Vec<_>>()
        .join(",");
    let mut rows = Vec::new();
    for (c, runs) in latents.iter().enumerate() {
        for (v, seq) in runs.iter().enumerate() {
            let label = if v == 0 { "clean".to_string() } else { format!("v{}", v - 1) };
            for t in 0..seq.frames {
                let vals: Vec<String> = seq.row(t).iter().map(f64::to_string).collect();
                rows.push(format!("{c},{label},{t},{}", vals.join(",")));
            }
        }
    }
    table_text(hash, &header, &rows)
}

fn load_model(layout: &Layout, opts: &RunOptions) -> Result<Model> {
    let path = opts.checkpoint.clone().unwrap_or_else(|| layout.checkpoint("final"));
    Ok(Model::load_checkpoint(&path)?.0)
}

pub fn evaluate(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Outcome> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.output_dir);
    if let Some(o) = exists_notice(layout.eval("report"), opts) {
        return Ok(o);
    }
    let model = load_model(&layout, opts)?;
    if model.config.height != cfg.render.height || model.config.width != cfg.render.width {
        return Err(CliError::Config("checkpoint frame size differs from the dataset".into()));
    }
    let data = load_dataset(&layout.data_eval())?;
    let ev = evaluate_model(cfg, &model, &data, "main")?;
    write_evaluation(cfg, &layout, &ev)?;
    Ok(Outcome::Done)
}

pub fn write_evaluation(cfg: &ExperimentConfig, layout: &Layout, ev: &Evaluation) -> Result<()> {
    let hash = cfg.hash();
    let report = ExperimentReport {
        config_hash: hash.clone(),
        rows: vec![ev.row.clone()],
    };
    write(&layout.eval("report"), report.to_csv())?;
    write(&layout.eval("ranking"), ranking_text(&hash, &ev.ranking, &ev.row.selected))?;
    write(&layout.eval("mi_grid"), mi_grid_text(&hash, &ev.mi))?;
    write(&layout.eval("latents"), latents_text(&hash, &ev.latents))
}

// ----- ablate ----------------------------------------------------------------

/// One encoder variant's two cells, sharing a Phase 1 run.
fn ablate_encoder(
    cfg: &ExperimentConfig,
    name: &str,
    model_cfg: ModelConfig,
    train: &Dataset,
    eval: &Dataset,
    opts: &RunOptions,
) -> Result<[ReportRow; 2]> {
    let root = Layout::new(cfg.output_dir.join("ablate").join(name));
    let base = ExperimentConfig {
        model: model_cfg,
        output_dir: root.root.clone(),
        ..cfg.clone()
    };
    let phase1_opts = RunOptions {
        phase: Some(1),
        ..opts.clone()
    };
    let shared = train_in(&base, &root, train, &phase1_opts)?;
    let lambda = if cfg.model.lambda_lyap > 0.0 {
        cfg.model.lambda_lyap
    } else {
        ExperimentConfig::default().model.lambda_lyap
    };
    let mut rows = Vec::with_capacity(2);
    for (cell, l) in [("lyap", lambda), ("nolyap", 0.0)] {
        let mut c = base.clone();
        c.model.lambda_lyap = l;
        c.output_dir = root.root.join(cell);
        let layout = Layout::new(&c.output_dir);
        write_config(&c, &layout)?;
        let (model, phase, step) = if l > 0.0 {
            let (m, log, _) = run_phase(&c, &layout, Phase::Two, shared.model.clone(), train, opts)?;
            (m, 2, log.records.last().map_or(0, |r| r.step))
        } else {
            (shared.model.clone(), 1, c.phase1.steps)
        };
        save_model(&model, &layout.checkpoint("final"), phase, step, &c.hash(), &BTreeMap::new())?;
        progress(opts, format!("ablate: evaluating {name}/{cell}"));
        let ev = evaluate_model(&c, &model, eval, &format!("{name}_{cell}"))?;
        write_evaluation(&c, &layout, &ev)?;
        rows.push(ev.row);
    }
    Ok(rows.try_into().expect("two cells"))
}

/// Runs the {full, lite} × {λ_lyap > 0, λ_lyap = 0} grid on shared data.
pub fn ablate_in(cfg: &ExperimentConfig, train: &Dataset, eval: &Dataset, opts: &RunOptions) -> Result<ExperimentReport> {
    let full = ModelConfig {
        lite: false,
        sparsify_stride: 1,
        ..cfg.model.clone()
    };
    let lite = ModelConfig::lite_of(&full);
    let variants = [("full", full), ("lite", lite)];
    let results: Vec<Result<[ReportRow; 2]>> = if opts.threads > 1 {
        std::thread::scope(|s| {
            let handles: Vec<_> = variants
                .iter()
                .map(|(n, m)| s.spawn(|| ablate_encoder(cfg, n, m.clone(), train, eval, opts)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("ablation worker panicked"))
                .collect()
        })
    } else {
        variants
            .iter()
            .map(|(n, m)| ablate_encoder(cfg, n, m.clone(), train, eval, opts))
            .collect()
    };
    let mut rows = Vec::with_capacity(4);
    for r in results {
        rows.extend(r?);
    }
    Ok(ExperimentReport {
        config_hash: cfg.hash(),
        rows,
    })
}

/// Long-horizon and Lyapunov summary per cell.
pub fn lyapunov_table(report: &ExperimentReport) -> String {
    let rows: Vec<String> = report
        .rows
        .iter()
        .map(|r| {
            format!(
                "{},{},{},{},{},{}",
                r.variant, r.mi_total, r.amse, r.err_4k, r.static_4k, r.measured_lyap
            )
        })
        .collect();
    table_text(
        &report.config_hash,
        "variant,mi_total,amse,long_horizon_error,static_long_horizon_error,measured_lyap",
        &rows,
    )
}

/// Cost against fidelity per cell.
pub fn encoder_table(report: &ExperimentReport) -> String {
    let rows: Vec<String> = report
        .rows
        .iter()
        .map(|r| {
            format!(
                "{},{},{},{},{},{},{},{}",
                r.variant, r.flops, r.params, r.r2_mean, r.mi_total, r.amse, r.id_mean, r.id_std
            )
        })
        .collect();
    table_text(
        &report.config_hash,
        "variant,flops,params,r2_mean,mi_total,amse,id_mean,id_std",
        &rows,
    )
}

/// With-minus-without-Lyapunov differences per encoder.
pub fn delta_table(report: &ExperimentReport) -> String {
    let rows: Vec<String> = report
        .rows
        .chunks(2)
        .map(|pair| {
            let (a, b) = (&pair[0], &pair[1]);
            let encoder = a.variant.split('_').next().unwrap_or("");
            format!(
                "{encoder},{},{},{},{}",
                a.mi_total - b.mi_total,
                a.amse - b.amse,
                a.err_4k - b.err_4k,
                a.measured_lyap - b.measured_lyap
            )
        })
        .collect();
    table_text(
        &report.config_hash,
        "encoder,delta_mi_total,delta_amse,delta_long_horizon_error,delta_measured_lyap",
        &rows,
    )
}

pub fn ablate(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Outcome> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.output_dir);
    let dir = layout.ablate();
    if let Some(o) = exists_notice(dir.join("grid.csv"), opts) {
        return Ok(o);
    }
    let train = load_dataset(&layout.data_train())?;
    let eval = load_dataset(&layout.data_eval())?;
    let report = ablate_in(cfg, &train, &eval, opts)?;
    write(&dir.join("grid.csv"), report.to_csv())?;
    write(&dir.join("lyapunov.csv"), lyapunov_table(&report))?;
    write(&dir.join("encoder.csv"), encoder_table(&report))?;
    write(&dir.join("deltas.csv"), delta_table(&report))?;
    Ok(Outcome::Done)
}

// ----- plot ------------------------------------------------------------------

/// `(variant label, frames × dims)` latents of one clip from `latents.csv`.
pub fn read_latents(path: &Path, clip: usize) -> Result<(String, Vec<(String, Vec<Vec<f64>>)>)> {
    let t = Table::load(path)?;
    let dims: Vec<usize> = t
        .header
        .iter()
        .enumerate()
        .filter(|(_, h)| h.starts_with('z'))
        .map(|(i, _)| i)
        .collect();
    let (c_col, v_col) = (t.column("clip")?, t.column("variant")?);
    let mut runs: Vec<(String, Vec<Vec<f64>>)> = Vec::new();
    for row in &t.rows {
        if row[c_col].parse::<usize>().ok() != Some(clip) {
            continue;
        }
        let vals = dims
            .iter()
            .map(|&i| row[i].parse::<f64>().map_err(|_| CliError::Input(format!("bad latent {:?}", row[i]))))
            .collect::<Result<Vec<f64>>>()?;
        match runs.last_mut() {
            Some((label, frames)) if *label == row[v_col] => frames.push(vals),
            _ => runs.push((row[v_col].clone(), vec![vals])),
        }
    }
    Ok((t.config_hash, runs))
}

pub fn plot(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Outcome> {
    let layout = Layout::new(&cfg.output_dir);
    let dir = layout.plots();
    if let Some(o) = exists_notice(dir.join("ranking.svg"), opts) {
        return Ok(o);
    }
    let ranking = Table::load(&layout.eval("ranking"))?;
    let hash = ranking.config_hash.clone();
    let mut scores = Vec::new();
    let mut selected = Vec::new();
    for r in 0..ranking.rows.len() {
        let d: usize = ranking.parse(r, "dim")?;
        scores.push((format!("z{d}"), ranking.float(r, "score")?, ranking.get(r, "selected")? == "1"));
        if ranking.get(r, "selected")? == "1" {
            selected.push(d);
        }
    }
    write(&dir.join("ranking.svg"), plot::bar_chart("latent dimension scores", &scores, &hash))?;

    let (_, runs) = read_latents(&layout.eval("latents"), 0)?;
    let variants: Vec<&(String, Vec<Vec<f64>>)> = runs.iter().filter(|(l, _)| l != "clean").collect();
    for (i, &a) in selected.iter().enumerate() {
        for &b in &selected[i + 1..] {
            let curves: Vec<(String, Vec<(f64, f64)>)> = variants
                .iter()
                .map(|(l, f)| (l.clone(), f.iter().map(|r| (r[a], r[b])).collect()))
                .collect();
            let svg = plot::overlay(&format!("z{a} vs z{b}"), &format!("z{a}"), &format!("z{b}"), &curves, &hash);
            write(&dir.join(format!("overlay_z{a}_z{b}.svg")), svg)?;
        }
    }

    let mut series = Vec::new();
    for name in ["phase1", "phase2"] {
        let path = layout.log(name);
        if path.exists() {
            let log = read_train_log(&path)?;
            let rec: Vec<(f64, f64)> = log.records.iter().map(|r| (r.step as f64, r.l_total)).collect();
            series.push((format!("{name} total"), rec));
        }
    }
    if !series.is_empty() {
        write(&dir.join("loss.svg"), plot::line_chart("training loss", "step", "loss", &series, &hash))?;
    }
    Ok(Outcome::Done)
}

// ----- gradcheck -------------------------------------------------------------

/// Gradient audit at the configured model, away from initialization.
pub fn gradcheck_model(cfg: &ExperimentConfig, model: Option<Model>, clip: &VideoClip) -> Result<Vec<LossGradCheck>> {
    let model = match model {
        Some(m) => m,
        None => {
            let mut m = Model::new(cfg.model.clone(), cfg.seed)?;
            m.perturb_transition(0.02, cfg.seed);
            m
        }
    };
    Ok(gradcheck(&model, clip, 64, cfg.seed)?)
}

pub fn gradcheck_text(hash: &str, checks: &[LossGradCheck]) -> String {
    let rows: Vec<String> = checks
        .iter()
        .map(|c| {
            let (name, element, _) = c.worst().unwrap_or_default();
            format!(
                "{},{},{},{name},{element},{}",
                c.loss,
                c.report.entries.len(),
                c.report.max_rel_error(),
                c.passes(GRADCHECK_TOL) as u8
            )
        })
        .collect();
    table_text(hash, "loss,entries,max_rel_error,worst_param,worst_element,pass", &rows)
}

pub fn run_gradcheck(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Outcome> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.output_dir);
    if let Some(o) = exists_notice(layout.gradcheck(), opts) {
        return Ok(o);
    }
    let ckpt = opts.checkpoint.clone().unwrap_or_else(|| layout.checkpoint("final"));
    let model = if ckpt.exists() {
        Some(Model::load_checkpoint(&ckpt)?.0)
    } else {
        None
    };
    let clip = if layout.data_train().join("manifest.json").exists() {
        Dataset::load(&layout.data_train())?.clips.swap_remove(0)
    } else {
        generate_datasets(cfg)?.0.clips.swap_remove(0)
    };
    let checks = gradcheck_model(cfg, model, &clip)?;
    for c in &checks {
        println!(
            "{:<6} entries={:<3} max_rel_error={:.3e} {}",
            c.loss,
            c.report.entries.len(),
            c.report.max_rel_error(),
            if c.passes(GRADCHECK_TOL) { "ok" } else { "FAILED" }
        );
    }
    write(&layout.gradcheck(), gradcheck_text(&cfg.hash(), &checks))?;
    if let Some(bad) = checks.iter().find(|c| !c.passes(GRADCHECK_TOL)) {
        return Err(CliError::Numeric(format!(
            "gradient check failed for {} (worst {:?})",
            bad.loss,
            bad.worst()
        )));
    }
    Ok(Outcome::Done)
}
