//! Experiment configuration: one TOML file plus command-line overrides.
//!
//! Every output file records the SHA-256 of the resolved configuration's
//! canonical JSON, so any artifact can be traced back to the settings and
//! seed that produced it.

use std::fs;
use std::path::{Path, PathBuf};

use lyt_core::dynamics::{SystemKind, SystemSpec};
use lyt_core::model::ModelConfig;
use lyt_core::probe::Criterion;
use lyt_core::render::{frame_count, DistractorConfig, RenderConfig};
use lyt_core::trainer::{Phase, RolloutStarts, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train_clips: usize,
    pub eval_clips: usize,
}

/// Augmentation used while training, and the variants every evaluation clip
/// is re-rendered under for the overlap metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistractorSet {
    pub train: DistractorConfig,
    pub eval: Vec<DistractorConfig>,
}

/// Optimizer settings of one phase. Loss weights come from the model section
/// and seeds from the experiment seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseConfig {
    pub lr: f64,
    pub steps: u64,
    pub batch: usize,
    pub grad_clip: Option<f64>,
    pub rollout_starts: RolloutStarts,
    /// Train on distractor-augmented windows.
    pub augment: bool,
    /// Phase 2 only.
    #[serde(default)]
    pub unfreeze_encoder: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsConfig {
    pub criterion: Criterion,
    /// Number of selected dims; `None` uses the system's ground-truth
    /// dimension.
    pub d_select: Option<usize>,
    /// Seed of the intrinsic-dimension split assignment.
    pub id_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed: datasets, initialization and both training phases derive
    /// from it.
    pub seed: u64,
    pub system: SystemSpec,
    pub render: RenderConfig,
    pub data: DataConfig,
    pub distractors: DistractorSet,
    pub model: ModelConfig,
    pub phase1: PhaseConfig,
    pub phase2: PhaseConfig,
    pub metrics: MetricsConfig,
    pub output_dir: PathBuf,
}

/// Evaluation variants: a fresh background, texture and brightness draw per
/// variant, without occluders.
pub fn eval_variants() -> Vec<DistractorConfig> {
    (1..=3)
        .map(|seed| DistractorConfig {
            background_prob: 1.0,
            occlusion_max_fraction: 0.0,
            ..DistractorConfig::standard().with_seed(seed)
        })
        .collect()
}

impl Default for ExperimentConfig {
    /// Single-pendulum desk configuration.
    fn default() -> Self {
        let phase = PhaseConfig {
            lr: 3e-4,
            steps: 2000,
            batch: 8,
            grad_clip: Some(1.0),
            rollout_starts: RolloutStarts::All,
            augment: true,
            unfreeze_encoder: false,
        };
        Self {
            seed: 0,
            system: SystemSpec::default_for(SystemKind::SinglePendulum),
            render: RenderConfig::default(),
            data: DataConfig {
                train_clips: 32,
                eval_clips: 8,
            },
            distractors: DistractorSet {
                train: DistractorConfig::standard(),
                eval: eval_variants(),
            },
            model: ModelConfig::default(),
            phase1: phase.clone(),
            phase2: PhaseConfig {
                steps: 500,
                ..phase
            },
            metrics: MetricsConfig {
                criterion: Criterion::R2,
                d_select: None,
                id_seed: 0,
            },
            output_dir: PathBuf::from("runs/single_pendulum"),
        }
    }
}

/// Flag overrides applied on top of a loaded file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub lyap: Option<f64>,
    pub lite: bool,
    pub steps: Option<u64>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Applies flag overrides; `--steps` sets the step count of both phases.
    pub fn with_overrides(mut self, o: &Overrides) -> Self {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(out) = &o.out {
            self.output_dir = out.clone();
        }
        if let Some(l) = o.lyap {
            self.model.lambda_lyap = l;
        }
        if o.lite {
            self.model = ModelConfig::lite_of(&self.model);
        }
        if let Some(s) = o.steps {
            self.phase1.steps = s;
            self.phase2.steps = s;
        }
        self
    }

    pub fn frames_per_clip(&self) -> usize {
        frame_count(self.render.duration, self.render.fps)
    }

    /// Frames an evaluation window needs: context plus the long (4K) horizon.
    pub fn eval_window(&self) -> usize {
        self.model.context + 4 * self.model.horizon
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::Config(m));
        self.system.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.model.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.render.height != self.model.height || self.render.width != self.model.width {
            return bad(format!(
                "render size {}x{} differs from model input {}x{}",
                self.render.height, self.render.width, self.model.height, self.model.width
            ));
        }
        if self.model.channels != 1 {
            return bad("rendered clips have one channel".into());
        }
        if self.frames_per_clip() < self.eval_window() {
            return bad(format!(
                "clips of {} frames are shorter than context + 4K = {}",
                self.frames_per_clip(),
                self.eval_window()
            ));
        }
        if self.data.train_clips == 0 || self.data.eval_clips == 0 {
            return bad("train_clips and eval_clips must be positive".into());
        }
        for d in std::iter::once(&self.distractors.train).chain(&self.distractors.eval) {
            d.validate().map_err(|e| CliError::Config(e.to_string()))?;
        }
        if self.distractors.eval.len() < 2 {
            return bad("the overlap metric needs at least two eval distractor variants".into());
        }
        if let Some(d) = self.metrics.d_select {
            if d == 0 || d > self.model.d_z {
                return bad(format!("d_select {d} must lie in 1..={}", self.model.d_z));
            }
        }
        for phase in [Phase::One, Phase::Two] {
            self.train_config(phase)
                .validate()
                .map_err(|e| CliError::Config(e.to_string()))?;
        }
        Ok(())
    }

    pub fn d_select(&self) -> usize {
        self.metrics
            .d_select
            .unwrap_or_else(|| self.system.kind().ground_truth_dim())
            .min(self.model.d_z)
    }

    pub fn train_config(&self, phase: Phase) -> TrainConfig {
        let (p, seed) = match phase {
            Phase::One => (&self.phase1, self.seed),
            Phase::Two => (&self.phase2, self.seed.wrapping_add(1)),
        };
        TrainConfig {
            lr: p.lr,
            steps: p.steps,
            batch: p.batch,
            seed,
            phase,
            lambda_pred: self.model.lambda_pred,
            lambda_lyap: self.model.lambda_lyap,
            augment: if p.augment {
                self.distractors.train
            } else {
                DistractorConfig::none()
            },
            grad_clip: p.grad_clip,
            rollout_starts: p.rollout_starts,
            unfreeze_encoder: p.unfreeze_encoder,
            timing: false,
        }
    }

    pub fn train_data_seed(&self) -> u64 {
        self.seed
    }

    /// Held-out clips come from a disjoint seed stream.
    pub fn eval_data_seed(&self) -> u64 {
        self.seed ^ 0x9e37_79b9_7f4a_7c15
    }

    /// SHA-256 (hex) of the canonical JSON of this configuration. The output
    /// directory is left out, so identical runs in different places share a
    /// hash.
    pub fn hash(&self) -> String {
        let hashed = ExperimentConfig {
            output_dir: PathBuf::new(),
            ..self.clone()
        };
        let json = serde_json::to_vec(&hashed).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
