use std::path::{Path, PathBuf};

use lyt_core::dynamics::DynamicsError;
use lyt_core::model::ModelError;
use lyt_core::probe::ProbeError;
use lyt_core::render::RenderError;
use lyt_core::trainer::TrainError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed input: {0}")]
    Input(String),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Process exit status: 2 configuration, 3 numeric failure, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Io { .. } | CliError::Input(_) => 4,
            CliError::Dynamics(e) => dynamics_code(e),
            CliError::Render(e) => render_code(e),
            CliError::Model(e) => model_code(e),
            CliError::Train(e) => match e {
                TrainError::Config(_) => 2,
                TrainError::NonFinite { .. } | TrainError::Num(_) => 3,
                TrainError::Model(m) => model_code(m),
                TrainError::Render(r) => render_code(r),
                TrainError::Io(_) => 4,
            },
            CliError::Probe(e) => match e {
                ProbeError::NonFinite(_) | ProbeError::Degenerate(_) => 3,
                ProbeError::Shape(_) | ProbeError::TooFew(_) => 2,
            },
        }
    }
}

fn model_code(e: &ModelError) -> i32 {
    match e {
        ModelError::Config(_) | ModelError::Shape(_) => 2,
        ModelError::Num(_) => 3,
        ModelError::Checkpoint(_) | ModelError::Io(_) | ModelError::Json(_) => 4,
    }
}

fn dynamics_code(e: &DynamicsError) -> i32 {
    match e {
        DynamicsError::Config(_) => 2,
        DynamicsError::Singularity { .. } => 3,
        DynamicsError::Csv(_) | DynamicsError::Io(_) => 4,
    }
}

fn render_code(e: &RenderError) -> i32 {
    match e {
        RenderError::Config(_) | RenderError::Contract(_) => 2,
        RenderError::Dynamics(d) => dynamics_code(d),
        RenderError::Format(_) | RenderError::Io(_) | RenderError::Json(_) => 4,
    }
}
