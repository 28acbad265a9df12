//! Training, evaluation, inference and scan benchmarks: the operational
//! surface the CLI wraps.

pub mod alloc;
mod bench;
mod config;
mod data;
mod evaluate;
mod optim;
mod train;

pub use bench::{bench_scan, fit_loglog_slope, write_bench_csv, BenchOptions, BenchRow};
pub use config::{RunConfig, TrainConfig};
pub use data::{load_clip_dir, save_clip_dir, CLIP_EXTENSION};
pub use evaluate::{
    evaluate, evaluate_waves, infer, write_metrics_csv, write_wave_csv, EvalReport, EvalRow, InferResult, SHORT_CLIP_NOTE,
    SHORT_CLIP_SECONDS,
};
pub use optim::Adam;
pub use train::{segments, train, RunManifest, TrainOutcome};

use std::io::Write;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dsp::DspError;
use crate::model::ModelError;
use crate::synth::SynthError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("non-finite loss at step {step}: {detail}")]
    Numeric { step: usize, detail: String },
    #[error("data: {0}")]
    Data(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

impl HarnessError {
    /// 2 for configuration and input errors, 3 for numeric failures, 4 for I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Numeric { .. } => 3,
            Self::Tensor(TensorError::NonFinite { .. }) | Self::Model(ModelError::Tensor(TensorError::NonFinite { .. })) => 3,
            Self::Io(_) | Self::Csv(_) | Self::Json(_) | Self::Data(_) => 4,
            Self::Model(ModelError::Io(_) | ModelError::Checkpoint(_)) => 4,
            Self::Model(ModelError::Tensor(TensorError::Io(_) | TensorError::Container(_))) => 4,
            Self::Synth(SynthError::Io(_) | SynthError::Format(_)) => 4,
            Self::Tensor(TensorError::Io(_) | TensorError::Container(_)) => 4,
            _ => 2,
        }
    }
}

/// First 16 hex digits of the SHA-256 of `text`.
pub fn config_hash(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// The comment line every CSV starts with.
pub(crate) fn write_hash_line(w: &mut impl Write, hash: &str) -> std::io::Result<()> {
    writeln!(w, "# config_hash={hash}")
}
