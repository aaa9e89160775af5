//! Run orchestration: configuration, checkpoints, the synthetic data
//! generator, the training loop, and SVD diagnostics.

mod checkpoint;
mod config;
mod synth;
mod train;

use std::fs::File;
use std::io::{LineWriter, Write};
use std::path::{Path, PathBuf};

pub use checkpoint::{Checkpoint, CheckpointError, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::RunConfig;
pub use synth::{generate, write_synth, SynthData, SynthParams};
pub use train::{evaluate_checkpoint, load_dataset, prepare, train, Prepared, TrainOutcome};

use crate::data::DataError;
use crate::eval::EvalError;
use crate::linalg::{CsrMatrix, LinalgError, SvdFactors};
use crate::model::ModelError;
use crate::objective::ObjectiveError;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("cannot access {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

impl HarnessError {
    /// 1 usage/config, 2 data/protocol/IO, 3 numerical or internal failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 1,
            HarnessError::Io { .. } | HarnessError::Data(_) | HarnessError::Checkpoint(_) => 2,
            HarnessError::Objective(ObjectiveError::Saturated { .. } | ObjectiveError::EmptyTrain) => 2,
            HarnessError::Eval(EvalError::NoEvaluableUsers(_)) => 2,
            HarnessError::Model(ModelError::InvalidArgument(_)) => 1,
            _ => 3,
        }
    }
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.to_path_buf(), source }
}

/// Line-oriented run log, mirrored to an optional file and optionally to
/// standard output. Every line is also kept in memory.
#[derive(Debug, Default)]
pub struct RunLog {
    file: Option<LineWriter<File>>,
    echo: bool,
    lines: Vec<String>,
}

impl RunLog {
    pub fn new(path: Option<&Path>, echo: bool) -> Result<Self, HarnessError> {
        let file = match path {
            Some(p) => {
                if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
                }
                Some(LineWriter::new(File::create(p).map_err(io_err(p))?))
            }
            None => None,
        };
        Ok(Self { file, echo, lines: Vec::new() })
    }

    /// In-memory only.
    pub fn quiet() -> Self {
        Self::default()
    }

    pub fn line(&mut self, text: impl Into<String>) {
        let text = text.into();
        if self.echo {
            println!("{text}");
        }
        if let Some(f) = &mut self.file {
            if let Err(e) = writeln!(f, "{text}") {
                log::warn!("log file write failed: {e}");
            }
        }
        self.lines.push(text);
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }

    /// Lines starting with `epoch=`.
    pub fn epoch_lines(&self) -> Vec<&str> {
        self.lines.iter().filter(|l| l.starts_with("epoch=")).map(String::as_str).collect()
    }
}

/// Spectrum and reconstruction quality of a rank-r factorization of Ã.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdReport {
    pub singular_values: Vec<f64>,
    /// ‖Ã − U S Vᵀ‖_F / ‖Ã‖_F.
    pub relative_residual: f64,
    /// Σ s² / ‖Ã‖_F².
    pub captured_fraction: f64,
    /// Whether the residual came from the densified difference rather than
    /// the ‖Ã‖² − Σ s² identity.
    pub exact_residual: bool,
}

/// Densify when M·N is at most this.
pub const DENSE_RESIDUAL_LIMIT: usize = 1_000_000;

pub fn svd_report(a: &CsrMatrix, f: &SvdFactors) -> SvdReport {
    let norm_sq = a.frobenius_norm().powi(2);
    let mass: f64 = f.s.iter().map(|s| s * s).sum();
    let exact = a.rows().saturating_mul(a.cols()) <= DENSE_RESIDUAL_LIMIT;
    let residual = if exact {
        let dense = a.to_dense();
        let approx = f.to_dense();
        dense.as_slice().iter().zip(approx.as_slice()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
    } else {
        (norm_sq - mass).max(0.0).sqrt()
    };
    let norm = norm_sq.sqrt();
    SvdReport {
        singular_values: f.s.clone(),
        relative_residual: if norm > 0.0 { residual / norm } else { 0.0 },
        captured_fraction: if norm_sq > 0.0 { mass / norm_sq } else { 0.0 },
        exact_residual: exact,
    }
}

impl SvdReport {
    pub fn lines(&self) -> Vec<String> {
        let mut out: Vec<String> =
            self.singular_values.iter().enumerate().map(|(i, s)| format!("s[{}]={s:.10}", i + 1)).collect();
        out.push(format!(
            "relative_residual={:.6e} ({})",
            self.relative_residual,
            if self.exact_residual { "dense" } else { "norm identity" }
        ));
        out.push(format!("captured_fraction={:.6}", self.captured_fraction));
        out
    }
}
