//! Files, configuration and end-to-end runs. This is the only part of the
//! crate that touches the filesystem.

mod cli;
mod config;
mod ensemble;
mod io;
mod particle;

pub use cli::{run_cli, Cli, Command, OutputFormat};
pub use config::{ConditionSpec, ExperimentConfig, SensitivityParams};
pub use ensemble::{
    beta_histogram, derive_seed, run_ensemble, synthesize_truths, write_ensemble_outputs, DielectricEstimate,
    EnsembleReport, ParticleFailure,
};
pub use io::{
    emit_ensemble, emit_esr, emit_psd, ingest_calibration_table, ingest_ensemble, ingest_esr, ingest_heating_table,
    ingest_psd, parse_calibration_table, parse_ensemble, parse_esr, parse_heating_table, parse_psd, write_atomic,
    write_esr, write_psd, EnsembleRecord,
};
pub use particle::{
    analyze_particle, condition_design, run_particle, synthesize_particle, write_synthetic_particle, ConditionData,
    ConditionSummary, ParticleReport, ParticleTruth, SyntheticParticle,
};

use std::fmt;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

/// Pipeline step an error came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Config,
    Ingest,
    Synthesis,
    EsrFit,
    HeatingFit,
    Thermometry,
    PsdFit,
    Radius,
    CrossSection,
    Calibration,
    PowerLaw,
    Dielectric,
    Output,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Config => "config",
            Stage::Ingest => "ingest",
            Stage::Synthesis => "synthesis",
            Stage::EsrFit => "esr_fit",
            Stage::HeatingFit => "heating_fit",
            Stage::Thermometry => "thermometry",
            Stage::PsdFit => "psd_fit",
            Stage::Radius => "radius",
            Stage::CrossSection => "cross_section",
            Stage::Calibration => "calibration",
            Stage::PowerLaw => "power_law",
            Stage::Dielectric => "dielectric",
            Stage::Output => "output",
        };
        f.write_str(s)
    }
}

/// Error carrying the stage, the offending file and, for parse errors, the
/// 1-based line and column.
#[derive(Debug, Clone, PartialEq, Error, Serialize)]
#[error("{stage}{}: {message}", location_suffix(.file, .line, .column))]
pub struct PipelineError {
    pub stage: Stage,
    pub file: Option<PathBuf>,
    pub line: Option<usize>,
    pub column: Option<usize>,
    pub message: String,
}

fn location_suffix(file: &Option<PathBuf>, line: &Option<usize>, column: &Option<usize>) -> String {
    let mut s = String::new();
    if let Some(f) = file {
        s.push_str(&format!(" [{}", f.display()));
        if let Some(l) = line {
            s.push_str(&format!(":{l}"));
            if let Some(c) = column {
                s.push_str(&format!(":{c}"));
            }
        }
        s.push(']');
    } else if let Some(l) = line {
        s.push_str(&format!(" [line {l}]"));
    }
    s
}

impl PipelineError {
    pub fn new(stage: Stage, message: impl fmt::Display) -> Self {
        Self {
            stage,
            file: None,
            line: None,
            column: None,
            message: message.to_string(),
        }
    }

    pub fn with_file(mut self, file: impl AsRef<Path>) -> Self {
        self.file = Some(file.as_ref().to_path_buf());
        self
    }

    pub fn at(mut self, line: usize, column: Option<usize>) -> Self {
        self.line = Some(line);
        self.column = column;
        self
    }

    fn or_file(mut self, file: Option<&Path>) -> Self {
        if self.file.is_none() {
            self.file = file.map(Path::to_path_buf);
        }
        self
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;

/// Shorthand for tagging a foreign error with a stage.
trait StageExt<T> {
    fn stage(self, stage: Stage) -> Result<T>;
}

impl<T, E: fmt::Display> StageExt<T> for std::result::Result<T, E> {
    fn stage(self, stage: Stage) -> Result<T> {
        self.map_err(|e| PipelineError::new(stage, e))
    }
}
