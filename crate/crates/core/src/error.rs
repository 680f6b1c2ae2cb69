use std::path::PathBuf;

use thiserror::Error;

use crate::hierarchy::{ClassId, Violation};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid hierarchy: {}", format_violations(.0))]
    InvalidHierarchy(Vec<Violation>),

    #[error("unknown class id {0}")]
    UnknownClass(ClassId),

    #[error("unknown class name `{0}`")]
    UnknownClassName(String),

    #[error("infeasible schedule: cannot place class `{class}` ({reason})")]
    InfeasibleSchedule { class: String, reason: String },

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("class {class} is not trained at step {step}")]
    NotTrainedAtStep { class: ClassId, step: usize },

    #[error("superclass `{0}` has no children")]
    ChildlessSuperclass(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("slice misalignment: student has {student} outputs, teacher has {teacher}")]
    SliceMisalignment { student: usize, teacher: usize },

    #[error("non-finite gradient in layer {layer}")]
    NonFiniteGradient { layer: usize },

    #[error("non-finite loss at step {step}, epoch {epoch}")]
    NonFiniteLoss { step: usize, epoch: usize },

    #[error("csv row {row}: {message}")]
    Csv { row: usize, message: String },

    #[error("empty truth set")]
    EmptyTruth,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed json: {0}")]
    Json(#[from] serde_json::Error),
}

fn format_violations(v: &[Violation]) -> String {
    v.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ")
}

pub(crate) fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}
