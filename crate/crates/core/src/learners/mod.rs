//! Classifiers over fixed-length feature vectors.
//!
//! All three learners take rows as `&[Vec<f64>]` and integer labels in
//! `0..n_classes`, and return models that predict the same label space.

pub mod gbdt;
pub mod kernel;
pub mod mlp;
pub mod modelfile;
pub mod svm;

use thiserror::Error;

pub use gbdt::{gbdt_predict, gbdt_train, GbdtModel, GbdtParams};
pub use kernel::{gram_matrix, kernel_eval, KernelSpec};
pub use mlp::{mlp_predict, mlp_train, MlpModel, MlpParams, OutputMode};
pub use modelfile::{load_model, save_model, Model, SavedModel};
pub use svm::{svm_predict, svm_train, SvmModel, SvmParams};

#[derive(Debug, Error)]
pub enum LearnError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),
    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },
    #[error("{rows} rows but {labels} labels")]
    LengthMismatch { rows: usize, labels: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("architecture mismatch: {0}")]
    ArchMismatch(String),
    #[error("malformed model file: {0}")]
    ModelParse(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl LearnError {
    pub fn kind(&self) -> crate::FailureKind {
        use crate::FailureKind::*;
        match self {
            LearnError::InvalidParameter(_)
            | LearnError::ArchMismatch(_)
            | LearnError::ModelParse(_)
            | LearnError::Io { .. } => Input,
            LearnError::NonFinite(_) => Numeric,
            _ => Data,
        }
    }
}

/// Per-column z-score fitted on one row set and applied to others.
/// Constant columns are centred but not scaled.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(rows: &[Vec<f64>]) -> Self {
        let d = rows.first().map_or(0, Vec::len);
        let n = rows.len().max(1) as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let scale = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, scale }
    }

    pub fn apply(&self, rows: &mut [Vec<f64>]) {
        for r in rows {
            for ((v, m), s) in r.iter_mut().zip(&self.mean).zip(&self.scale) {
                *v = (*v - m) / s;
            }
        }
    }
}

/// Common row width. Fails on an empty set or ragged rows.
pub(crate) fn check_dims(rows: &[Vec<f64>]) -> Result<usize, LearnError> {
    let d = rows.first().ok_or(LearnError::EmptyInput)?.len();
    if d == 0 {
        return Err(LearnError::DimensionMismatch { expected: 1, got: 0 });
    }
    for r in rows {
        if r.len() != d {
            return Err(LearnError::DimensionMismatch {
                expected: d,
                got: r.len(),
            });
        }
        if r.iter().any(|v| !v.is_finite()) {
            return Err(LearnError::NonFinite("feature row contains NaN or infinity".into()));
        }
    }
    Ok(d)
}

/// Per-class sample counts after checking lengths and label range.
pub(crate) fn class_counts(labels: &[usize], n_classes: usize, n_rows: usize) -> Result<Vec<usize>, LearnError> {
    if labels.len() != n_rows {
        return Err(LearnError::LengthMismatch {
            rows: n_rows,
            labels: labels.len(),
        });
    }
    let mut counts = vec![0; n_classes];
    for &label in labels {
        *counts
            .get_mut(label)
            .ok_or(LearnError::LabelOutOfRange { label, n_classes })? += 1;
    }
    Ok(counts)
}
