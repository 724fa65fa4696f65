//! Splits, cross-validation, C grid search and the dataset × classifier
//! experiment grid.

mod experiment;
mod search;
mod split;
pub mod synth;

use thiserror::Error;

use crate::clusterval::ClusterError;
use crate::convnet::ConvError;
use crate::learners::LearnError;
pub use crate::learners::Standardizer;
use crate::pixelio::PixelError;

pub use experiment::{
    load_dataset, run_experiment, CellReport, Classifier, DataSource, DatasetInfo, DatasetSizes, DatasetVariant,
    Datasets, ExperimentConfig, ExperimentReport, Grid, GridRow, SvmConfig,
};
pub use search::{grid_search_c, GridSearchResult, DEFAULT_C_GRID};
pub use split::{kfold, split_indices, train_test_split, SplitSpec};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("cannot stratify: class {class} has {count} sample(s), need at least 2")]
    StratifyImpossible { class: usize, count: usize },
    #[error("too few samples: need {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("{pred} predictions but {truth} labels")]
    LengthMismatch { pred: usize, truth: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("cell ({dataset}, {classifier}): {source}")]
    Cell {
        dataset: String,
        classifier: String,
        #[source]
        source: Box<PipelineError>,
    },
    #[error("dataset {dataset}: {source}")]
    Dataset {
        dataset: String,
        #[source]
        source: Box<PipelineError>,
    },
    #[error(transparent)]
    Learn(#[from] LearnError),
    #[error(transparent)]
    Conv(#[from] ConvError),
    #[error(transparent)]
    Pixel(#[from] PixelError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
}

impl PipelineError {
    /// Innermost error after stripping cell and dataset context.
    pub fn root(&self) -> &PipelineError {
        match self {
            PipelineError::Cell { source, .. } | PipelineError::Dataset { source, .. } => source.root(),
            other => other,
        }
    }

    pub fn kind(&self) -> crate::FailureKind {
        use crate::FailureKind::*;
        match self.root() {
            PipelineError::InvalidConfig(_) => Input,
            PipelineError::Learn(e) => e.kind(),
            PipelineError::Conv(e) => e.kind(),
            PipelineError::Pixel(e) => e.kind(),
            PipelineError::Cluster(e) => e.kind(),
            _ => Data,
        }
    }
}

/// Fraction of positions where `pred` equals `truth`.
pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64, PipelineError> {
    if pred.len() != truth.len() {
        return Err(PipelineError::LengthMismatch {
            pred: pred.len(),
            truth: truth.len(),
        });
    }
    if pred.is_empty() {
        return Err(PipelineError::EmptyInput);
    }
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / pred.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_cases() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 0], &[1, 1]).unwrap(), 0.0);
        assert_eq!(accuracy(&[0, 1, 1, 1], &[0, 1, 0, 0]).unwrap(), 0.5);
        assert!(matches!(accuracy(&[], &[]), Err(PipelineError::EmptyInput)));
        assert!(matches!(
            accuracy(&[0], &[0, 1]),
            Err(PipelineError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn root_strips_context() {
        let e = PipelineError::Cell {
            dataset: "mixed".into(),
            classifier: "svm".into(),
            source: Box::new(PipelineError::EmptyInput),
        };
        assert!(matches!(e.root(), PipelineError::EmptyInput));
        assert!(e.to_string().contains("(mixed, svm)"));
    }
}
