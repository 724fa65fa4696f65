//! Small-data image classification: deterministic augmentation, frozen
//! convolutional feature extraction, k-means/silhouette validation of the
//! feature space, and three classical classifiers compared over original,
//! augmented and mixed datasets.

pub mod augment;
pub mod clusterval;
pub mod convnet;
pub mod learners;
pub mod pipeline;
pub mod pixelio;
pub mod tensor;

pub use augment::{AugmentationPlan, Dihedral, PostOp, TransformSpec};
pub use clusterval::{KMeansModel, KMeansParams, SilhouetteReport};
pub use convnet::{FeatureMatrix, WeightBundle};
pub use learners::{KernelSpec, LearnError, Model, SavedModel, Standardizer};
pub use pipeline::{accuracy, ExperimentConfig, ExperimentReport, PipelineError, SplitSpec};
pub use pixelio::{DatasetManifest, Image, NormalizationSpec};
pub use tensor::Tensor;

/// Coarse failure category shared by every error type, so front ends can
/// pick an exit status without matching on individual variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureKind {
    /// A file could not be read or parsed, or a setting is out of range.
    Input,
    /// Inputs parsed fine but violate a precondition (shapes, labels, class counts).
    Data,
    /// A NaN or infinity appeared.
    Numeric,
}
