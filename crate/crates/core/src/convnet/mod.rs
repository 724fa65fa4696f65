//! Feed-forward convolutional inference over a small layer vocabulary
//! (3×3 same convolution, ReLU, 2×2 max-pool, flatten).

mod bundle;
mod features;
mod ops;

use thiserror::Error;

use crate::pixelio::PixelError;

pub use crate::tensor::Tensor;
pub use bundle::{
    conv_stack, load_weight_bundle, save_weight_bundle, tiny, vgg16_64, InputSpec, LayerSpec, WeightBundle, FWB_MAGIC,
    VGG16_BLOCKS,
};
pub use features::{
    extract_features, extract_from_images, image_features, load_features, save_features, FeatureMatrix, FMX_MAGIC,
};
pub use ops::{conv2d_forward, flatten, maxpool2d_forward, relu};

#[derive(Debug, Error)]
pub enum ConvError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("layer {layer}: {msg}")]
    LayerShape { layer: usize, msg: String },
    #[error("failed to parse weight bundle: {0}")]
    BundleParse(String),
    #[error("weight bundle does not type-check at layer {layer}: {msg}")]
    BundleShapeInvalid { layer: usize, msg: String },
    #[error("failed to parse feature matrix: {0}")]
    FeatureParse(String),
    #[error("invalid feature matrix: {0}")]
    FeatureInvalid(String),
    #[error("non-finite feature value: {0}")]
    NonFinite(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error(transparent)]
    Pixel(#[from] PixelError),
    #[error("{path}: {source}")]
    AtPath {
        path: String,
        #[source]
        source: Box<ConvError>,
    },
}

impl ConvError {
    pub fn kind(&self) -> crate::FailureKind {
        use crate::FailureKind::*;
        match self {
            ConvError::BundleParse(_) | ConvError::FeatureParse(_) | ConvError::Io(_) => Input,
            ConvError::NonFinite(_) => Numeric,
            ConvError::Pixel(e) => e.kind(),
            ConvError::AtPath { source, .. } => source.kind(),
            _ => Data,
        }
    }
}
