//! Feature matrices and the FMX1 file format.
//!
//! ```text
//! "FMX1" | u32 n | u32 d | n·d × f32 (row-major) | n × u16 labels | JSON trailer
//! ```
//! The trailer is `{"classes": [...], "source": "...", "seed": u64}` and runs
//! to end of file.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::bundle::{ByteReader, WeightBundle};
use super::ConvError;
use crate::pixelio::{image_to_tensor, read_image, resize_bilinear, DatasetManifest, Image, NormalizationSpec};

pub const FMX_MAGIC: &[u8; 4] = b"FMX1";

/// `n × d` feature rows with one class label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    d: usize,
    values: Vec<f32>,
    labels: Vec<usize>,
    classes: Vec<String>,
    pub source: String,
    pub seed: u64,
}

impl FeatureMatrix {
    pub fn new(d: usize, values: Vec<f32>, labels: Vec<usize>, classes: Vec<String>) -> Result<Self, ConvError> {
        let bad = |msg: String| Err(ConvError::FeatureInvalid(msg));
        if d == 0 {
            return bad("feature dimension must be >= 1".into());
        }
        if values.len() != labels.len() * d {
            return bad(format!(
                "{} values cannot form {} rows of width {d}",
                values.len(),
                labels.len()
            ));
        }
        if let Some(i) = labels.iter().position(|&l| l >= classes.len()) {
            return bad(format!(
                "row {i} has label {} but only {} classes exist",
                labels[i],
                classes.len()
            ));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(ConvError::NonFinite(format!("row {}, column {}", i / d, i % d)));
        }
        Ok(Self {
            d,
            values,
            labels,
            classes,
            source: String::new(),
            seed: 0,
        })
    }

    pub fn with_provenance(mut self, source: impl Into<String>, seed: u64) -> Self {
        self.source = source.into();
        self.seed = seed;
        self
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.d..(i + 1) * self.d]
    }

    /// Rows converted to `f64`, the precision the learners work in.
    pub fn rows_f64(&self) -> Vec<Vec<f64>> {
        self.values
            .chunks_exact(self.d)
            .map(|r| r.iter().map(|&v| v as f64).collect())
            .collect()
    }

    pub fn select(&self, rows: &[usize]) -> FeatureMatrix {
        let mut values = Vec::with_capacity(rows.len() * self.d);
        for &r in rows {
            values.extend_from_slice(self.row(r));
        }
        FeatureMatrix {
            d: self.d,
            values,
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            classes: self.classes.clone(),
            source: self.source.clone(),
            seed: self.seed,
        }
    }

    /// Stacks `other` under `self`. Both must share dimension and class list.
    pub fn concat(&self, other: &FeatureMatrix) -> Result<FeatureMatrix, ConvError> {
        if self.d != other.d {
            return Err(ConvError::FeatureInvalid(format!(
                "cannot stack width {} onto width {}",
                other.d, self.d
            )));
        }
        if self.classes != other.classes {
            return Err(ConvError::FeatureInvalid("class lists differ".into()));
        }
        let mut values = self.values.clone();
        values.extend_from_slice(&other.values);
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Ok(FeatureMatrix {
            d: self.d,
            values,
            labels,
            classes: self.classes.clone(),
            source: format!("{}+{}", self.source, other.source),
            seed: self.seed,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, ConvError> {
        if self.classes.len() > u16::MAX as usize + 1 {
            return Err(ConvError::FeatureInvalid("labels do not fit in u16".into()));
        }
        let n = u32::try_from(self.n()).map_err(|_| ConvError::FeatureInvalid("too many rows".into()))?;
        let d = u32::try_from(self.d).map_err(|_| ConvError::FeatureInvalid("too many columns".into()))?;
        let trailer = serde_json::to_vec(&Trailer {
            classes: self.classes.clone(),
            source: self.source.clone(),
            seed: self.seed,
        })
        .expect("trailer serialization is infallible");
        let mut out = Vec::with_capacity(12 + 4 * self.values.len() + 2 * self.n() + trailer.len());
        out.extend_from_slice(FMX_MAGIC);
        out.extend_from_slice(&n.to_le_bytes());
        out.extend_from_slice(&d.to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &l in &self.labels {
            out.extend_from_slice(&(l as u16).to_le_bytes());
        }
        out.extend_from_slice(&trailer);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ConvError> {
        let parse = |e: ConvError| match e {
            ConvError::BundleParse(m) => ConvError::FeatureParse(m),
            other => other,
        };
        let mut r = ByteReader::new(bytes);
        if r.take(4).map_err(parse)? != FMX_MAGIC {
            return Err(ConvError::FeatureParse("bad magic, expected FMX1".into()));
        }
        let n = r.u32().map_err(parse)? as usize;
        let d = r.u32().map_err(parse)? as usize;
        let too_big = || ConvError::FeatureParse("matrix size overflows".into());
        let count = n.checked_mul(d).ok_or_else(too_big)?;
        let raw = r.take(count.checked_mul(4).ok_or_else(too_big)?).map_err(parse)?;
        let values = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let raw = r.take(n * 2).map_err(parse)?;
        let labels = raw
            .chunks_exact(2)
            .map(|b| u16::from_le_bytes([b[0], b[1]]) as usize)
            .collect();
        let trailer: Trailer = serde_json::from_slice(r.take(r.remaining()).map_err(parse)?)
            .map_err(|e| ConvError::FeatureParse(format!("trailer: {e}")))?;
        Ok(Self::new(d, values, labels, trailer.classes)?.with_provenance(trailer.source, trailer.seed))
    }
}

#[derive(Serialize, Deserialize)]
struct Trailer {
    classes: Vec<String>,
    source: String,
    seed: u64,
}

pub fn load_features(path: &Path) -> Result<FeatureMatrix, ConvError> {
    let bytes = fs::read(path).map_err(|e| ConvError::Io(format!("{}: {e}", path.display())))?;
    FeatureMatrix::from_bytes(&bytes)
}

pub fn save_features(fm: &FeatureMatrix, path: &Path) -> Result<(), ConvError> {
    fs::write(path, fm.to_bytes()?).map_err(|e| ConvError::Io(format!("{}: {e}", path.display())))
}

/// Resizes to the bundle's input size, normalises, and runs the forward pass.
pub fn image_features(img: &Image, bundle: &WeightBundle, norm: &NormalizationSpec) -> Result<Vec<f32>, ConvError> {
    let input = bundle.input();
    let resized = resize_bilinear(img, input.w, input.h);
    let out = bundle.forward(&image_to_tensor(&resized, norm))?;
    if !out.is_finite() {
        return Err(ConvError::NonFinite("forward pass produced NaN/Inf".into()));
    }
    Ok(out.into_data())
}

/// Extracts features for in-memory images; rows keep input order.
pub fn extract_from_images(
    images: &[Image],
    labels: Vec<usize>,
    classes: Vec<String>,
    bundle: &WeightBundle,
    norm: &NormalizationSpec,
) -> Result<FeatureMatrix, ConvError> {
    assert_eq!(images.len(), labels.len(), "one label per image");
    let rows = images
        .par_iter()
        .map(|img| image_features(img, bundle, norm))
        .collect::<Result<Vec<_>, _>>()?;
    FeatureMatrix::new(bundle.output_len(), rows.concat(), labels, classes)
}

/// One feature row per manifest sample, in manifest order. Relative sample
/// paths are resolved against `base_dir`.
pub fn extract_features(
    manifest: &DatasetManifest,
    base_dir: &Path,
    bundle: &WeightBundle,
    norm: &NormalizationSpec,
) -> Result<FeatureMatrix, ConvError> {
    let rows = manifest
        .samples
        .par_iter()
        .map(|s| {
            let path = manifest.resolve_path(base_dir, s);
            let img = read_image(&path).map_err(ConvError::Pixel)?;
            image_features(&img, bundle, norm).map_err(|e| ConvError::AtPath {
                path: path.display().to_string(),
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    FeatureMatrix::new(
        bundle.output_len(),
        rows.concat(),
        manifest.samples.iter().map(|s| s.label).collect(),
        manifest.class_names.clone(),
    )
}
