//! Image ingestion: decoding, resizing, tensor conversion and dataset manifests.

use std::collections::HashSet;
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum PixelError {
    #[error("malformed image: {0}")]
    MalformedImage(String),
    #[error("unsupported image format (only PNG and JPEG are accepted)")]
    UnsupportedFormat,
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("failed to parse manifest: {0}")]
    ManifestParse(String),
    #[error("invalid manifest: {0}")]
    ManifestInvalid(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    AtPath {
        path: PathBuf,
        #[source]
        source: Box<PixelError>,
    },
}

impl PixelError {
    pub fn kind(&self) -> crate::FailureKind {
        use crate::FailureKind::*;
        match self {
            PixelError::InvalidImage(_) | PixelError::ManifestInvalid(_) => Data,
            PixelError::AtPath { source, .. } => source.kind(),
            _ => Input,
        }
    }

    pub(crate) fn at(path: &Path, source: PixelError) -> Self {
        PixelError::AtPath {
            path: path.to_path_buf(),
            source: Box::new(source),
        }
    }
}

/// An 8-bit RGB raster, row-major with interleaved channels.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self, PixelError> {
        if width == 0 || height == 0 {
            return Err(PixelError::InvalidImage(format!(
                "dimensions must be positive, got {width}x{height}"
            )));
        }
        if pixels.len() != width * height * Self::CHANNELS {
            return Err(PixelError::InvalidImage(format!(
                "{width}x{height} RGB image needs {} bytes, got {}",
                width * height * Self::CHANNELS,
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    /// Builds an image by evaluating `f(x, y)` for every pixel.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [u8; 3]) -> Self {
        assert!(width >= 1 && height >= 1, "image dimensions must be positive");
        let mut pixels = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                pixels.extend_from_slice(&f(x, y));
            }
        }
        Self { width, height, pixels }
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        Self::from_fn(width, height, |_, _| rgb)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub(crate) fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn mean_value(&self) -> f64 {
        self.pixels.iter().map(|&v| v as f64).sum::<f64>() / self.pixels.len() as f64
    }
}

/// Decodes PNG or baseline JPEG bytes into RGB. Grey sources are replicated
/// across channels and alpha is dropped.
pub fn decode_image(bytes: &[u8]) -> Result<Image, PixelError> {
    let format = image::guess_format(bytes).map_err(|_| PixelError::UnsupportedFormat)?;
    if !matches!(format, ImageFormat::Png | ImageFormat::Jpeg) {
        return Err(PixelError::UnsupportedFormat);
    }
    let decoded =
        image::load_from_memory_with_format(bytes, format).map_err(|e| PixelError::MalformedImage(e.to_string()))?;
    let rgb = decoded.to_rgb8();
    let (w, h) = rgb.dimensions();
    Image::new(w as usize, h as usize, rgb.into_raw())
}

pub fn read_image(path: &Path) -> Result<Image, PixelError> {
    let bytes = fs::read(path).map_err(|source| PixelError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_image(&bytes).map_err(|e| PixelError::at(path, e))
}

pub fn encode_png(img: &Image) -> Vec<u8> {
    let buf = RgbImage::from_raw(img.width as u32, img.height as u32, img.pixels.clone())
        .expect("image buffer length is an invariant of Image");
    let mut out = Cursor::new(Vec::new());
    buf.write_to(&mut out, ImageFormat::Png)
        .expect("PNG encoding into memory cannot fail");
    out.into_inner()
}

pub fn write_png(img: &Image, path: &Path) -> Result<(), PixelError> {
    fs::write(path, encode_png(img)).map_err(|source| PixelError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Bilinear resize using pixel-centre mapping
/// `src = (dst + 0.5) * in / out - 0.5`, clamped to the source extent.
/// Results are rounded half-up back to 8 bits.
pub fn resize_bilinear(img: &Image, out_w: usize, out_h: usize) -> Image {
    assert!(out_w >= 1 && out_h >= 1, "target dimensions must be positive");
    let xs = sample_positions(img.width, out_w);
    let ys = sample_positions(img.height, out_h);
    let mut pixels = Vec::with_capacity(out_w * out_h * 3);
    for &(y0, y1, wy) in &ys {
        for &(x0, x1, wx) in &xs {
            for c in 0..3 {
                let at = |x: usize, y: usize| img.pixels[(y * img.width + x) * 3 + c] as f64;
                let top = at(x0, y0) * (1.0 - wx) + at(x1, y0) * wx;
                let bottom = at(x0, y1) * (1.0 - wx) + at(x1, y1) * wx;
                let v = top * (1.0 - wy) + bottom * wy;
                pixels.push(round_half_up(v));
            }
        }
    }
    Image {
        width: out_w,
        height: out_h,
        pixels,
    }
}

/// For each output coordinate: (lower source index, upper source index, weight of upper).
fn sample_positions(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    let max = (in_len - 1) as f64;
    (0..out_len)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, max);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, s - lo as f64)
        })
        .collect()
}

pub(crate) fn round_half_up(v: f64) -> u8 {
    (v + 0.5).floor().clamp(0.0, 255.0) as u8
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationMode {
    /// `v / 255`
    #[default]
    Unit,
    /// `v / 255 - channel_mean`
    MeanSubtract,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct NormalizationSpec {
    pub mode: NormalizationMode,
    #[serde(default)]
    pub channel_means: [f32; 3],
}

impl NormalizationSpec {
    pub fn unit() -> Self {
        Self::default()
    }

    pub fn mean_subtract(channel_means: [f32; 3]) -> Self {
        Self {
            mode: NormalizationMode::MeanSubtract,
            channel_means,
        }
    }

    /// Per-channel means of the ImageNet training set, on the unit scale.
    pub fn imagenet() -> Self {
        Self::mean_subtract([0.485, 0.456, 0.406])
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.mode == NormalizationMode::MeanSubtract && self.channel_means.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(format!(
                "channel means must lie in [0, 1], got {:?}",
                self.channel_means
            ));
        }
        Ok(())
    }
}

/// Converts to a channel-major `3×H×W` tensor.
pub fn image_to_tensor(img: &Image, norm: &NormalizationSpec) -> Tensor {
    let plane = img.width * img.height;
    let mut data = vec![0.0f32; plane * 3];
    for (p, px) in img.pixels.chunks_exact(3).enumerate() {
        for c in 0..3 {
            let unit = px[c] as f32 / 255.0;
            data[c * plane + p] = match norm.mode {
                NormalizationMode::Unit => unit,
                NormalizationMode::MeanSubtract => unit - norm.channel_means[c],
            };
        }
    }
    Tensor::from_parts(vec![3, img.height, img.width], data)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub path: String,
    pub label: usize,
}

/// Class names plus (path, label) pairs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    #[serde(rename = "classes")]
    pub class_names: Vec<String>,
    pub samples: Vec<Sample>,
}

impl DatasetManifest {
    pub fn new(class_names: Vec<String>, samples: Vec<Sample>) -> Result<Self, PixelError> {
        let m = Self { class_names, samples };
        m.validate()?;
        Ok(m)
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn validate(&self) -> Result<(), PixelError> {
        if self.class_names.is_empty() {
            return Err(PixelError::ManifestInvalid("class list is empty".into()));
        }
        let k = self.class_names.len();
        let mut seen = HashSet::with_capacity(self.samples.len());
        for (i, s) in self.samples.iter().enumerate() {
            if s.label >= k {
                return Err(PixelError::ManifestInvalid(format!(
                    "sample {i} ({}) has label {} but only {k} classes exist",
                    s.path, s.label
                )));
            }
            if !seen.insert(s.path.as_str()) {
                return Err(PixelError::ManifestInvalid(format!("duplicate path {}", s.path)));
            }
        }
        Ok(())
    }

    /// Joins relative sample paths onto `base`.
    pub fn resolve_path(&self, base: &Path, sample: &Sample) -> PathBuf {
        let p = Path::new(&sample.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    }
}

pub fn parse_manifest(text: &str) -> Result<DatasetManifest, PixelError> {
    let m: DatasetManifest = serde_json::from_str(text).map_err(|e| PixelError::ManifestParse(e.to_string()))?;
    m.validate()?;
    Ok(m)
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest, PixelError> {
    let text = fs::read_to_string(path).map_err(|source| PixelError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_manifest(&text).map_err(|e| PixelError::at(path, e))
}

pub fn write_manifest(m: &DatasetManifest, path: &Path) -> Result<(), PixelError> {
    let text = serde_json::to_string_pretty(m).expect("manifest serialization is infallible");
    fs::write(path, text).map_err(|source| PixelError::Io {
        path: path.to_path_buf(),
        source,
    })
}
