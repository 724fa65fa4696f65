//! Procedural texture corpus for end-to-end runs without a real dataset.
//!
//! Each class pairs a two-colour palette with a pattern family (stripes,
//! checks, dots, rings or blotches). Orientation, frequency, phase and
//! brightness vary per image, and every pixel gets a little uniform noise.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::pixelio::{write_manifest, write_png, DatasetManifest, Image, PixelError, Sample};

pub const CLASS_COUNT: usize = 10;

const PALETTES: [([f64; 3], [f64; 3]); CLASS_COUNT] = [
    ([200.0, 40.0, 40.0], [250.0, 220.0, 200.0]),
    ([40.0, 150.0, 50.0], [20.0, 40.0, 20.0]),
    ([40.0, 60.0, 200.0], [230.0, 230.0, 120.0]),
    ([220.0, 160.0, 30.0], [90.0, 40.0, 10.0]),
    ([150.0, 60.0, 170.0], [240.0, 240.0, 240.0]),
    ([30.0, 180.0, 180.0], [120.0, 20.0, 60.0]),
    ([110.0, 110.0, 110.0], [250.0, 140.0, 40.0]),
    ([240.0, 120.0, 170.0], [30.0, 30.0, 90.0]),
    ([120.0, 80.0, 40.0], [200.0, 230.0, 160.0]),
    ([10.0, 10.0, 10.0], [90.0, 200.0, 250.0]),
];

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub images: Vec<Image>,
    /// True class of each image, class-major.
    pub labels: Vec<usize>,
    pub classes: Vec<String>,
}

pub fn class_names() -> Vec<String> {
    (0..CLASS_COUNT).map(|c| format!("texture{c}")).collect()
}

fn pattern(kind: usize, u: f64, v: f64, freq: f64, phase: f64, blobs: &[(f64, f64, f64)]) -> f64 {
    match kind {
        0 => 0.5 + 0.5 * (2.0 * PI * freq * u + phase).sin(),
        1 => {
            let s = (2.0 * PI * freq * u + phase).sin() * (2.0 * PI * freq * v + phase).sin();
            if s >= 0.0 {
                1.0
            } else {
                0.0
            }
        }
        2 => {
            let cell = |t: f64| {
                let x = t * freq + phase / (2.0 * PI);
                x - x.round()
            };
            let (a, b) = (cell(u), cell(v));
            if a * a + b * b < 0.09 {
                1.0
            } else {
                0.0
            }
        }
        3 => 0.5 + 0.5 * (2.0 * PI * freq * (u * u + v * v).sqrt() + phase).sin(),
        _ => blobs
            .iter()
            .map(|&(cx, cy, r)| (-((u - cx).powi(2) + (v - cy).powi(2)) / (r * r)).exp())
            .sum::<f64>()
            .min(1.0),
    }
}

/// One `size × size` texture of class `class`, fully determined by `rng`.
pub fn texture(class: usize, size: usize, rng: &mut impl Rng) -> Image {
    let (c1, c2) = PALETTES[class % CLASS_COUNT];
    let kind = class % 5;
    let theta = rng.gen_range(0.0..PI);
    let freq = rng.gen_range(2.5..4.5);
    let phase = rng.gen_range(0.0..2.0 * PI);
    let gain = rng.gen_range(0.85..1.15);
    let blobs: Vec<(f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(0.12..0.3),
            )
        })
        .collect();
    let (sin, cos) = theta.sin_cos();
    let mut noise = Vec::with_capacity(size * size * 3);
    for _ in 0..size * size * 3 {
        noise.push(rng.gen_range(-20.0..20.0));
    }
    Image::from_fn(size, size, |x, y| {
        let px = (x as f64 + 0.5) / size as f64 - 0.5;
        let py = (y as f64 + 0.5) / size as f64 - 0.5;
        let (u, v) = (px * cos + py * sin, -px * sin + py * cos);
        let t = pattern(kind, u, v, freq, phase, &blobs);
        let base = 3 * (y * size + x);
        let mut rgb = [0u8; 3];
        for ch in 0..3 {
            let value = (c1[ch] * (1.0 - t) + c2[ch] * t) * gain + noise[base + ch];
            rgb[ch] = value.round().clamp(0.0, 255.0) as u8;
        }
        rgb
    })
}

/// `per_class` textures for each of the ten classes, class-major.
pub fn generate_corpus(per_class: usize, size: usize, seed: u64) -> SynthCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(per_class * CLASS_COUNT);
    let mut labels = Vec::with_capacity(per_class * CLASS_COUNT);
    for class in 0..CLASS_COUNT {
        for _ in 0..per_class {
            images.push(texture(class, size, &mut rng));
            labels.push(class);
        }
    }
    SynthCorpus {
        images,
        labels,
        classes: class_names(),
    }
}

/// Relabels exactly `round(fraction · n)` rows, each to a uniformly chosen
/// different class.
pub fn apply_label_noise(labels: &[usize], n_classes: usize, fraction: f64, seed: u64) -> Vec<usize> {
    assert!(n_classes >= 2, "label noise needs at least two classes");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = ((labels.len() as f64 * fraction).round() as usize).min(labels.len());
    let mut out = labels.to_vec();
    for i in sample(&mut rng, labels.len(), count) {
        let shift = rng.gen_range(1..n_classes);
        out[i] = (labels[i] + shift) % n_classes;
    }
    out
}

/// Writes `img_NNNN.png` files plus `manifest.json` into `dir`.
pub fn write_corpus(
    images: &[Image],
    labels: &[usize],
    classes: &[String],
    dir: &Path,
) -> Result<DatasetManifest, PixelError> {
    std::fs::create_dir_all(dir).map_err(|source| PixelError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut samples = Vec::with_capacity(images.len());
    for (i, (img, &label)) in images.iter().zip(labels).enumerate() {
        let name = format!("img_{i:04}.png");
        write_png(img, &dir.join(&name))?;
        samples.push(Sample { path: name, label });
    }
    let manifest = DatasetManifest::new(classes.to_vec(), samples)?;
    write_manifest(&manifest, &dir.join("manifest.json"))?;
    Ok(manifest)
}
