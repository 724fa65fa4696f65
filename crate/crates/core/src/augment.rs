//! Deterministic 32-fold augmentation: the eight symmetries of the square
//! crossed with four post-operations (none, zoom in, zoom out, salt-and-pepper).

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::pixelio::{resize_bilinear, Image};

pub const VARIANTS_PER_IMAGE: usize = 32;
pub const DEFAULT_SCALE_FRACTION: f64 = 0.10;
pub const DEFAULT_NOISE_FRACTION: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dihedral {
    Identity,
    /// Clockwise quarter turn.
    Rot90,
    Rot180,
    Rot270,
    /// Mirror left-right.
    FlipH,
    /// Mirror top-bottom.
    FlipV,
    /// Reflect across the main diagonal.
    Transpose,
    /// Reflect across the anti-diagonal.
    AntiTranspose,
}

impl Dihedral {
    pub const ALL: [Dihedral; 8] = [
        Dihedral::Identity,
        Dihedral::Rot90,
        Dihedral::Rot180,
        Dihedral::Rot270,
        Dihedral::FlipH,
        Dihedral::FlipV,
        Dihedral::Transpose,
        Dihedral::AntiTranspose,
    ];

    pub fn swaps_axes(self) -> bool {
        matches!(
            self,
            Dihedral::Rot90 | Dihedral::Rot270 | Dihedral::Transpose | Dihedral::AntiTranspose
        )
    }

    pub fn apply(self, img: &Image) -> Image {
        let (w, h) = (img.width(), img.height());
        let (ow, oh) = if self.swaps_axes() { (h, w) } else { (w, h) };
        // Each arm maps an output coordinate back to its source pixel.
        Image::from_fn(ow, oh, |x, y| {
            let (sx, sy) = match self {
                Dihedral::Identity => (x, y),
                Dihedral::Rot90 => (y, h - 1 - x),
                Dihedral::Rot180 => (w - 1 - x, h - 1 - y),
                Dihedral::Rot270 => (w - 1 - y, x),
                Dihedral::FlipH => (w - 1 - x, y),
                Dihedral::FlipV => (x, h - 1 - y),
                Dihedral::Transpose => (y, x),
                Dihedral::AntiTranspose => (w - 1 - y, h - 1 - x),
            };
            img.pixel(sx, sy)
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum PostOp {
    None,
    /// Upscale by `1/(1-f)` and centre-crop back ("zoom in").
    ScaleOut {
        fraction: f64,
    },
    /// Downscale by `1-f` and centre-pad with replicated edges ("zoom out").
    ScaleIn {
        fraction: f64,
    },
    /// Force exactly `floor(p·W·H)` distinct pixels to black or white.
    SaltPepper {
        fraction: f64,
    },
}

impl PostOp {
    pub fn defaults() -> [PostOp; 4] {
        [
            PostOp::None,
            PostOp::ScaleOut {
                fraction: DEFAULT_SCALE_FRACTION,
            },
            PostOp::ScaleIn {
                fraction: DEFAULT_SCALE_FRACTION,
            },
            PostOp::SaltPepper {
                fraction: DEFAULT_NOISE_FRACTION,
            },
        ]
    }

    fn is_valid(&self) -> bool {
        match *self {
            PostOp::None => true,
            PostOp::ScaleOut { fraction } | PostOp::ScaleIn { fraction } => fraction > 0.0 && fraction < 0.5,
            PostOp::SaltPepper { fraction } => (0.0..=1.0).contains(&fraction),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    pub dihedral: Dihedral,
    pub post: PostOp,
}

impl TransformSpec {
    pub const IDENTITY: TransformSpec = TransformSpec {
        dihedral: Dihedral::Identity,
        post: PostOp::None,
    };
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PlanError {
    #[error("plan must hold exactly {VARIANTS_PER_IMAGE} transforms, got {0}")]
    WrongLength(usize),
    #[error("plan entry 0 must be the identity transform")]
    MissingIdentity,
    #[error("plan entries {0} and {1} are identical")]
    Duplicate(usize, usize),
    #[error("plan entry {0} has an out-of-range parameter")]
    BadParameter(usize),
}

/// The ordered list of 32 transforms applied to every image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPlan {
    specs: Vec<TransformSpec>,
}

impl Default for AugmentationPlan {
    /// Dihedral-major order: index `4·d + p` pairs `Dihedral::ALL[d]` with
    /// the p-th default post-op.
    fn default() -> Self {
        let specs = Dihedral::ALL
            .iter()
            .flat_map(|&dihedral| {
                PostOp::defaults()
                    .into_iter()
                    .map(move |post| TransformSpec { dihedral, post })
            })
            .collect();
        Self { specs }
    }
}

impl AugmentationPlan {
    pub fn new(specs: Vec<TransformSpec>) -> Result<Self, PlanError> {
        if specs.len() != VARIANTS_PER_IMAGE {
            return Err(PlanError::WrongLength(specs.len()));
        }
        if specs[0] != TransformSpec::IDENTITY {
            return Err(PlanError::MissingIdentity);
        }
        for (i, s) in specs.iter().enumerate() {
            if !s.post.is_valid() {
                return Err(PlanError::BadParameter(i));
            }
            if let Some(j) = specs[..i].iter().position(|t| t == s) {
                return Err(PlanError::Duplicate(j, i));
            }
        }
        Ok(Self { specs })
    }

    pub fn specs(&self) -> &[TransformSpec] {
        &self.specs
    }
}

/// Dihedral first, then the post-op. `seed` only feeds salt-and-pepper noise.
pub fn apply_transform(img: &Image, spec: &TransformSpec, seed: u64) -> Image {
    let oriented = spec.dihedral.apply(img);
    match spec.post {
        PostOp::None => oriented,
        PostOp::ScaleOut { fraction } => zoom_in(&oriented, fraction),
        PostOp::ScaleIn { fraction } => zoom_out(&oriented, fraction),
        PostOp::SaltPepper { fraction } => salt_pepper(&oriented, fraction, seed),
    }
}

fn zoom_in(img: &Image, fraction: f64) -> Image {
    let (w, h) = (img.width(), img.height());
    let bw = ((w as f64 / (1.0 - fraction)).round() as usize).max(w);
    let bh = ((h as f64 / (1.0 - fraction)).round() as usize).max(h);
    let big = resize_bilinear(img, bw, bh);
    let (ox, oy) = ((bw - w) / 2, (bh - h) / 2);
    Image::from_fn(w, h, |x, y| big.pixel(x + ox, y + oy))
}

fn zoom_out(img: &Image, fraction: f64) -> Image {
    let (w, h) = (img.width(), img.height());
    let sw = ((w as f64 * (1.0 - fraction)).round() as usize).clamp(1, w);
    let sh = ((h as f64 * (1.0 - fraction)).round() as usize).clamp(1, h);
    let small = resize_bilinear(img, sw, sh);
    let (ox, oy) = ((w - sw) / 2, (h - sh) / 2);
    Image::from_fn(w, h, |x, y| {
        let sx = x.saturating_sub(ox).min(sw - 1);
        let sy = y.saturating_sub(oy).min(sh - 1);
        small.pixel(sx, sy)
    })
}

pub fn noise_pixel_count(width: usize, height: usize, fraction: f64) -> usize {
    (fraction * (width * height) as f64).floor() as usize
}

fn salt_pepper(img: &Image, fraction: f64, seed: u64) -> Image {
    let (w, h) = (img.width(), img.height());
    let count = noise_pixel_count(w, h, fraction);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = img.clone();
    for pos in index::sample(&mut rng, w * h, count).into_iter() {
        let rgb = if rng.gen::<bool>() { [255; 3] } else { [0; 3] };
        out.set_pixel(pos % w, pos / w, rgb);
    }
    out
}

/// Variant `i` is `apply_transform(img, plan[i], base_seed ^ i)`.
pub fn generate_variants(img: &Image, plan: &AugmentationPlan, base_seed: u64) -> Vec<Image> {
    plan.specs
        .iter()
        .enumerate()
        .map(|(i, spec)| apply_transform(img, spec, base_seed ^ i as u64))
        .collect()
}

/// Augments a batch in parallel; output `[i][j]` is variant `j` of image `i`.
pub fn generate_batch(images: &[Image], plan: &AugmentationPlan, base_seed: u64) -> Vec<Vec<Image>> {
    images
        .par_iter()
        .map(|img| generate_variants(img, plan, base_seed))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn abcd() -> Image {
        Image::from_fn(2, 2, |x, y| [(1 + x + 2 * y) as u8; 3])
    }

    fn channel0(img: &Image) -> Vec<u8> {
        img.pixels().chunks(3).map(|p| p[0]).collect()
    }

    /// Mid-grey gradient that never touches 0 or 255, so any noise pixel is a visible change.
    fn textured(w: usize, h: usize) -> Image {
        Image::from_fn(w, h, |x, y| {
            [
                (20 + (x * 7 + y * 3) % 200) as u8,
                (30 + (x * y) % 190) as u8,
                (40 + (x + 5 * y) % 180) as u8,
            ]
        })
    }

    #[test]
    fn rot90_is_clockwise() {
        // [[a,b],[c,d]] -> [[c,a],[d,b]] with a..d = 1..4
        assert_eq!(channel0(&Dihedral::Rot90.apply(&abcd())), vec![3, 1, 4, 2]);
    }

    #[test]
    fn remaining_elements_on_two_by_two() {
        let img = abcd();
        assert_eq!(channel0(&Dihedral::Rot180.apply(&img)), vec![4, 3, 2, 1]);
        assert_eq!(channel0(&Dihedral::Rot270.apply(&img)), vec![2, 4, 1, 3]);
        assert_eq!(channel0(&Dihedral::FlipH.apply(&img)), vec![2, 1, 4, 3]);
        assert_eq!(channel0(&Dihedral::FlipV.apply(&img)), vec![3, 4, 1, 2]);
        assert_eq!(channel0(&Dihedral::Transpose.apply(&img)), vec![1, 3, 2, 4]);
        assert_eq!(channel0(&Dihedral::AntiTranspose.apply(&img)), vec![4, 2, 3, 1]);
    }

    #[test]
    fn default_plan_shape() {
        let plan = AugmentationPlan::default();
        assert_eq!(plan.specs().len(), 32);
        assert_eq!(plan.specs()[0], TransformSpec::IDENTITY);
        assert!(AugmentationPlan::new(plan.specs().to_vec()).is_ok());
    }

    #[test]
    fn plan_validation() {
        let mut specs = AugmentationPlan::default().specs().to_vec();
        assert_eq!(
            AugmentationPlan::new(specs[..31].to_vec()),
            Err(PlanError::WrongLength(31))
        );
        specs.swap(0, 1);
        assert_eq!(AugmentationPlan::new(specs.clone()), Err(PlanError::MissingIdentity));
        specs.swap(0, 1);
        specs[5] = specs[4];
        assert_eq!(AugmentationPlan::new(specs.clone()), Err(PlanError::Duplicate(4, 5)));
        let mut specs = AugmentationPlan::default().specs().to_vec();
        specs[1].post = PostOp::ScaleOut { fraction: 0.7 };
        assert_eq!(AugmentationPlan::new(specs), Err(PlanError::BadParameter(1)));
    }

    #[test]
    fn zero_noise_is_identity() {
        let img = textured(9, 7);
        let spec = TransformSpec {
            dihedral: Dihedral::Identity,
            post: PostOp::SaltPepper { fraction: 0.0 },
        };
        assert_eq!(apply_transform(&img, &spec, 42), img);
    }

    #[test]
    fn noise_changes_exactly_81_of_4096() {
        let img = textured(64, 64);
        let spec = TransformSpec {
            dihedral: Dihedral::Identity,
            post: PostOp::SaltPepper { fraction: 0.02 },
        };
        let out = apply_transform(&img, &spec, 7);
        let changed: Vec<[u8; 3]> = (0..64 * 64)
            .filter(|&p| img.pixel(p % 64, p / 64) != out.pixel(p % 64, p / 64))
            .map(|p| out.pixel(p % 64, p / 64))
            .collect();
        assert_eq!(changed.len(), 81);
        assert!(changed.iter().all(|&c| c == [0; 3] || c == [255; 3]));
        assert!(changed.contains(&[0; 3]) && changed.contains(&[255; 3]));
    }

    #[test]
    fn variants_follow_plan() {
        let img = textured(12, 10);
        let plan = AugmentationPlan::default();
        let variants = generate_variants(&img, &plan, 99);
        assert_eq!(variants.len(), 32);
        assert_eq!(variants[0], img);
        for (i, v) in variants.iter().enumerate() {
            assert_eq!(*v, apply_transform(&img, &plan.specs()[i], 99 ^ i as u64));
            let swapped = plan.specs()[i].dihedral.swaps_axes();
            let dims = if swapped { (10, 12) } else { (12, 10) };
            assert_eq!((v.width(), v.height()), dims);
        }
    }

    #[test]
    fn batch_matches_sequential() {
        let imgs: Vec<Image> = (0..4).map(|i| textured(8 + i, 6)).collect();
        let plan = AugmentationPlan::default();
        let batch = generate_batch(&imgs, &plan, 5);
        for (img, vs) in imgs.iter().zip(&batch) {
            assert_eq!(*vs, generate_variants(img, &plan, 5));
        }
    }

    #[test]
    fn scale_ops_keep_dims_and_mean() {
        let img = Image::from_fn(64, 48, |x, y| {
            let v = 128.0 + 60.0 * ((x as f64 / 9.0).sin() * (y as f64 / 7.0).cos());
            [v as u8, (v * 0.8) as u8, (255.0 - v) as u8]
        });
        for post in [PostOp::ScaleOut { fraction: 0.1 }, PostOp::ScaleIn { fraction: 0.1 }] {
            let out = apply_transform(
                &img,
                &TransformSpec {
                    dihedral: Dihedral::Identity,
                    post,
                },
                0,
            );
            assert_eq!((out.width(), out.height()), (64, 48));
            assert!((out.mean_value() - img.mean_value()).abs() <= 10.0);
            assert_ne!(out, img);
        }
    }

    #[test]
    fn scale_in_pads_with_edges_not_black() {
        let img = Image::filled(20, 20, [200, 100, 50]);
        let spec = TransformSpec {
            dihedral: Dihedral::Identity,
            post: PostOp::ScaleIn { fraction: 0.1 },
        };
        assert_eq!(apply_transform(&img, &spec, 0), img);
    }

    fn arb_image() -> impl Strategy<Value = Image> {
        (1usize..10, 1usize..10).prop_flat_map(|(w, h)| {
            proptest::collection::vec(any::<u8>(), w * h * 3).prop_map(move |px| Image::new(w, h, px).unwrap())
        })
    }

    proptest! {
        #[test]
        fn dihedral_group_laws(img in arb_image()) {
            let r = |i: &Image| Dihedral::Rot90.apply(i);
            prop_assert_eq!(&r(&r(&r(&r(&img)))), &img);
            let fh = Dihedral::FlipH.apply(&img);
            let fv = Dihedral::FlipV.apply(&img);
            prop_assert_eq!(&Dihedral::FlipH.apply(&fh), &img);
            prop_assert_eq!(&Dihedral::FlipV.apply(&fv), &img);
            prop_assert_eq!(&Dihedral::FlipH.apply(&fv), &Dihedral::Rot180.apply(&img));
            let t = Dihedral::Transpose.apply(&img);
            prop_assert_eq!(&Dihedral::Transpose.apply(&t), &img);
            let a = Dihedral::AntiTranspose.apply(&img);
            prop_assert_eq!(&Dihedral::AntiTranspose.apply(&a), &img);
        }

        #[test]
        fn dimension_law(img in arb_image()) {
            for d in Dihedral::ALL {
                let out = d.apply(&img);
                let dims = if d.swaps_axes() { (img.height(), img.width()) } else { (img.width(), img.height()) };
                prop_assert_eq!((out.width(), out.height()), dims);
            }
        }

        #[test]
        fn noise_count_and_colors(w in 1usize..30, h in 1usize..30, p in 0.0f64..=1.0, seed in any::<u64>()) {
            let img = textured(w, h);
            let spec = TransformSpec { dihedral: Dihedral::Identity, post: PostOp::SaltPepper { fraction: p } };
            let out = apply_transform(&img, &spec, seed);
            let mut changed = 0;
            for y in 0..h { for x in 0..w {
                let (a, b) = (img.pixel(x, y), out.pixel(x, y));
                if a != b {
                    changed += 1;
                    prop_assert!(b == [0; 3] || b == [255; 3]);
                }
            }}
            prop_assert_eq!(changed, noise_pixel_count(w, h, p));
            prop_assert_eq!(apply_transform(&img, &spec, seed), out);
        }

        #[test]
        fn post_ops_preserve_dims(img in arb_image(), d in 0usize..8, p in 0usize..4) {
            let spec = TransformSpec { dihedral: Dihedral::ALL[d], post: PostOp::defaults()[p] };
            let out = apply_transform(&img, &spec, 3);
            let oriented = Dihedral::ALL[d].apply(&img);
            prop_assert_eq!((out.width(), out.height()), (oriented.width(), oriented.height()));
        }
    }
}
