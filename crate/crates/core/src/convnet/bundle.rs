//! Weight bundles: a validated layer sequence plus its named tensors, and the
//! FWB1 container they travel in.
//!
//! FWB1 layout (all integers little-endian, no padding):
//!
//! ```text
//! "FWB1" | u32 header_len | header JSON (UTF-8)
//! per tensor, in header order: u8 ndim | ndim × u32 dims | prod(dims) × f32
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ops::{conv2d_forward, flatten, maxpool2d_forward, relu};
use super::ConvError;
use crate::pixelio::NormalizationSpec;
use crate::tensor::Tensor;

pub const FWB_MAGIC: &[u8; 4] = b"FWB1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputSpec {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        weight: String,
        bias: String,
    },
    Relu,
    #[serde(rename = "maxpool2d")]
    MaxPool2d,
    Flatten,
}

impl LayerSpec {
    /// A `k×k` stride-1 "same" convolution.
    pub fn conv(out_channels: usize, kernel: usize, weight: impl Into<String>, bias: impl Into<String>) -> Self {
        LayerSpec::Conv2d {
            out_channels,
            kernel,
            stride: 1,
            pad: kernel.saturating_sub(1) / 2,
            weight: weight.into(),
            bias: bias.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightBundle {
    input: InputSpec,
    normalization: NormalizationSpec,
    layers: Vec<LayerSpec>,
    tensors: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    input: InputSpec,
    normalization: NormalizationSpec,
    layers: Vec<LayerSpec>,
    tensors: Vec<String>,
}

impl WeightBundle {
    /// Builds a bundle and type-checks the whole layer chain.
    pub fn new(
        input: InputSpec,
        normalization: NormalizationSpec,
        layers: Vec<LayerSpec>,
        tensors: Vec<(String, Tensor)>,
    ) -> Result<Self, ConvError> {
        let mut index = HashMap::with_capacity(tensors.len());
        for (i, (name, _)) in tensors.iter().enumerate() {
            if index.insert(name.clone(), i).is_some() {
                return Err(ConvError::BundleParse(format!("duplicate tensor name {name:?}")));
            }
        }
        normalization.validate().map_err(ConvError::BundleParse)?;
        let bundle = Self {
            input,
            normalization,
            layers,
            tensors,
            index,
        };
        bundle.shape_trace()?;
        Ok(bundle)
    }

    pub fn input(&self) -> InputSpec {
        self.input
    }

    pub fn normalization(&self) -> NormalizationSpec {
        self.normalization
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn tensors(&self) -> &[(String, Tensor)] {
        &self.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i].1)
    }

    /// Length of the feature vector `forward` produces.
    pub fn output_len(&self) -> usize {
        self.shape_trace()
            .expect("bundle was validated at construction")
            .last()
            .map(|s| s.iter().product())
            .unwrap_or(0)
    }

    /// Activation shape after every layer, propagated from the input spec.
    pub fn shape_trace(&self) -> Result<Vec<Vec<usize>>, ConvError> {
        let InputSpec { c, h, w } = self.input;
        if c == 0 || h == 0 || w == 0 {
            return Err(ConvError::BundleParse(format!(
                "input dims must be positive, got {c}×{h}×{w}"
            )));
        }
        let invalid = |layer: usize, msg: String| ConvError::BundleShapeInvalid { layer, msg };
        let flattens = self.layers.iter().filter(|l| **l == LayerSpec::Flatten).count();
        if flattens != 1 || self.layers.last() != Some(&LayerSpec::Flatten) {
            return Err(invalid(
                self.layers.len().saturating_sub(1),
                "bundle needs exactly one flatten, as the final layer".into(),
            ));
        }

        let mut shape = vec![c, h, w];
        let mut trace = Vec::with_capacity(self.layers.len());
        for (li, layer) in self.layers.iter().enumerate() {
            shape = match layer {
                LayerSpec::Conv2d {
                    out_channels,
                    kernel,
                    stride,
                    pad,
                    weight,
                    bias,
                } => {
                    if kernel % 2 == 0 || *stride != 1 || *pad != (kernel - 1) / 2 {
                        return Err(invalid(
                            li,
                            format!(
                                "only odd stride-1 same-padded kernels are supported \
                                 (kernel {kernel}, stride {stride}, pad {pad})"
                            ),
                        ));
                    }
                    let wt = self
                        .tensor(weight)
                        .ok_or_else(|| invalid(li, format!("missing weight tensor {weight:?}")))?;
                    let bt = self
                        .tensor(bias)
                        .ok_or_else(|| invalid(li, format!("missing bias tensor {bias:?}")))?;
                    let want = [*out_channels, shape[0], *kernel, *kernel];
                    if wt.shape() != want {
                        return Err(invalid(
                            li,
                            format!("weight {weight:?} has shape {:?}, expected {want:?}", wt.shape()),
                        ));
                    }
                    if bt.shape() != [*out_channels] {
                        return Err(invalid(
                            li,
                            format!("bias {bias:?} has shape {:?}, expected [{out_channels}]", bt.shape()),
                        ));
                    }
                    vec![*out_channels, shape[1], shape[2]]
                }
                LayerSpec::Relu => shape,
                LayerSpec::MaxPool2d => {
                    if shape.len() != 3 || shape[1] % 2 != 0 || shape[2] % 2 != 0 {
                        return Err(invalid(li, format!("cannot 2×2-pool activation {shape:?}")));
                    }
                    vec![shape[0], shape[1] / 2, shape[2] / 2]
                }
                LayerSpec::Flatten => vec![shape.iter().product()],
            };
            trace.push(shape.clone());
        }
        Ok(trace)
    }

    /// Runs every layer in order and returns the flattened feature vector.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor, ConvError> {
        self.forward_traced(x).map(|(out, _)| out)
    }

    /// Like [`forward`](Self::forward) but also reports the actual shape
    /// produced by every layer.
    pub fn forward_traced(&self, x: &Tensor) -> Result<(Tensor, Vec<Vec<usize>>), ConvError> {
        let InputSpec { c, h, w } = self.input;
        if x.shape() != [c, h, w] {
            return Err(ConvError::LayerShape {
                layer: 0,
                msg: format!("input has shape {:?}, bundle expects [{c}, {h}, {w}]", x.shape()),
            });
        }
        let mut act = x.clone();
        let mut shapes = Vec::with_capacity(self.layers.len());
        for (li, layer) in self.layers.iter().enumerate() {
            let at_layer = |e: ConvError| ConvError::LayerShape {
                layer: li,
                msg: e.to_string(),
            };
            act = match layer {
                LayerSpec::Conv2d {
                    stride,
                    pad,
                    weight,
                    bias,
                    ..
                } => {
                    let wt = self.tensor(weight).expect("validated");
                    let bt = self.tensor(bias).expect("validated");
                    conv2d_forward(&act, wt, bt, *stride, *pad).map_err(at_layer)?
                }
                LayerSpec::Relu => relu(&act),
                LayerSpec::MaxPool2d => maxpool2d_forward(&act).map_err(at_layer)?,
                LayerSpec::Flatten => flatten(&act),
            };
            shapes.push(act.shape().to_vec());
        }
        Ok((act, shapes))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            input: self.input,
            normalization: self.normalization,
            layers: self.layers.clone(),
            tensors: self.tensors.iter().map(|(n, _)| n.clone()).collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serialization is infallible");
        let payload: usize = self.tensors.iter().map(|(_, t)| 1 + 4 * t.rank() + 4 * t.len()).sum();
        let mut out = Vec::with_capacity(8 + json.len() + payload);
        out.extend_from_slice(FWB_MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ConvError> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != FWB_MAGIC {
            return Err(ConvError::BundleParse("bad magic, expected FWB1".into()));
        }
        let header_len = r.u32()? as usize;
        let header: Header =
            serde_json::from_slice(r.take(header_len)?).map_err(|e| ConvError::BundleParse(format!("header: {e}")))?;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for name in header.tensors {
            let ndim = r.take(1)?[0] as usize;
            let dims = (0..ndim)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let count = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| ConvError::BundleParse(format!("tensor {name:?} is too large")))?;
            let raw = r.take(
                count
                    .checked_mul(4)
                    .ok_or_else(|| ConvError::BundleParse(format!("tensor {name:?} is too large")))?,
            )?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            let t = Tensor::new(dims, data).map_err(|e| ConvError::BundleParse(format!("tensor {name:?}: {e}")))?;
            tensors.push((name, t));
        }
        if !r.is_empty() {
            return Err(ConvError::BundleParse(format!(
                "{} trailing bytes after last tensor",
                r.remaining()
            )));
        }
        Self::new(header.input, header.normalization, header.layers, tensors)
    }
}

pub fn load_weight_bundle(path: &Path) -> Result<WeightBundle, ConvError> {
    let bytes = fs::read(path).map_err(|e| ConvError::Io(format!("{}: {e}", path.display())))?;
    WeightBundle::from_bytes(&bytes)
}

pub fn save_weight_bundle(bundle: &WeightBundle, path: &Path) -> Result<(), ConvError> {
    fs::write(path, bundle.to_bytes()).map_err(|e| ConvError::Io(format!("{}: {e}", path.display())))
}

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], ConvError> {
        if self.remaining() < n {
            return Err(ConvError::BundleParse(format!(
                "truncated: wanted {n} bytes at offset {}, {} left",
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32, ConvError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.remaining() == 0
    }
}

/// Channel widths of the VGG16 convolutional blocks.
pub const VGG16_BLOCKS: [&[usize]; 5] = [
    &[64, 64],
    &[128, 128],
    &[256, 256, 256],
    &[512, 512, 512],
    &[512, 512, 512],
];

/// Stacks `conv 3×3 → relu` per entry, with a max-pool closing each block and
/// a final flatten. Weights are He-uniform from a seeded stream, biases zero.
pub fn conv_stack(
    input: InputSpec,
    normalization: NormalizationSpec,
    blocks: &[&[usize]],
    seed: u64,
) -> Result<WeightBundle, ConvError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    let mut tensors = Vec::new();
    let mut in_ch = input.c;
    for (b, widths) in blocks.iter().enumerate() {
        for (i, &out_ch) in widths.iter().enumerate() {
            let name = format!("block{}_conv{}", b + 1, i + 1);
            let fan_in = (in_ch * 9) as f32;
            let limit = (6.0 / fan_in).sqrt();
            let w: Vec<f32> = (0..out_ch * in_ch * 9).map(|_| rng.gen_range(-limit..limit)).collect();
            tensors.push((
                format!("{name}.weight"),
                Tensor::from_parts(vec![out_ch, in_ch, 3, 3], w),
            ));
            tensors.push((format!("{name}.bias"), Tensor::zeros(vec![out_ch])));
            layers.push(LayerSpec::conv(
                out_ch,
                3,
                format!("{name}.weight"),
                format!("{name}.bias"),
            ));
            layers.push(LayerSpec::Relu);
            in_ch = out_ch;
        }
        layers.push(LayerSpec::MaxPool2d);
    }
    layers.push(LayerSpec::Flatten);
    WeightBundle::new(input, normalization, layers, tensors)
}

/// VGG16 convolutional trunk at 3×64×64 input (2048 features), randomly
/// initialised. Real weights are loaded from an FWB1 file instead.
pub fn vgg16_64(seed: u64) -> WeightBundle {
    conv_stack(
        InputSpec { c: 3, h: 64, w: 64 },
        NormalizationSpec::unit(),
        &VGG16_BLOCKS,
        seed,
    )
    .expect("VGG16 preset type-checks")
}

/// Two 8-channel conv blocks at 3×16×16 input, producing 128 features.
pub fn tiny(seed: u64) -> WeightBundle {
    conv_stack(
        InputSpec { c: 3, h: 16, w: 16 },
        NormalizationSpec::unit(),
        &[&[8], &[8]],
        seed,
    )
    .expect("tiny preset type-checks")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_relu_bundle() -> WeightBundle {
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        WeightBundle::new(
            InputSpec { c: 1, h: 2, w: 2 },
            NormalizationSpec::unit(),
            vec![LayerSpec::conv(1, 3, "w", "b"), LayerSpec::Relu, LayerSpec::Flatten],
            vec![
                ("w".into(), Tensor::new(vec![1, 1, 3, 3], k).unwrap()),
                ("b".into(), Tensor::zeros(vec![1])),
            ],
        )
        .unwrap()
    }

    #[test]
    fn flatten_only_bundle() {
        let b = WeightBundle::new(
            InputSpec { c: 3, h: 2, w: 2 },
            NormalizationSpec::unit(),
            vec![LayerSpec::Flatten],
            vec![],
        )
        .unwrap();
        let x = Tensor::new(vec![3, 2, 2], (0..12).map(|v| v as f32).collect()).unwrap();
        let y = b.forward(&x).unwrap();
        assert_eq!(y.shape(), &[12]);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn relu_clamps_negative() {
        let b = identity_relu_bundle();
        let x = Tensor::new(vec![1, 2, 2], vec![-1.0, 2.0, 0.5, -3.0]).unwrap();
        assert_eq!(b.forward(&x).unwrap().data(), &[0.0, 2.0, 0.5, 0.0]);
    }

    #[test]
    fn vgg_shape_chain() {
        let b = vgg16_64(0);
        assert_eq!(b.output_len(), 2048);
        let spatial: Vec<usize> = b
            .shape_trace()
            .unwrap()
            .iter()
            .zip(b.layers())
            .filter(|(_, l)| **l == LayerSpec::MaxPool2d)
            .map(|(s, _)| s[1])
            .collect();
        assert_eq!(spatial, vec![32, 16, 8, 4, 2]);
        let convs = b
            .layers()
            .iter()
            .filter(|l| matches!(l, LayerSpec::Conv2d { .. }))
            .count();
        assert_eq!(convs, 13);
        assert_eq!(b.tensor("block1_conv1.weight").unwrap().shape(), &[64, 3, 3, 3]);
    }

    #[test]
    fn tiny_has_128_features() {
        let b = tiny(3);
        assert_eq!(b.output_len(), 128);
        let x = Tensor::zeros(vec![3, 16, 16]);
        assert_eq!(b.forward(&x).unwrap().len(), 128);
    }

    #[test]
    fn forward_is_deterministic() {
        let b = tiny(11);
        let x = Tensor::new(
            vec![3, 16, 16],
            (0..768).map(|i| ((i * 37) % 255) as f32 / 255.0).collect(),
        )
        .unwrap();
        let a = b.forward(&x).unwrap();
        let c = b.forward(&x).unwrap();
        assert_eq!(
            a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            c.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn wrong_input_shape_reports_layer() {
        let b = tiny(0);
        let err = b.forward(&Tensor::zeros(vec![3, 8, 8])).unwrap_err();
        assert!(matches!(err, ConvError::LayerShape { layer: 0, .. }));
    }

    #[test]
    fn bytes_round_trip() {
        let b = tiny(5);
        let back = WeightBundle::from_bytes(&b.to_bytes()).unwrap();
        assert_eq!(back, b);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.fwb");
        save_weight_bundle(&b, &path).unwrap();
        assert_eq!(load_weight_bundle(&path).unwrap(), b);
    }

    #[test]
    fn wire_layout_is_exact() {
        let b = WeightBundle::new(
            InputSpec { c: 1, h: 2, w: 2 },
            NormalizationSpec::unit(),
            vec![LayerSpec::conv(1, 1, "w", "b"), LayerSpec::Flatten],
            vec![
                ("w".into(), Tensor::new(vec![1, 1, 1, 1], vec![2.5]).unwrap()),
                ("b".into(), Tensor::new(vec![1], vec![-1.0]).unwrap()),
            ],
        )
        .unwrap();
        let bytes = b.to_bytes();
        assert_eq!(&bytes[..4], b"FWB1");
        let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[8..8 + hlen]).unwrap();
        assert_eq!(header["tensors"], serde_json::json!(["w", "b"]));
        assert_eq!(header["layers"][0]["kind"], "conv2d");
        let mut tail = Vec::new();
        tail.push(4u8);
        for d in [1u32, 1, 1, 1] {
            tail.extend_from_slice(&d.to_le_bytes());
        }
        tail.extend_from_slice(&2.5f32.to_le_bytes());
        tail.push(1u8);
        tail.extend_from_slice(&1u32.to_le_bytes());
        tail.extend_from_slice(&(-1.0f32).to_le_bytes());
        assert_eq!(&bytes[8 + hlen..], &tail[..]);
    }

    #[test]
    fn truncated_file_is_parse_error() {
        let bytes = tiny(1).to_bytes();
        for cut in [2, 6, 20, bytes.len() - 1] {
            assert!(matches!(
                WeightBundle::from_bytes(&bytes[..cut]),
                Err(ConvError::BundleParse(_))
            ));
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(
            WeightBundle::from_bytes(&extra),
            Err(ConvError::BundleParse(_))
        ));
    }

    #[test]
    fn four_channel_weight_fails_at_layer_zero() {
        let err = WeightBundle::new(
            InputSpec { c: 3, h: 4, w: 4 },
            NormalizationSpec::unit(),
            vec![LayerSpec::conv(2, 3, "w", "b"), LayerSpec::Flatten],
            vec![
                ("w".into(), Tensor::zeros(vec![2, 4, 3, 3])),
                ("b".into(), Tensor::zeros(vec![2])),
            ],
        )
        .unwrap_err();
        assert!(matches!(err, ConvError::BundleShapeInvalid { layer: 0, .. }));
        // Also caught when arriving through the file format.
        let ok = tiny(0);
        let mut layers = ok.layers().to_vec();
        layers.insert(0, LayerSpec::conv(8, 3, "block1_conv1.weight", "block1_conv1.bias"));
        let err = WeightBundle::new(ok.input(), ok.normalization(), layers, ok.tensors().to_vec()).unwrap_err();
        assert!(matches!(err, ConvError::BundleShapeInvalid { layer: 1, .. }));
    }

    #[test]
    fn chain_rules() {
        let base = |layers| {
            WeightBundle::new(
                InputSpec { c: 1, h: 3, w: 3 },
                NormalizationSpec::unit(),
                layers,
                vec![],
            )
        };
        assert!(matches!(
            base(vec![LayerSpec::Relu]),
            Err(ConvError::BundleShapeInvalid { .. })
        ));
        assert!(matches!(
            base(vec![LayerSpec::Flatten, LayerSpec::Flatten]),
            Err(ConvError::BundleShapeInvalid { .. })
        ));
        assert!(matches!(
            base(vec![LayerSpec::MaxPool2d, LayerSpec::Flatten]),
            Err(ConvError::BundleShapeInvalid { layer: 0, .. })
        ));
        assert!(matches!(
            base(vec![LayerSpec::conv(1, 3, "missing", "b"), LayerSpec::Flatten]),
            Err(ConvError::BundleShapeInvalid { layer: 0, .. })
        ));
        let even = WeightBundle::new(
            InputSpec { c: 1, h: 3, w: 3 },
            NormalizationSpec::unit(),
            vec![LayerSpec::conv(1, 2, "w", "b"), LayerSpec::Flatten],
            vec![
                ("w".into(), Tensor::zeros(vec![1, 1, 2, 2])),
                ("b".into(), Tensor::zeros(vec![1])),
            ],
        );
        assert!(matches!(even, Err(ConvError::BundleShapeInvalid { layer: 0, .. })));
    }
}
