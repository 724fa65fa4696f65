//! FMD1 model files.
//!
//! Layout: `"FMD1"`, `u32` LE header length, a UTF-8 JSON header, then the
//! `f64` LE parameter blocks listed in `header.blocks`, in that order.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::gbdt::{GbdtModel, GbdtParams, Node, RegressionTree};
use super::mlp::{MlpModel, MlpParams, OutputMode};
use super::svm::{BinaryMachine, SvmModel, SvmParams};
use super::{LearnError, Standardizer};

pub const FMD_MAGIC: &[u8; 4] = b"FMD1";

#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum Model {
    Svm(SvmModel),
    Gbdt(GbdtModel),
    Mlp(MlpModel),
}

impl Model {
    pub fn kind(&self) -> &'static str {
        match self {
            Model::Svm(_) => "svm",
            Model::Gbdt(_) => "gbdt",
            Model::Mlp(_) => "mlp",
        }
    }

    pub fn n_features(&self) -> usize {
        match self {
            Model::Svm(m) => m.d,
            Model::Gbdt(m) => m.d,
            Model::Mlp(m) => m.n_features,
        }
    }

    pub fn n_classes(&self) -> usize {
        match self {
            Model::Svm(m) => m.n_classes,
            Model::Gbdt(m) => m.n_classes,
            Model::Mlp(m) => m.n_classes,
        }
    }

    pub fn predict(&self, rows: &[Vec<f64>]) -> Result<Vec<usize>, LearnError> {
        match self {
            Model::Svm(m) => m.predict(rows),
            Model::Gbdt(m) => m.predict(rows),
            Model::Mlp(m) => m.predict(rows),
        }
    }

    /// Encodes the model alone, without input standardization.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.encode(None)
    }

    /// Decodes a model file, discarding any stored input standardization.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, LearnError> {
        SavedModel::from_bytes(bytes).map(|s| s.model)
    }

    fn encode(&self, standardizer: Option<&Standardizer>) -> Vec<u8> {
        let mut blocks: Vec<(&str, Vec<f64>)> = Vec::new();
        let (hyper, shapes, seed, extra) = match self {
            Model::Svm(m) => {
                let n_sv = m.support_vectors.len();
                blocks.push(("support_vectors", m.support_vectors.concat()));
                blocks.push(("coef", m.machines.iter().flat_map(|mc| mc.coef.clone()).collect()));
                blocks.push(("bias", m.machines.iter().map(|mc| mc.bias).collect()));
                let extra = json!({
                    "iterations": m.machines.iter().map(|mc| mc.iterations).collect::<Vec<_>>(),
                    "converged": m.machines.iter().map(|mc| mc.converged).collect::<Vec<_>>(),
                });
                let shapes = shape_map([
                    ("features", vec![m.d]),
                    ("classes", vec![m.n_classes]),
                    ("support_vectors", vec![n_sv, m.d]),
                ]);
                (serde_json::to_value(m.params), shapes, None, extra)
            }
            Model::Gbdt(m) => {
                let mut counts = Vec::new();
                let mut nodes = Vec::new();
                for tree in m.rounds.iter().flatten() {
                    counts.push(tree.nodes.len());
                    for node in &tree.nodes {
                        nodes.extend_from_slice(&encode_node(node));
                    }
                }
                blocks.push(("base_score", m.base_score.clone()));
                blocks.push(("nodes", nodes));
                blocks.push(("loss_trace", m.loss_trace.clone()));
                let shapes = shape_map([
                    ("features", vec![m.d]),
                    ("classes", vec![m.n_classes]),
                    ("rounds", vec![m.rounds.len()]),
                    ("tree_nodes", counts),
                ]);
                (serde_json::to_value(m.params), shapes, Some(m.params.seed), Value::Null)
            }
            Model::Mlp(m) => {
                blocks.push(("w1", m.w1.iter().copied().collect()));
                blocks.push(("b1", m.b1.to_vec()));
                blocks.push(("w2", m.w2.iter().copied().collect()));
                blocks.push(("b2", m.b2.to_vec()));
                blocks.push(("w3", m.w3.iter().copied().collect()));
                blocks.push(("b3", m.b3.to_vec()));
                blocks.push(("loss_trace", m.loss_trace.clone()));
                let shapes = shape_map([
                    ("features", vec![m.n_features]),
                    ("classes", vec![m.n_classes]),
                    ("w1", m.w1.shape().to_vec()),
                    ("w2", m.w2.shape().to_vec()),
                    ("w3", m.w3.shape().to_vec()),
                ]);
                (serde_json::to_value(m.params), shapes, Some(m.params.seed), Value::Null)
            }
        };
        if let Some(st) = standardizer {
            blocks.push(("input_mean", st.mean.clone()));
            blocks.push(("input_scale", st.scale.clone()));
        }
        let header = Header {
            kind: self.kind().to_string(),
            hyperparameters: hyper.expect("parameter structs serialize"),
            shapes,
            seed,
            extra,
            blocks: blocks
                .iter()
                .map(|(name, data)| BlockSpec {
                    name: name.to_string(),
                    dtype: "f64".into(),
                    len: data.len(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(8 + header.len() + blocks.iter().map(|b| b.1.len() * 8).sum::<usize>());
        out.extend_from_slice(FMD_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, data) in &blocks {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }
}

/// A trained model plus the column standardization its inputs need.
#[derive(Debug, Clone, PartialEq)]
pub struct SavedModel {
    pub model: Model,
    pub standardizer: Option<Standardizer>,
}

impl SavedModel {
    pub fn new(model: Model, standardizer: Option<Standardizer>) -> Self {
        Self { model, standardizer }
    }

    /// Standardizes `rows` (when a standardizer is stored) and predicts.
    pub fn predict(&self, rows: &[Vec<f64>]) -> Result<Vec<usize>, LearnError> {
        match &self.standardizer {
            Some(st) => {
                let d = self.model.n_features();
                if let Some(r) = rows.iter().find(|r| r.len() != d) {
                    return Err(LearnError::DimensionMismatch {
                        expected: d,
                        got: r.len(),
                    });
                }
                let mut scaled = rows.to_vec();
                st.apply(&mut scaled);
                self.model.predict(&scaled)
            }
            None => self.model.predict(rows),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.model.encode(self.standardizer.as_ref())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, LearnError> {
        let parse = |msg: String| LearnError::ModelParse(msg);
        if bytes.len() < 8 || &bytes[..4] != FMD_MAGIC {
            return Err(parse("bad magic, expected FMD1".into()));
        }
        let header_len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let header_end = 8usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| parse("truncated header".into()))?;
        let header: Header =
            serde_json::from_slice(&bytes[8..header_end]).map_err(|e| parse(format!("header: {e}")))?;
        let mut pos = header_end;
        let mut blocks = BTreeMap::new();
        for spec in &header.blocks {
            let width = match spec.dtype.as_str() {
                "f64" => 8,
                "f32" => 4,
                other => return Err(parse(format!("block {:?}: unknown dtype {other:?}", spec.name))),
            };
            let end = spec
                .len
                .checked_mul(width)
                .and_then(|n| n.checked_add(pos))
                .filter(|&e| e <= bytes.len())
                .ok_or_else(|| parse(format!("block {:?} is truncated", spec.name)))?;
            let raw = &bytes[pos..end];
            let data: Vec<f64> = if width == 8 {
                raw.chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                    .collect()
            } else {
                raw.chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
                    .collect()
            };
            blocks.insert(spec.name.clone(), data);
            pos = end;
        }
        if pos != bytes.len() {
            return Err(parse(format!("{} trailing bytes after last block", bytes.len() - pos)));
        }
        let mut blocks = Blocks(blocks);
        let features = header.dim("features", 0)?;
        let classes = header.dim("classes", 0)?;
        let standardizer = if blocks.0.contains_key("input_mean") {
            Some(Standardizer {
                mean: blocks.take("input_mean", features)?,
                scale: blocks.take("input_scale", features)?,
            })
        } else {
            None
        };
        let model = match header.kind.as_str() {
            "svm" => {
                let params: SvmParams = header.params()?;
                let n_sv = header.dim("support_vectors", 0)?;
                let sv = blocks.take("support_vectors", n_sv * features)?;
                let coef = blocks.take("coef", classes * n_sv)?;
                let bias = blocks.take("bias", classes)?;
                let iterations: Vec<usize> = header.extra_field("iterations", classes)?;
                let converged: Vec<bool> = header.extra_field("converged", classes)?;
                let machines = (0..classes)
                    .map(|c| BinaryMachine {
                        coef: coef[c * n_sv..(c + 1) * n_sv].to_vec(),
                        bias: bias[c],
                        iterations: iterations[c],
                        converged: converged[c],
                    })
                    .collect();
                let support_vectors = if features == 0 {
                    vec![Vec::new(); n_sv]
                } else {
                    sv.chunks_exact(features).map(<[f64]>::to_vec).collect()
                };
                Ok(Model::Svm(SvmModel {
                    params,
                    d: features,
                    n_classes: classes,
                    support_vectors,
                    machines,
                }))
            }
            "gbdt" => {
                let params: GbdtParams = header.params()?;
                let rounds = header.dim("rounds", 0)?;
                let counts = header.shapes.get("tree_nodes").cloned().unwrap_or_default();
                if counts.len() != rounds * classes {
                    return Err(parse(format!(
                        "expected {} tree node counts, found {}",
                        rounds * classes,
                        counts.len()
                    )));
                }
                let base_score = blocks.take("base_score", classes)?;
                let total: usize = counts.iter().sum();
                let flat = blocks.take("nodes", total * NODE_WIDTH)?;
                let loss_trace = blocks.take_any("loss_trace")?;
                let mut offset = 0;
                let mut trees = Vec::with_capacity(counts.len());
                for &count in &counts {
                    let nodes = flat[offset * NODE_WIDTH..(offset + count) * NODE_WIDTH]
                        .chunks_exact(NODE_WIDTH)
                        .map(|c| decode_node(c, count, features))
                        .collect::<Result<Vec<_>, _>>()?;
                    if nodes.is_empty() {
                        return Err(parse("empty tree".into()));
                    }
                    trees.push(RegressionTree { nodes });
                    offset += count;
                }
                let rounds = if classes == 0 {
                    Vec::new()
                } else {
                    trees.chunks(classes).map(<[RegressionTree]>::to_vec).collect()
                };
                Ok(Model::Gbdt(GbdtModel {
                    params,
                    d: features,
                    n_classes: classes,
                    base_score,
                    rounds,
                    loss_trace,
                }))
            }
            "mlp" => {
                let params: MlpParams = header.params()?;
                let out = match params.output {
                    OutputMode::Softmax => classes,
                    OutputMode::ReluRegression => 1,
                };
                let [h1, h2] = params.hidden;
                for (name, want) in [("w1", [features, h1]), ("w2", [h1, h2]), ("w3", [h2, out])] {
                    if header.shapes.get(name).map(Vec::as_slice) != Some(&want[..]) {
                        return Err(LearnError::ArchMismatch(format!(
                            "{name} shape {:?} does not match hyperparameters {want:?}",
                            header.shapes.get(name)
                        )));
                    }
                }
                let mut matrix = |name: &str, r: usize, c: usize| -> Result<Array2<f64>, LearnError> {
                    Ok(Array2::from_shape_vec((r, c), blocks.take(name, r * c)?).expect("length checked"))
                };
                let w1 = matrix("w1", features, h1)?;
                let w2 = matrix("w2", h1, h2)?;
                let w3 = matrix("w3", h2, out)?;
                let b1 = Array1::from(blocks.take("b1", h1)?);
                let b2 = Array1::from(blocks.take("b2", h2)?);
                let b3 = Array1::from(blocks.take("b3", out)?);
                Ok(Model::Mlp(MlpModel {
                    params,
                    n_features: features,
                    n_classes: classes,
                    w1,
                    b1,
                    w2,
                    b2,
                    w3,
                    b3,
                    loss_trace: blocks.take_any("loss_trace")?,
                }))
            }
            other => Err(parse(format!("unknown model kind {other:?}"))),
        }?;
        Ok(SavedModel { model, standardizer })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct BlockSpec {
    name: String,
    dtype: String,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    kind: String,
    hyperparameters: Value,
    shapes: BTreeMap<String, Vec<usize>>,
    seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Value::is_null")]
    extra: Value,
    blocks: Vec<BlockSpec>,
}

impl Header {
    fn dim(&self, name: &str, axis: usize) -> Result<usize, LearnError> {
        self.shapes
            .get(name)
            .and_then(|s| s.get(axis))
            .copied()
            .ok_or_else(|| LearnError::ModelParse(format!("header lacks shape {name:?}")))
    }

    fn params<T: serde::de::DeserializeOwned>(&self) -> Result<T, LearnError> {
        serde_json::from_value(self.hyperparameters.clone())
            .map_err(|e| LearnError::ModelParse(format!("hyperparameters: {e}")))
    }

    fn extra_field<T: serde::de::DeserializeOwned>(&self, key: &str, len: usize) -> Result<Vec<T>, LearnError> {
        let v: Vec<T> = serde_json::from_value(self.extra.get(key).cloned().unwrap_or(Value::Null))
            .map_err(|e| LearnError::ModelParse(format!("{key}: {e}")))?;
        if v.len() != len {
            return Err(LearnError::ModelParse(format!(
                "{key}: expected {len} entries, got {}",
                v.len()
            )));
        }
        Ok(v)
    }
}

struct Blocks(BTreeMap<String, Vec<f64>>);

impl Blocks {
    fn take_any(&mut self, name: &str) -> Result<Vec<f64>, LearnError> {
        self.0
            .remove(name)
            .ok_or_else(|| LearnError::ModelParse(format!("missing block {name:?}")))
    }

    fn take(&mut self, name: &str, len: usize) -> Result<Vec<f64>, LearnError> {
        let data = self.take_any(name)?;
        if data.len() != len {
            return Err(LearnError::ModelParse(format!(
                "block {name:?} has {} values, shapes imply {len}",
                data.len()
            )));
        }
        Ok(data)
    }
}

fn shape_map<const N: usize>(entries: [(&str, Vec<usize>); N]) -> BTreeMap<String, Vec<usize>> {
    entries.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

// [tag, feature, threshold, gain, left, right, weight]; tag 0 = leaf, 1 = split
const NODE_WIDTH: usize = 7;

fn encode_node(node: &Node) -> [f64; NODE_WIDTH] {
    match *node {
        Node::Leaf { weight } => [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, weight],
        Node::Split {
            feature,
            threshold,
            gain,
            left,
            right,
        } => [1.0, feature as f64, threshold, gain, left as f64, right as f64, 0.0],
    }
}

fn decode_node(c: &[f64], tree_len: usize, features: usize) -> Result<Node, LearnError> {
    let index = |v: f64, bound: usize, what: &str| {
        if v >= 0.0 && v.fract() == 0.0 && (v as usize) < bound {
            Ok(v as usize)
        } else {
            Err(LearnError::ModelParse(format!("tree node {what} {v} out of range")))
        }
    };
    match c[0] {
        0.0 => Ok(Node::Leaf { weight: c[6] }),
        1.0 => Ok(Node::Split {
            feature: index(c[1], features, "feature")?,
            threshold: c[2],
            gain: c[3],
            left: index(c[4], tree_len, "child")?,
            right: index(c[5], tree_len, "child")?,
        }),
        t => Err(LearnError::ModelParse(format!("unknown tree node tag {t}"))),
    }
}

pub fn save_model(path: &Path, model: &SavedModel) -> Result<(), LearnError> {
    std::fs::write(path, model.to_bytes()).map_err(|source| LearnError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_model(path: &Path) -> Result<SavedModel, LearnError> {
    let bytes = std::fs::read(path).map_err(|source| LearnError::Io {
        path: path.display().to_string(),
        source,
    })?;
    SavedModel::from_bytes(&bytes)
}
