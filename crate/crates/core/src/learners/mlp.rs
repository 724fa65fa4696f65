//! Five-layer perceptron: dense → ReLU → dropout → dense → sigmoid → dropout
//! → dense output, trained by mini-batch SGD with inverted dropout.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_dims, class_counts, LearnError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputMode {
    /// K softmax outputs with cross-entropy loss.
    Softmax,
    /// One ReLU output regressed onto the integer label with squared error.
    ReluRegression,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlpParams {
    pub hidden: [usize; 2],
    pub dropout: [f64; 2],
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub output: OutputMode,
}

impl Default for MlpParams {
    fn default() -> Self {
        Self {
            hidden: [512, 128],
            dropout: [0.5, 0.5],
            epochs: 50,
            batch_size: 32,
            learning_rate: 0.05,
            seed: 0,
            output: OutputMode::Softmax,
        }
    }
}

impl MlpParams {
    fn validate(&self) -> Result<(), LearnError> {
        if self.hidden.contains(&0) {
            return Err(LearnError::ArchMismatch(format!(
                "hidden widths must be >= 1, got {:?}",
                self.hidden
            )));
        }
        if self.dropout.iter().any(|p| !(0.0..1.0).contains(p)) {
            return Err(LearnError::ArchMismatch(format!(
                "dropout rates must lie in [0, 1), got {:?}",
                self.dropout
            )));
        }
        if self.batch_size == 0 {
            return Err(LearnError::InvalidParameter("batch size must be >= 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(LearnError::InvalidParameter(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Per-unit multipliers for the two dropout layers: `0` for dropped units,
/// `1/(1-p)` for kept ones.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMasks {
    pub first: Array2<f64>,
    pub second: Array2<f64>,
}

impl DropoutMasks {
    pub fn sample(rng: &mut impl Rng, batch: usize, hidden: [usize; 2], rates: [f64; 2]) -> Self {
        let mut draw = |width: usize, p: f64| {
            let keep = 1.0 / (1.0 - p);
            Array2::from_shape_fn((batch, width), |_| if rng.gen::<f64>() < p { 0.0 } else { keep })
        };
        let first = draw(hidden[0], rates[0]);
        let second = draw(hidden[1], rates[1]);
        Self { first, second }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub w3: Array2<f64>,
    pub b3: Array1<f64>,
}

impl Gradients {
    /// Same ordering as [`MlpModel::flat_params`].
    pub fn flatten(&self) -> Vec<f64> {
        flatten_all(&self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub params: MlpParams,
    pub n_features: usize,
    pub n_classes: usize,
    /// `D × h1`
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    /// `h1 × h2`
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    /// `h2 × out`
    pub w3: Array2<f64>,
    pub b3: Array1<f64>,
    /// Mean training loss per epoch.
    pub loss_trace: Vec<f64>,
}

struct Activations {
    z1: Array2<f64>,
    d1: Array2<f64>,
    a2: Array2<f64>,
    d2: Array2<f64>,
    z3: Array2<f64>,
}

fn flatten_all(
    w1: &Array2<f64>,
    b1: &Array1<f64>,
    w2: &Array2<f64>,
    b2: &Array1<f64>,
    w3: &Array2<f64>,
    b3: &Array1<f64>,
) -> Vec<f64> {
    w1.iter()
        .chain(b1)
        .chain(w2)
        .chain(b2)
        .chain(w3)
        .chain(b3)
        .copied()
        .collect()
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn softmax_rows(z: &Array2<f64>) -> Array2<f64> {
    let mut p = z.clone();
    for mut row in p.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    p
}

impl MlpModel {
    /// He-uniform for the ReLU layer, Xavier-uniform for the sigmoid and output layers.
    pub fn init(n_features: usize, n_classes: usize, params: &MlpParams) -> Result<Self, LearnError> {
        params.validate()?;
        if n_features == 0 || n_classes == 0 {
            return Err(LearnError::ArchMismatch("input and class counts must be >= 1".into()));
        }
        let out = match params.output {
            OutputMode::Softmax => n_classes,
            OutputMode::ReluRegression => 1,
        };
        let [h1, h2] = params.hidden;
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let mut uniform = |rows: usize, cols: usize, limit: f64| {
            Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-limit..limit))
        };
        let w1 = uniform(n_features, h1, (6.0 / n_features as f64).sqrt());
        let w2 = uniform(h1, h2, (6.0 / (h1 + h2) as f64).sqrt());
        let w3 = uniform(h2, out, (6.0 / (h2 + out) as f64).sqrt());
        Ok(Self {
            params: *params,
            n_features,
            n_classes,
            w1,
            b1: Array1::zeros(h1),
            w2,
            b2: Array1::zeros(h2),
            w3,
            b3: Array1::zeros(out),
            loss_trace: Vec::new(),
        })
    }

    fn forward(&self, x: ArrayView2<f64>, masks: Option<&DropoutMasks>) -> Activations {
        let z1 = x.dot(&self.w1) + &self.b1;
        let mut d1 = z1.mapv(|v| v.max(0.0));
        if let Some(m) = masks {
            d1 *= &m.first;
        }
        let z2 = d1.dot(&self.w2) + &self.b2;
        let a2 = z2.mapv(sigmoid);
        let mut d2 = a2.clone();
        if let Some(m) = masks {
            d2 *= &m.second;
        }
        let z3 = d2.dot(&self.w3) + &self.b3;
        Activations { z1, d1, a2, d2, z3 }
    }

    /// Network outputs with dropout disabled: class probabilities for the
    /// softmax preset, the single ReLU output otherwise.
    pub fn outputs(&self, x: ArrayView2<f64>) -> Result<Array2<f64>, LearnError> {
        if x.ncols() != self.n_features {
            return Err(LearnError::DimensionMismatch {
                expected: self.n_features,
                got: x.ncols(),
            });
        }
        let z3 = self.forward(x, None).z3;
        Ok(match self.params.output {
            OutputMode::Softmax => softmax_rows(&z3),
            OutputMode::ReluRegression => z3.mapv(|v| v.max(0.0)),
        })
    }

    /// Mean loss over the batch and its gradient with respect to every parameter.
    pub fn loss_and_gradients(
        &self,
        x: ArrayView2<f64>,
        labels: &[usize],
        masks: Option<&DropoutMasks>,
    ) -> (f64, Gradients) {
        let b = x.nrows() as f64;
        let act = self.forward(x, masks);
        let (loss, dz3) = match self.params.output {
            OutputMode::Softmax => {
                let mut p = softmax_rows(&act.z3);
                let mut loss = 0.0;
                for (mut row, &y) in p.rows_mut().into_iter().zip(labels) {
                    loss -= row[y].max(f64::MIN_POSITIVE).ln();
                    row[y] -= 1.0;
                }
                (loss / b, p / b)
            }
            OutputMode::ReluRegression => {
                let mut loss = 0.0;
                let mut dz = Array2::zeros(act.z3.raw_dim());
                for (i, &y) in labels.iter().enumerate() {
                    let z = act.z3[[i, 0]];
                    let err = z.max(0.0) - y as f64;
                    loss += 0.5 * err * err;
                    dz[[i, 0]] = if z > 0.0 { err / b } else { 0.0 };
                }
                (loss / b, dz)
            }
        };
        let w3 = act.d2.t().dot(&dz3);
        let b3 = dz3.sum_axis(Axis(0));
        let mut dz2 = dz3.dot(&self.w3.t());
        if let Some(m) = masks {
            dz2 *= &m.second;
        }
        dz2.zip_mut_with(&act.a2, |g, &a| *g *= a * (1.0 - a));
        let w2 = act.d1.t().dot(&dz2);
        let b2 = dz2.sum_axis(Axis(0));
        let mut dz1 = dz2.dot(&self.w2.t());
        if let Some(m) = masks {
            dz1 *= &m.first;
        }
        dz1.zip_mut_with(&act.z1, |g, &z| {
            if z <= 0.0 {
                *g = 0.0
            }
        });
        let w1 = x.t().dot(&dz1);
        let b1 = dz1.sum_axis(Axis(0));
        (loss, Gradients { w1, b1, w2, b2, w3, b3 })
    }

    pub fn flat_params(&self) -> Vec<f64> {
        flatten_all(&self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3)
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) {
        let mut it = flat.iter().copied();
        for v in self
            .w1
            .iter_mut()
            .chain(self.b1.iter_mut())
            .chain(self.w2.iter_mut())
            .chain(self.b2.iter_mut())
            .chain(self.w3.iter_mut())
            .chain(self.b3.iter_mut())
        {
            *v = it.next().expect("flat parameter vector too short");
        }
        assert!(it.next().is_none(), "flat parameter vector too long");
    }

    fn sgd_step(&mut self, g: &Gradients) {
        let lr = self.params.learning_rate;
        self.w1.scaled_add(-lr, &g.w1);
        self.b1.scaled_add(-lr, &g.b1);
        self.w2.scaled_add(-lr, &g.w2);
        self.b2.scaled_add(-lr, &g.b2);
        self.w3.scaled_add(-lr, &g.w3);
        self.b3.scaled_add(-lr, &g.b3);
    }

    pub fn predict(&self, rows: &[Vec<f64>]) -> Result<Vec<usize>, LearnError> {
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        let x = to_array(rows, self.n_features)?;
        let out = self.outputs(x.view())?;
        Ok(match self.params.output {
            OutputMode::Softmax => out
                .rows()
                .into_iter()
                .map(|r| super::svm::argmax(r.as_slice().expect("standard layout")))
                .collect(),
            // nearest class, halves rounding down
            OutputMode::ReluRegression => out
                .column(0)
                .iter()
                .map(|&v| ((v - 0.5).ceil().max(0.0) as usize).min(self.n_classes - 1))
                .collect(),
        })
    }
}

pub(crate) fn to_array(rows: &[Vec<f64>], d: usize) -> Result<Array2<f64>, LearnError> {
    let mut flat = Vec::with_capacity(rows.len() * d);
    for r in rows {
        if r.len() != d {
            return Err(LearnError::DimensionMismatch {
                expected: d,
                got: r.len(),
            });
        }
        flat.extend_from_slice(r);
    }
    Ok(Array2::from_shape_vec((rows.len(), d), flat).expect("length checked"))
}

pub fn mlp_train(
    rows: &[Vec<f64>],
    labels: &[usize],
    n_classes: usize,
    params: &MlpParams,
) -> Result<MlpModel, LearnError> {
    if rows.is_empty() {
        return Err(LearnError::EmptyInput);
    }
    let d = check_dims(rows)?;
    class_counts(labels, n_classes, rows.len())?;
    let mut model = MlpModel::init(d, n_classes, params)?;
    let x = to_array(rows, d)?;
    // Shuffling and dropout share one stream, offset from the init stream.
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let mut order: Vec<usize> = (0..rows.len()).collect();
    for _ in 0..params.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(params.batch_size) {
            let xb = x.select(Axis(0), batch);
            let yb: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let masks = DropoutMasks::sample(&mut rng, batch.len(), params.hidden, params.dropout);
            let (loss, grads) = model.loss_and_gradients(xb.view(), &yb, Some(&masks));
            total += loss * batch.len() as f64;
            model.sgd_step(&grads);
        }
        let epoch_loss = total / rows.len() as f64;
        if !epoch_loss.is_finite() {
            return Err(LearnError::NonFinite("MLP training loss diverged".into()));
        }
        model.loss_trace.push(epoch_loss);
    }
    Ok(model)
}

pub fn mlp_predict(model: &MlpModel, rows: &[Vec<f64>]) -> Result<Vec<usize>, LearnError> {
    model.predict(rows)
}
