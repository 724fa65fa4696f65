//! Soft-margin kernel SVM trained with SMO, lifted to multiclass one-vs-rest.
//!
//! The binary solver works on the dual
//! `min ½ αᵀQα − eᵀα  s.t.  yᵀα = 0, 0 ≤ α ≤ C` with `Q_ij = y_i y_j K_ij`,
//! picking working pairs by maximal violation plus second-order gain.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::kernel::KernelSpec;
use super::{check_dims, class_counts, LearnError};

const TAU: f64 = 1e-12;
/// Above this many rows the cached Gram matrix is stored in `f32`.
const F64_GRAM_LIMIT: usize = 6000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvmParams {
    pub c: f64,
    pub kernel: KernelSpec,
    /// Stop once the maximal KKT violation gap is at most this.
    pub tol: f64,
    /// Iteration cap per binary machine; `0` picks `max(10⁷, 100·n)`.
    pub max_iter: usize,
}

impl SvmParams {
    pub fn new(c: f64, kernel: KernelSpec) -> Self {
        Self {
            c,
            kernel,
            tol: 1e-3,
            max_iter: 0,
        }
    }

    fn validate(&self) -> Result<(), LearnError> {
        if !(self.c.is_finite() && self.c > 0.0) {
            return Err(LearnError::InvalidParameter(format!(
                "C must be positive, got {}",
                self.c
            )));
        }
        if !(self.tol.is_finite() && self.tol > 0.0) {
            return Err(LearnError::InvalidParameter(format!(
                "tol must be positive, got {}",
                self.tol
            )));
        }
        if let KernelSpec::Rbf { sigma } = self.kernel {
            KernelSpec::rbf(sigma)?;
        }
        Ok(())
    }
}

enum GramStore {
    F64(Vec<f64>),
    F32(Vec<f32>),
}

/// Precomputed kernel matrix shared by every one-vs-rest machine.
pub(crate) struct Gram {
    n: usize,
    store: GramStore,
}

impl Gram {
    pub(crate) fn new(rows: &[Vec<f64>], kernel: &KernelSpec) -> Self {
        let n = rows.len();
        let row = |i: usize| (0..n).map(move |j| kernel.eval_unchecked(&rows[i], &rows[j]));
        let store = if n <= F64_GRAM_LIMIT {
            GramStore::F64((0..n).into_par_iter().flat_map_iter(row).collect())
        } else {
            GramStore::F32(
                (0..n)
                    .into_par_iter()
                    .flat_map_iter(|i| row(i).map(|v| v as f32))
                    .collect(),
            )
        };
        Self { n, store }
    }

    #[inline]
    fn get(&self, i: usize, j: usize) -> f64 {
        match &self.store {
            GramStore::F64(k) => k[i * self.n + j],
            GramStore::F32(k) => k[i * self.n + j] as f64,
        }
    }

    fn row_into(&self, i: usize, out: &mut [f64]) {
        match &self.store {
            GramStore::F64(k) => out.copy_from_slice(&k[i * self.n..(i + 1) * self.n]),
            GramStore::F32(k) => {
                for (o, &v) in out.iter_mut().zip(&k[i * self.n..(i + 1) * self.n]) {
                    *o = v as f64;
                }
            }
        }
    }
}

/// Dual solution of one binary problem over all training rows.
#[derive(Debug, Clone, PartialEq)]
pub struct BinarySolution {
    pub alpha: Vec<f64>,
    pub bias: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn in_up(y: f64, a: f64, c: f64) -> bool {
    (y > 0.0 && a < c) || (y < 0.0 && a > 0.0)
}

fn in_low(y: f64, a: f64, c: f64) -> bool {
    (y > 0.0 && a > 0.0) || (y < 0.0 && a < c)
}

pub(crate) fn smo_solve(gram: &Gram, y: &[f64], c: f64, tol: f64, max_iter: usize) -> BinarySolution {
    let n = y.len();
    let max_iter = if max_iter == 0 {
        (100 * n).max(10_000_000)
    } else {
        max_iter
    };
    let mut alpha = vec![0.0; n];
    // v_t = -y_t ∇_t, the quantity whose spread measures KKT violation.
    let mut v: Vec<f64> = y.to_vec();
    let diag: Vec<f64> = (0..n).map(|i| gram.get(i, i)).collect();
    let mut ki = vec![0.0; n];
    let mut kj = vec![0.0; n];
    let mut iterations = 0;
    let mut converged = false;

    while iterations < max_iter {
        let mut i = usize::MAX;
        let mut vmax = f64::NEG_INFINITY;
        for t in 0..n {
            if in_up(y[t], alpha[t], c) && v[t] > vmax {
                vmax = v[t];
                i = t;
            }
        }
        let mut vmin = f64::INFINITY;
        for t in 0..n {
            if in_low(y[t], alpha[t], c) && v[t] < vmin {
                vmin = v[t];
            }
        }
        if i == usize::MAX || vmax - vmin <= tol {
            converged = true;
            break;
        }
        gram.row_into(i, &mut ki);
        let mut j = usize::MAX;
        let mut best = f64::INFINITY;
        for t in 0..n {
            if in_low(y[t], alpha[t], c) && v[t] < vmax {
                let diff = vmax - v[t];
                let a = (diag[i] + diag[t] - 2.0 * ki[t]).max(TAU);
                let score = -diff * diff / a;
                if score < best {
                    best = score;
                    j = t;
                }
            }
        }
        if j == usize::MAX {
            converged = true;
            break;
        }
        gram.row_into(j, &mut kj);
        iterations += 1;

        let a = (diag[i] + diag[j] - 2.0 * ki[j]).max(TAU);
        let mut step = (v[i] - v[j]) / a;
        let room_i = if y[i] > 0.0 { c - alpha[i] } else { alpha[i] };
        let room_j = if y[j] > 0.0 { alpha[j] } else { c - alpha[j] };
        let (mut snap_i, mut snap_j) = (false, false);
        if step >= room_i {
            step = room_i;
            snap_i = true;
        }
        if step >= room_j {
            step = room_j;
            snap_j = true;
            snap_i = snap_i && room_i == room_j;
        }
        let old_i = alpha[i];
        let old_j = alpha[j];
        alpha[i] += y[i] * step;
        alpha[j] -= y[j] * step;
        // Land exactly on the box bounds when clipped.
        if snap_i {
            alpha[i] = if y[i] > 0.0 { c } else { 0.0 };
        }
        if snap_j {
            alpha[j] = if y[j] > 0.0 { 0.0 } else { c };
        }
        alpha[i] = alpha[i].clamp(0.0, c);
        alpha[j] = alpha[j].clamp(0.0, c);
        let di = (alpha[i] - old_i) * y[i];
        let dj = (alpha[j] - old_j) * y[j];
        // v_t = y_t - Σ_s α_s y_s K_ts
        for t in 0..n {
            v[t] -= di * ki[t] + dj * kj[t];
        }
    }

    let mut free_sum = 0.0;
    let mut free = 0usize;
    let (mut up_max, mut low_min) = (f64::NEG_INFINITY, f64::INFINITY);
    for t in 0..n {
        if alpha[t] > 0.0 && alpha[t] < c {
            free_sum += v[t];
            free += 1;
        }
        if in_up(y[t], alpha[t], c) {
            up_max = up_max.max(v[t]);
        }
        if in_low(y[t], alpha[t], c) {
            low_min = low_min.min(v[t]);
        }
    }
    let bias = if free > 0 {
        free_sum / free as f64
    } else if up_max.is_finite() && low_min.is_finite() {
        (up_max + low_min) / 2.0
    } else if up_max.is_finite() {
        up_max
    } else {
        low_min
    };
    BinarySolution {
        alpha,
        bias,
        iterations,
        converged,
    }
}

/// Solves a single two-class problem. `y` holds `+1.0` / `-1.0`.
pub fn train_binary(rows: &[Vec<f64>], y: &[f64], params: &SvmParams) -> Result<BinarySolution, LearnError> {
    params.validate()?;
    check_dims(rows)?;
    if rows.len() != y.len() {
        return Err(LearnError::LengthMismatch {
            rows: rows.len(),
            labels: y.len(),
        });
    }
    if y.iter().any(|&t| t != 1.0 && t != -1.0) {
        return Err(LearnError::InvalidParameter("binary targets must be ±1".into()));
    }
    if !(y.contains(&1.0) && y.contains(&-1.0)) {
        return Err(LearnError::DegenerateLabels("binary problem needs both signs".into()));
    }
    let gram = Gram::new(rows, &params.kernel);
    Ok(smo_solve(&gram, y, params.c, params.tol, params.max_iter))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryMachine {
    /// `α_i y_i` for every pooled support vector (zero where this machine does not use it).
    pub coef: Vec<f64>,
    pub bias: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvmModel {
    pub params: SvmParams,
    pub d: usize,
    pub n_classes: usize,
    /// Union of every machine's support vectors.
    pub support_vectors: Vec<Vec<f64>>,
    /// One machine per class, class `c` against the rest.
    pub machines: Vec<BinaryMachine>,
}

impl SvmModel {
    pub fn decision_values(&self, x: &[f64]) -> Result<Vec<f64>, LearnError> {
        if x.len() != self.d {
            return Err(LearnError::DimensionMismatch {
                expected: self.d,
                got: x.len(),
            });
        }
        let k: Vec<f64> = self
            .support_vectors
            .iter()
            .map(|sv| self.params.kernel.eval_unchecked(sv, x))
            .collect();
        Ok(self
            .machines
            .iter()
            .map(|m| m.coef.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>() + m.bias)
            .collect())
    }

    pub fn predict(&self, rows: &[Vec<f64>]) -> Result<Vec<usize>, LearnError> {
        rows.par_iter()
            .map(|x| self.decision_values(x).map(|dv| argmax(&dv)))
            .collect()
    }
}

/// First index of the maximum.
pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// One-vs-rest SVM over classes `0..n_classes`; every class needs a sample.
pub fn svm_train(
    rows: &[Vec<f64>],
    labels: &[usize],
    n_classes: usize,
    params: &SvmParams,
) -> Result<SvmModel, LearnError> {
    params.validate()?;
    let d = check_dims(rows)?;
    let counts = class_counts(labels, n_classes, rows.len())?;
    if rows.len() < 2 || n_classes < 2 {
        return Err(LearnError::DegenerateLabels(
            "need at least two samples and two classes".into(),
        ));
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(LearnError::DegenerateLabels(format!("class {c} has no samples")));
    }
    let gram = Gram::new(rows, &params.kernel);
    let solutions: Vec<BinarySolution> = (0..n_classes)
        .into_par_iter()
        .map(|class| {
            let y: Vec<f64> = labels.iter().map(|&l| if l == class { 1.0 } else { -1.0 }).collect();
            let mut sol = smo_solve(&gram, &y, params.c, params.tol, params.max_iter);
            for (a, t) in sol.alpha.iter_mut().zip(&y) {
                *a *= t;
            }
            sol
        })
        .collect();

    let pool: Vec<usize> = (0..rows.len())
        .filter(|&i| solutions.iter().any(|s| s.alpha[i] != 0.0))
        .collect();
    let machines = solutions
        .into_iter()
        .map(|s| BinaryMachine {
            coef: pool.iter().map(|&i| s.alpha[i]).collect(),
            bias: s.bias,
            iterations: s.iterations,
            converged: s.converged,
        })
        .collect();
    Ok(SvmModel {
        params: *params,
        d,
        n_classes,
        support_vectors: pool.iter().map(|&i| rows[i].clone()).collect(),
        machines,
    })
}

pub fn svm_predict(model: &SvmModel, rows: &[Vec<f64>]) -> Result<Vec<usize>, LearnError> {
    model.predict(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn xor() -> (Vec<Vec<f64>>, Vec<usize>) {
        (
            vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![0.0, 1.0], vec![1.0, 0.0]],
            vec![0, 0, 1, 1],
        )
    }

    #[test]
    fn xor_with_rbf() {
        let (x, y) = xor();
        let params = SvmParams::new(10.0, KernelSpec::rbf(0.5).unwrap());
        let m = svm_train(&x, &y, 2, &params).unwrap();
        assert_eq!(m.predict(&x).unwrap(), y);
    }

    #[test]
    fn two_points_midpoint() {
        let x = vec![vec![-1.0], vec![1.0]];
        let m = svm_train(&x, &[0, 1], 2, &SvmParams::new(1e6, KernelSpec::Linear)).unwrap();
        assert_eq!(m.predict(&[vec![-0.5], vec![0.5]]).unwrap(), vec![0, 1]);
        // hard margin: w = 1, b = 0 for the +1 machine of class 1
        let dv = m.decision_values(&[0.0]).unwrap();
        assert!(dv[1].abs() < 1e-9, "{dv:?}");
    }

    #[test]
    fn degenerate_inputs() {
        let x = vec![vec![0.0], vec![1.0]];
        let p = SvmParams::new(1.0, KernelSpec::Linear);
        assert!(matches!(
            svm_train(&x, &[0, 0], 1, &p),
            Err(LearnError::DegenerateLabels(_))
        ));
        assert!(matches!(
            svm_train(&x, &[0, 0], 2, &p),
            Err(LearnError::DegenerateLabels(_))
        ));
        assert!(matches!(
            svm_train(&x, &[0, 5], 2, &p),
            Err(LearnError::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn predict_edge_cases() {
        let (x, y) = xor();
        let m = svm_train(&x, &y, 2, &SvmParams::new(10.0, KernelSpec::rbf(0.5).unwrap())).unwrap();
        assert!(m.predict(&[]).unwrap().is_empty());
        assert!(matches!(
            m.predict(&[vec![1.0]]),
            Err(LearnError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn single_sv_decays_with_distance() {
        let m = SvmModel {
            params: SvmParams::new(1.0, KernelSpec::rbf(1.0).unwrap()),
            d: 2,
            n_classes: 1,
            support_vectors: vec![vec![0.0, 0.0]],
            machines: vec![BinaryMachine {
                coef: vec![1.0],
                bias: 0.0,
                iterations: 0,
                converged: true,
            }],
        };
        let vals: Vec<f64> = (0..6)
            .map(|r| m.decision_values(&[r as f64 * 0.5, 0.0]).unwrap()[0])
            .collect();
        assert!(vals.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }
}
