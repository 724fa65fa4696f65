use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::LearnError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelSpec {
    Linear,
    /// `exp(-‖x - x'‖² / (2σ²))`
    Rbf {
        sigma: f64,
    },
}

impl KernelSpec {
    pub fn rbf(sigma: f64) -> Result<Self, LearnError> {
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(LearnError::InvalidParameter(format!(
                "rbf sigma must be finite and positive, got {sigma}"
            )));
        }
        Ok(KernelSpec::Rbf { sigma })
    }

    /// RBF width with `1/(2σ²) = 1/(D·Var(X))`, the variance taken over every
    /// entry of the matrix. Falls back to `σ² = D/2` for constant data.
    pub fn rbf_scaled(rows: &[Vec<f64>]) -> Self {
        let d = rows.first().map_or(1, |r| r.len().max(1));
        let count = (rows.len() * d) as f64;
        let mean = rows.iter().flatten().sum::<f64>() / count.max(1.0);
        let var = rows.iter().flatten().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count.max(1.0);
        let var = if var > 0.0 && var.is_finite() { var } else { 1.0 };
        KernelSpec::Rbf {
            sigma: (d as f64 * var / 2.0).sqrt(),
        }
    }

    pub fn gamma(&self) -> Option<f64> {
        match *self {
            KernelSpec::Linear => None,
            KernelSpec::Rbf { sigma } => Some(1.0 / (2.0 * sigma * sigma)),
        }
    }

    pub(crate) fn eval_unchecked(&self, a: &[f64], b: &[f64]) -> f64 {
        match *self {
            KernelSpec::Linear => a.iter().zip(b).map(|(x, y)| x * y).sum(),
            KernelSpec::Rbf { sigma } => {
                let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
                (-sq / (2.0 * sigma * sigma)).exp()
            }
        }
    }
}

pub fn kernel_eval(a: &[f64], b: &[f64], spec: &KernelSpec) -> Result<f64, LearnError> {
    if a.len() != b.len() {
        return Err(LearnError::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(spec.eval_unchecked(a, b))
}

/// Dense symmetric Gram matrix, row-major `n × n`.
pub fn gram_matrix(rows: &[Vec<f64>], spec: &KernelSpec) -> Vec<f64> {
    let n = rows.len();
    let upper: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| (i..n).map(|j| spec.eval_unchecked(&rows[i], &rows[j])).collect())
        .collect();
    let mut k = vec![0.0; n * n];
    for (i, row) in upper.iter().enumerate() {
        for (off, &v) in row.iter().enumerate() {
            let j = i + off;
            k[i * n + j] = v;
            k[j * n + i] = v;
        }
    }
    k
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rbf_special_values() {
        let k = KernelSpec::rbf(0.7).unwrap();
        assert_eq!(kernel_eval(&[1.0, -2.0], &[1.0, -2.0], &k).unwrap(), 1.0);
        // ‖x−x'‖² = 2σ² gives e^{-1}
        let sigma: f64 = 1.3;
        let k = KernelSpec::rbf(sigma).unwrap();
        let d = (2.0 * sigma * sigma).sqrt();
        let v = kernel_eval(&[0.0, 0.0], &[d, 0.0], &k).unwrap();
        assert!((v - (-1.0f64).exp()).abs() < 1e-12);
        assert!((v - 0.367879).abs() < 1e-6);
    }

    #[test]
    fn linear_is_dot() {
        assert_eq!(
            kernel_eval(&[1.0, 2.0], &[3.0, 4.0], &KernelSpec::Linear).unwrap(),
            11.0
        );
    }

    #[test]
    fn dimension_mismatch() {
        assert!(matches!(
            kernel_eval(&[1.0], &[1.0, 2.0], &KernelSpec::Linear),
            Err(LearnError::DimensionMismatch { .. })
        ));
        assert!(KernelSpec::rbf(0.0).is_err());
        assert!(KernelSpec::rbf(f64::NAN).is_err());
    }

    #[test]
    fn scaled_sigma_matches_gamma_rule() {
        let rows = vec![vec![0.0, 2.0], vec![4.0, 2.0]];
        // mean 2, var = (4 + 0 + 4 + 0)/4 = 2, D = 2 → gamma = 1/4
        let k = KernelSpec::rbf_scaled(&rows);
        assert!((k.gamma().unwrap() - 0.25).abs() < 1e-12);
    }
}
