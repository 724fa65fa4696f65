use serde::{Deserialize, Serialize};

use super::split::kfold;
use super::{accuracy, PipelineError};
use crate::learners::{svm_train, KernelSpec, SvmParams};

pub const DEFAULT_C_GRID: [f64; 4] = [0.1, 1.0, 10.0, 100.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearchResult {
    pub best_c: f64,
    /// `(C, mean validation accuracy)` in grid order.
    pub per_c: Vec<(f64, f64)>,
}

/// Mean k-fold validation accuracy of a one-vs-rest SVM for each C.
/// The best C is the highest mean; ties go to the smaller C.
pub fn grid_search_c(
    rows: &[Vec<f64>],
    labels: &[usize],
    n_classes: usize,
    kernel: KernelSpec,
    grid: &[f64],
    folds: usize,
    seed: u64,
) -> Result<GridSearchResult, PipelineError> {
    if grid.is_empty() {
        return Err(PipelineError::InvalidConfig("C grid is empty".into()));
    }
    let splits = kfold(labels, folds, seed)?;
    let mut per_c = Vec::with_capacity(grid.len());
    for &c in grid {
        let params = SvmParams::new(c, kernel);
        let mut total = 0.0;
        for (train, val) in &splits {
            let tr: Vec<Vec<f64>> = train.iter().map(|&i| rows[i].clone()).collect();
            let ty: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
            let model = svm_train(&tr, &ty, n_classes, &params)?;
            let vr: Vec<Vec<f64>> = val.iter().map(|&i| rows[i].clone()).collect();
            let vy: Vec<usize> = val.iter().map(|&i| labels[i]).collect();
            total += accuracy(&model.predict(&vr)?, &vy)?;
        }
        per_c.push((c, total / splits.len() as f64));
    }
    let best_c = per_c
        .iter()
        .copied()
        .reduce(|best, cur| {
            if cur.1 > best.1 || (cur.1 == best.1 && cur.0 < best.0) {
                cur
            } else {
                best
            }
        })
        .map(|(c, _)| c)
        .expect("grid is non-empty");
    Ok(GridSearchResult { best_c, per_c })
}
