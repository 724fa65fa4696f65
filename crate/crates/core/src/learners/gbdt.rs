//! Multiclass gradient boosting with second-order (gradient + Hessian)
//! regression trees and a softmax objective.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::svm::argmax;
use super::{check_dims, class_counts, LearnError};

const MIN_HESSIAN: f64 = 1e-16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GbdtParams {
    pub rounds: usize,
    pub learning_rate: f64,
    pub max_depth: usize,
    /// L2 penalty on leaf weights.
    pub lambda: f64,
    /// Minimum gain a split must exceed.
    pub gamma: f64,
    /// Recorded for provenance; exact greedy training draws no randomness.
    pub seed: u64,
}

impl Default for GbdtParams {
    fn default() -> Self {
        Self {
            rounds: 100,
            learning_rate: 0.1,
            max_depth: 4,
            lambda: 1.0,
            gamma: 0.0,
            seed: 0,
        }
    }
}

impl GbdtParams {
    fn validate(&self) -> Result<(), LearnError> {
        let bad = |m: String| Err(LearnError::InvalidParameter(m));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return bad(format!("gamma must be >= 0, got {}", self.gamma));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Leaf {
        weight: f64,
    },
    /// Rows with `x[feature] < threshold` go left.
    Split {
        feature: usize,
        threshold: f64,
        gain: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    /// Node 0 is the root.
    pub nodes: Vec<Node>,
}

impl RegressionTree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                Node::Leaf { weight } => return weight,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => at = if x[feature] < threshold { left } else { right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], at: usize) -> usize {
            match nodes[at] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, left).max(walk(nodes, right)),
            }
        }
        walk(&self.nodes, 0)
    }
}

/// XGBoost-style split gain.
pub fn split_gain(gl: f64, hl: f64, gr: f64, hr: f64, lambda: f64, gamma: f64) -> f64 {
    let score = |g: f64, h: f64| g * g / (h + lambda);
    0.5 * (score(gl, hl) + score(gr, hr) - score(gl + gr, hl + hr)) - gamma
}

pub fn leaf_weight(g: f64, h: f64, lambda: f64) -> f64 {
    -g / (h + lambda)
}

/// Strictly better by more than summation-order rounding, so that splits
/// inducing the same partition through different features tie and the
/// earlier candidate is kept.
fn beats(gain: f64, incumbent: f64) -> bool {
    gain - incumbent > 1e-12 * gain.abs().max(incumbent.abs())
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    gain: f64,
    feature: usize,
    threshold: f64,
}

/// One feature column in ascending order: `(value, row)` pairs, ties by row index.
pub(crate) type SortedColumn = Vec<(f64, u32)>;

pub(crate) fn presort(rows: &[Vec<f64>], d: usize) -> Vec<SortedColumn> {
    (0..d)
        .into_par_iter()
        .map(|f| {
            let mut col: SortedColumn = rows.iter().enumerate().map(|(i, r)| (r[f], i as u32)).collect();
            col.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            col
        })
        .collect()
}

/// Grows one tree level by level with exact greedy split search.
pub(crate) fn grow_tree(
    rows: &[Vec<f64>],
    sorted: &[SortedColumn],
    grad: &[f64],
    hess: &[f64],
    params: &GbdtParams,
) -> RegressionTree {
    let n = rows.len();
    let d = sorted.len();
    let mut nodes = vec![Node::Leaf { weight: 0.0 }];
    let mut node_of = vec![0usize; n];
    let mut g_sum = vec![grad.iter().sum::<f64>()];
    let mut h_sum = vec![hess.iter().sum::<f64>()];
    let mut frontier = vec![0usize];

    for _depth in 0..params.max_depth {
        if frontier.is_empty() {
            break;
        }
        // Slot of each frontier node within this level's accumulators.
        let mut slot = vec![usize::MAX; nodes.len()];
        for (s, &nd) in frontier.iter().enumerate() {
            slot[nd] = s;
        }
        let per_feature: Vec<Vec<Option<Candidate>>> = (0..d)
            .into_par_iter()
            .map(|f| {
                let m = frontier.len();
                let mut gl = vec![0.0; m];
                let mut hl = vec![0.0; m];
                let mut last: Vec<Option<f64>> = vec![None; m];
                let mut best: Vec<Option<Candidate>> = vec![None; m];
                for &(v, i) in &sorted[f] {
                    let i = i as usize;
                    let s = slot[node_of[i]];
                    if s == usize::MAX {
                        continue;
                    }
                    if let Some(prev) = last[s] {
                        if v > prev {
                            let nd = frontier[s];
                            let gain = split_gain(
                                gl[s],
                                hl[s],
                                g_sum[nd] - gl[s],
                                h_sum[nd] - hl[s],
                                params.lambda,
                                params.gamma,
                            );
                            if best[s].is_none_or(|b| beats(gain, b.gain)) {
                                best[s] = Some(Candidate {
                                    gain,
                                    feature: f,
                                    threshold: prev + (v - prev) / 2.0,
                                });
                            }
                        }
                    }
                    gl[s] += grad[i];
                    hl[s] += hess[i];
                    last[s] = Some(v);
                }
                best
            })
            .collect();

        let mut next_frontier = Vec::new();
        for (s, &nd) in frontier.iter().enumerate() {
            let mut best: Option<Candidate> = None;
            for cands in &per_feature {
                if let Some(c) = cands[s] {
                    if best.is_none_or(|b| beats(c.gain, b.gain)) {
                        best = Some(c);
                    }
                }
            }
            let Some(best) = best.filter(|b| b.gain > 0.0) else {
                continue;
            };
            let left = nodes.len();
            let right = left + 1;
            nodes.push(Node::Leaf { weight: 0.0 });
            nodes.push(Node::Leaf { weight: 0.0 });
            g_sum.extend([0.0, 0.0]);
            h_sum.extend([0.0, 0.0]);
            nodes[nd] = Node::Split {
                feature: best.feature,
                threshold: best.threshold,
                gain: best.gain,
                left,
                right,
            };
            next_frontier.extend([left, right]);
        }
        if next_frontier.is_empty() {
            break;
        }
        for i in 0..n {
            if let Node::Split {
                feature,
                threshold,
                left,
                right,
                ..
            } = nodes[node_of[i]]
            {
                let child = if rows[i][feature] < threshold { left } else { right };
                node_of[i] = child;
                g_sum[child] += grad[i];
                h_sum[child] += hess[i];
            }
        }
        frontier = next_frontier;
    }

    // Every node that is still a leaf gets its optimal weight.
    let mut leaf_g = vec![0.0; nodes.len()];
    let mut leaf_h = vec![0.0; nodes.len()];
    for i in 0..n {
        leaf_g[node_of[i]] += grad[i];
        leaf_h[node_of[i]] += hess[i];
    }
    for (k, node) in nodes.iter_mut().enumerate() {
        if let Node::Leaf { weight } = node {
            *weight = leaf_weight(leaf_g[k], leaf_h[k], params.lambda);
        }
    }
    RegressionTree { nodes }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GbdtModel {
    pub params: GbdtParams,
    pub d: usize,
    pub n_classes: usize,
    /// Initial per-class raw score.
    pub base_score: Vec<f64>,
    /// `rounds[r][k]` is round r's tree for class k.
    pub rounds: Vec<Vec<RegressionTree>>,
    /// Mean softmax cross-entropy on the training set: entry 0 before any
    /// tree, entry r after round r.
    pub loss_trace: Vec<f64>,
}

impl GbdtModel {
    pub fn raw_scores(&self, x: &[f64]) -> Result<Vec<f64>, LearnError> {
        if x.len() != self.d {
            return Err(LearnError::DimensionMismatch {
                expected: self.d,
                got: x.len(),
            });
        }
        let mut s = self.base_score.clone();
        for round in &self.rounds {
            for (k, tree) in round.iter().enumerate() {
                s[k] += self.params.learning_rate * tree.predict(x);
            }
        }
        Ok(s)
    }

    pub fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>, LearnError> {
        self.raw_scores(x).map(|s| softmax(&s))
    }

    pub fn predict(&self, rows: &[Vec<f64>]) -> Result<Vec<usize>, LearnError> {
        rows.par_iter()
            .map(|x| self.raw_scores(x).map(|s| argmax(&s)))
            .collect()
    }
}

pub(crate) fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn mean_cross_entropy(scores: &[Vec<f64>], labels: &[usize]) -> f64 {
    scores
        .iter()
        .zip(labels)
        .map(|(s, &y)| {
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + s.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lse - s[y]
        })
        .sum::<f64>()
        / labels.len() as f64
}

pub fn gbdt_train(
    rows: &[Vec<f64>],
    labels: &[usize],
    n_classes: usize,
    params: &GbdtParams,
) -> Result<GbdtModel, LearnError> {
    params.validate()?;
    let d = check_dims(rows)?;
    let counts = class_counts(labels, n_classes, rows.len())?;
    if rows.len() < 2 || n_classes < 2 {
        return Err(LearnError::DegenerateLabels(
            "need at least two samples and two classes".into(),
        ));
    }
    if counts.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(LearnError::DegenerateLabels("only one class is present".into()));
    }
    let n = rows.len();
    let base_score = vec![0.0; n_classes];
    let mut scores = vec![base_score.clone(); n];
    let sorted = presort(rows, d);
    let mut loss_trace = vec![mean_cross_entropy(&scores, labels)];
    let mut rounds = Vec::with_capacity(params.rounds);

    for _ in 0..params.rounds {
        let probs: Vec<Vec<f64>> = scores.iter().map(|s| softmax(s)).collect();
        let trees: Vec<RegressionTree> = (0..n_classes)
            .into_par_iter()
            .map(|k| {
                let grad: Vec<f64> = probs
                    .iter()
                    .zip(labels)
                    .map(|(p, &y)| p[k] - if y == k { 1.0 } else { 0.0 })
                    .collect();
                let hess: Vec<f64> = probs.iter().map(|p| (p[k] * (1.0 - p[k])).max(MIN_HESSIAN)).collect();
                grow_tree(rows, &sorted, &grad, &hess, params)
            })
            .collect();
        for (s, x) in scores.iter_mut().zip(rows) {
            for (k, tree) in trees.iter().enumerate() {
                s[k] += params.learning_rate * tree.predict(x);
            }
        }
        loss_trace.push(mean_cross_entropy(&scores, labels));
        rounds.push(trees);
    }
    Ok(GbdtModel {
        params: *params,
        d,
        n_classes,
        base_score,
        rounds,
        loss_trace,
    })
}

pub fn gbdt_predict(model: &GbdtModel, rows: &[Vec<f64>]) -> Result<Vec<usize>, LearnError> {
    model.predict(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_rounds_predicts_class_zero() {
        let x = vec![vec![0.0], vec![1.0], vec![2.0]];
        let p = GbdtParams {
            rounds: 0,
            ..Default::default()
        };
        let m = gbdt_train(&x, &[1, 2, 2], 3, &p).unwrap();
        assert_eq!(m.predict(&x).unwrap(), vec![0, 0, 0]);
        assert!(m.predict(&[]).unwrap().is_empty());
        assert!(matches!(
            m.predict(&[vec![]]),
            Err(LearnError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn constant_features_converge_to_frequencies() {
        let x = vec![vec![3.0, 3.0]; 4];
        let p = GbdtParams {
            rounds: 400,
            learning_rate: 0.3,
            ..Default::default()
        };
        let m = gbdt_train(&x, &[0, 0, 0, 1], 2, &p).unwrap();
        assert!(m.rounds.iter().flatten().all(|t| t.nodes.len() == 1));
        let prob = m.predict_proba(&x[0]).unwrap();
        assert!((prob[0] - 0.75).abs() < 1e-4, "{prob:?}");
    }

    #[test]
    fn depth_is_capped() {
        let x: Vec<Vec<f64>> = (0..64).map(|i| vec![i as f64, (i * 7 % 13) as f64]).collect();
        let y: Vec<usize> = (0..64).map(|i| (i / 3) % 4).collect();
        for depth in [1, 2, 3] {
            let p = GbdtParams {
                rounds: 3,
                max_depth: depth,
                ..Default::default()
            };
            let m = gbdt_train(&x, &y, 4, &p).unwrap();
            assert!(m.rounds.iter().flatten().all(|t| t.depth() <= depth));
            assert!(m.rounds.iter().flatten().any(|t| t.depth() == depth));
        }
    }

    #[test]
    fn gain_formula() {
        // G_L = -2, H_L = 1, G_R = 2, H_R = 1, λ = 1: ½(4/2 + 4/2 - 0) = 2
        assert_eq!(split_gain(-2.0, 1.0, 2.0, 1.0, 1.0, 0.0), 2.0);
        assert_eq!(split_gain(-2.0, 1.0, 2.0, 1.0, 1.0, 0.5), 1.5);
        assert_eq!(leaf_weight(2.0, 3.0, 1.0), -0.5);
    }

    #[test]
    fn single_class_is_degenerate() {
        let x = vec![vec![0.0], vec![1.0]];
        assert!(matches!(
            gbdt_train(&x, &[1, 1], 2, &GbdtParams::default()),
            Err(LearnError::DegenerateLabels(_))
        ));
    }
}
