use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::convnet::FeatureMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub test_fraction: f64,
    pub seed: u64,
    #[serde(default = "default_stratified")]
    pub stratified: bool,
}

fn default_stratified() -> bool {
    true
}

impl SplitSpec {
    pub fn new(test_fraction: f64, seed: u64) -> Self {
        Self {
            test_fraction,
            seed,
            stratified: true,
        }
    }

    fn validate(&self) -> Result<(), PipelineError> {
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(PipelineError::InvalidConfig(format!(
                "test fraction must lie in (0, 1), got {}",
                self.test_fraction
            )));
        }
        Ok(())
    }
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self::new(0.2, 0)
    }
}

/// Row indices of each class, shuffled by one seeded stream in class order.
fn shuffled_by_class(labels: &[usize], rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let k = labels.iter().max().map_or(0, |&m| m + 1);
    let mut groups = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        groups[l].push(i);
    }
    for g in &mut groups {
        g.shuffle(rng);
    }
    groups
}

/// Test-set size per class. The total is `round(n · f)`; it is shared out by
/// largest remainder of `n_c · f`, ties to the smaller class, and no class
/// gives up its last training row.
fn class_quotas(counts: &[usize], f: f64) -> Vec<usize> {
    let n: usize = counts.iter().sum();
    let target = (n as f64 * f).round() as usize;
    let exact: Vec<f64> = counts.iter().map(|&c| c as f64 * f).collect();
    let mut quotas: Vec<usize> = exact
        .iter()
        .zip(counts)
        .map(|(&e, &c)| (e.floor() as usize).min(c.saturating_sub(1)))
        .collect();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut assigned: usize = quotas.iter().sum();
    for c in order {
        if assigned >= target {
            break;
        }
        if quotas[c] + 1 < counts[c] {
            quotas[c] += 1;
            assigned += 1;
        }
    }
    quotas
}

/// `(train, test)` row indices, each sorted ascending.
pub fn split_indices(labels: &[usize], spec: &SplitSpec) -> Result<(Vec<usize>, Vec<usize>), PipelineError> {
    spec.validate()?;
    if labels.is_empty() {
        return Err(PipelineError::EmptyInput);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    if spec.stratified {
        let groups = shuffled_by_class(labels, &mut rng);
        let counts: Vec<usize> = groups.iter().map(Vec::len).collect();
        if let Some((class, &count)) = counts.iter().enumerate().find(|(_, &c)| c == 1) {
            return Err(PipelineError::StratifyImpossible { class, count });
        }
        for (g, q) in groups.iter().zip(class_quotas(&counts, spec.test_fraction)) {
            test.extend_from_slice(&g[..q]);
            train.extend_from_slice(&g[q..]);
        }
    } else {
        let mut all: Vec<usize> = (0..labels.len()).collect();
        all.shuffle(&mut rng);
        let q = ((labels.len() as f64 * spec.test_fraction).round() as usize).min(labels.len() - 1);
        test.extend_from_slice(&all[..q]);
        train.extend_from_slice(&all[q..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

pub fn train_test_split(x: &FeatureMatrix, spec: &SplitSpec) -> Result<(FeatureMatrix, FeatureMatrix), PipelineError> {
    let (train, test) = split_indices(x.labels(), spec)?;
    Ok((x.select(&train), x.select(&test)))
}

/// `(train, validation)` row indices.
pub type Fold = (Vec<usize>, Vec<usize>);

/// Stratified k-fold: each class is shuffled, classes are laid end to end,
/// and position `p` of that sequence is dealt to fold `p mod k`.
/// Returns `(train, validation)` index pairs, each sorted ascending.
pub fn kfold(labels: &[usize], k: usize, seed: u64) -> Result<Vec<Fold>, PipelineError> {
    if k < 2 {
        return Err(PipelineError::TooFewSamples { needed: 2, got: k });
    }
    if labels.len() < k {
        return Err(PipelineError::TooFewSamples {
            needed: k,
            got: labels.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sequence: Vec<usize> = shuffled_by_class(labels, &mut rng).concat();
    let mut folds = vec![Vec::new(); k];
    for (p, &i) in sequence.iter().enumerate() {
        folds[p % k].push(i);
    }
    Ok((0..k)
        .map(|f| {
            let mut val = folds[f].clone();
            val.sort_unstable();
            let mut train: Vec<usize> = folds
                .iter()
                .enumerate()
                .filter(|&(g, _)| g != f)
                .flat_map(|(_, v)| v.iter().copied())
                .collect();
            train.sort_unstable();
            (train, val)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn balanced(n: usize, k: usize) -> Vec<usize> {
        (0..n).map(|i| i % k).collect()
    }

    #[test]
    fn large_balanced_test_sizes() {
        for (n, want) in [(9280, 1856), (14109, 2822), (4829, 966)] {
            let (train, test) = split_indices(&balanced(n, 10), &SplitSpec::new(0.2, 1)).unwrap();
            assert_eq!(test.len(), want, "n = {n}");
            assert_eq!(train.len() + test.len(), n);
        }
    }

    #[test]
    fn two_per_class_half() {
        let labels = balanced(10, 5);
        let (train, test) = split_indices(&labels, &SplitSpec::new(0.5, 3)).unwrap();
        for c in 0..5 {
            assert_eq!(train.iter().filter(|&&i| labels[i] == c).count(), 1);
            assert_eq!(test.iter().filter(|&&i| labels[i] == c).count(), 1);
        }
    }

    #[test]
    fn singleton_class_cannot_stratify() {
        assert!(matches!(
            split_indices(&[0, 0, 1], &SplitSpec::new(0.3, 0)),
            Err(PipelineError::StratifyImpossible { class: 1, count: 1 })
        ));
        let mut spec = SplitSpec::new(0.3, 0);
        spec.stratified = false;
        assert!(split_indices(&[0, 0, 1], &spec).is_ok());
    }

    #[test]
    fn bad_fraction() {
        assert!(matches!(
            split_indices(&[0, 1], &SplitSpec::new(1.0, 0)),
            Err(PipelineError::InvalidConfig(_))
        ));
    }

    #[test]
    fn fold_sizes() {
        let sizes = |n: usize| {
            let mut s: Vec<usize> = kfold(&vec![0; n], 5, 0).unwrap().iter().map(|f| f.1.len()).collect();
            s.sort_unstable_by(|a, b| b.cmp(a));
            s
        };
        assert_eq!(sizes(10), vec![2; 5]);
        assert_eq!(sizes(11), vec![3, 2, 2, 2, 2]);
        assert!(matches!(kfold(&[0, 1], 3, 0), Err(PipelineError::TooFewSamples { .. })));
        assert!(matches!(kfold(&[0, 1], 1, 0), Err(PipelineError::TooFewSamples { .. })));
    }

    proptest! {
        #[test]
        fn split_is_partition(labels in proptest::collection::vec(0usize..4, 2..200), f in 0.05f64..0.95, seed: u64) {
            let mut spec = SplitSpec::new(f, seed);
            spec.stratified = false;
            let (train, test) = split_indices(&labels, &spec).unwrap();
            let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
        }

        #[test]
        fn stratified_split_is_partition(per in proptest::collection::vec(2usize..40, 1..6), f in 0.05f64..0.95, seed: u64) {
            let labels: Vec<usize> = per.iter().enumerate().flat_map(|(c, &n)| std::iter::repeat_n(c, n)).collect();
            let (train, test) = split_indices(&labels, &SplitSpec::new(f, seed)).unwrap();
            let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
            for c in 0..per.len() {
                prop_assert!(train.iter().any(|&i| labels[i] == c));
            }
        }

        #[test]
        fn folds_partition(labels in proptest::collection::vec(0usize..3, 5..120), k in 2usize..6, seed: u64) {
            let folds = kfold(&labels, k, seed).unwrap();
            let mut seen = vec![0; labels.len()];
            let sizes: Vec<usize> = folds.iter().map(|f| f.1.len()).collect();
            for (train, val) in &folds {
                prop_assert_eq!(train.len() + val.len(), labels.len());
                for &i in val {
                    seen[i] += 1;
                }
            }
            prop_assert!(seen.iter().all(|&s| s == 1));
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        }
    }
}
