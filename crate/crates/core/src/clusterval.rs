//! K-means with k-means++ seeding, the mean silhouette coefficient, and a
//! silhouette sweep over a range of cluster counts.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::convnet::FeatureMatrix;

#[derive(Debug, Error, PartialEq)]
pub enum ClusterError {
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("silhouette needs at least two distinct clusters")]
    SingleCluster,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl ClusterError {
    pub fn kind(&self) -> crate::FailureKind {
        match self {
            ClusterError::InvalidArgument(_) => crate::FailureKind::Input,
            _ => crate::FailureKind::Data,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansParams {
    pub k: usize,
    pub seed: u64,
    pub max_iter: usize,
    pub tol: f64,
    pub n_init: usize,
}

impl KMeansParams {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            seed,
            max_iter: 300,
            tol: 1e-4,
            n_init: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansModel {
    pub k: usize,
    pub d: usize,
    /// `k × d`, row-major.
    pub centroids: Vec<f64>,
    pub labels: Vec<usize>,
    pub inertia: f64,
    pub iterations_run: usize,
    /// Inertia after every assignment step of the winning restart.
    pub inertia_trace: Vec<f64>,
}

impl KMeansModel {
    pub fn centroid(&self, c: usize) -> &[f64] {
        &self.centroids[c * self.d..(c + 1) * self.d]
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        nearest(&self.centroids, self.d, x).0
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index and squared distance of the closest centroid; ties go to the lower index.
fn nearest(centroids: &[f64], d: usize, x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, cent) in centroids.chunks_exact(d).enumerate() {
        let dist = sq_dist(cent, x);
        if dist < best.1 {
            best = (c, dist);
        }
    }
    best
}

fn kmeans_pp(rows: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = rows.len();
    let d = rows[0].len();
    let mut centroids = Vec::with_capacity(k * d);
    centroids.extend_from_slice(&rows[rng.gen_range(0..n)]);
    let mut closest: Vec<f64> = rows.iter().map(|r| sq_dist(r, &centroids[..d])).collect();
    for _ in 1..k {
        let total: f64 = closest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut idx = n - 1;
            for (i, &w) in closest.iter().enumerate() {
                if target < w {
                    idx = i;
                    break;
                }
                target -= w;
            }
            idx
        } else {
            rng.gen_range(0..n)
        };
        let start = centroids.len();
        centroids.extend_from_slice(&rows[pick]);
        for (c, r) in closest.iter_mut().zip(rows) {
            *c = c.min(sq_dist(r, &centroids[start..]));
        }
    }
    centroids
}

fn lloyd(rows: &[Vec<f64>], mut centroids: Vec<f64>, k: usize, max_iter: usize, tol: f64) -> KMeansModel {
    let n = rows.len();
    let d = rows[0].len();
    let mut labels = vec![0; n];
    let mut dists = vec![0.0; n];
    let mut trace = Vec::new();
    let mut iterations = 0;

    let assign = |centroids: &[f64], labels: &mut [usize], dists: &mut [f64]| -> f64 {
        labels
            .par_iter_mut()
            .zip(dists.par_iter_mut())
            .zip(rows.par_iter())
            .for_each(|((l, dd), r)| {
                let (c, dist) = nearest(centroids, d, r);
                *l = c;
                *dd = dist;
            });
        dists.iter().sum()
    };

    let mut inertia = assign(&centroids, &mut labels, &mut dists);
    trace.push(inertia);
    while iterations < max_iter {
        iterations += 1;
        let mut counts = vec![0usize; k];
        for &l in &labels {
            counts[l] += 1;
        }
        // An empty cluster takes over the point worst served by its current
        // centroid, drawn from clusters that can spare one.
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .filter(|&i| counts[labels[i]] > 1)
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .expect("n >= k guarantees a donor cluster");
                counts[labels[far]] -= 1;
                counts[c] = 1;
                labels[far] = c;
                dists[far] = 0.0;
            }
        }
        let mut sums = vec![0.0; k * d];
        for (r, &l) in rows.iter().zip(&labels) {
            for (s, v) in sums[l * d..(l + 1) * d].iter_mut().zip(r) {
                *s += v;
            }
        }
        let next: Vec<f64> = sums
            .chunks_exact(d)
            .zip(&counts)
            .flat_map(|(s, &cnt)| s.iter().map(move |v| v / cnt as f64))
            .collect();
        let shift: f64 = next
            .chunks_exact(d)
            .zip(centroids.chunks_exact(d))
            .map(|(a, b)| sq_dist(a, b))
            .sum();
        centroids = next;
        inertia = assign(&centroids, &mut labels, &mut dists);
        trace.push(inertia);
        if shift < tol {
            break;
        }
    }
    KMeansModel {
        k,
        d,
        centroids,
        labels,
        inertia,
        iterations_run: iterations,
        inertia_trace: trace,
    }
}

/// Best of `n_init` k-means++/Lloyd restarts by inertia.
pub fn kmeans_rows(rows: &[Vec<f64>], params: &KMeansParams) -> Result<KMeansModel, ClusterError> {
    let KMeansParams {
        k,
        seed,
        max_iter,
        tol,
        n_init,
    } = *params;
    if k == 0 || n_init == 0 {
        return Err(ClusterError::InvalidArgument("k and n_init must be >= 1".into()));
    }
    if rows.len() < k {
        return Err(ClusterError::TooFewSamples {
            needed: k,
            got: rows.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<KMeansModel> = None;
    for _ in 0..n_init {
        let init = kmeans_pp(rows, k, &mut rng);
        let model = lloyd(rows, init, k, max_iter, tol);
        if best.as_ref().is_none_or(|b| model.inertia < b.inertia) {
            best = Some(model);
        }
    }
    Ok(best.expect("n_init >= 1"))
}

pub fn kmeans_fit(x: &FeatureMatrix, params: &KMeansParams) -> Result<KMeansModel, ClusterError> {
    kmeans_rows(&x.rows_f64(), params)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    sq_dist(a, b).sqrt()
}

/// Mean silhouette coefficient under Euclidean distance. Singleton clusters
/// contribute 0, and so does any sample with `a = b = 0`.
pub fn silhouette_rows(rows: &[Vec<f64>], labels: &[usize]) -> Result<f64, ClusterError> {
    if rows.len() != labels.len() {
        return Err(ClusterError::InvalidArgument(format!(
            "{} rows but {} labels",
            rows.len(),
            labels.len()
        )));
    }
    // Compact the label space so arbitrary label values work.
    let mut ids: Vec<usize> = labels.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() < 2 {
        return Err(ClusterError::SingleCluster);
    }
    let cluster: Vec<usize> = labels.iter().map(|l| ids.binary_search(l).expect("present")).collect();
    let k = ids.len();
    let mut sizes = vec![0usize; k];
    for &c in &cluster {
        sizes[c] += 1;
    }

    let total: f64 = (0..rows.len())
        .into_par_iter()
        .map(|i| {
            let own = cluster[i];
            if sizes[own] == 1 {
                return 0.0;
            }
            let mut sums = vec![0.0; k];
            for (j, r) in rows.iter().enumerate() {
                if j != i {
                    sums[cluster[j]] += dist(&rows[i], r);
                }
            }
            let a = sums[own] / (sizes[own] - 1) as f64;
            let b = (0..k)
                .filter(|&c| c != own)
                .map(|c| sums[c] / sizes[c] as f64)
                .fold(f64::INFINITY, f64::min);
            let m = a.max(b);
            if m == 0.0 {
                0.0
            } else {
                (b - a) / m
            }
        })
        .sum();
    Ok(total / rows.len() as f64)
}

pub fn silhouette_mean(x: &FeatureMatrix, labels: &[usize]) -> Result<f64, ClusterError> {
    silhouette_rows(&x.rows_f64(), labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SilhouetteReport {
    /// Keys are cluster counts rendered as strings so the JSON reads `{"4": ...}`.
    pub per_k: BTreeMap<String, f64>,
    pub best_k: usize,
}

impl SilhouetteReport {
    pub fn score(&self, k: usize) -> Option<f64> {
        self.per_k.get(&k.to_string()).copied()
    }

    /// `(k, score)` in ascending k.
    pub fn entries(&self) -> Vec<(usize, f64)> {
        let mut v: Vec<(usize, f64)> = self
            .per_k
            .iter()
            .map(|(k, s)| (k.parse().expect("numeric key"), *s))
            .collect();
        v.sort_by_key(|e| e.0);
        v
    }
}

/// Fits k-means for every k in `k_min..=k_max` and scores each by mean
/// silhouette. Ties for the best score go to the smaller k.
pub fn k_sweep_rows(
    rows: &[Vec<f64>],
    k_min: usize,
    k_max: usize,
    seed: u64,
) -> Result<SilhouetteReport, ClusterError> {
    if k_min < 2 || k_max < k_min {
        return Err(ClusterError::InvalidArgument(format!(
            "need 2 <= k_min <= k_max, got {k_min}..={k_max}"
        )));
    }
    if rows.len() < k_max {
        return Err(ClusterError::TooFewSamples {
            needed: k_max,
            got: rows.len(),
        });
    }
    let scores = (k_min..=k_max)
        .into_par_iter()
        .map(|k| {
            let model = kmeans_rows(rows, &KMeansParams::new(k, seed))?;
            Ok((k, silhouette_rows(rows, &model.labels)?))
        })
        .collect::<Result<Vec<_>, ClusterError>>()?;
    let mut best = scores[0];
    for &(k, s) in &scores[1..] {
        if s > best.1 {
            best = (k, s);
        }
    }
    Ok(SilhouetteReport {
        per_k: scores.iter().map(|(k, s)| (k.to_string(), *s)).collect(),
        best_k: best.0,
    })
}

pub fn k_sweep(x: &FeatureMatrix, k_min: usize, k_max: usize, seed: u64) -> Result<SilhouetteReport, ClusterError> {
    k_sweep_rows(&x.rows_f64(), k_min, k_max, seed)
}
