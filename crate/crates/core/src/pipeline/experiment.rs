use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::search::{grid_search_c, GridSearchResult};
use super::split::{split_indices, SplitSpec};
use super::{accuracy, PipelineError, Standardizer};
use crate::convnet::{extract_features, load_features, load_weight_bundle, tiny, vgg16_64, FeatureMatrix};
use crate::learners::{gbdt_train, mlp_train, svm_train, GbdtParams, KernelSpec, MlpParams, SvmParams};
use crate::pixelio::{load_manifest, NormalizationSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetVariant {
    Original,
    Augmented,
    Mixed,
}

impl DatasetVariant {
    pub const ALL: [DatasetVariant; 3] = [
        DatasetVariant::Original,
        DatasetVariant::Augmented,
        DatasetVariant::Mixed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DatasetVariant::Original => "original",
            DatasetVariant::Augmented => "augmented",
            DatasetVariant::Mixed => "mixed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classifier {
    Mlp,
    Gbdt,
    Svm,
}

impl Classifier {
    pub const ALL: [Classifier; 3] = [Classifier::Mlp, Classifier::Gbdt, Classifier::Svm];

    pub fn name(self) -> &'static str {
        match self {
            Classifier::Mlp => "mlp",
            Classifier::Gbdt => "gbdt",
            Classifier::Svm => "svm",
        }
    }
}

/// Where one dataset's features come from. Exactly one of `features` and
/// `manifest` must be set; a manifest also needs `weights` or `preset`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSource {
    pub features: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    /// `"tiny"` or `"vgg16_64"`, built from `preset_seed`.
    pub preset: Option<String>,
    pub preset_seed: u64,
}

/// SVM settings. When `grid` is present, C is chosen by k-fold search on the
/// training split and `c` is ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvmConfig {
    pub c: f64,
    /// `None` means RBF with the variance-scaled width.
    pub kernel: Option<KernelSpec>,
    pub grid: Option<Vec<f64>>,
    pub folds: usize,
    pub tol: f64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self {
            c: 10.0,
            kernel: None,
            grid: None,
            folds: 5,
            tol: 1e-3,
        }
    }
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub original: DataSource,
    pub augmented: DataSource,
    /// Defaults to original rows followed by augmented rows.
    #[serde(default)]
    pub mixed: Option<DataSource>,
    #[serde(default)]
    pub split: SplitSpec,
    /// z-score every column using training-split statistics.
    #[serde(default = "yes")]
    pub standardize: bool,
    #[serde(default)]
    pub svm: SvmConfig,
    #[serde(default)]
    pub gbdt: GbdtParams,
    #[serde(default)]
    pub mlp: MlpParams,
    /// Run the nine cells concurrently.
    #[serde(default = "yes")]
    pub parallel: bool,
}

impl ExperimentConfig {
    pub fn new(split: SplitSpec) -> Self {
        Self {
            original: DataSource::default(),
            augmented: DataSource::default(),
            mixed: None,
            split,
            standardize: true,
            svm: SvmConfig::default(),
            gbdt: GbdtParams::default(),
            mlp: MlpParams::default(),
            parallel: true,
        }
    }
}

pub struct Datasets {
    pub original: FeatureMatrix,
    pub augmented: FeatureMatrix,
    pub mixed: FeatureMatrix,
    /// Pixel normalization used to extract each dataset, in `DatasetVariant::ALL`
    /// order. `None` when the features were read precomputed.
    pub normalization: [Option<NormalizationSpec>; 3],
}

impl Datasets {
    /// `mixed` defaults to `original` stacked on `augmented`.
    pub fn new(
        original: FeatureMatrix,
        augmented: FeatureMatrix,
        mixed: Option<FeatureMatrix>,
    ) -> Result<Self, PipelineError> {
        let mixed = match mixed {
            Some(m) => m,
            None => original.concat(&augmented)?,
        };
        for (name, m) in [("augmented", &augmented), ("mixed", &mixed)] {
            if m.d() != original.d() {
                return Err(PipelineError::InvalidConfig(format!(
                    "{name} features have width {}, original has {}",
                    m.d(),
                    original.d()
                )));
            }
            if m.classes() != original.classes() {
                return Err(PipelineError::InvalidConfig(format!(
                    "{name} class list differs from original"
                )));
            }
        }
        Ok(Self {
            original,
            augmented,
            mixed,
            normalization: [None; 3],
        })
    }

    pub fn get(&self, v: DatasetVariant) -> &FeatureMatrix {
        match v {
            DatasetVariant::Original => &self.original,
            DatasetVariant::Augmented => &self.augmented,
            DatasetVariant::Mixed => &self.mixed,
        }
    }

    /// Loads every source named in `config`; relative paths resolve against `base_dir`.
    pub fn load(config: &ExperimentConfig, base_dir: &Path) -> Result<Self, PipelineError> {
        let load = |v: DatasetVariant, src: &DataSource| {
            load_dataset(src, base_dir).map_err(|e| PipelineError::Dataset {
                dataset: v.name().into(),
                source: Box::new(e),
            })
        };
        let (original, norm_o) = load(DatasetVariant::Original, &config.original)?;
        let (augmented, norm_a) = load(DatasetVariant::Augmented, &config.augmented)?;
        let (mixed, norm_m) = match &config.mixed {
            Some(m) => {
                let (fm, norm) = load(DatasetVariant::Mixed, m)?;
                (Some(fm), norm)
            }
            None if norm_o == norm_a => (None, norm_o),
            None => (None, None),
        };
        let mut data = Self::new(original, augmented, mixed)?;
        data.normalization = [norm_o, norm_a, norm_m];
        Ok(data)
    }
}

/// Reads or extracts one dataset. The normalization is reported only when
/// features are extracted here from a manifest.
pub fn load_dataset(
    src: &DataSource,
    base_dir: &Path,
) -> Result<(FeatureMatrix, Option<NormalizationSpec>), PipelineError> {
    let resolve = |p: &Path| {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base_dir.join(p)
        }
    };
    match (&src.features, &src.manifest) {
        (Some(f), None) => Ok((load_features(&resolve(f))?, None)),
        (None, Some(m)) => {
            let manifest_path = resolve(m);
            let manifest = load_manifest(&manifest_path)?;
            let bundle = match (&src.weights, src.preset.as_deref()) {
                (Some(w), None) => load_weight_bundle(&resolve(w))?,
                (None, Some("tiny")) => tiny(src.preset_seed),
                (None, Some("vgg16_64")) => vgg16_64(src.preset_seed),
                (None, Some(other)) => {
                    return Err(PipelineError::InvalidConfig(format!("unknown preset {other:?}")));
                }
                _ => {
                    return Err(PipelineError::InvalidConfig(
                        "a manifest source needs exactly one of \"weights\" or \"preset\"".into(),
                    ))
                }
            };
            let manifest_dir = manifest_path.parent().unwrap_or(Path::new("."));
            let norm = bundle.normalization();
            let fm = extract_features(&manifest, manifest_dir, &bundle, &norm)?;
            Ok((
                fm.with_provenance(manifest_path.display().to_string(), src.preset_seed),
                Some(norm),
            ))
        }
        _ => Err(PipelineError::InvalidConfig(
            "each dataset needs exactly one of \"features\" or \"manifest\"".into(),
        )),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub mlp: f64,
    pub gbdt: f64,
    pub svm: f64,
}

impl GridRow {
    pub fn get(&self, c: Classifier) -> f64 {
        match c {
            Classifier::Mlp => self.mlp,
            Classifier::Gbdt => self.gbdt,
            Classifier::Svm => self.svm,
        }
    }
}

/// Test accuracy by dataset (rows) and classifier (columns).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub original: GridRow,
    pub augmented: GridRow,
    pub mixed: GridRow,
}

impl Grid {
    pub fn row(&self, v: DatasetVariant) -> &GridRow {
        match v {
            DatasetVariant::Original => &self.original,
            DatasetVariant::Augmented => &self.augmented,
            DatasetVariant::Mixed => &self.mixed,
        }
    }

    pub fn get(&self, v: DatasetVariant, c: Classifier) -> f64 {
        self.row(v).get(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub rows: usize,
    pub train_rows: usize,
    pub test_rows: usize,
    pub source: String,
    pub seed: u64,
    pub normalization: Option<NormalizationSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub dataset: DatasetVariant,
    pub classifier: Classifier,
    pub accuracy: f64,
    pub train_seconds: f64,
    pub total_seconds: f64,
    /// Choices resolved while training this cell (kernel width, chosen C, loss trace ends).
    pub details: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub grid: Grid,
    pub classes: Vec<String>,
    pub feature_dim: usize,
    pub datasets: DatasetSizes,
    pub split: SplitSpec,
    pub standardize: bool,
    pub svm: SvmConfig,
    pub gbdt: GbdtParams,
    pub mlp: MlpParams,
    pub cells: Vec<CellReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSizes {
    pub original: DatasetInfo,
    pub augmented: DatasetInfo,
    pub mixed: DatasetInfo,
}

impl ExperimentReport {
    /// Same report with every wall-clock field zeroed, for run-to-run comparison.
    pub fn without_timings(&self) -> Self {
        let mut r = self.clone();
        for c in &mut r.cells {
            c.train_seconds = 0.0;
            c.total_seconds = 0.0;
        }
        r
    }
}

impl fmt::Display for ExperimentReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<12}{:>9}{:>9}{:>9}", "", "MLP", "GBDT", "SVM")?;
        for v in DatasetVariant::ALL {
            let row = self.grid.row(v);
            let label = match v {
                DatasetVariant::Original => "Original",
                DatasetVariant::Augmented => "Augmented",
                DatasetVariant::Mixed => "Mixed",
            };
            writeln!(
                f,
                "{label:<12}{:>8.2}%{:>8.2}%{:>8.2}%",
                row.mlp * 100.0,
                row.gbdt * 100.0,
                row.svm * 100.0
            )?;
        }
        Ok(())
    }
}

struct PreparedSplit {
    train_x: Vec<Vec<f64>>,
    train_y: Vec<usize>,
    test_x: Vec<Vec<f64>>,
    test_y: Vec<usize>,
}

fn prepare(fm: &FeatureMatrix, config: &ExperimentConfig) -> Result<PreparedSplit, PipelineError> {
    let (train, test) = split_indices(fm.labels(), &config.split)?;
    let rows = fm.rows_f64();
    let pick = |idx: &[usize]| -> (Vec<Vec<f64>>, Vec<usize>) {
        (
            idx.iter().map(|&i| rows[i].clone()).collect(),
            idx.iter().map(|&i| fm.labels()[i]).collect(),
        )
    };
    let (mut train_x, train_y) = pick(&train);
    let (mut test_x, test_y) = pick(&test);
    if config.standardize {
        let s = Standardizer::fit(&train_x);
        s.apply(&mut train_x);
        s.apply(&mut test_x);
    }
    Ok(PreparedSplit {
        train_x,
        train_y,
        test_x,
        test_y,
    })
}

fn run_cell(
    data: &PreparedSplit,
    n_classes: usize,
    classifier: Classifier,
    config: &ExperimentConfig,
) -> Result<(f64, f64, Value), PipelineError> {
    let start = Instant::now();
    let (pred, details) = match classifier {
        Classifier::Svm => {
            let kernel = config
                .svm
                .kernel
                .unwrap_or_else(|| KernelSpec::rbf_scaled(&data.train_x));
            let search: Option<GridSearchResult> = match &config.svm.grid {
                Some(grid) => Some(grid_search_c(
                    &data.train_x,
                    &data.train_y,
                    n_classes,
                    kernel,
                    grid,
                    config.svm.folds,
                    config.split.seed,
                )?),
                None => None,
            };
            let c = search.as_ref().map_or(config.svm.c, |s| s.best_c);
            let mut params = SvmParams::new(c, kernel);
            params.tol = config.svm.tol;
            let model = svm_train(&data.train_x, &data.train_y, n_classes, &params)?;
            let details = json!({
                "c": c,
                "kernel": kernel,
                "grid_search": search,
                "support_vectors": model.support_vectors.len(),
                "converged": model.machines.iter().all(|m| m.converged),
            });
            (model.predict(&data.test_x)?, details)
        }
        Classifier::Gbdt => {
            let model = gbdt_train(&data.train_x, &data.train_y, n_classes, &config.gbdt)?;
            let details = json!({
                "initial_loss": model.loss_trace.first(),
                "final_loss": model.loss_trace.last(),
            });
            (model.predict(&data.test_x)?, details)
        }
        Classifier::Mlp => {
            let model = mlp_train(&data.train_x, &data.train_y, n_classes, &config.mlp)?;
            let details = json!({
                "output": config.mlp.output,
                "initial_loss": model.loss_trace.first(),
                "final_loss": model.loss_trace.last(),
            });
            (model.predict(&data.test_x)?, details)
        }
    };
    let train_seconds = start.elapsed().as_secs_f64();
    Ok((accuracy(&pred, &data.test_y)?, train_seconds, details))
}

/// Trains and scores every (dataset, classifier) pair. All three classifiers
/// of a dataset see the same split.
pub fn run_experiment(data: &Datasets, config: &ExperimentConfig) -> Result<ExperimentReport, PipelineError> {
    let prepared = DatasetVariant::ALL
        .iter()
        .map(|&v| {
            prepare(data.get(v), config).map_err(|e| PipelineError::Dataset {
                dataset: v.name().into(),
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let n_classes = data.original.num_classes();
    let jobs: Vec<(usize, Classifier)> = (0..3).flat_map(|v| Classifier::ALL.map(|c| (v, c))).collect();
    let job = |&(v, c): &(usize, Classifier)| {
        let start = Instant::now();
        run_cell(&prepared[v], n_classes, c, config)
            .map(|(accuracy, train_seconds, details)| CellReport {
                dataset: DatasetVariant::ALL[v],
                classifier: c,
                accuracy,
                train_seconds,
                total_seconds: start.elapsed().as_secs_f64(),
                details,
            })
            .map_err(|e| PipelineError::Cell {
                dataset: DatasetVariant::ALL[v].name().into(),
                classifier: c.name().into(),
                source: Box::new(e),
            })
    };
    let cells: Vec<CellReport> = if config.parallel {
        jobs.par_iter().map(job).collect::<Result<_, _>>()?
    } else {
        jobs.iter().map(job).collect::<Result<_, _>>()?
    };
    let row = |v: usize| GridRow {
        mlp: cells[3 * v].accuracy,
        gbdt: cells[3 * v + 1].accuracy,
        svm: cells[3 * v + 2].accuracy,
    };
    let info = |v: DatasetVariant, p: &PreparedSplit| {
        let fm = data.get(v);
        DatasetInfo {
            rows: fm.n(),
            train_rows: p.train_y.len(),
            test_rows: p.test_y.len(),
            source: fm.source.clone(),
            seed: fm.seed,
            normalization: data.normalization[v as usize],
        }
    };
    Ok(ExperimentReport {
        grid: Grid {
            original: row(0),
            augmented: row(1),
            mixed: row(2),
        },
        classes: data.original.classes().to_vec(),
        feature_dim: data.original.d(),
        datasets: DatasetSizes {
            original: info(DatasetVariant::Original, &prepared[0]),
            augmented: info(DatasetVariant::Augmented, &prepared[1]),
            mixed: info(DatasetVariant::Mixed, &prepared[2]),
        },
        split: config.split,
        standardize: config.standardize,
        svm: config.svm.clone(),
        gbdt: config.gbdt,
        mlp: config.mlp,
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(n_per: usize, spread: f32, seed: u32) -> FeatureMatrix {
        let mut values = Vec::new();
        let mut labels = Vec::new();
        for c in 0..3 {
            for i in 0..n_per {
                let h = (i as u32).wrapping_mul(2654435761).wrapping_add(seed) as f32 / u32::MAX as f32;
                values.extend_from_slice(&[c as f32 * 4.0 + spread * (h - 0.5), spread * (0.5 - h) + c as f32]);
                labels.push(c);
            }
        }
        FeatureMatrix::new(2, values, labels, vec!["a".into(), "b".into(), "c".into()]).unwrap()
    }

    fn small_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::new(SplitSpec::new(0.2, 5));
        cfg.gbdt.rounds = 10;
        cfg.mlp = MlpParams {
            hidden: [8, 8],
            epochs: 30,
            batch_size: 8,
            learning_rate: 0.1,
            ..MlpParams::default()
        };
        cfg
    }

    #[test]
    fn grid_is_complete_and_deterministic() {
        let data = Datasets::new(blobs(10, 1.0, 1), blobs(20, 1.0, 2), None).unwrap();
        assert_eq!(data.mixed.n(), 30 + 60);
        let cfg = small_config();
        let a = run_experiment(&data, &cfg).unwrap();
        assert_eq!(a.cells.len(), 9);
        for v in DatasetVariant::ALL {
            for c in Classifier::ALL {
                let acc = a.grid.get(v, c);
                assert!((0.0..=1.0).contains(&acc));
            }
        }
        assert_eq!(a.datasets.mixed.rows, 90);
        assert_eq!(a.datasets.augmented.test_rows, 12);
        let mut seq = cfg.clone();
        seq.parallel = false;
        let b = run_experiment(&data, &seq).unwrap();
        assert_eq!(a.without_timings(), b.without_timings());
        let text = serde_json::to_string(&a).unwrap();
        let grid_at = text.find("\"grid\"").unwrap();
        assert!(grid_at < text.find("\"cells\"").unwrap());
        assert!(text.find("\"original\"").unwrap() < text.find("\"augmented\"").unwrap());
    }

    #[test]
    fn errors_carry_cell_coordinates() {
        let data = Datasets::new(blobs(10, 1.0, 1), blobs(10, 1.0, 2), None).unwrap();
        let mut cfg = small_config();
        cfg.svm.c = -1.0;
        let err = run_experiment(&data, &cfg).unwrap_err();
        match &err {
            PipelineError::Cell { classifier, .. } => assert_eq!(classifier, "svm"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(err.root(), PipelineError::Learn(_)));
    }

    #[test]
    fn config_parsing() {
        let cfg: ExperimentConfig = serde_json::from_str(
            r#"{"original": {"features": "o.fmx"}, "augmented": {"manifest": "a.json", "preset": "tiny"},
                "split": {"test_fraction": 0.3, "seed": 9}, "svm": {"grid": [1, 10]}, "mlp": {"epochs": 3}}"#,
        )
        .unwrap();
        assert!(cfg.split.stratified);
        assert_eq!(cfg.mlp.epochs, 3);
        assert_eq!(cfg.mlp.hidden, [512, 128]);
        assert_eq!(cfg.svm.folds, 5);
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"original": {}, "augmented": {}, "bogus": 1}"#).is_err());
        let err = load_dataset(&DataSource::default(), Path::new(".")).unwrap_err();
        assert!(matches!(err, PipelineError::InvalidConfig(_)));
    }

    #[test]
    fn display_has_table_layout() {
        let data = Datasets::new(blobs(10, 1.0, 1), blobs(10, 1.0, 2), None).unwrap();
        let text = run_experiment(&data, &small_config()).unwrap().to_string();
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[0].contains("MLP") && lines[0].contains("SVM"));
        assert!(lines[1].starts_with("Original"));
        assert!(lines[3].starts_with("Mixed"));
    }

    #[test]
    fn manifest_sources_record_normalization() {
        use crate::pipeline::synth::{generate_corpus, write_corpus};
        let dir = tempfile::tempdir().unwrap();
        let corpus = generate_corpus(1, 12, 4);
        write_corpus(&corpus.images, &corpus.labels, &corpus.classes, &dir.path().join("a")).unwrap();
        let fm = blobs(4, 1.0, 0);
        crate::convnet::save_features(&fm, &dir.path().join("b.fmx")).unwrap();

        let src = DataSource {
            manifest: Some("a/manifest.json".into()),
            preset: Some("tiny".into()),
            ..DataSource::default()
        };
        let (loaded, norm) = load_dataset(&src, dir.path()).unwrap();
        assert_eq!((loaded.n(), loaded.d()), (10, 128));
        assert_eq!(norm, Some(NormalizationSpec::unit()));

        let mut config = ExperimentConfig::new(SplitSpec::default());
        config.original = src.clone();
        config.augmented = src;
        let data = Datasets::load(&config, dir.path()).unwrap();
        assert_eq!(data.normalization, [Some(NormalizationSpec::unit()); 3]);

        let (_, norm) = load_dataset(
            &DataSource {
                features: Some("b.fmx".into()),
                ..DataSource::default()
            },
            dir.path(),
        )
        .unwrap();
        assert_eq!(norm, None);
    }
}
