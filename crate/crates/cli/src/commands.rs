use std::collections::HashMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use foodlens::augment::generate_variants;
use foodlens::clusterval::k_sweep;
use foodlens::convnet::{extract_features, load_features, load_weight_bundle, save_features, tiny, vgg16_64};
use foodlens::learners::{
    gbdt_train, load_model, mlp_train, save_model, svm_train, GbdtParams, MlpParams, OutputMode, SvmParams,
};
use foodlens::pipeline::synth::{apply_label_noise, generate_corpus, write_corpus, CLASS_COUNT};
use foodlens::pipeline::{grid_search_c, run_experiment, split_indices, Datasets};
use foodlens::pixelio::{load_manifest, read_image, write_manifest, write_png, NormalizationMode, Sample};
use foodlens::{
    accuracy, AugmentationPlan, DatasetManifest, ExperimentConfig, FeatureMatrix, KernelSpec, Model, NormalizationSpec,
    SavedModel, SplitSpec, Standardizer,
};
use serde_json::json;

use crate::{
    AugmentArgs, ClusterSweepArgs, EvaluateArgs, ExperimentArgs, IngestArgs, KernelArg, ModelKind, NormArg, OutputArg,
    PresetArg, SplitArgs, SynthArgs, TrainArgs,
};

fn parent_dir(path: &Path) -> &Path {
    path.parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

/// Row indices used for fitting and for scoring.
fn split_rows(fm: &FeatureMatrix, args: &SplitArgs, all_rows: bool) -> Result<(Vec<usize>, Vec<usize>)> {
    if all_rows {
        let all: Vec<usize> = (0..fm.n()).collect();
        return Ok((all.clone(), all));
    }
    Ok(split_indices(fm.labels(), &SplitSpec::new(args.split, args.seed))?)
}

fn gather(fm: &FeatureMatrix, idx: &[usize]) -> (Vec<Vec<f64>>, Vec<usize>) {
    let sub = fm.select(idx);
    (sub.rows_f64(), sub.labels().to_vec())
}

pub fn ingest(args: IngestArgs) -> Result<()> {
    let manifest = load_manifest(&args.manifest)?;
    let bundle = match (&args.weights, args.preset) {
        (Some(path), _) => load_weight_bundle(path)?,
        (None, Some(PresetArg::Tiny)) => tiny(args.preset_seed),
        (None, Some(PresetArg::Vgg16_64)) => vgg16_64(args.preset_seed),
        (None, None) => bail!("either --weights or --preset is required"),
    };
    let norm = match args.norm {
        None => bundle.normalization(),
        Some(NormArg::Unit) => NormalizationSpec::unit(),
        Some(NormArg::Mean) => {
            let own = bundle.normalization();
            if own.mode == NormalizationMode::MeanSubtract {
                own
            } else {
                NormalizationSpec::imagenet()
            }
        }
    };
    let fm = extract_features(&manifest, parent_dir(&args.manifest), &bundle, &norm)?
        .with_provenance(args.manifest.display().to_string(), args.preset_seed);
    save_features(&fm, &args.out)?;
    println!("{} rows × {} features -> {}", fm.n(), fm.d(), args.out.display());
    Ok(())
}

pub fn augment(args: AugmentArgs) -> Result<()> {
    let manifest = load_manifest(&args.manifest)?;
    let base = parent_dir(&args.manifest);
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let plan = AugmentationPlan::default();
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut samples = Vec::with_capacity(manifest.len() * plan.specs().len());
    for sample in &manifest.samples {
        let path = manifest.resolve_path(base, sample);
        let img = read_image(&path)?;
        let raw_stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "image".into());
        let uses = seen.entry(raw_stem.clone()).or_insert(0);
        *uses += 1;
        let stem = if *uses == 1 {
            raw_stem
        } else {
            format!("{raw_stem}-{uses}")
        };
        for (j, variant) in generate_variants(&img, &plan, args.seed).iter().enumerate() {
            let name = format!("{stem}_a{j:02}.png");
            write_png(variant, &args.out.join(&name))?;
            samples.push(Sample {
                path: name,
                label: sample.label,
            });
        }
    }
    let out_manifest = DatasetManifest::new(manifest.class_names.clone(), samples)?;
    write_manifest(&out_manifest, &args.out.join("manifest.json"))?;
    println!(
        "{} images -> {} variants in {}",
        manifest.len(),
        out_manifest.len(),
        args.out.display()
    );
    Ok(())
}

pub fn cluster_sweep(args: ClusterSweepArgs) -> Result<()> {
    let fm = load_features(&args.features)?;
    let report = k_sweep(&fm, args.kmin, args.kmax, args.seed)?;
    for (k, score) in report.entries() {
        let mark = if k == report.best_k { "  <- best" } else { "" };
        println!("k={k:<3} silhouette={score:.4}{mark}");
    }
    write_json(&args.out, &report)
}

pub fn train(args: TrainArgs) -> Result<()> {
    let fm = load_features(&args.features)?;
    let (train_idx, _) = split_rows(&fm, &args.split, args.all_rows)?;
    let (mut x, y) = gather(&fm, &train_idx);
    let standardizer = (!args.no_standardize).then(|| Standardizer::fit(&x));
    if let Some(s) = &standardizer {
        s.apply(&mut x);
    }
    let n_classes = fm.num_classes();
    let model = match args.model {
        ModelKind::Svm => {
            let kernel = match (args.kernel, args.sigma) {
                (KernelArg::Linear, _) => KernelSpec::Linear,
                (KernelArg::Rbf, Some(sigma)) => KernelSpec::rbf(sigma)?,
                (KernelArg::Rbf, None) => KernelSpec::rbf_scaled(&x),
            };
            let c = match &args.c_grid {
                Some(grid) => {
                    let found = grid_search_c(&x, &y, n_classes, kernel, grid, args.folds, args.split.seed)?;
                    for (c, acc) in &found.per_c {
                        println!("C={c:<8} cv accuracy={:.2}%", acc * 100.0);
                    }
                    found.best_c
                }
                None => args.c,
            };
            Model::Svm(svm_train(&x, &y, n_classes, &SvmParams::new(c, kernel))?)
        }
        ModelKind::Gbdt => {
            let params = GbdtParams {
                rounds: args.rounds,
                learning_rate: args.learning_rate.unwrap_or(0.1),
                max_depth: args.max_depth,
                lambda: args.lambda,
                gamma: args.gamma,
                seed: args.model_seed,
            };
            Model::Gbdt(gbdt_train(&x, &y, n_classes, &params)?)
        }
        ModelKind::Mlp => {
            if args.hidden.len() != 2 || args.dropout.len() != 2 {
                bail!("--hidden and --dropout each take exactly two comma-separated values");
            }
            let params = MlpParams {
                hidden: [args.hidden[0], args.hidden[1]],
                dropout: [args.dropout[0], args.dropout[1]],
                epochs: args.epochs,
                batch_size: args.batch_size,
                learning_rate: args.learning_rate.unwrap_or(0.05),
                seed: args.model_seed,
                output: match args.output {
                    OutputArg::Softmax => OutputMode::Softmax,
                    OutputArg::ReluRegression => OutputMode::ReluRegression,
                },
            };
            Model::Mlp(mlp_train(&x, &y, n_classes, &params)?)
        }
    };
    let train_acc = accuracy(&model.predict(&x)?, &y)?;
    save_model(&args.out, &SavedModel::new(model, standardizer))?;
    println!(
        "trained {} on {} rows, training accuracy {:.2}% -> {}",
        args.model.name(),
        train_idx.len(),
        train_acc * 100.0,
        args.out.display()
    );
    Ok(())
}

pub fn evaluate(args: EvaluateArgs) -> Result<()> {
    let fm = load_features(&args.features)?;
    let saved = load_model(&args.model)?;
    let (_, test_idx) = split_rows(&fm, &args.split, args.all_rows)?;
    let (x, y) = gather(&fm, &test_idx);
    let acc = accuracy(&saved.predict(&x)?, &y)?;
    let result = json!({
        "model": saved.model.kind(),
        "rows": y.len(),
        "accuracy": acc,
    });
    println!("{result}");
    if let Some(out) = &args.out {
        write_json(out, &result)?;
    }
    Ok(())
}

pub fn experiment(args: ExperimentArgs) -> Result<()> {
    let text = fs::read_to_string(&args.config).with_context(|| format!("reading {}", args.config.display()))?;
    let config: ExperimentConfig =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", args.config.display()))?;
    let data = Datasets::load(&config, parent_dir(&args.config))?;
    let report = run_experiment(&data, &config)?;
    print!("{report}");
    write_json(&args.out, &report)
}

pub fn synth(args: SynthArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&args.label_noise) {
        bail!("--label-noise must lie in [0, 1], got {}", args.label_noise);
    }
    if args.per_class == 0 || args.size == 0 {
        bail!("--per-class and --size must be at least 1");
    }
    let corpus = generate_corpus(args.per_class, args.size, args.seed);
    let labels = if args.label_noise > 0.0 {
        apply_label_noise(&corpus.labels, CLASS_COUNT, args.label_noise, args.seed)
    } else {
        corpus.labels.clone()
    };
    let manifest = write_corpus(&corpus.images, &labels, &corpus.classes, &args.out)?;
    println!(
        "{} images in {} classes -> {}",
        manifest.len(),
        CLASS_COUNT,
        args.out.display()
    );
    Ok(())
}

impl ModelKind {
    fn name(self) -> &'static str {
        match self {
            ModelKind::Svm => "svm",
            ModelKind::Gbdt => "gbdt",
            ModelKind::Mlp => "mlp",
        }
    }
}
