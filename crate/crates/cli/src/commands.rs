use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, ensure, Context, Result};
use fruitgrader::cascade::{train_cascade_with_report, CascadeModel, CascadeTrainConfig, TrainingSize};
use fruitgrader::dataset::{
    balanced_subsample, load_classification_tree, load_detection_csv, split_dataset, AugmentationSpec,
    ClassificationSample, SplitManifest,
};
use fruitgrader::eval::{confusion_matrix, detection_pr, ClassificationReport};
use fruitgrader::imaging::{crop, decode_image_auto, read_image};
use fruitgrader::nn::{build_named, Schedule, Trainer};
use fruitgrader::pipeline::container::{load_network, save_network};
use fruitgrader::pipeline::{load_pipeline, save_pipeline};
use fruitgrader::{GradeOptions, Image, Network, PipelineModel, TrainConfig};
use log::{info, warn};

use crate::api::{self, AppState, GradeResponse, ModelSet};
use crate::server::{self, RouterOptions};
use crate::store::{image_id, ImageStore};
use crate::{
    Arch, Augment, BundleArgs, Command, EvaluateArgs, GcArgs, GradeArgs, Part, PrepareArgs, ServeArgs,
    TrainClassifierArgs, TrainDetectorArgs,
};

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::Prepare(a) => prepare(a),
        Command::TrainClassifier(a) => train_classifier(a),
        Command::TrainDetector(a) => train_detector(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Grade(a) => grade(a),
        Command::Bundle(a) => bundle(a),
        Command::Serve(a) => serve(a),
        Command::Gc(a) => gc(a),
    }
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn csv_image_dir(csv: &Path, images: Option<&PathBuf>) -> PathBuf {
    images.cloned().unwrap_or_else(|| csv.parent().map(Path::to_path_buf).unwrap_or_default())
}

fn prepare(a: PrepareArgs) -> Result<()> {
    let fractions = a.fractions;
    let manifest = match (&a.data, &a.csv) {
        (Some(root), _) => {
            let (mut samples, _) = load_classification_tree(root)?;
            if let Some(n) = a.per_class {
                samples = balanced_subsample(&samples, n, a.seed)?;
            }
            split_dataset(&samples, fractions, a.seed)?.manifest()
        }
        (None, Some(csv)) => {
            let samples = load_detection_csv(csv, &csv_image_dir(csv, a.images.as_ref()))?;
            split_dataset(&samples, fractions, a.seed)?.manifest()
        }
        (None, None) => bail!("one of --data or --csv is required"),
    };
    info!("split: {} train, {} valid, {} test", manifest.train.len(), manifest.valid.len(), manifest.test.len());
    write_json(&manifest, &a.out)
}

fn read_manifest(path: &Path) -> Result<SplitManifest> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Samples of a manifest part; the class is the name of the parent directory.
fn manifest_samples(m: &SplitManifest, paths: &[String]) -> Result<Vec<ClassificationSample>> {
    paths
        .iter()
        .map(|p| {
            let class_name = Path::new(p)
                .parent()
                .and_then(|d| d.file_name())
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            let class_id = m
                .class_names
                .iter()
                .position(|c| *c == class_name)
                .with_context(|| format!("{p}: class {class_name:?} is not in the manifest"))?;
            Ok(ClassificationSample { image_path: p.clone(), class_id, class_name })
        })
        .collect()
}

fn load_images(samples: &[ClassificationSample]) -> Result<(Vec<Image>, Vec<usize>)> {
    let images = samples
        .iter()
        .map(|s| read_image(Path::new(&s.image_path)).with_context(|| format!("reading {}", s.image_path)))
        .collect::<Result<Vec<_>>>()?;
    Ok((images, samples.iter().map(|s| s.class_id).collect()))
}

fn check_arch(net: &Network, arch: Option<Arch>) -> Result<()> {
    if let Some(arch) = arch {
        let name = &net.spec().name;
        ensure!(name == arch.spec_name(), "network architecture is {name}, not {}", arch.spec_name());
    }
    Ok(())
}

fn train_classifier(a: TrainClassifierArgs) -> Result<()> {
    let (train, valid, class_names) = match (&a.data, &a.split) {
        (Some(root), _) => {
            ensure!((0.0..1.0).contains(&a.valid_frac), "--valid-frac must be in [0, 1)");
            let (samples, names) = load_classification_tree(root)?;
            let s = split_dataset(&samples, [1.0 - a.valid_frac, a.valid_frac, 0.0], a.seed)?;
            (s.train, s.valid, names)
        }
        (None, Some(path)) => {
            let m = read_manifest(path)?;
            (manifest_samples(&m, &m.train)?, manifest_samples(&m, &m.valid)?, m.class_names.clone())
        }
        (None, None) => bail!("one of --data or --split is required"),
    };
    if let Some(k) = a.classes {
        ensure!(k == class_names.len(), "--classes {k} but the data has {} classes {class_names:?}", class_names.len());
    }
    let net = match &a.pretrained {
        Some(path) => {
            let net: Network = load_network(path).with_context(|| format!("loading {}", path.display()))?;
            if a.arch != Arch::MiniResnet || a.input.is_some() {
                warn!("--arch and --input are taken from the pretrained network");
            }
            if net.class_names() == class_names.as_slice() {
                net
            } else {
                info!("replacing the {}-class head with {} classes", net.num_classes(), class_names.len());
                net.replace_head(class_names.clone(), a.seed)?
            }
        }
        None => {
            let side = a.input.unwrap_or(a.arch.default_input());
            let spec = build_named(a.arch.spec_name(), (3, side, side), class_names.len())?;
            Network::new(spec, class_names.clone(), a.seed)?
        }
    };
    let schedule = match (a.drop_factor, a.drop_period) {
        (Some(drop_factor), Some(drop_period)) => Schedule::Piecewise { drop_period, drop_factor },
        _ => Schedule::None,
    };
    let config = TrainConfig {
        initial_learn_rate: a.lr,
        momentum: a.momentum,
        mini_batch_size: a.batch,
        max_epochs: a.epochs,
        schedule,
        l2_regularization: a.l2,
        shuffle_seed: a.seed,
        validation_every: a.valid_every,
        ..TrainConfig::default()
    };
    let (train_x, train_y) = load_images(&train)?;
    let (valid_x, valid_y) = load_images(&valid)?;
    info!("training {} on {} images, validating on {}", net.spec().name, train_x.len(), valid_x.len());
    let mut trainer = Trainer::new(net, config, (&train_x, &train_y), (&valid_x, &valid_y))?;
    let augmentation = match a.augment {
        Augment::None => None,
        Augment::Ripeness => Some(AugmentationSpec::ripeness()),
        Augment::Disease => Some(AugmentationSpec::disease()),
    };
    if let Some(spec) = augmentation {
        trainer = trainer.with_augmentation(spec, a.seed)?;
    }
    while !trainer.is_finished() {
        let r = trainer.run_epoch()?;
        let valid = r.valid_acc.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        info!("epoch {} lr {:e} loss {:.4} train {:.4} valid {valid}", r.epoch, r.lr, r.train_loss, r.train_acc);
    }
    let (net, history) = trainer.finish();
    save_network(&net, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    if let Some(path) = &a.history {
        fs::write(path, history.to_csv()).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn images_in(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && matches!(
                    p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
                    Some("png" | "ppm")
                )
        })
        .collect();
    files.sort();
    Ok(files)
}

fn read_all(paths: &[PathBuf]) -> Result<Vec<Image>> {
    paths
        .iter()
        .map(|p| read_image(p).with_context(|| format!("reading {}", p.display())))
        .collect()
}

fn train_detector(a: TrainDetectorArgs) -> Result<()> {
    let positives = if a.positives.is_dir() {
        read_all(&images_in(&a.positives)?)?
    } else {
        let samples = load_detection_csv(&a.positives, &csv_image_dir(&a.positives, a.images.as_ref()))?;
        let mut crops = Vec::new();
        for s in &samples {
            let img: Image = read_image(Path::new(&s.image_path))?;
            for b in s.boxes_of(&a.class) {
                crops.push(crop(&img, b)?);
            }
        }
        crops
    };
    let negatives = read_all(&images_in(&a.negatives)?)?;
    ensure!(!positives.is_empty(), "no positive images found in {}", a.positives.display());
    ensure!(!negatives.is_empty(), "no negative images found in {}", a.negatives.display());
    let window: TrainingSize = a.window.parse()?;
    let config = CascadeTrainConfig {
        false_alarm_rate: a.far,
        num_cascade_stages: a.stages,
        object_training_size: window,
        per_stage_tpr_floor: a.tpr_floor,
        max_stumps_per_stage: a.max_stumps,
        feature_budget: a.features,
        seed: a.seed,
        negatives_per_stage: a.negatives_per_stage,
    };
    info!("training cascade on {} positives and {} negative images", positives.len(), negatives.len());
    let (model, report) = train_cascade_with_report(&positives, &negatives, &config)?;
    for (i, s) in report.stages.iter().enumerate() {
        info!(
            "stage {}: {} stumps, far {:.4}, tpr {:.4}{}",
            i + 1,
            s.stumps,
            s.trained_far,
            s.trained_tpr,
            if s.reached_target { "" } else { " (target not reached)" }
        );
    }
    if let Some(reason) = &report.stopped_early {
        warn!("stopped early: {reason}");
    }
    fs::write(&a.out, model.to_json()?).with_context(|| format!("writing {}", a.out.display()))?;
    if let Some(path) = &a.report {
        write_json(&report, path)?;
    }
    Ok(())
}

fn load_detector(path: &Path) -> Result<CascadeModel> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    CascadeModel::from_json(&text).with_context(|| format!("loading {}", path.display()))
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    if let Some(det) = &a.detector {
        return evaluate_detector(&a, det);
    }
    let Some(model_path) = &a.model else { bail!("one of --model or --detector is required") };
    let net: Network = match a.kind {
        Some(kind) => {
            let p: PipelineModel = load_pipeline(model_path)?;
            p.classifier(kind).clone()
        }
        None => load_network(model_path).with_context(|| format!("loading {}", model_path.display()))?,
    };
    check_arch(&net, a.arch)?;
    let samples = match (&a.data, &a.split) {
        (Some(root), _) => load_classification_tree(root)?.0,
        (None, Some(path)) => {
            let m = read_manifest(path)?;
            let part = match a.part {
                Part::Train => &m.train,
                Part::Valid => &m.valid,
                Part::Test => &m.test,
            };
            manifest_samples(&m, part)?
        }
        (None, None) => bail!("one of --data or --split is required"),
    };
    ensure!(!samples.is_empty(), "no images to evaluate");
    let truths = truth_ids(&samples, net.class_names())?;
    let (images, _) = load_images(&samples)?;
    let preds: Vec<usize> = net.predict_many(&images, a.batch)?.into_iter().map(|p| p.class_id).collect();
    let cm = confusion_matrix(&truths, &preds, net.num_classes())?.with_names(net.class_names().to_vec())?;
    let report = ClassificationReport::new(&cm)?;
    let text = report.to_text();
    print!("{text}");
    if let Some(dir) = &a.out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("confusion.txt"), &text)?;
        fs::write(dir.join("confusion.csv"), cm.to_csv())?;
        fs::write(dir.join("report.json"), report.to_json() + "\n")?;
    }
    Ok(())
}

/// Maps data classes onto network outputs by name, or by position when the
/// names differ but the counts agree.
fn truth_ids(samples: &[ClassificationSample], net_names: &[String]) -> Result<Vec<usize>> {
    let by_name: Option<Vec<usize>> =
        samples.iter().map(|s| net_names.iter().position(|n| *n == s.class_name)).collect();
    if let Some(ids) = by_name {
        return Ok(ids);
    }
    let max = samples.iter().map(|s| s.class_id).max().unwrap_or(0);
    ensure!(max < net_names.len(), "data has more classes than the network's {net_names:?}");
    warn!("data class names differ from the network's {net_names:?}; matching by position");
    Ok(samples.iter().map(|s| s.class_id).collect())
}

fn evaluate_detector(a: &EvaluateArgs, det: &Path) -> Result<()> {
    let model = load_detector(det)?;
    let Some(csv) = &a.csv else { bail!("--detector needs --csv") };
    let samples = load_detection_csv(csv, &csv_image_dir(csv, a.images.as_ref()))?;
    let scan = GradeOptions::default().scan;
    let mut dets = Vec::with_capacity(samples.len());
    let mut gts = Vec::with_capacity(samples.len());
    for s in &samples {
        let img: Image = read_image(Path::new(&s.image_path))?;
        dets.push(fruitgrader::cascade::detect(&model, &img, &scan)?);
        gts.push(s.boxes_of(&a.class).copied().collect::<Vec<_>>());
    }
    let pr = detection_pr(&dets, &gts, a.iou)?;
    println!(
        "precision {:.4} recall {:.4} (tp {} fp {} fn {}) at IoU {}",
        pr.precision, pr.recall, pr.true_positives, pr.false_positives, pr.false_negatives, a.iou
    );
    if let Some(dir) = &a.out_dir {
        fs::create_dir_all(dir)?;
        write_json(&pr, &dir.join("detection.json"))?;
    }
    Ok(())
}

/// Grades one encoded image; the id is the SHA-256 of the file bytes.
pub fn grade_bytes(model: &PipelineModel, bytes: &[u8], force_disease: bool) -> Result<GradeResponse> {
    let image: Image = decode_image_auto(bytes)?;
    let options = GradeOptions { force_disease, ..GradeOptions::default() };
    let reports = model.grade_image(&image, &options)?;
    Ok(GradeResponse::from_reports(image_id(bytes), &reports, model))
}

fn grade(a: GradeArgs) -> Result<()> {
    let model: PipelineModel = load_pipeline(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let results = a
        .images
        .iter()
        .map(|p| {
            let bytes = fs::read(p).with_context(|| format!("reading {}", p.display()))?;
            grade_bytes(&model, &bytes, a.force_disease).with_context(|| format!("grading {}", p.display()))
        })
        .collect::<Result<Vec<_>>>()?;
    match &a.out {
        Some(path) => write_json(&results, path),
        None => {
            println!("{}", serde_json::to_string_pretty(&results)?);
            Ok(())
        }
    }
}

fn bundle(a: BundleArgs) -> Result<()> {
    let detector = load_detector(&a.detector)?;
    let ripeness: Network = load_network(&a.ripeness).with_context(|| format!("loading {}", a.ripeness.display()))?;
    let disease: Network = load_network(&a.disease).with_context(|| format!("loading {}", a.disease.display()))?;
    let mut model = PipelineModel::new(detector, ripeness, disease)?;
    if !a.triggers.is_empty() {
        model = model.with_trigger(a.triggers.clone())?;
    }
    model.crop_padding = a.padding;
    model.validate()?;
    save_pipeline(&model, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let models = if a.models.is_dir() {
        ModelSet::load_dir(&a.models)?
    } else {
        warn!("model directory {} not found; model endpoints will answer 503", a.models.display());
        ModelSet::empty()
    };
    let store = ImageStore::open(&a.store).with_context(|| format!("opening store {}", a.store.display()))?;
    let state = Arc::new(AppState::new(store, models, a.max_upload));
    let summary = api::handle_models(&state);
    info!(
        "models: detector {}, ripeness {}, disease {}",
        summary.detector.is_some(),
        summary.ripeness.is_some(),
        summary.disease.is_some()
    );
    let options = RouterOptions { ui_origin: a.ui_origin, ui_dir: a.ui_dir };
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(server::serve(state, options, (a.host, a.port).into()))
}

fn gc(a: GcArgs) -> Result<()> {
    let store = ImageStore::open(&a.store)?;
    let removed = store.prune(Duration::from_secs(a.older_than))?;
    info!("removed {removed} stored images");
    Ok(())
}
