//! Acceptance suite. Prints one line per criterion and exits non-zero when
//! any criterion fails.
//!
//! The dataset check runs when these are set (each pair independently):
//! `FRUITGRADER_RIPENESS_DATA` + `FRUITGRADER_RIPENESS_WEIGHTS`,
//! `FRUITGRADER_DISEASE_DATA` + `FRUITGRADER_DISEASE_WEIGHTS`.
//! Reports go to `FRUITGRADER_REPORT_DIR` when set.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use fruitgrader::cascade::{classify_window, detect, train_cascade_with_report, CascadeReport, CascadeTrainConfig};
use fruitgrader::eval::detection_pr;
use fruitgrader::imaging::{crop, encode_png, integral_image};
use fruitgrader::nn::{build_mini_plain, build_mini_resnet, lr_at_epoch, GradCheckReport, Schedule, Trainer};
use fruitgrader::pipeline::{load_pipeline, save_pipeline, PipelineError};
use fruitgrader::synthetic::{blob_image, ellipse_positives, ellipse_scene, stub_classifier, stub_pipeline, textured_noise};
use fruitgrader::{BBox, CascadeModel, GradeOptions, Image, Image64, ModelKind, Network, Network64, PipelineModel, ScanParams, TrainConfig};
use fruitgrader_cli::api::{handle_grade, handle_upload, AppState, GradeRequest, ModelSet, PredictionBody, DEFAULT_MAX_UPLOAD};
use fruitgrader_cli::store::ImageStore;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

fn within(v: Verdict, elapsed: Duration, limit: Duration) -> Verdict {
    match v {
        Verdict::Pass(d) if elapsed > limit => Verdict::Fail(format!("{d}; took {elapsed:.1?}, limit {limit:?}")),
        v => v,
    }
}

// ---------------------------------------------------------------- integral

fn integral_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut rects = 0;
    for n in 0..1000 {
        let (w, h) = (rng.random_range(1..=64usize), rng.random_range(1..=64usize));
        // multiples of 1/256 keep every partial sum exact in f64
        let img = Image64::from_fn(w, h, 1, |_, _, _| rng.random_range(0..=256u32) as f64 / 256.0).unwrap();
        let ii = integral_image(&img).unwrap();
        for _ in 0..20 {
            let (x, y) = (rng.random_range(0..w), rng.random_range(0..h));
            let (rw, rh) = (rng.random_range(1..=w - x), rng.random_range(1..=h - y));
            let mut brute = 0.0;
            for yy in y..y + rh {
                for xx in x..x + rw {
                    brute += img.get(xx, yy, 0);
                }
            }
            let got = ii.rect_sum(x as i64, y as i64, rw as i64, rh as i64).unwrap();
            if got != brute {
                return Verdict::Fail(format!("image {n} ({w}x{h}) rect {x},{y},{rw},{rh}: {got} != {brute}"));
            }
            rects += 1;
        }
    }
    Verdict::Pass(format!("1000 images, {rects} rects exact"))
}

// ---------------------------------------------------------- gradient check

fn random_batch(n: usize, side: usize, seed: u64) -> fruitgrader::Tensor64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * 3 * side * side).map(|_| rng.random_range(-1.0..1.0)).collect();
    fruitgrader::Tensor64::new(vec![n, 3, side, side], data).unwrap()
}

fn names(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("c{i}")).collect()
}

/// Sampled coordinates per tensor: 200, or the whole tensor when smaller.
fn coverage_ok(net: &mut Network64, r: &GradCheckReport) -> bool {
    let params = net.params_mut();
    r.tensors.iter().all(|t| {
        let p = &params[t.node];
        let len = if t.bias { p.bias.as_ref() } else { p.weight.as_ref() }.map_or(0, |t| t.len());
        t.checked == len.min(200)
    })
}

fn gradient_check() -> Verdict {
    use fruitgrader::nn::gradient_check_report;
    let mut plain = Network64::new(build_mini_plain((3, 16, 16), 3).unwrap(), names(3), 3).unwrap();
    let toy = gradient_check_report(&plain, &random_batch(2, 16, 9), &[0, 2], 1e-3, 1).unwrap();

    let mut res = Network64::new(build_mini_resnet((3, 16, 16), 3).unwrap(), names(3), 5).unwrap();
    // fresh residual branches end in gamma 0; spread the affine terms so
    // every layer carries gradient
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for p in res.params_mut() {
        if p.running_mean.is_some() {
            p.weight.as_mut().unwrap().data_mut().iter_mut().for_each(|g| *g = rng.random_range(0.5..1.5));
            p.bias.as_mut().unwrap().data_mut().iter_mut().for_each(|b| *b = rng.random_range(-0.2..0.2));
        }
    }
    let bn = gradient_check_report(&res, &random_batch(2, 16, 20), &[0, 1], 1e-3, 2).unwrap();
    let covered = coverage_ok(&mut plain, &toy) && coverage_ok(&mut res, &bn);
    check(
        toy.max_rel_error < 1e-3 && bn.max_rel_error < 1e-2 && covered,
        format!(
            "no-BN net {:.2e} over {} tensors, mini_resnet {:.2e} over {} tensors, coverage {}",
            toy.max_rel_error,
            toy.tensors.len(),
            bn.max_rel_error,
            bn.tensors.len(),
            if covered { "ok" } else { "short" }
        ),
    )
}

// ---------------------------------------------------------------- schedule

fn schedule() -> Verdict {
    let test2 = TrainConfig {
        initial_learn_rate: 0.01,
        schedule: Schedule::Piecewise { drop_period: 3, drop_factor: 0.1 },
        ..TrainConfig::default()
    };
    let fin = TrainConfig::final_ripeness_recipe();
    let (a, b) = (lr_at_epoch(&test2, 4), lr_at_epoch(&fin, 2));
    check(a == 0.001 && b == 1e-5 && lr_at_epoch(&test2, 3) == 0.01, format!("epoch 4 -> {a:e}, final recipe epoch 2 -> {b:e}"))
}

// ------------------------------------------------------------ learnability

fn blobs(per_class: usize, seed0: u64) -> (Vec<Image>, Vec<usize>) {
    (0..3 * per_class).map(|i| (blob_image(i % 3, 64, seed0 + i as u64), i % 3)).unzip()
}

fn learnability() -> Verdict {
    let (train_x, train_y) = blobs(20, 0);
    let (valid_x, valid_y) = blobs(10, 10_000);
    let net = Network::new(build_mini_resnet((3, 64, 64), 3).unwrap(), names(3), 1).unwrap();
    let config = TrainConfig { max_epochs: 200, shuffle_seed: 1, validation_every: 200, ..TrainConfig::default() };
    let mut trainer = Trainer::new(net, config, (&train_x, &train_y), (&valid_x, &valid_y)).unwrap();
    let mut reached = None;
    while !trainer.is_finished() {
        let r = trainer.run_epoch().unwrap();
        if r.train_acc >= 0.99 {
            reached = Some((r.epoch, r.train_acc));
            break;
        }
    }
    let valid = trainer.validation_accuracy().unwrap();
    match reached {
        Some((epoch, acc)) => check(valid >= 0.9, format!("train {acc:.3} at epoch {epoch}, valid {valid:.3}")),
        None => Verdict::Fail(format!("train accuracy below 0.99 after 200 epochs, valid {valid:.3}")),
    }
}

// ----------------------------------------------------------------- cascade

struct TrainedCascade {
    model: CascadeModel,
    report: CascadeReport,
    negatives: Vec<Image>,
}

fn train_synthetic_cascade() -> TrainedCascade {
    let positives = ellipse_positives::<f32>(200, 128, 1);
    let negatives: Vec<Image> = (0..50).map(|i| textured_noise(128, 128, 5000 + i)).collect();
    let config = CascadeTrainConfig { false_alarm_rate: 0.5, num_cascade_stages: 5, seed: 3, ..CascadeTrainConfig::default() };
    let (model, report) = train_cascade_with_report(&positives, &negatives, &config).unwrap();
    TrainedCascade { model, report, negatives }
}

fn cascade_guarantees(c: &TrainedCascade) -> Verdict {
    let far = 0.5;
    let stage_fars: Vec<f64> = c.model.stages.iter().map(|s| s.trained_far).collect();
    let stages_ok = stage_fars.iter().all(|&f| f <= far);

    let iis: Vec<_> = c.negatives.iter().map(|n| integral_image(n).unwrap()).collect();
    let initial = &c.report.initial_negatives;
    let accepted = initial
        .iter()
        .filter(|w| classify_window(&c.model, &iis[w.source], (w.x, w.y), w.scale).unwrap().0)
        .count();
    let full_far = accepted as f64 / initial.len() as f64;
    let far_ok = full_far <= far.powi(5) * (1.0 + 1e-9);

    let (mut dets, mut gts) = (Vec::new(), Vec::new());
    for i in 0..30 {
        let (img, boxes) = ellipse_scene::<f32>(128, 128, 3, 50_000 + i);
        dets.push(detect(&c.model, &img, &ScanParams::default()).unwrap());
        gts.push(boxes);
    }
    let pr = detection_pr(&dets, &gts, 0.5).unwrap();
    let held_ok = pr.recall >= 0.9 && pr.precision >= 0.8;
    check(
        stages_ok && far_ok && held_ok,
        format!(
            "{} stages, trained far {:?}, cascade far on {} training negatives {:.2e}, held-out recall {:.3} precision {:.3} ({} objects)",
            stage_fars.len(),
            stage_fars.iter().map(|f| (f * 1e4).round() / 1e4).collect::<Vec<_>>(),
            initial.len(),
            full_far,
            pr.recall,
            pr.precision,
            pr.true_positives + pr.false_negatives
        ),
    )
}

fn adaboost_bound(c: &TrainedCascade) -> Verdict {
    for (i, s) in c.model.stages.iter().enumerate() {
        if s.loss_bounds.len() != s.stumps.len() || s.loss_bounds.is_empty() {
            return Verdict::Fail(format!("stage {}: {} bounds for {} stumps", i + 1, s.loss_bounds.len(), s.stumps.len()));
        }
        if s.loss_bounds[0] >= 1.0 || s.loss_bounds.windows(2).any(|w| w[1] >= w[0]) {
            return Verdict::Fail(format!("stage {}: bounds {:?} not strictly decreasing", i + 1, s.loss_bounds));
        }
    }
    let stumps: usize = c.model.stages.iter().map(|s| s.stumps.len()).sum();
    Verdict::Pass(format!("strictly decreasing over {stumps} stumps in {} stages", c.model.stages.len()))
}

// ---------------------------------------------------------------- rescale

fn bbox_round_trip() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (down, up) = (224.0 / 640.0, 640.0 / 224.0);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let (x, y) = (rng.random_range(0.0..600.0), rng.random_range(0.0..600.0));
        let b = BBox::new(x, y, rng.random_range(1.0..640.0 - x), rng.random_range(1.0..640.0 - y)).unwrap();
        let r = b.scaled(down, down).scaled(up, up);
        for (a, c) in [(b.x, r.x), (b.y, r.y), (b.right(), r.right()), (b.bottom(), r.bottom())] {
            worst = worst.max((a - c).abs());
        }
    }
    check(worst <= 0.5, format!("1000 boxes, worst error {worst:.2e} px"))
}

// ------------------------------------------------------------ persistence

fn persistence(detector: &CascadeModel) -> Verdict {
    let model = PipelineModel::new(
        detector.clone(),
        stub_classifier(&fruitgrader::pipeline::RIPENESS_CLASSES, 21),
        stub_classifier(&fruitgrader::pipeline::DISEASE_CLASSES, 22),
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pipeline.fgpm");
    save_pipeline(&model, &path).unwrap();
    let loaded: PipelineModel = load_pipeline(&path).unwrap();
    let options = GradeOptions { force_disease: true, ..GradeOptions::default() };
    let mut fruits = 0;
    for i in 0..10 {
        let (img, _) = ellipse_scene::<f32>(128, 128, 3, 70_000 + i);
        let a = model.grade_image(&img, &options).unwrap();
        let b = loaded.grade_image(&img, &options).unwrap();
        // serde_json writes the shortest round-trip form, so equal text means equal bits
        if a != b || serde_json::to_string(&a).unwrap() != serde_json::to_string(&b).unwrap() {
            return Verdict::Fail(format!("image {i}: reports differ after reload"));
        }
        fruits += a.len();
    }
    let bytes = std::fs::read(&path).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut positions: Vec<usize> = (0..64.min(bytes.len())).collect();
    positions.extend((0..400).map(|_| rng.random_range(0..bytes.len())));
    for &pos in &positions {
        let mut b = bytes.clone();
        b[pos] ^= 1 << rng.random_range(0..8);
        match PipelineModel::from_bytes(&b) {
            Err(PipelineError::CorruptContainer(_)) => {}
            other => return Verdict::Fail(format!("flip at byte {pos}: {:?}", other.map(|_| "loaded"))),
        }
    }
    Verdict::Pass(format!(
        "10 images ({fruits} fruits) identical after reload, {} of {} byte flips rejected",
        positions.len(),
        bytes.len()
    ))
}

// ------------------------------------------------------------ equivalence

fn pipeline_equivalence() -> Verdict {
    let model: PipelineModel = stub_pipeline(0);
    let dir = tempfile::tempdir().unwrap();
    let store = ImageStore::open(dir.path().join("store")).unwrap();
    let state = Arc::new(AppState::new(store, ModelSet::from_pipeline(model.clone()), DEFAULT_MAX_UPLOAD));
    let mut fruits = 0;
    for i in 0..20 {
        let (img, _) = ellipse_scene::<f32>(96, 96, 2, 100 + i);
        let png = encode_png(&img).unwrap();
        let decoded: Image = fruitgrader::imaging::decode_image_auto(&png).unwrap();
        let id = handle_upload(&state, &png).unwrap().image_id;
        let graded = handle_grade(&state, &GradeRequest { image_id: id, force_disease: false }).unwrap();

        // the composition, written out from the primitives
        let mut dets = detect(&model.detector, &decoded, &ScanParams::default()).unwrap();
        dets.sort_by(|a, b| b.score.total_cmp(&a.score));
        let (w, h) = (decoded.width() as f64, decoded.height() as f64);
        let classify = |net: &Network, b: &BBox| {
            let p = net.predict(&crop(&decoded, &b.padded(model.crop_padding, w, h)).unwrap()).unwrap();
            PredictionBody::new(&p, net.class_names())
        };
        if graded.detections.len() != dets.len() {
            return Verdict::Fail(format!("image {i}: {} graded, {} detected", graded.detections.len(), dets.len()));
        }
        for (g, d) in graded.detections.iter().zip(&dets) {
            let ripeness = classify(model.classifier(ModelKind::Ripeness), &d.bbox);
            let disease = model
                .disease_trigger
                .contains(&ripeness.label)
                .then(|| classify(model.classifier(ModelKind::Disease), &d.bbox));
            if (g.bbox, g.score) != (d.bbox, d.score) || g.ripeness != ripeness || g.disease != disease {
                return Verdict::Fail(format!("image {i}: fruit at {:?} differs", d.bbox));
            }
            fruits += 1;
        }
    }
    check(fruits > 0, format!("20 images, {fruits} fruits identical"))
}

// ---------------------------------------------------------------- datasets

fn dataset_conditional() -> Verdict {
    let env = |k: &str| std::env::var_os(k).map(PathBuf::from);
    let pairs = [
        ("ripeness", env("FRUITGRADER_RIPENESS_DATA"), env("FRUITGRADER_RIPENESS_WEIGHTS")),
        ("disease", env("FRUITGRADER_DISEASE_DATA"), env("FRUITGRADER_DISEASE_WEIGHTS")),
    ];
    let tmp = tempfile::tempdir().unwrap();
    let out_root = env("FRUITGRADER_REPORT_DIR").unwrap_or_else(|| tmp.path().to_path_buf());
    let mut done = Vec::new();
    for (name, data, weights) in pairs {
        let (Some(data), Some(weights)) = (data, weights) else { continue };
        let out = out_root.join(name);
        let args: Vec<std::ffi::OsString> = vec![
            "fruitgrader".into(),
            "evaluate".into(),
            "--arch".into(),
            "resnet18".into(),
            "--pretrained".into(),
            weights.into(),
            "--data".into(),
            data.into(),
            "--out-dir".into(),
            out.clone().into(),
        ];
        let code = fruitgrader_cli::run(args);
        if code != fruitgrader_cli::EXIT_OK || !out.join("confusion.txt").is_file() {
            return Verdict::Fail(format!("{name}: evaluate exited {code}"));
        }
        done.push(name);
    }
    if done.is_empty() {
        Verdict::Skip("no external datasets configured".into())
    } else {
        Verdict::Pass(format!("confusion matrices written for {}", done.join(", ")))
    }
}

// -------------------------------------------------------------------- main

fn main() {
    let mut failed = 0;
    let mut report = |name: &str, limit: Option<Duration>, f: &mut dyn FnMut() -> Verdict| {
        let start = Instant::now();
        let v = f();
        let elapsed = start.elapsed();
        let v = match limit {
            Some(l) => within(v, elapsed, l),
            None => v,
        };
        let (tag, detail) = match v {
            Verdict::Pass(d) => ("PASS", d),
            Verdict::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Verdict::Skip(d) => ("SKIP", d),
        };
        println!("{tag} {name}: {detail} [{elapsed:.1?}]");
    };
    let minutes = |m: u64| Some(Duration::from_secs(60 * m));
    report("integral image oracle", Some(Duration::from_secs(5)), &mut integral_oracle);
    report("gradient check", Some(Duration::from_secs(60)), &mut gradient_check);
    report("schedule math", None, &mut schedule);
    report("classifier learnability", minutes(10), &mut learnability);

    let start = Instant::now();
    let cascade = train_synthetic_cascade();
    let trained = start.elapsed();
    report("cascade guarantees", minutes(10).map(|l| l.saturating_sub(trained)), &mut || match cascade_guarantees(&cascade) {
        Verdict::Pass(d) => Verdict::Pass(format!("{d}; trained in {trained:.1?}")),
        Verdict::Fail(d) => Verdict::Fail(format!("{d}; trained in {trained:.1?}")),
        v => v,
    });
    report("adaboost bound", None, &mut || adaboost_bound(&cascade));
    report("bbox rescale round trip", None, &mut bbox_round_trip);
    report("persistence", None, &mut || persistence(&cascade.model));
    report("pipeline equivalence", None, &mut pipeline_equivalence);
    report("dataset-conditional evaluation", None, &mut dataset_conditional);

    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
