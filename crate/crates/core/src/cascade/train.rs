use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::boost::{train_stump, FeatureMatrix, MIN_ERROR};
use super::detect::{pyramid_scales, stage_pass_view};
use super::features::{generate_feature_pool, HaarFeature, WindowView};
use super::{
    CascadeError, CascadeModel, CascadeTrainConfig, Result, Stage, TrainingSize, CASCADE_FORMAT_VERSION,
};
use crate::imaging::{integral_image, resize_bilinear, to_grayscale, Image, IntegralImage};
use crate::scalar::Scalar;

/// Scale step of the pyramid negatives are drawn from; matches the default scan.
const MINING_SCALE_FACTOR: f64 = 1.1;
/// Mining gives up after this many random windows per requested negative.
const MINING_ATTEMPTS_PER_WINDOW: usize = 200;

/// A negative window: a placement inside one of the negative source images.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NegativeWindow {
    pub source: usize,
    pub x: usize,
    pub y: usize,
    pub scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    /// Negatives the stage trained on, of which `mined` were newly found.
    pub negatives: usize,
    pub mined: usize,
    /// Survivors of the initial negative set among `negatives`.
    pub held: usize,
    pub stumps: usize,
    pub trained_far: f64,
    pub trained_tpr: f64,
    pub reached_target: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CascadeReport {
    pub window: (usize, usize),
    pub positives: usize,
    /// The negatives the first stage trained on.
    pub initial_negatives: Vec<NegativeWindow>,
    pub stages: Vec<StageReport>,
    pub stopped_early: Option<String>,
}

struct Sample<'a> {
    ii: &'a IntegralImage,
    view: WindowView,
}

fn gray<S: Scalar>(img: &Image<S>) -> Result<Image<S>> {
    Ok(if img.channels() == 3 { to_grayscale(img)? } else { img.clone() })
}

/// Fits one stage. Negatives listed in `held` must also meet the false-alarm
/// target on their own, which makes the cascade rate on those windows the
/// product of the per-stage rates.
fn fit_stage(
    pos: &[Sample<'_>],
    neg: &[Sample<'_>],
    held: &[usize],
    pool: &[HaarFeature],
    cfg: &CascadeTrainConfig,
) -> Result<Stage> {
    let (np, nn) = (pos.len(), neg.len());
    if np == 0 {
        return Err(CascadeError::NoPositives);
    }
    if nn == 0 {
        return Err(CascadeError::NoNegatives);
    }
    let n = np + nn;
    let mut values = Vec::with_capacity(n * pool.len());
    for f in pool {
        values.extend(pos.iter().chain(neg).map(|s| s.view.eval(s.ii, f)));
    }
    let m = FeatureMatrix::from_feature_major(n, pool.len(), values)?;
    let labels: Vec<i8> = (0..n).map(|i| if i < np { 1 } else { -1 }).collect();
    let mut weights: Vec<f64> =
        (0..n).map(|i| if i < np { 0.5 / np as f64 } else { 0.5 / nn as f64 }).collect();
    let mut scores = vec![0.0f64; n];
    let k = ((cfg.per_stage_tpr_floor * np as f64 - 1e-9).ceil() as usize).clamp(1, np);

    let mut stage = Stage {
        stumps: Vec::new(),
        threshold: 0.0,
        trained_far: 1.0,
        trained_tpr: 1.0,
        reached_target: false,
        loss_bounds: Vec::new(),
    };
    let mut bound = 1.0;
    while stage.stumps.len() < cfg.max_stumps_per_stage {
        let stump = match train_stump(&m, &labels, &weights) {
            Ok(s) => s,
            Err(e @ (CascadeError::DegenerateSplit { .. } | CascadeError::DegenerateWeights))
                if !stage.stumps.is_empty() =>
            {
                warn!("stage stopped after {} stumps: {e}", stage.stumps.len());
                break;
            }
            Err(e) => return Err(e),
        };
        let eps = stump.weighted_error.max(MIN_ERROR);
        bound *= 2.0 * (eps * (1.0 - eps)).sqrt();
        let mut total = 0.0;
        for i in 0..n {
            let v = stump.vote(m.value(i, stump.feature_index));
            scores[i] += stump.alpha * v;
            weights[i] *= (-stump.alpha * labels[i] as f64 * v).exp();
            total += weights[i];
        }
        for w in &mut weights {
            *w /= total;
        }
        stage.stumps.push(stump);
        stage.loss_bounds.push(bound);

        let mut pos_scores = scores[..np].to_vec();
        pos_scores.sort_by(|a, b| b.total_cmp(a));
        let thr = pos_scores[k - 1];
        let accepted = |i: &usize| scores[*i] >= thr;
        stage.threshold = thr;
        stage.trained_tpr = (0..np).filter(accepted).count() as f64 / np as f64;
        stage.trained_far = (np..n).filter(accepted).count() as f64 / nn as f64;
        let held_ok = held.is_empty()
            || held.iter().map(|h| np + h).filter(accepted).count() as f64 / held.len() as f64
                <= cfg.false_alarm_rate;
        if stage.trained_far <= cfg.false_alarm_rate && held_ok {
            stage.reached_target = true;
            break;
        }
    }
    Ok(stage)
}

fn window_integrals<S: Scalar>(windows: &[Image<S>]) -> Result<(Vec<IntegralImage>, (usize, usize))> {
    let first = windows.first().ok_or(CascadeError::NoPositives)?;
    let size = (first.width(), first.height());
    let iis = windows
        .iter()
        .map(|w| {
            if (w.width(), w.height()) != size {
                return Err(CascadeError::InvalidInput(format!(
                    "window {}x{} differs from {}x{}",
                    w.width(),
                    w.height(),
                    size.0,
                    size.1
                )));
            }
            Ok(integral_image(&gray(w)?)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((iis, size))
}

fn whole_samples(iis: &[IntegralImage]) -> Vec<Sample<'_>> {
    iis.iter().map(|ii| Sample { ii, view: WindowView::whole(ii) }).collect()
}

/// Trains one stage on window-sized positive and negative windows.
pub fn train_stage<S: Scalar>(
    pos_windows: &[Image<S>],
    neg_windows: &[Image<S>],
    pool: &[HaarFeature],
    config: &CascadeTrainConfig,
) -> Result<Stage> {
    config.validate()?;
    if neg_windows.is_empty() {
        return Err(CascadeError::NoNegatives);
    }
    let (pii, size) = window_integrals(pos_windows)?;
    let (nii, nsize) = window_integrals(neg_windows)?;
    if nsize != size {
        return Err(CascadeError::InvalidInput("positive and negative windows differ in size".into()));
    }
    if size.0 < 8 || size.1 < 8 {
        return Err(CascadeError::WindowTooSmall { w: size.0, h: size.1 });
    }
    if let Some(i) = pool.iter().position(|f| !f.fits(size)) {
        return Err(CascadeError::InvalidInput(format!("feature {i} does not fit the window")));
    }
    fit_stage(&whole_samples(&pii), &whole_samples(&nii), &[], pool, config)
}

fn resolve_window<S: Scalar>(positives: &[Image<S>], size: TrainingSize) -> (usize, usize) {
    match size {
        TrainingSize::Fixed { w, h } => (w, h),
        TrainingSize::Auto => {
            let mut aspects: Vec<f64> = positives.iter().map(|p| p.width() as f64 / p.height() as f64).collect();
            aspects.sort_by(f64::total_cmp);
            let mid = aspects.len() / 2;
            let median = if aspects.len() % 2 == 1 { aspects[mid] } else { (aspects[mid - 1] + aspects[mid]) / 2.0 };
            if median >= 1.0 {
                (24, ((24.0 / median).round() as usize).max(8))
            } else {
                (((24.0 * median).round() as usize).max(8), 24)
            }
        }
    }
}

fn random_negative(
    rng: &mut ChaCha8Rng,
    sources: &[IntegralImage],
    usable: &[usize],
    scales: &[Vec<f64>],
    window: (usize, usize),
) -> NegativeWindow {
    let u = rng.random_range(0..usable.len());
    let source = usable[u];
    let scale = scales[u][rng.random_range(0..scales[u].len())];
    let ws = ((window.0 as f64 * scale).round() as usize).max(1);
    let hs = ((window.1 as f64 * scale).round() as usize).max(1);
    let x = rng.random_range(0..=sources[source].width() - ws);
    let y = rng.random_range(0..=sources[source].height() - hs);
    NegativeWindow { source, x, y, scale }
}

/// Trains the cascade; see [`train_cascade_with_report`].
pub fn train_cascade<S: Scalar>(
    positives: &[Image<S>],
    negative_sources: &[Image<S>],
    config: &CascadeTrainConfig,
) -> Result<CascadeModel> {
    train_cascade_with_report(positives, negative_sources, config).map(|(m, _)| m)
}

/// Builds stages one after another. The first stage trains on random windows
/// from `negative_sources`; after each stage the rejected negatives are
/// dropped and the pool is topped back up with random windows the partial
/// cascade still accepts. Training ends early, with a warning, once no
/// negative survives and none can be mined.
pub fn train_cascade_with_report<S: Scalar>(
    positives: &[Image<S>],
    negative_sources: &[Image<S>],
    config: &CascadeTrainConfig,
) -> Result<(CascadeModel, CascadeReport)> {
    config.validate()?;
    if positives.is_empty() {
        return Err(CascadeError::NoPositives);
    }
    if negative_sources.is_empty() {
        return Err(CascadeError::NoNegatives);
    }
    let window = resolve_window(positives, config.object_training_size);
    let pool = generate_feature_pool(window, config.feature_budget, config.seed)?;

    let pos_ii = positives
        .iter()
        .map(|p| Ok(integral_image(&resize_bilinear(&gray(p)?, window.0, window.1)?)?))
        .collect::<Result<Vec<_>>>()?;
    let pos = whole_samples(&pos_ii);

    let sources = negative_sources
        .iter()
        .map(|s| Ok(integral_image(&gray(s)?)?))
        .collect::<Result<Vec<_>>>()?;
    let usable: Vec<usize> = (0..sources.len())
        .filter(|&i| sources[i].width() >= window.0 && sources[i].height() >= window.1)
        .collect();
    if usable.is_empty() {
        return Err(CascadeError::NoNegatives);
    }
    let scales: Vec<Vec<f64>> = usable
        .iter()
        .map(|&i| pyramid_scales(sources[i].width(), sources[i].height(), window, MINING_SCALE_FACTOR))
        .collect();
    let view_of = |n: &NegativeWindow| {
        WindowView::new(&sources[n.source], window, (n.x, n.y), n.scale).expect("sampled inside the source")
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x6d69_6e65);
    let initial: Vec<NegativeWindow> = (0..config.negatives_per_stage)
        .map(|_| random_negative(&mut rng, &sources, &usable, &scales, window))
        .collect();
    // (window, from the initial set)
    let mut negatives: Vec<(NegativeWindow, bool)> = initial.iter().map(|n| (*n, true)).collect();
    let mut mined = 0;

    let mut model = CascadeModel {
        window_w: window.0,
        window_h: window.1,
        stages: Vec::new(),
        feature_pool: pool,
        format_version: CASCADE_FORMAT_VERSION,
    };
    let mut report = CascadeReport {
        window,
        positives: positives.len(),
        initial_negatives: initial.clone(),
        stages: Vec::new(),
        stopped_early: None,
    };

    for k in 0..config.num_cascade_stages {
        let neg: Vec<Sample<'_>> =
            negatives.iter().map(|(n, _)| Sample { ii: &sources[n.source], view: view_of(n) }).collect();
        let held: Vec<usize> = (0..negatives.len()).filter(|&i| negatives[i].1).collect();
        let stage = fit_stage(&pos, &neg, &held, &model.feature_pool, config)?;
        info!(
            "stage {}: {} stumps, far {:.4}, tpr {:.4}, {} negatives ({} mined)",
            k + 1,
            stage.stumps.len(),
            stage.trained_far,
            stage.trained_tpr,
            negatives.len(),
            mined
        );
        if !stage.reached_target {
            warn!("stage {} hit {} stumps above the false-alarm target", k + 1, config.max_stumps_per_stage);
        }
        report.stages.push(StageReport {
            negatives: negatives.len(),
            mined,
            held: held.len(),
            stumps: stage.stumps.len(),
            trained_far: stage.trained_far,
            trained_tpr: stage.trained_tpr,
            reached_target: stage.reached_target,
        });
        let survivors: Vec<(NegativeWindow, bool)> = negatives
            .iter()
            .zip(&neg)
            .filter(|(_, s)| stage_pass_view(&stage, &model.feature_pool, s.ii, &s.view).0)
            .map(|(n, _)| *n)
            .collect();
        model.stages.push(stage);
        if k + 1 == config.num_cascade_stages {
            break;
        }

        negatives = survivors;
        let need = config.negatives_per_stage.saturating_sub(negatives.len());
        mined = 0;
        let mut attempts = MINING_ATTEMPTS_PER_WINDOW * config.negatives_per_stage;
        while mined < need && attempts > 0 {
            attempts -= 1;
            let cand = random_negative(&mut rng, &sources, &usable, &scales, window);
            let view = view_of(&cand);
            let ii = &sources[cand.source];
            if model.stages.iter().all(|st| stage_pass_view(st, &model.feature_pool, ii, &view).0) {
                negatives.push((cand, false));
                mined += 1;
            }
        }
        if negatives.is_empty() {
            let msg = format!(
                "negative mining exhausted after {} stage(s); no window passes the partial cascade",
                model.stages.len()
            );
            warn!("{msg}");
            report.stopped_early = Some(msg);
            break;
        }
    }
    Ok((model, report))
}
