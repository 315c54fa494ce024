use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::features::{HaarFeature, WindowView};
use super::{CascadeError, CascadeModel, Result, Stage};
use crate::imaging::{integral_image, to_grayscale, BBox, Image, IntegralImage};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanParams {
    pub scale_factor: f64,
    /// Step in pixels at the base scale; grows with the window.
    pub stride: usize,
    pub nms_iou: f64,
    /// Also suppress a candidate when its overlap with a kept box exceeds
    /// this share of the smaller box. 1 turns the rule off.
    #[serde(default = "default_containment")]
    pub nms_containment: f64,
}

fn default_containment() -> f64 {
    0.5
}

impl Default for ScanParams {
    fn default() -> Self {
        Self { scale_factor: 1.1, stride: 2, nms_iou: 0.3, nms_containment: default_containment() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BBox,
    /// Sum of stage margins.
    pub score: f64,
}

/// Window scales `factor^k` for which the scaled window fits a raster.
pub(crate) fn pyramid_scales(width: usize, height: usize, window: (usize, usize), factor: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut k = 0;
    loop {
        let s = factor.powi(k);
        let ws = (window.0 as f64 * s).round() as usize;
        let hs = (window.1 as f64 * s).round() as usize;
        if ws > width || hs > height {
            break;
        }
        out.push(s);
        k += 1;
    }
    out
}

/// Stage decision and margin for a placed window.
#[inline]
pub(crate) fn stage_pass_view(
    stage: &Stage,
    pool: &[HaarFeature],
    ii: &IntegralImage,
    view: &WindowView,
) -> (bool, f64) {
    let s = stage.raw_score(|f| view.eval(ii, &pool[f]));
    (s >= stage.threshold, s - stage.threshold)
}

fn classify_view(model: &CascadeModel, ii: &IntegralImage, view: &WindowView) -> (bool, f64) {
    let mut score = 0.0;
    for stage in &model.stages {
        let (pass, margin) = stage_pass_view(stage, &model.feature_pool, ii, view);
        score += margin;
        if !pass {
            return (false, score);
        }
    }
    (true, score)
}

/// Runs the stages in order on the window at `origin`, stopping at the first
/// rejection. The score sums the margins of the stages evaluated.
pub fn classify_window(
    model: &CascadeModel,
    ii: &IntegralImage,
    origin: (usize, usize),
    scale: f64,
) -> Result<(bool, f64)> {
    let view = WindowView::new(ii, model.window(), origin, scale)?;
    Ok(classify_view(model, ii, &view))
}

fn by_rank(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.bbox.x.total_cmp(&b.bbox.x))
        .then(a.bbox.y.total_cmp(&b.bbox.y))
        .then(a.bbox.w.total_cmp(&b.bbox.w))
}

/// Greedy suppression: keeps candidates in descending score order unless
/// they overlap a kept box with IoU above `iou`.
pub fn non_max_suppression(candidates: Vec<Detection>, iou: f64) -> Vec<Detection> {
    suppress(candidates, iou, 1.0)
}

/// Overlap as a share of the smaller box.
fn containment(a: &BBox, b: &BBox) -> f64 {
    let smaller = a.area().min(b.area());
    if smaller <= 0.0 {
        0.0
    } else {
        a.intersection_area(b) / smaller
    }
}

/// [`non_max_suppression`] that also drops candidates nested in, or
/// wrapped around, a kept box: a window on part of an object, or one
/// enclosing it, has a small IoU with the object's box but a large
/// containment.
pub fn suppress(mut candidates: Vec<Detection>, iou: f64, nested: f64) -> Vec<Detection> {
    candidates.sort_by(by_rank);
    let mut kept: Vec<Detection> = Vec::new();
    for c in candidates {
        if kept.iter().all(|k| k.bbox.iou(&c.bbox) <= iou && containment(&k.bbox, &c.bbox) <= nested) {
            kept.push(c);
        }
    }
    kept
}

/// Multi-scale sliding-window detection on the gray image.
pub fn detect<S: Scalar>(model: &CascadeModel, image: &Image<S>, scan: &ScanParams) -> Result<Vec<Detection>> {
    if !(scan.scale_factor > 1.0) || scan.stride == 0 || !(0.0..=1.0).contains(&scan.nms_iou)
        || !(0.0..=1.0).contains(&scan.nms_containment)
    {
        return Err(CascadeError::InvalidConfig(format!(
            "scan needs scale_factor > 1, stride >= 1, nms_iou and nms_containment in [0,1] (got {scan:?})"
        )));
    }
    let (ww, wh) = model.window();
    if image.width() < ww || image.height() < wh {
        return Err(CascadeError::ImageSmallerThanWindow {
            width: image.width(),
            height: image.height(),
            window_w: ww,
            window_h: wh,
        });
    }
    let gray = if image.channels() == 3 { to_grayscale(image)? } else { image.clone() };
    let ii = integral_image(&gray)?;
    let mut candidates = Vec::new();
    for s in pyramid_scales(image.width(), image.height(), (ww, wh), scan.scale_factor) {
        let step = ((scan.stride as f64 * s).round() as usize).max(1);
        let sw = (ww as f64 * s).round() as usize;
        let sh = (wh as f64 * s).round() as usize;
        for y in (0..=image.height() - sh).step_by(step) {
            for x in (0..=image.width() - sw).step_by(step) {
                let view = WindowView::new(&ii, (ww, wh), (x, y), s)?;
                let (accepted, score) = classify_view(model, &ii, &view);
                if accepted {
                    let bbox = BBox { x: x as f64, y: y as f64, w: sw as f64, h: sh as f64 };
                    candidates.push(Detection { bbox, score });
                }
            }
        }
    }
    Ok(suppress(candidates, scan.nms_iou, scan.nms_containment))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cascade::{HaarKind, Stump, CASCADE_FORMAT_VERSION};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn stump(feature_index: usize, threshold: f64, polarity: i8, alpha: f64) -> Stump {
        Stump { feature_index, threshold, polarity, alpha, weighted_error: 0.1 }
    }

    fn stage(stumps: Vec<Stump>, threshold: f64) -> Stage {
        Stage { stumps, threshold, trained_far: 0.5, trained_tpr: 1.0, reached_target: true, loss_bounds: vec![] }
    }

    fn toy_model(stages: Vec<Stage>) -> CascadeModel {
        CascadeModel {
            window_w: 8,
            window_h: 8,
            stages,
            feature_pool: vec![
                HaarFeature::new(HaarKind::TwoRectH, 0, 0, 8, 8),
                HaarFeature::new(HaarKind::TwoRectV, 0, 0, 8, 8),
                HaarFeature::new(HaarKind::FourRect, 2, 2, 4, 4),
            ],
            format_version: CASCADE_FORMAT_VERSION,
        }
    }

    fn noise(w: usize, h: usize, seed: u64) -> Image<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(w, h, 1, |_, _, _| rng.random::<f64>()).unwrap()
    }

    #[test]
    fn permissive_stage_accepts_everything() {
        let m = toy_model(vec![stage(vec![stump(0, 0.0, 1, 1.0)], -1.0)]);
        let ii = integral_image(&noise(20, 20, 1)).unwrap();
        for (x, y) in [(0, 0), (5, 7), (12, 12)] {
            assert!(classify_window(&m, &ii, (x, y), 1.0).unwrap().0);
        }
        assert!(matches!(classify_window(&m, &ii, (13, 0), 1.0), Err(CascadeError::OutOfBounds { .. })));
    }

    #[test]
    fn constant_window_scores_zero_features() {
        let m = toy_model(vec![stage(vec![stump(0, 0.5, 1, 1.0)], 0.0), stage(vec![stump(1, -0.5, 1, 1.0)], 1.0)]);
        let ii = integral_image(&Image::<f32>::filled(8, 8, 1, 0.4).unwrap()).unwrap();
        // value 0 < 0.5 → vote −1 → score −1 < 0, rejected at stage one
        assert_eq!(classify_window(&m, &ii, (0, 0), 1.0).unwrap(), (false, -1.0));
        let m2 = toy_model(vec![stage(vec![stump(0, 0.0, 1, 1.0)], 0.0), stage(vec![stump(1, 0.0, 1, 2.0)], 1.0)]);
        assert_eq!(classify_window(&m2, &ii, (0, 0), 1.0).unwrap(), (true, 2.0));
    }

    #[test]
    fn early_exit_matches_full_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..50 {
            let stages: Vec<Stage> = (0..4)
                .map(|_| {
                    let stumps = (0..3)
                        .map(|_| {
                            let pol = if rng.random::<bool>() { 1 } else { -1 };
                            stump(rng.random_range(0..3), rng.random_range(-2.0..2.0), pol, rng.random_range(0.1..1.0))
                        })
                        .collect();
                    stage(stumps, rng.random_range(-1.0..0.5))
                })
                .collect();
            let m = toy_model(stages);
            let img = noise(24, 24, 100 + trial);
            let ii = integral_image(&img).unwrap();
            for _ in 0..20 {
                let s = [1.0, 1.5, 2.0][rng.random_range(0..3)];
                let span = (8.0f64 * s).round() as usize;
                let (x, y) = (rng.random_range(0..=24 - span), rng.random_range(0..=24 - span));
                // oracle: every stage evaluated, thresholds applied in order afterwards
                let margins: Vec<f64> = m
                    .stages
                    .iter()
                    .map(|st| {
                        let raw: f64 = st
                            .stumps
                            .iter()
                            .map(|sp| {
                                let v = crate::cascade::eval_feature(&m.feature_pool[sp.feature_index], &ii, (8, 8), (x, y), s)
                                    .unwrap();
                                sp.alpha * sp.vote(v)
                            })
                            .sum();
                        raw - st.threshold
                    })
                    .collect();
                let first_fail = margins.iter().position(|&mg| mg < 0.0);
                let want_accept = first_fail.is_none();
                let upto = first_fail.map_or(margins.len(), |i| i + 1);
                let want_score: f64 = margins[..upto].iter().sum();
                let (acc, score) = classify_window(&m, &ii, (x, y), s).unwrap();
                assert_eq!(acc, want_accept);
                assert!((score - want_score).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn nms_keeps_one_of_identical_boxes() {
        let b = BBox::new(3.0, 4.0, 10.0, 10.0).unwrap();
        let out = non_max_suppression(vec![Detection { bbox: b, score: 1.0 }, Detection { bbox: b, score: 1.0 }], 0.3);
        assert_eq!(out.len(), 1);
        let far = BBox::new(50.0, 50.0, 10.0, 10.0).unwrap();
        let out = non_max_suppression(
            vec![Detection { bbox: far, score: 0.5 }, Detection { bbox: b, score: 2.0 }, Detection { bbox: b, score: 1.0 }],
            0.3,
        );
        assert_eq!(out.iter().map(|d| d.score).collect::<Vec<_>>(), vec![2.0, 0.5]);
    }

    #[test]
    fn nested_windows_are_suppressed() {
        let object = Detection { bbox: BBox::new(10.0, 10.0, 60.0, 60.0).unwrap(), score: 20.0 };
        let part = Detection { bbox: BBox::new(20.0, 20.0, 24.0, 24.0).unwrap(), score: 0.6 };
        let around = Detection { bbox: BBox::new(0.0, 0.0, 120.0, 120.0).unwrap(), score: 5.0 };
        let beside = Detection { bbox: BBox::new(66.0, 10.0, 24.0, 24.0).unwrap(), score: 1.0 };
        // IoU alone keeps all four
        let all = vec![object, part, around, beside];
        assert_eq!(non_max_suppression(all.clone(), 0.3).len(), 4);
        assert_eq!(suppress(all.clone(), 0.3, 1.0), non_max_suppression(all.clone(), 0.3));
        // beside overlaps a sixth of its area
        assert_eq!(suppress(all, 0.3, 0.5), vec![object, beside]);
    }

    #[test]
    fn rejecting_model_detects_nothing() {
        let m = toy_model(vec![stage(vec![stump(0, 0.0, 1, 1.0)], 5.0)]);
        let img = noise(40, 30, 2);
        assert!(detect(&m, &img, &ScanParams::default()).unwrap().is_empty());
        assert!(matches!(
            detect(&m, &noise(7, 30, 2), &ScanParams::default()),
            Err(CascadeError::ImageSmallerThanWindow { .. })
        ));
    }

    #[test]
    fn accepting_model_collapses_to_disjoint_boxes() {
        let m = toy_model(vec![stage(vec![stump(0, -1e9, 1, 1.0)], 0.0)]);
        let img = noise(40, 30, 3);
        let dets = detect(&m, &img, &ScanParams::default()).unwrap();
        assert!(!dets.is_empty());
        for (i, a) in dets.iter().enumerate() {
            assert!(a.bbox.within(40.0, 30.0));
            for b in &dets[i + 1..] {
                assert!(a.bbox.iou(&b.bbox) <= 0.3);
                assert!(a.bbox.intersection_area(&b.bbox) <= 0.5 * a.bbox.area().min(b.bbox.area()));
                assert!(by_rank(a, b) != Ordering::Greater);
            }
        }
        assert_eq!(dets, detect(&m, &img, &ScanParams::default()).unwrap());
    }

    #[test]
    fn pyramid_stops_when_window_no_longer_fits() {
        let s = pyramid_scales(24, 30, (24, 24), 1.1);
        assert_eq!(s, vec![1.0]);
        let s = pyramid_scales(100, 100, (24, 24), 2.0);
        assert_eq!(s, vec![1.0, 2.0, 4.0]);
    }
}
