//! Seeded synthetic corpora (dark ellipses on textured noise for the
//! detector, colored blobs for the classifiers) and small stub models.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cascade::{CascadeModel, HaarFeature, HaarKind, Stage, Stump, CASCADE_FORMAT_VERSION};
use crate::imaging::{BBox, Image};
use crate::nn::{build_linear, Network};
use crate::pipeline::{PipelineModel, DISEASE_CLASSES, RIPENESS_CLASSES};
use crate::scalar::Scalar;

/// Gray background: smooth low-frequency shading plus pixel noise.
fn texture_value(rng: &mut ChaCha8Rng, phases: &[f64; 4], x: usize, y: usize) -> f64 {
    let (xf, yf) = (x as f64, y as f64);
    let shade = 0.08 * (xf * 0.07 + phases[0]).sin()
        + 0.08 * (yf * 0.05 + phases[1]).cos()
        + 0.06 * ((xf + yf) * 0.13 + phases[2]).sin()
        + 0.04 * ((xf - yf) * 0.31 + phases[3]).sin();
    0.58 + shade + (rng.random::<f64>() - 0.5) * 0.24
}

/// Textured noise without objects.
pub fn textured_noise<S: Scalar>(width: usize, height: usize, seed: u64) -> Image<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phases: [f64; 4] = std::array::from_fn(|_| rng.random::<f64>() * std::f64::consts::TAU);
    let mut data = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            data.push(texture_value(&mut rng, &phases, x, y));
        }
    }
    Image::from_fn(width, height, 1, |x, y, _| S::of(data[y * width + x])).expect("valid size")
}

/// Textured noise with up to `max_objects` non-overlapping dark ellipses.
/// Returns the image and the ellipses' bounding boxes.
pub fn ellipse_scene<S: Scalar>(
    width: usize,
    height: usize,
    max_objects: usize,
    seed: u64,
) -> (Image<S>, Vec<BBox>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phases: [f64; 4] = std::array::from_fn(|_| rng.random::<f64>() * std::f64::consts::TAU);
    let mut ellipses: Vec<(f64, f64, f64, f64, f64)> = Vec::new();
    let mut boxes = Vec::new();
    let max_r = width.min(height) as f64 / 4.0;
    for _ in 0..max_objects * 20 {
        if ellipses.len() == max_objects {
            break;
        }
        let rx = rng.random_range(12.0..max_r.max(12.5));
        let ry = rx * rng.random_range(0.9..1.1);
        if 2.0 * rx + 2.0 >= width as f64 || 2.0 * ry + 2.0 >= height as f64 {
            continue;
        }
        let cx = rng.random_range(rx + 1.0..width as f64 - rx - 1.0);
        let cy = rng.random_range(ry + 1.0..height as f64 - ry - 1.0);
        let b = BBox { x: cx - rx, y: cy - ry, w: 2.0 * rx, h: 2.0 * ry };
        if boxes.iter().any(|o: &BBox| o.padded(0.2, f64::MAX, f64::MAX).intersection_area(&b) > 0.0) {
            continue;
        }
        let tone = rng.random_range(0.08..0.25);
        ellipses.push((cx, cy, rx, ry, tone));
        boxes.push(b);
    }
    let mut data = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let bg = texture_value(&mut rng, &phases, x, y);
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let inside = ellipses.iter().find(|(cx, cy, rx, ry, _)| {
                let (dx, dy) = ((px - cx) / rx, (py - cy) / ry);
                dx * dx + dy * dy <= 1.0
            });
            data.push(match inside {
                Some(e) => e.4 + (bg - 0.58) * 0.5,
                None => bg,
            });
        }
    }
    let img = Image::from_fn(width, height, 1, |x, y, _| S::of(data[y * width + x])).expect("valid size");
    (img, boxes)
}

/// `n` gray positive windows cut from single-ellipse `scene × scene` scenes.
/// Each crop is the ellipse box shifted by up to 5 % and rescaled by up to
/// 6 %, roughly the misalignment a stride-2, factor-1.1 scan produces.
pub fn ellipse_positives<S: Scalar>(n: usize, scene: usize, seed: u64) -> Vec<Image<S>> {
    let mut out = Vec::with_capacity(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut k = 0u64;
    while out.len() < n {
        let (img, boxes) = ellipse_scene::<S>(scene, scene, 1, seed.wrapping_mul(1_000_003).wrapping_add(k));
        k += 1;
        for b in boxes {
            let sc = rng.random_range(0.94..1.06);
            let (cx, cy) = b.center();
            let cx = cx + rng.random_range(-0.05..0.05) * b.w;
            let cy = cy + rng.random_range(-0.05..0.05) * b.h;
            let j = BBox { x: cx - b.w * sc / 2.0, y: cy - b.h * sc / 2.0, w: b.w * sc, h: b.h * sc };
            out.push(crate::imaging::crop(&img, &j).expect("box overlaps the scene"));
        }
    }
    out
}

/// A `size × size` RGB image with a soft blob whose hue identifies `class`
/// (0 red, 1 green, 2 blue, further classes mix channels).
pub fn blob_image<S: Scalar>(class: usize, size: usize, seed: u64) -> Image<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let palette = [
        [0.85, 0.2, 0.15],
        [0.2, 0.8, 0.2],
        [0.15, 0.25, 0.85],
        [0.85, 0.8, 0.15],
        [0.75, 0.2, 0.8],
    ];
    let color = palette[class % palette.len()];
    let s = size as f64;
    let (cx, cy) = (rng.random_range(0.3..0.7) * s, rng.random_range(0.3..0.7) * s);
    let r = rng.random_range(0.18..0.32) * s;
    let bg: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.35..0.6));
    let mut noise = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    Image::from_fn(size, size, 3, |x, y, c| {
        let d = ((x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2)).sqrt();
        let t = (1.0 - (d - r) / 3.0).clamp(0.0, 1.0);
        let v = bg[c] * (1.0 - t) + color[c] * t + (noise.random::<f64>() - 0.5) * 0.1;
        S::of(v)
    })
    .expect("valid size")
}

/// Score a centered dark blob must reach on both stub detector contrast stages.
pub const STUB_DETECTOR_THRESHOLD: f64 = 150.0;
/// Largest left/right and top/bottom imbalance the stub detector accepts.
pub const STUB_DETECTOR_BALANCE: f64 = 150.0;

/// Three-stage 24×24 cascade that accepts windows with a dark, roughly
/// centered middle: three-rectangle contrast across and down the window,
/// then a two-rectangle balance check. Contrast stumps at rising thresholds
/// make better-aligned windows score higher.
pub fn stub_detector() -> CascadeModel {
    let stump = |feature_index, threshold, polarity| Stump { feature_index, threshold, polarity, alpha: 1.0, weighted_error: 0.1 };
    let stage = |stumps: Vec<Stump>, threshold| Stage {
        loss_bounds: vec![0.6; stumps.len()],
        stumps,
        threshold,
        trained_far: 0.5,
        trained_tpr: 1.0,
        reached_target: true,
    };
    let graded = |f| {
        let t = STUB_DETECTOR_THRESHOLD;
        // k of the 4 stumps vote +1 for a raw score of 2k - 4; k >= 1 passes
        stage(vec![stump(f, t, 1), stump(f, 1.5 * t, 1), stump(f, 2.0 * t, 1), stump(f, 3.0 * t, 1)], -2.0)
    };
    let b = STUB_DETECTOR_BALANCE;
    let balance = stage(vec![stump(2, -b, 1), stump(2, b, -1), stump(3, -b, 1), stump(3, b, -1)], 4.0);
    let model = CascadeModel {
        window_w: 24,
        window_h: 24,
        stages: vec![graded(0), graded(1), balance],
        feature_pool: vec![
            HaarFeature::new(HaarKind::ThreeRectH, 0, 6, 24, 12),
            HaarFeature::new(HaarKind::ThreeRectV, 6, 0, 12, 24),
            HaarFeature::new(HaarKind::TwoRectH, 0, 0, 24, 24),
            HaarFeature::new(HaarKind::TwoRectV, 0, 0, 24, 24),
        ],
        format_version: CASCADE_FORMAT_VERSION,
    };
    model.validate().expect("stub detector is well formed");
    model
}

/// Linear classifier over an 8×8 RGB thumbnail with seeded weights strong
/// enough that different crops get different labels.
pub fn stub_classifier<S: Scalar>(class_names: &[&str], seed: u64) -> Network<S> {
    let names = class_names.iter().map(|s| s.to_string()).collect();
    let spec = build_linear((3, 8, 8), class_names.len()).expect("at least two classes");
    let mut net = Network::new(spec, names, seed).expect("spec matches names");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for p in net.params_mut() {
        if let Some(w) = p.weight.as_mut() {
            w.data_mut().iter_mut().for_each(|v| *v = S::of(rng.random_range(-1.0..1.0)));
        }
        if let Some(b) = p.bias.as_mut() {
            b.data_mut().iter_mut().for_each(|v| *v = S::of(rng.random_range(-2.0..2.0)));
        }
    }
    net
}

/// Stub detector plus stub ripeness and disease classifiers.
pub fn stub_pipeline<S: Scalar>(seed: u64) -> PipelineModel<S> {
    PipelineModel::new(
        stub_detector(),
        stub_classifier(&RIPENESS_CLASSES, seed),
        stub_classifier(&DISEASE_CLASSES, seed + 1),
    )
    .expect("stub widths match")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_seeded_and_boxes_fit() {
        let (a, boxes) = ellipse_scene::<f32>(128, 96, 3, 4);
        let (b, again) = ellipse_scene::<f32>(128, 96, 3, 4);
        assert_eq!(a, b);
        assert_eq!(boxes, again);
        assert!(!boxes.is_empty());
        for bx in &boxes {
            assert!(bx.within(128.0, 96.0));
        }
        assert_eq!(textured_noise::<f64>(30, 20, 1), textured_noise::<f64>(30, 20, 1));
        let pos = ellipse_positives::<f32>(5, 64, 2);
        assert_eq!(pos.len(), 5);
        assert_eq!(pos, ellipse_positives::<f32>(5, 64, 2));
    }

    #[test]
    fn blob_images_are_seeded_per_class() {
        let a = blob_image::<f32>(0, 32, 9);
        assert_eq!(a, blob_image::<f32>(0, 32, 9));
        assert_ne!(a, blob_image::<f32>(1, 32, 9));
        assert_eq!((a.width(), a.height(), a.channels()), (32, 32, 3));
    }
}
