use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DatasetError, DetectionSample, LabeledBox, Result};
use crate::imaging::{crop_resize, resize_bilinear, to_grayscale, BBox, Image};
use crate::scalar::Scalar;

/// Resizes an annotated image and scales every box per axis.
pub fn resize_with_boxes<S: Scalar>(
    sample: &DetectionSample,
    image: &Image<S>,
    out_w: usize,
    out_h: usize,
) -> Result<(Image<S>, DetectionSample)> {
    if (image.width(), image.height()) != (sample.image_w, sample.image_h) {
        return Err(DatasetError::DimensionMismatch {
            declared: (sample.image_w, sample.image_h),
            found: (image.width(), image.height()),
        });
    }
    let resized = resize_bilinear(image, out_w, out_h)?;
    let sx = out_w as f64 / sample.image_w as f64;
    let sy = out_h as f64 / sample.image_h as f64;
    let objects = sample
        .objects
        .iter()
        .map(|o| LabeledBox { class_name: o.class_name.clone(), bbox: o.bbox.scaled(sx, sy) })
        .collect();
    let out = DetectionSample { image_path: sample.image_path.clone(), image_w: out_w, image_h: out_h, objects };
    Ok((resized, out))
}

fn gray<S: Scalar>(img: &Image<S>) -> Result<Image<S>> {
    Ok(if img.channels() == 3 { to_grayscale(img)? } else { img.clone() })
}

/// Crops every `class_filter` box, converts to gray and resizes to `window`.
/// `images[i]` is the decoded raster of `samples[i]`.
pub fn extract_positive_windows<S: Scalar>(
    samples: &[DetectionSample],
    images: &[Image<S>],
    class_filter: &str,
    window: (usize, usize),
) -> Result<Vec<Image<S>>> {
    check_window(window)?;
    let mut out = Vec::new();
    for (sample, image) in samples.iter().zip(images) {
        let mut g = None;
        for b in sample.boxes_of(class_filter) {
            let g = match &g {
                Some(g) => g,
                None => g.insert(gray(image)?),
            };
            out.push(crop_resize(g, b, window.0, window.1)?);
        }
    }
    if out.is_empty() {
        return Err(DatasetError::NoPositives(class_filter.to_string()));
    }
    Ok(out)
}

fn check_window(window: (usize, usize)) -> Result<()> {
    if window.0 < 8 || window.1 < 8 {
        return Err(DatasetError::InvalidParameter(format!(
            "window {}x{} smaller than 8x8",
            window.0, window.1
        )));
    }
    Ok(())
}

/// Random window-aspect rectangle inside a `w × h` raster, at least
/// window-sized, or `None` if the raster is too small.
pub(crate) fn random_window_box(
    rng: &mut impl Rng,
    (w, h): (usize, usize),
    window: (usize, usize),
) -> Option<BBox> {
    let max_scale = (w as f64 / window.0 as f64).min(h as f64 / window.1 as f64);
    if max_scale < 1.0 {
        return None;
    }
    let scale = 1.0 + rng.random::<f64>() * (max_scale - 1.0);
    let bw = ((window.0 as f64 * scale).round() as usize).clamp(window.0, w);
    let bh = ((window.1 as f64 * scale).round() as usize).clamp(window.1, h);
    let x = rng.random_range(0..=w - bw);
    let y = rng.random_range(0..=h - bh);
    Some(BBox { x: x as f64, y: y as f64, w: bw as f64, h: bh as f64 })
}

/// Samples `n` gray windows at random positions and scales whose IoU with
/// every `class_filter` box stays below `reject_iou`.
#[allow(clippy::too_many_arguments)]
pub fn sample_negative_windows<S: Scalar>(
    samples: &[DetectionSample],
    images: &[Image<S>],
    class_filter: &str,
    window: (usize, usize),
    n: usize,
    seed: u64,
    reject_iou: f64,
) -> Result<Vec<Image<S>>> {
    check_window(window)?;
    if n == 0 || !(0.0..=1.0).contains(&reject_iou) {
        return Err(DatasetError::InvalidParameter(format!(
            "need n >= 1 and reject_iou in [0,1] (n={n}, reject_iou={reject_iou})"
        )));
    }
    let grays: Vec<Image<S>> = images.iter().map(gray).collect::<Result<_>>()?;
    let usable: Vec<usize> = (0..grays.len())
        .filter(|&i| grays[i].width() >= window.0 && grays[i].height() >= window.1)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    let max_attempts = 100 * n + 1000;
    for _ in 0..max_attempts {
        if out.len() == n || usable.is_empty() {
            break;
        }
        let i = usable[rng.random_range(0..usable.len())];
        let g = &grays[i];
        let Some(b) = random_window_box(&mut rng, (g.width(), g.height()), window) else {
            continue;
        };
        if samples[i].boxes_of(class_filter).all(|obj| obj.iou(&b) < reject_iou) {
            out.push(crop_resize(g, &b, window.0, window.1)?);
        }
    }
    if out.len() < n {
        return Err(DatasetError::ExhaustedNegatives { found: out.len(), wanted: n });
    }
    Ok(out)
}
