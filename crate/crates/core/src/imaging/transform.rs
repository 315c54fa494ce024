use super::{clamp01, BBox, Image, ImagingError, Result};
use crate::scalar::Scalar;

const LUMA_R: f64 = 0.299;
const LUMA_B: f64 = 0.114;

/// Rec. 601 luma. Written as `G + r(R - G) + b(B - G)` so equal channels map
/// to themselves exactly.
pub fn to_grayscale<S: Scalar>(img: &Image<S>) -> Result<Image<S>> {
    if img.channels() != 3 {
        return Err(ImagingError::WrongChannelCount { expected: 3, found: img.channels() });
    }
    let (wr, wb) = (S::of(LUMA_R), S::of(LUMA_B));
    let data = img
        .data()
        .chunks_exact(3)
        .map(|p| clamp01(p[1] + wr * (p[0] - p[1]) + wb * (p[2] - p[1])))
        .collect();
    Ok(Image::from_raw(img.width(), img.height(), 1, data))
}

/// Bilinear resize with center-aligned sample positions and edge clamping.
pub fn resize_bilinear<S: Scalar>(img: &Image<S>, out_w: usize, out_h: usize) -> Result<Image<S>> {
    if out_w == 0 || out_h == 0 {
        return Err(ImagingError::ZeroDimension { width: out_w, height: out_h });
    }
    if out_w == img.width() && out_h == img.height() {
        return Ok(img.clone());
    }
    let (w, h, ch) = (img.width(), img.height(), img.channels());
    let sx = w as f64 / out_w as f64;
    let sy = h as f64 / out_h as f64;
    let axis = |dst: usize, scale: f64, len: usize| {
        let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, S::of(src - i0 as f64))
    };
    let cols: Vec<_> = (0..out_w).map(|x| axis(x, sx, w)).collect();
    let mut data = Vec::with_capacity(out_w * out_h * ch);
    for oy in 0..out_h {
        let (y0, y1, fy) = axis(oy, sy, h);
        for &(x0, x1, fx) in &cols {
            for c in 0..ch {
                let top = lerp(img.get(x0, y0, c), img.get(x1, y0, c), fx);
                let bot = lerp(img.get(x0, y1, c), img.get(x1, y1, c), fx);
                data.push(clamp01(lerp(top, bot, fy)));
            }
        }
    }
    Ok(Image::from_raw(out_w, out_h, ch, data))
}

#[inline]
fn lerp<S: Scalar>(a: S, b: S, t: S) -> S {
    if t == S::zero() {
        a
    } else {
        a + (b - a) * t
    }
}

fn crop_region<S: Scalar>(img: &Image<S>, bbox: &BBox) -> Result<(usize, usize, usize, usize)> {
    let (w, h) = (img.width() as f64, img.height() as f64);
    let x0 = bbox.x.max(0.0).floor();
    let y0 = bbox.y.max(0.0).floor();
    let x1 = bbox.right().min(w).ceil();
    let y1 = bbox.bottom().min(h).ceil();
    if !(x1 > x0 && y1 > y0) || x0 >= w || y0 >= h {
        return Err(ImagingError::EmptyIntersection);
    }
    Ok((x0 as usize, y0 as usize, x1 as usize, y1 as usize))
}

/// Pixels of `bbox ∩ image`, snapped outward to the integer grid.
pub fn crop<S: Scalar>(img: &Image<S>, bbox: &BBox) -> Result<Image<S>> {
    let (x0, y0, x1, y1) = crop_region(img, bbox)?;
    let ch = img.channels();
    let mut data = Vec::with_capacity((x1 - x0) * (y1 - y0) * ch);
    for y in y0..y1 {
        let row = (y * img.width() + x0) * ch;
        data.extend_from_slice(&img.data()[row..row + (x1 - x0) * ch]);
    }
    Ok(Image::from_raw(x1 - x0, y1 - y0, ch, data))
}

/// `resize_bilinear(crop(img, bbox), out_w, out_h)` without materializing
/// the crop.
pub fn crop_resize<S: Scalar>(img: &Image<S>, bbox: &BBox, out_w: usize, out_h: usize) -> Result<Image<S>> {
    let (x0, y0, x1, y1) = crop_region(img, bbox)?;
    if out_w == 0 || out_h == 0 {
        return Err(ImagingError::ZeroDimension { width: out_w, height: out_h });
    }
    let (w, h, ch) = (x1 - x0, y1 - y0, img.channels());
    if (w, h) == (out_w, out_h) {
        return crop(img, bbox);
    }
    let sx = w as f64 / out_w as f64;
    let sy = h as f64 / out_h as f64;
    let axis = |dst: usize, scale: f64, len: usize| {
        let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, S::of(src - i0 as f64))
    };
    let cols: Vec<_> = (0..out_w).map(|x| axis(x, sx, w)).collect();
    let mut data = Vec::with_capacity(out_w * out_h * ch);
    for oy in 0..out_h {
        let (ya, yb, fy) = axis(oy, sy, h);
        for &(xa, xb, fx) in &cols {
            for c in 0..ch {
                let top = lerp(img.get(x0 + xa, y0 + ya, c), img.get(x0 + xb, y0 + ya, c), fx);
                let bot = lerp(img.get(x0 + xa, y0 + yb, c), img.get(x0 + xb, y0 + yb, c), fx);
                data.push(clamp01(lerp(top, bot, fy)));
            }
        }
    }
    Ok(Image::from_raw(out_w, out_h, ch, data))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlipAxis {
    /// Mirror left-right.
    Horizontal,
    /// Mirror top-bottom.
    Vertical,
}

pub fn flip<S: Scalar>(img: &Image<S>, axis: FlipAxis) -> Image<S> {
    let (w, h, ch) = (img.width(), img.height(), img.channels());
    let mut data = Vec::with_capacity(img.data().len());
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = match axis {
                FlipAxis::Horizontal => (w - 1 - x, y),
                FlipAxis::Vertical => (x, h - 1 - y),
            };
            let i = (sy * w + sx) * ch;
            data.extend_from_slice(&img.data()[i..i + ch]);
        }
    }
    Image::from_raw(w, h, ch, data)
}

/// Snaps trig values that are within rounding of -1, 0 or 1, so quarter
/// turns map pixel centers onto pixel centers exactly.
fn snap(v: f64) -> f64 {
    for t in [-1.0, 0.0, 1.0] {
        if (v - t).abs() < 1e-12 {
            return t;
        }
    }
    v
}

/// Rotation about the image center by `degrees` (positive is counterclockwise
/// on screen). Bilinear resampling; samples falling outside the source are 0.
pub fn rotate<S: Scalar>(img: &Image<S>, degrees: f64) -> Image<S> {
    if degrees == 0.0 {
        return img.clone();
    }
    let (w, h, ch) = (img.width(), img.height(), img.channels());
    let rad = degrees.to_radians();
    let (sin, cos) = (snap(rad.sin()), snap(rad.cos()));
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let max_x = (w - 1) as f64;
    let max_y = (h - 1) as f64;
    const EDGE: f64 = 1e-9;
    let mut data = vec![S::zero(); w * h * ch];
    for y in 0..h {
        for x in 0..w {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let sx = cos * dx - sin * dy + cx;
            let sy = sin * dx + cos * dy + cy;
            if sx < -EDGE || sy < -EDGE || sx > max_x + EDGE || sy > max_y + EDGE {
                continue;
            }
            let sx = sx.clamp(0.0, max_x);
            let sy = sy.clamp(0.0, max_y);
            let x0 = sx.floor() as usize;
            let y0 = sy.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let fx = S::of(sx - x0 as f64);
            let fy = S::of(sy - y0 as f64);
            let out = (y * w + x) * ch;
            for c in 0..ch {
                let top = lerp(img.get(x0, y0, c), img.get(x1, y0, c), fx);
                let bot = lerp(img.get(x0, y1, c), img.get(x1, y1, c), fx);
                data[out + c] = clamp01(lerp(top, bot, fy));
            }
        }
    }
    Image::from_raw(w, h, ch, data)
}

/// Normalized 1-D Gaussian with radius `ceil(3σ)`.
pub(crate) fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Separable Gaussian blur with edge clamping. `sigma == 0` is the identity.
pub fn gaussian_blur<S: Scalar>(img: &Image<S>, sigma: f64) -> Result<Image<S>> {
    if sigma.is_nan() || sigma < 0.0 {
        return Err(ImagingError::NegativeSigma(sigma));
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let kernel: Vec<S> = gaussian_kernel(sigma).into_iter().map(S::of).collect();
    let radius = (kernel.len() / 2) as i64;
    let (w, h, ch) = (img.width(), img.height(), img.channels());
    // Accumulate deviations from the center sample so constant regions are
    // reproduced exactly.
    let pass = |src: &[S], horizontal: bool| -> Vec<S> {
        let mut dst = vec![S::zero(); src.len()];
        for y in 0..h {
            for x in 0..w {
                for c in 0..ch {
                    let center = src[(y * w + x) * ch + c];
                    let mut acc = S::zero();
                    for (k, wk) in kernel.iter().enumerate() {
                        let off = k as i64 - radius;
                        let (sx, sy) = if horizontal {
                            ((x as i64 + off).clamp(0, w as i64 - 1) as usize, y)
                        } else {
                            (x, (y as i64 + off).clamp(0, h as i64 - 1) as usize)
                        };
                        acc += *wk * (src[(sy * w + sx) * ch + c] - center);
                    }
                    dst[(y * w + x) * ch + c] = clamp01(center + acc);
                }
            }
        }
        dst
    };
    let horizontal = pass(img.data(), true);
    let data = pass(&horizontal, false);
    Ok(Image::from_raw(w, h, ch, data))
}
