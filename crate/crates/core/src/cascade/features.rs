use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CascadeError, Result};
use crate::imaging::IntegralImage;

/// Layout of a Haar-like feature. The first region(s) listed for a kind
/// are white (+), the remaining black (−).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HaarKind {
    /// Left half minus right half.
    TwoRectH,
    /// Top half minus bottom half.
    TwoRectV,
    /// Outer thirds minus twice the middle third, left to right.
    ThreeRectH,
    /// Outer thirds minus twice the middle third, top to bottom.
    ThreeRectV,
    /// Main diagonal quadrants minus anti-diagonal quadrants.
    FourRect,
}

impl HaarKind {
    pub const ALL: [HaarKind; 5] = [
        HaarKind::TwoRectH,
        HaarKind::TwoRectV,
        HaarKind::ThreeRectH,
        HaarKind::ThreeRectV,
        HaarKind::FourRect,
    ];

    /// Number of equal blocks along x and y.
    pub fn blocks(self) -> (u32, u32) {
        match self {
            HaarKind::TwoRectH => (2, 1),
            HaarKind::TwoRectV => (1, 2),
            HaarKind::ThreeRectH => (3, 1),
            HaarKind::ThreeRectV => (1, 3),
            HaarKind::FourRect => (2, 2),
        }
    }
}

/// A Haar-like feature placed inside the training window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HaarFeature {
    pub kind: HaarKind,
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

/// A weighted rectangle of a feature, in window coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Region {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
    pub weight: f64,
}

impl HaarFeature {
    pub fn new(kind: HaarKind, x: u32, y: u32, w: u32, h: u32) -> Self {
        Self { kind, x, y, w, h }
    }

    pub fn fits(&self, window: (usize, usize)) -> bool {
        let (bx, by) = self.kind.blocks();
        self.w > 0
            && self.h > 0
            && self.w.is_multiple_of(bx)
            && self.h.is_multiple_of(by)
            && (self.x + self.w) as usize <= window.0
            && (self.y + self.h) as usize <= window.1
    }

    /// Regions with weights chosen so white and black areas cancel.
    pub(crate) fn regions(&self) -> ([Region; 4], usize) {
        let r = |x, y, w, h, weight| Region { x, y, w, h, weight };
        let (x, y, w, h) = (self.x, self.y, self.w, self.h);
        let zero = r(0, 0, 0, 0, 0.0);
        match self.kind {
            HaarKind::TwoRectH => {
                let hw = w / 2;
                ([r(x, y, hw, h, 1.0), r(x + hw, y, hw, h, -1.0), zero, zero], 2)
            }
            HaarKind::TwoRectV => {
                let hh = h / 2;
                ([r(x, y, w, hh, 1.0), r(x, y + hh, w, hh, -1.0), zero, zero], 2)
            }
            HaarKind::ThreeRectH => {
                let t = w / 3;
                (
                    [r(x, y, t, h, 1.0), r(x + 2 * t, y, t, h, 1.0), r(x + t, y, t, h, -2.0), zero],
                    3,
                )
            }
            HaarKind::ThreeRectV => {
                let t = h / 3;
                (
                    [r(x, y, w, t, 1.0), r(x, y + 2 * t, w, t, 1.0), r(x, y + t, w, t, -2.0), zero],
                    3,
                )
            }
            HaarKind::FourRect => {
                let (hw, hh) = (w / 2, h / 2);
                (
                    [
                        r(x, y, hw, hh, 1.0),
                        r(x + hw, y + hh, hw, hh, 1.0),
                        r(x + hw, y, hw, hh, -1.0),
                        r(x, y + hh, hw, hh, -1.0),
                    ],
                    4,
                )
            }
        }
    }
}

fn check_window(window: (usize, usize)) -> Result<()> {
    if window.0 < 8 || window.1 < 8 {
        return Err(CascadeError::WindowTooSmall { w: window.0, h: window.1 });
    }
    Ok(())
}

fn for_each_feature(window: (usize, usize), mut f: impl FnMut(HaarFeature)) {
    let (ww, wh) = (window.0 as u32, window.1 as u32);
    for kind in HaarKind::ALL {
        let (bx, by) = kind.blocks();
        for w in (bx..=ww).step_by(bx as usize) {
            for h in (by..=wh).step_by(by as usize) {
                for y in 0..=wh - h {
                    for x in 0..=ww - w {
                        f(HaarFeature { kind, x, y, w, h });
                    }
                }
            }
        }
    }
}

/// Size of the complete Haar family for a window.
pub fn full_feature_count(window: (usize, usize)) -> usize {
    let mut n = 0;
    for_each_feature(window, |_| n += 1);
    n
}

/// Enumerates every feature of the five kinds that fits the window. When the
/// family exceeds `budget`, a seeded uniform subset of that size is kept in
/// enumeration order.
pub fn generate_feature_pool(window: (usize, usize), budget: usize, seed: u64) -> Result<Vec<HaarFeature>> {
    check_window(window)?;
    let mut all = Vec::new();
    for_each_feature(window, |f| all.push(f));
    if all.len() <= budget {
        return Ok(all);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, all.len(), budget).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| all[i]).collect())
}

/// Placement of the detection window inside an integral image, with the
/// variance normalization shared by every feature evaluated there.
#[derive(Clone, Copy, Debug)]
pub struct WindowView {
    pub x: usize,
    pub y: usize,
    pub scale: f64,
    /// Scaled window extent in pixels.
    pub w: usize,
    pub h: usize,
    inv_std: f64,
}

impl WindowView {
    pub fn new(ii: &IntegralImage, window: (usize, usize), origin: (usize, usize), scale: f64) -> Result<Self> {
        let w = ((window.0 as f64 * scale).round() as usize).max(1);
        let h = ((window.1 as f64 * scale).round() as usize).max(1);
        let (x, y) = origin;
        if !(scale > 0.0) || x + w > ii.width() || y + h > ii.height() {
            return Err(CascadeError::OutOfBounds { x, y, w, h });
        }
        let (_, std) = ii.rect_mean_std(x, y, w, h);
        let inv_std = if std < 1e-6 { 0.0 } else { 1.0 / std };
        Ok(Self { x, y, scale, w, h, inv_std })
    }

    /// Unit-scale view of a whole window-sized integral image.
    pub fn whole(ii: &IntegralImage) -> Self {
        let (_, std) = ii.rect_mean_std(0, 0, ii.width(), ii.height());
        let inv_std = if std < 1e-6 { 0.0 } else { 1.0 / std };
        Self { x: 0, y: 0, scale: 1.0, w: ii.width(), h: ii.height(), inv_std }
    }

    /// Feature value: weighted region sums divided by the window standard
    /// deviation. Scaled regions are rounded to the pixel grid and each sum is
    /// rescaled to its nominal (unscaled) area.
    #[inline]
    pub fn eval(&self, ii: &IntegralImage, feature: &HaarFeature) -> f64 {
        if self.inv_std == 0.0 {
            return 0.0;
        }
        let (regions, n) = feature.regions();
        let mut value = 0.0;
        if self.scale == 1.0 {
            for r in &regions[..n] {
                let s = ii.rect_sum_unchecked(
                    self.x + r.x as usize,
                    self.y + r.y as usize,
                    r.w as usize,
                    r.h as usize,
                );
                value += r.weight * s;
            }
        } else {
            let s = self.scale;
            for r in &regions[..n] {
                let rx = ((r.x as f64 * s).round() as usize).min(self.w - 1);
                let ry = ((r.y as f64 * s).round() as usize).min(self.h - 1);
                let rw = ((r.w as f64 * s).round() as usize).clamp(1, self.w - rx);
                let rh = ((r.h as f64 * s).round() as usize).clamp(1, self.h - ry);
                let sum = ii.rect_sum_unchecked(self.x + rx, self.y + ry, rw, rh);
                let nominal = (r.w * r.h) as f64;
                value += r.weight * sum * (nominal / (rw * rh) as f64);
            }
        }
        value * self.inv_std
    }
}

/// Evaluates one feature for the window at `origin` scaled by `scale`.
pub fn eval_feature(
    feature: &HaarFeature,
    ii: &IntegralImage,
    window: (usize, usize),
    origin: (usize, usize),
    scale: f64,
) -> Result<f64> {
    if !feature.fits(window) {
        return Err(CascadeError::OutOfBounds {
            x: feature.x as usize,
            y: feature.y as usize,
            w: feature.w as usize,
            h: feature.h as usize,
        });
    }
    Ok(WindowView::new(ii, window, origin, scale)?.eval(ii, feature))
}
