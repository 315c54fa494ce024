use super::{Image, ImagingError, Result};
use crate::scalar::Scalar;

/// Summed-area tables over a single-channel image, in `f64`.
///
/// Both tables are `(height + 1) × (width + 1)` with a zero first row and
/// column, so `sums[y][x]` is the sum of all pixels strictly above and left
/// of `(x, y)`.
#[derive(Clone, Debug, PartialEq)]
pub struct IntegralImage {
    width: usize,
    height: usize,
    sums: Vec<f64>,
    squared_sums: Vec<f64>,
}

pub fn integral_image<S: Scalar>(gray: &Image<S>) -> Result<IntegralImage> {
    if gray.channels() != 1 {
        return Err(ImagingError::WrongChannelCount { expected: 1, found: gray.channels() });
    }
    Ok(IntegralImage::from_samples(
        gray.width(),
        gray.height(),
        gray.data().iter().map(|v| v.as_f64()),
    ))
}

impl IntegralImage {
    pub(crate) fn from_samples(width: usize, height: usize, samples: impl Iterator<Item = f64>) -> Self {
        let stride = width + 1;
        let mut sums = vec![0.0; stride * (height + 1)];
        let mut squared_sums = vec![0.0; stride * (height + 1)];
        let mut samples = samples;
        for y in 0..height {
            let mut row = 0.0;
            let mut row_sq = 0.0;
            for x in 0..width {
                let v = samples.next().expect("sample count matches dimensions");
                row += v;
                row_sq += v * v;
                let i = (y + 1) * stride + x + 1;
                sums[i] = sums[i - stride] + row;
                squared_sums[i] = squared_sums[i - stride] + row_sq;
            }
        }
        Self { width, height, sums, squared_sums }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Entry `(x, y)` of the sum table, `0 ≤ x ≤ width`, `0 ≤ y ≤ height`.
    #[inline]
    pub fn sum_at(&self, x: usize, y: usize) -> f64 {
        self.sums[y * (self.width + 1) + x]
    }

    #[inline]
    pub fn squared_sum_at(&self, x: usize, y: usize) -> f64 {
        self.squared_sums[y * (self.width + 1) + x]
    }

    pub fn total(&self) -> f64 {
        self.sum_at(self.width, self.height)
    }

    fn check(&self, x: i64, y: i64, w: i64, h: i64) -> Result<()> {
        let inside = x >= 0
            && y >= 0
            && w >= 0
            && h >= 0
            && x + w <= self.width as i64
            && y + h <= self.height as i64;
        if inside {
            Ok(())
        } else {
            Err(ImagingError::OutOfBounds { x, y, w, h, width: self.width, height: self.height })
        }
    }

    /// Pixel sum over `[x, x+w) × [y, y+h)` from four table lookups.
    pub fn rect_sum(&self, x: i64, y: i64, w: i64, h: i64) -> Result<f64> {
        self.check(x, y, w, h)?;
        let (x, y, w, h) = (x as usize, y as usize, w as usize, h as usize);
        Ok(self.rect_sum_unchecked(x, y, w, h))
    }

    pub fn rect_squared_sum(&self, x: i64, y: i64, w: i64, h: i64) -> Result<f64> {
        self.check(x, y, w, h)?;
        let (x, y, w, h) = (x as usize, y as usize, w as usize, h as usize);
        Ok(self.squared_sum_at(x + w, y + h) - self.squared_sum_at(x + w, y)
            - self.squared_sum_at(x, y + h)
            + self.squared_sum_at(x, y))
    }

    #[inline]
    pub(crate) fn rect_sum_unchecked(&self, x: usize, y: usize, w: usize, h: usize) -> f64 {
        self.sum_at(x + w, y + h) - self.sum_at(x + w, y) - self.sum_at(x, y + h) + self.sum_at(x, y)
    }

    /// Mean and population standard deviation of a rectangle.
    pub fn rect_mean_std(&self, x: usize, y: usize, w: usize, h: usize) -> (f64, f64) {
        let n = (w * h) as f64;
        let s = self.rect_sum_unchecked(x, y, w, h);
        let sq = self.squared_sum_at(x + w, y + h) - self.squared_sum_at(x + w, y)
            - self.squared_sum_at(x, y + h)
            + self.squared_sum_at(x, y);
        let mean = s / n;
        let var = (sq / n - mean * mean).max(0.0);
        (mean, var.sqrt())
    }
}
