//! Raster images, geometric/photometric transforms and integral images.
//!
//! Samples are stored row-major and interleaved (`(y * width + x) * channels + c`),
//! always within `[0, 1]`.

mod codec;
mod integral;
mod transform;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

pub use codec::{decode_image, decode_image_auto, encode_png, read_image, write_png, ImageFormat};
pub use integral::{integral_image, IntegralImage};
pub use transform::{crop, crop_resize, flip, gaussian_blur, resize_bilinear, rotate, to_grayscale, FlipAxis};

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("malformed image file: {0}")]
    MalformedFile(String),
    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),
    #[error("expected {expected} channel(s), found {found}")]
    WrongChannelCount { expected: usize, found: usize },
    #[error("image dimensions must be at least 1x1 (got {width}x{height})")]
    ZeroDimension { width: usize, height: usize },
    #[error("box does not intersect the image")]
    EmptyIntersection,
    #[error("gaussian sigma must be >= 0 (got {0})")]
    NegativeSigma(f64),
    #[error("rectangle ({x},{y},{w},{h}) outside {width}x{height}")]
    OutOfBounds {
        x: i64,
        y: i64,
        w: i64,
        h: i64,
        width: usize,
        height: usize,
    },
    #[error("invalid image data: {0}")]
    InvalidData(String),
    #[error("invalid bounding box: {0}")]
    InvalidBox(String),
    #[error("png encoding failed: {0}")]
    Encode(String),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ImagingError>;

/// A raster with 1 or 3 channels and samples in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image<S> {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<S>,
}

impl<S: Scalar> Image<S> {
    /// Validates dimensions, channel count, length and sample range.
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<S>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(ImagingError::ZeroDimension { width, height });
        }
        if channels != 1 && channels != 3 {
            return Err(ImagingError::InvalidData(format!(
                "channels must be 1 or 3, got {channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(ImagingError::InvalidData(format!(
                "expected {} samples, got {}",
                width * height * channels,
                data.len()
            )));
        }
        if let Some(bad) = data
            .iter()
            .find(|v| !v.is_finite() || **v < S::zero() || **v > S::one())
        {
            return Err(ImagingError::InvalidData(format!("sample {bad} outside [0,1]")));
        }
        Ok(Self { width, height, channels, data })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: S) -> Result<Self> {
        Self::new(width, height, channels, vec![value; width * height * channels])
    }

    /// Builds an image from a per-sample function `(x, y, channel)`.
    /// Values are clamped into `[0, 1]`.
    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> S,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(clamp01(f(x, y, c)));
                }
            }
        }
        Self::new(width, height, channels, data)
    }

    /// Constructor for transforms whose outputs are already known to be valid.
    pub(crate) fn from_raw(width: usize, height: usize, channels: usize, data: Vec<S>) -> Self {
        debug_assert_eq!(data.len(), width * height * channels);
        Self { width, height, channels, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> S {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Converts the sample type.
    pub fn cast<T: Scalar>(&self) -> Image<T> {
        Image {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|v| clamp01(T::of(v.as_f64()))).collect(),
        }
    }

    /// Planar `C × H × W` copy of the samples, the layout the network consumes.
    pub fn to_planar(&self) -> Vec<S> {
        let plane = self.width * self.height;
        let mut out = vec![S::zero(); plane * self.channels];
        for (i, px) in self.data.chunks_exact(self.channels).enumerate() {
            for (c, v) in px.iter().enumerate() {
                out[c * plane + i] = *v;
            }
        }
        out
    }

    /// Replicates a single channel into three.
    pub fn to_rgb(&self) -> Image<S> {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|v| [*v, *v, *v]).collect();
        Image::from_raw(self.width, self.height, 3, data)
    }
}

#[inline]
pub(crate) fn clamp01<S: Scalar>(v: S) -> S {
    if v.is_nan() {
        S::zero()
    } else {
        v.max(S::zero()).min(S::one())
    }
}

/// Axis-aligned box with real-valued top-left corner and extents.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self { x, y, w, h };
        b.validate()?;
        Ok(b)
    }

    /// Box spanning `[xmin, xmax] × [ymin, ymax]`.
    pub fn from_corners(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Result<Self> {
        Self::new(xmin, ymin, xmax - xmin, ymax - ymin)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite());
        if !finite {
            return Err(ImagingError::InvalidBox(format!("non-finite coordinate in {self:?}")));
        }
        if self.w <= 0.0 || self.h <= 0.0 {
            return Err(ImagingError::InvalidBox(format!(
                "extent must be positive, got {}x{}",
                self.w, self.h
            )));
        }
        Ok(())
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let iw = self.right().min(other.right()) - self.x.max(other.x);
        let ih = self.bottom().min(other.bottom()) - self.y.max(other.y);
        if iw <= 0.0 || ih <= 0.0 {
            0.0
        } else {
            iw * ih
        }
    }

    /// Intersection over union, in `[0, 1]`.
    pub fn iou(&self, other: &BBox) -> f64 {
        if self == other {
            return 1.0;
        }
        let inter = self.intersection_area(other);
        if inter == 0.0 {
            return 0.0;
        }
        let union = self.area() + other.area() - inter;
        (inter / union).clamp(0.0, 1.0)
    }

    /// True when the box lies within a `width × height` raster.
    pub fn within(&self, width: f64, height: f64) -> bool {
        self.x >= 0.0 && self.y >= 0.0 && self.right() <= width && self.bottom() <= height
    }

    pub fn scaled(&self, sx: f64, sy: f64) -> BBox {
        BBox { x: self.x * sx, y: self.y * sy, w: self.w * sx, h: self.h * sy }
    }

    /// Grows every side by `frac` of the box extent, then clamps to the raster.
    pub fn padded(&self, frac: f64, width: f64, height: f64) -> BBox {
        let x0 = (self.x - self.w * frac).max(0.0);
        let y0 = (self.y - self.h * frac).max(0.0);
        let x1 = (self.right() + self.w * frac).min(width);
        let y1 = (self.bottom() + self.h * frac).min(height);
        BBox { x: x0, y: y0, w: x1 - x0, h: y1 - y0 }
    }
}
