//! Viola-Jones style cascade detector: Haar features over integral images,
//! boosted stumps per stage, attentional training and sliding-window detection.

mod boost;
mod detect;
mod features;
mod train;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::DatasetError;
use crate::imaging::ImagingError;

pub use boost::{alpha_for, train_stump, FeatureMatrix, Stump, MIN_ERROR};
pub use detect::{classify_window, detect, non_max_suppression, suppress, Detection, ScanParams};
pub use features::{
    eval_feature, full_feature_count, generate_feature_pool, HaarFeature, HaarKind, WindowView,
};
pub use train::{
    train_cascade, train_cascade_with_report, train_stage, CascadeReport, NegativeWindow, StageReport,
};

pub const CASCADE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CascadeError {
    #[error("window {w}x{h} is smaller than 8x8")]
    WindowTooSmall { w: usize, h: usize },
    #[error("window ({x},{y},{w},{h}) exceeds the integral image")]
    OutOfBounds { x: usize, y: usize, w: usize, h: usize },
    #[error("one label class carries zero total weight")]
    DegenerateWeights,
    #[error("no stump beats chance (weighted error {error})")]
    DegenerateSplit { error: f64 },
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("no positive windows")]
    NoPositives,
    #[error("no negative windows could be sampled")]
    NoNegatives,
    #[error("image {width}x{height} is smaller than the {window_w}x{window_h} window")]
    ImageSmallerThanWindow { width: usize, height: usize, window_w: usize, window_h: usize },
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("model json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CascadeError>;

/// One boosted stage. A window passes when its summed stump votes reach
/// `threshold`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub stumps: Vec<Stump>,
    pub threshold: f64,
    pub trained_far: f64,
    pub trained_tpr: f64,
    /// False when the stump limit was hit before the false-alarm target.
    pub reached_target: bool,
    /// Exponential-loss bound Π 2√(ε(1−ε)) after each added stump.
    #[serde(default)]
    pub loss_bounds: Vec<f64>,
}

impl Stage {
    /// Σ alpha·vote, in stump order.
    #[inline]
    pub fn raw_score(&self, mut value: impl FnMut(usize) -> f64) -> f64 {
        self.stumps.iter().map(|s| s.alpha * s.vote(value(s.feature_index))).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CascadeModel {
    pub window_w: usize,
    pub window_h: usize,
    pub stages: Vec<Stage>,
    pub feature_pool: Vec<HaarFeature>,
    pub format_version: u32,
}

impl CascadeModel {
    pub fn window(&self) -> (usize, usize) {
        (self.window_w, self.window_h)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CascadeError::InvalidModel(m));
        if self.format_version != CASCADE_FORMAT_VERSION {
            return bad(format!(
                "format version {} (expected {CASCADE_FORMAT_VERSION})",
                self.format_version
            ));
        }
        if self.window_w < 8 || self.window_h < 8 {
            return bad(format!("window {}x{} below 8x8", self.window_w, self.window_h));
        }
        if self.stages.is_empty() {
            return bad("no stages".into());
        }
        for (i, f) in self.feature_pool.iter().enumerate() {
            if !f.fits(self.window()) {
                return bad(format!("feature {i} does not fit the window"));
            }
        }
        for (k, st) in self.stages.iter().enumerate() {
            if st.stumps.is_empty() || !st.threshold.is_finite() {
                return bad(format!("stage {k} is empty or has a non-finite threshold"));
            }
            for s in &st.stumps {
                if s.feature_index >= self.feature_pool.len() {
                    return bad(format!("stage {k} references feature {}", s.feature_index));
                }
                if !(s.alpha.is_finite() && s.threshold.is_finite()) || s.polarity.abs() != 1 {
                    return bad(format!("stage {k} has a malformed stump"));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }
}

/// Training window size: derived from the positives or fixed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingSize {
    Auto,
    Fixed { w: usize, h: usize },
}

impl fmt::Display for TrainingSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainingSize::Auto => write!(f, "auto"),
            TrainingSize::Fixed { w, h } => write!(f, "{w}x{h}"),
        }
    }
}

impl FromStr for TrainingSize {
    type Err = CascadeError;

    /// Accepts `auto`, `24x24`, `24,24` or `[24 24]` (width first).
    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        if t.eq_ignore_ascii_case("auto") {
            return Ok(TrainingSize::Auto);
        }
        let inner = t.trim_start_matches('[').trim_end_matches(']');
        let parts: Vec<&str> = inner
            .split(|c: char| c == 'x' || c == 'X' || c == ',' || c.is_whitespace())
            .filter(|p| !p.is_empty())
            .collect();
        let err = || CascadeError::InvalidConfig(format!("cannot parse window size {s:?}"));
        if parts.len() != 2 {
            return Err(err());
        }
        let w = parts[0].parse().map_err(|_| err())?;
        let h = parts[1].parse().map_err(|_| err())?;
        Ok(TrainingSize::Fixed { w, h })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CascadeTrainConfig {
    /// Per-stage false-alarm target.
    pub false_alarm_rate: f64,
    pub num_cascade_stages: usize,
    pub object_training_size: TrainingSize,
    pub per_stage_tpr_floor: f64,
    pub max_stumps_per_stage: usize,
    pub feature_budget: usize,
    pub seed: u64,
    /// Negative windows each stage trains on (survivors topped up by mining).
    pub negatives_per_stage: usize,
}

impl Default for CascadeTrainConfig {
    fn default() -> Self {
        Self {
            false_alarm_rate: 0.5,
            num_cascade_stages: 5,
            object_training_size: TrainingSize::Auto,
            per_stage_tpr_floor: 0.995,
            max_stumps_per_stage: 50,
            feature_budget: 5000,
            seed: 0,
            negatives_per_stage: 1000,
        }
    }
}

impl CascadeTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CascadeError::InvalidConfig(m));
        if !(self.false_alarm_rate > 0.0 && self.false_alarm_rate < 1.0) {
            return bad(format!("false_alarm_rate {} outside (0,1)", self.false_alarm_rate));
        }
        if !(self.per_stage_tpr_floor > 0.0 && self.per_stage_tpr_floor <= 1.0) {
            return bad(format!("per_stage_tpr_floor {} outside (0,1]", self.per_stage_tpr_floor));
        }
        if self.num_cascade_stages == 0 || self.max_stumps_per_stage == 0 {
            return bad("num_cascade_stages and max_stumps_per_stage must be >= 1".into());
        }
        if self.feature_budget < 100 {
            return bad(format!("feature_budget {} below 100", self.feature_budget));
        }
        if self.negatives_per_stage == 0 {
            return bad("negatives_per_stage must be >= 1".into());
        }
        if let TrainingSize::Fixed { w, h } = self.object_training_size {
            if w < 8 || h < 8 {
                return Err(CascadeError::WindowTooSmall { w, h });
            }
        }
        Ok(())
    }
}
