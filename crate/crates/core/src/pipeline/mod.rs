//! Detect, crop, grade ripeness, then check disease on triggering crops.

pub mod container;

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cascade::{self, CascadeError, CascadeModel, Detection, ScanParams};
use crate::imaging::{crop, BBox, Image, ImagingError};
use crate::nn::{Network, NnError, Prediction};
use crate::scalar::Scalar;
use container::{ContainerKind, Manifest};

pub const RIPENESS_CLASSES: [&str; 3] = ["bad mango", "raw mango", "ripe mango"];
pub const DISEASE_CLASSES: [&str; 5] = ["alternaria", "anthracnose", "black mold rot", "healthy", "stem end rot"];
pub const DEFAULT_TRIGGER: &str = "bad mango";
/// Fraction of the box size added on every side before classifying.
pub const DEFAULT_CROP_PADDING: f64 = 0.1;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("corrupt container: {0}")]
    CorruptContainer(String),
    #[error("container version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("invalid box: {0}")]
    InvalidBox(String),
    #[error(transparent)]
    Cascade(#[from] CascadeError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error("manifest json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Ripeness,
    Disease,
}

impl std::str::FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "ripeness" => Ok(Self::Ripeness),
            "disease" => Ok(Self::Disease),
            other => Err(format!("unknown model {other:?} (expected ripeness or disease)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[derive(Default)]
pub struct GradeOptions {
    pub force_disease: bool,
    pub scan: ScanParams,
}


#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FruitReport {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub detection_score: f64,
    pub ripeness: Prediction,
    pub disease: Option<Prediction>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineModel<S> {
    pub detector: CascadeModel,
    pub ripeness: Network<S>,
    pub disease: Network<S>,
    pub disease_trigger: Vec<String>,
    pub crop_padding: f64,
}

impl<S: Scalar> PipelineModel<S> {
    /// Bundles the models with the default trigger and padding.
    pub fn new(detector: CascadeModel, ripeness: Network<S>, disease: Network<S>) -> Result<Self> {
        let m = Self {
            detector,
            ripeness,
            disease,
            disease_trigger: vec![DEFAULT_TRIGGER.to_string()],
            crop_padding: DEFAULT_CROP_PADDING,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn with_trigger(mut self, labels: Vec<String>) -> Result<Self> {
        self.disease_trigger = labels;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PipelineError::InvalidModel(m));
        self.detector.validate()?;
        if self.ripeness.num_classes() != RIPENESS_CLASSES.len() {
            return bad(format!("ripeness head has {} outputs, expected 3", self.ripeness.num_classes()));
        }
        if self.disease.num_classes() != DISEASE_CLASSES.len() {
            return bad(format!("disease head has {} outputs, expected 5", self.disease.num_classes()));
        }
        if let Some(t) = self.disease_trigger.iter().find(|t| !self.ripeness.class_names().contains(t)) {
            return bad(format!("trigger label {t:?} is not a ripeness class"));
        }
        if !(0.0..=1.0).contains(&self.crop_padding) {
            return bad(format!("crop padding {} outside [0, 1]", self.crop_padding));
        }
        Ok(())
    }

    pub fn classifier(&self, kind: ModelKind) -> &Network<S> {
        match kind {
            ModelKind::Ripeness => &self.ripeness,
            ModelKind::Disease => &self.disease,
        }
    }

    pub fn detect(&self, image: &Image<S>, scan: &ScanParams) -> Result<Vec<Detection>> {
        Ok(cascade::detect(&self.detector, image, scan)?)
    }

    /// Classifies `bbox` grown by the crop padding, or the whole image.
    pub fn classify_region(&self, image: &Image<S>, bbox: Option<&BBox>, kind: ModelKind) -> Result<Prediction> {
        let net = self.classifier(kind);
        match bbox {
            None => Ok(net.predict(image)?),
            Some(b) => {
                let (w, h) = (image.width() as f64, image.height() as f64);
                if b.validate().is_err() || !b.within(w, h) {
                    return Err(PipelineError::InvalidBox(format!("{b:?} is not inside the {w}x{h} image")));
                }
                let region = crop(image, &b.padded(self.crop_padding, w, h))?;
                Ok(net.predict(&region)?)
            }
        }
    }

    /// Reports for every detection, highest score first.
    pub fn grade_image(&self, image: &Image<S>, options: &GradeOptions) -> Result<Vec<FruitReport>> {
        let mut dets = self.detect(image, &options.scan)?;
        dets.sort_by(|a, b| b.score.total_cmp(&a.score));
        dets.into_iter()
            .map(|d| {
                let ripeness = self.classify_region(image, Some(&d.bbox), ModelKind::Ripeness)?;
                let disease = if options.force_disease || self.disease_trigger.contains(&ripeness.label) {
                    Some(self.classify_region(image, Some(&d.bbox), ModelKind::Disease)?)
                } else {
                    None
                };
                Ok(FruitReport { bbox: d.bbox, detection_score: d.score, ripeness, disease })
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut blobs = Vec::new();
        let mut m = Manifest::new(ContainerKind::Pipeline);
        m.detector = Some(self.detector.clone());
        m.ripeness = Some(container::pack_network(&self.ripeness, &mut blobs));
        m.disease = Some(container::pack_network(&self.disease, &mut blobs));
        m.disease_trigger = self.disease_trigger.clone();
        m.crop_padding = self.crop_padding;
        container::encode(&m, &blobs)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (m, blobs) = container::decode(bytes)?;
        let (Some(detector), Some(r), Some(d)) = (m.detector, m.ripeness.as_ref(), m.disease.as_ref()) else {
            return Err(PipelineError::InvalidModel("container does not hold a full pipeline".into()));
        };
        let model = Self {
            detector,
            ripeness: container::unpack_network(r, &blobs)?,
            disease: container::unpack_network(d, &blobs)?,
            disease_trigger: m.disease_trigger,
            crop_padding: m.crop_padding,
        };
        model.validate()?;
        Ok(model)
    }
}

pub fn save_pipeline<S: Scalar>(model: &PipelineModel<S>, path: &Path) -> Result<()> {
    Ok(std::fs::write(path, model.to_bytes()?)?)
}

pub fn load_pipeline<S: Scalar>(path: &Path) -> Result<PipelineModel<S>> {
    PipelineModel::from_bytes(&std::fs::read(path)?)
}

pub fn grade_image<S: Scalar>(model: &PipelineModel<S>, image: &Image<S>, options: &GradeOptions) -> Result<Vec<FruitReport>> {
    model.grade_image(image, options)
}
