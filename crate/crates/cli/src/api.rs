//! JSON API handlers, independent of the HTTP framework.
//!
//! Each handler takes the shared state and a decoded request and returns a
//! response body or an [`ApiError`] carrying the HTTP status.

use std::collections::BTreeMap;
use std::path::Path;

use fruitgrader::cascade::{self, CascadeModel, Detection, ScanParams};
use fruitgrader::imaging::{crop, decode_image, BBox, ImageFormat};
use fruitgrader::pipeline::container::load_network;
use fruitgrader::pipeline::{load_pipeline, DEFAULT_CROP_PADDING, DEFAULT_TRIGGER};
use fruitgrader::{FruitReport, GradeOptions, Image, ModelKind, Network, PipelineModel, Prediction};
use serde::{Deserialize, Serialize};

use crate::store::ImageStore;

pub const DEFAULT_MAX_UPLOAD: usize = 16 * 1024 * 1024;

pub const PIPELINE_FILE: &str = "pipeline.fgpm";
pub const DETECTOR_FILE: &str = "detector.json";
pub const RIPENESS_FILE: &str = "ripeness.fgpm";
pub const DISEASE_FILE: &str = "disease.fgpm";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ApiError {
    pub status: u16,
    pub message: String,
}

impl ApiError {
    pub fn new(status: u16, message: impl Into<String>) -> Self {
        Self { status, message: message.into() }
    }

    fn not_found(id: &str) -> Self {
        Self::new(404, format!("unknown image id {id:?}"))
    }

    fn unavailable(what: &str) -> Self {
        Self::new(503, format!("no {what} model loaded"))
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        Self::new(500, e.to_string())
    }
}

impl std::fmt::Display for ApiError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} {}", self.status, self.message)
    }
}

impl std::error::Error for ApiError {}

pub type ApiResult<T> = Result<T, ApiError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UploadResponse {
    pub image_id: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRequest {
    pub image_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectResponse {
    pub boxes: Vec<Detection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifyRequest {
    pub image_id: String,
    #[serde(default, rename = "box")]
    pub bbox: Option<BBox>,
    pub model: ModelKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradeRequest {
    pub image_id: String,
    #[serde(default)]
    pub force_disease: bool,
}

/// A prediction as the UI sees it: the label and a label → probability map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionBody {
    pub label: String,
    pub probs: BTreeMap<String, f64>,
}

impl PredictionBody {
    pub fn new(p: &Prediction, class_names: &[String]) -> Self {
        let probs = class_names.iter().cloned().zip(p.probs.iter().copied()).collect();
        Self { label: p.label.clone(), probs }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradedFruit {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
    pub ripeness: PredictionBody,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub disease: Option<PredictionBody>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradeResponse {
    pub image_id: String,
    pub detections: Vec<GradedFruit>,
}

impl GradeResponse {
    pub fn from_reports(image_id: String, reports: &[FruitReport], model: &PipelineModel) -> Self {
        let detections = reports
            .iter()
            .map(|r| GradedFruit {
                bbox: r.bbox,
                score: r.detection_score,
                ripeness: PredictionBody::new(&r.ripeness, model.ripeness.class_names()),
                disease: r.disease.as_ref().map(|d| PredictionBody::new(d, model.disease.class_names())),
            })
            .collect();
        Self { image_id, detections }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorInfo {
    pub window: (usize, usize),
    pub stages: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierInfo {
    pub architecture: String,
    /// Channels, height, width.
    pub input: (usize, usize, usize),
    pub classes: Vec<String>,
}

impl ClassifierInfo {
    fn of(net: &Network) -> Self {
        Self { architecture: net.spec().name.clone(), input: net.input_shape(), classes: net.class_names().to_vec() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelsResponse {
    pub detector: Option<DetectorInfo>,
    pub ripeness: Option<ClassifierInfo>,
    pub disease: Option<ClassifierInfo>,
    pub disease_trigger: Vec<String>,
    pub crop_padding: f64,
    pub grading: bool,
}

/// Whatever models were found; a missing one makes its endpoints answer 503.
#[derive(Clone, Debug, Default)]
pub struct ModelSet {
    pub detector: Option<CascadeModel>,
    pub ripeness: Option<Network>,
    pub disease: Option<Network>,
    pub disease_trigger: Vec<String>,
    pub crop_padding: f64,
    pub scan: ScanParams,
}

impl ModelSet {
    pub fn empty() -> Self {
        Self {
            disease_trigger: vec![DEFAULT_TRIGGER.to_string()],
            crop_padding: DEFAULT_CROP_PADDING,
            ..Self::default()
        }
    }

    pub fn from_pipeline(p: PipelineModel) -> Self {
        Self {
            detector: Some(p.detector),
            ripeness: Some(p.ripeness),
            disease: Some(p.disease),
            disease_trigger: p.disease_trigger,
            crop_padding: p.crop_padding,
            scan: ScanParams::default(),
        }
    }

    /// Loads `pipeline.fgpm` from `dir` when present, otherwise any of
    /// `detector.json`, `ripeness.fgpm` and `disease.fgpm`.
    pub fn load_dir(dir: &Path) -> anyhow::Result<Self> {
        use anyhow::Context;
        let bundle = dir.join(PIPELINE_FILE);
        if bundle.is_file() {
            let p = load_pipeline(&bundle).with_context(|| format!("loading {}", bundle.display()))?;
            return Ok(Self::from_pipeline(p));
        }
        let mut set = Self::empty();
        let det = dir.join(DETECTOR_FILE);
        if det.is_file() {
            let text = std::fs::read_to_string(&det).with_context(|| format!("reading {}", det.display()))?;
            set.detector = Some(CascadeModel::from_json(&text).with_context(|| format!("loading {}", det.display()))?);
        }
        for (file, slot) in [(RIPENESS_FILE, &mut set.ripeness), (DISEASE_FILE, &mut set.disease)] {
            let path = dir.join(file);
            if path.is_file() {
                *slot = Some(load_network(&path).with_context(|| format!("loading {}", path.display()))?);
            }
        }
        Ok(set)
    }

    /// The full pipeline when every part is present and consistent.
    pub fn pipeline(&self) -> Option<PipelineModel> {
        let p = PipelineModel {
            detector: self.detector.clone()?,
            ripeness: self.ripeness.clone()?,
            disease: self.disease.clone()?,
            disease_trigger: self.disease_trigger.clone(),
            crop_padding: self.crop_padding,
        };
        p.validate().ok().map(|_| p)
    }
}

/// Shared server state. Models never change after start-up.
pub struct AppState {
    pub store: ImageStore,
    pub models: ModelSet,
    pipeline: Option<PipelineModel>,
    pub max_upload: usize,
}

impl AppState {
    pub fn new(store: ImageStore, models: ModelSet, max_upload: usize) -> Self {
        let pipeline = models.pipeline();
        Self { store, models, pipeline, max_upload }
    }

    fn image(&self, id: &str) -> ApiResult<Image> {
        let bytes = self.store.get(id).map_err(ApiError::internal)?.ok_or_else(|| ApiError::not_found(id))?;
        decode_image(&bytes, ImageFormat::Png).map_err(ApiError::internal)
    }

    fn classifier(&self, kind: ModelKind) -> ApiResult<&Network> {
        let net = match kind {
            ModelKind::Ripeness => self.models.ripeness.as_ref(),
            ModelKind::Disease => self.models.disease.as_ref(),
        };
        net.ok_or_else(|| ApiError::unavailable(if kind == ModelKind::Ripeness { "ripeness" } else { "disease" }))
    }
}

pub fn handle_upload(state: &AppState, body: &[u8]) -> ApiResult<UploadResponse> {
    if body.len() > state.max_upload {
        return Err(ApiError::new(413, format!("upload of {} bytes exceeds {} bytes", body.len(), state.max_upload)));
    }
    if ImageFormat::sniff(body) != Some(ImageFormat::Png) {
        return Err(ApiError::new(415, "body is not a PNG image"));
    }
    decode_image::<f32>(body, ImageFormat::Png).map_err(|e| ApiError::new(415, format!("undecodable PNG: {e}")))?;
    let image_id = state.store.put(body).map_err(ApiError::internal)?;
    Ok(UploadResponse { image_id })
}

pub fn handle_get_image(state: &AppState, id: &str) -> ApiResult<Vec<u8>> {
    state.store.get(id).map_err(ApiError::internal)?.ok_or_else(|| ApiError::not_found(id))
}

pub fn handle_detect(state: &AppState, req: &ImageRequest) -> ApiResult<DetectResponse> {
    let image = state.image(&req.image_id)?;
    let detector = state.models.detector.as_ref().ok_or_else(|| ApiError::unavailable("detector"))?;
    let mut boxes = cascade::detect(detector, &image, &state.models.scan).map_err(ApiError::internal)?;
    boxes.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok(DetectResponse { boxes })
}

pub fn handle_classify(state: &AppState, req: &ClassifyRequest) -> ApiResult<PredictionBody> {
    let image = state.image(&req.image_id)?;
    let net = state.classifier(req.model)?;
    let pred = match &req.bbox {
        None => net.predict(&image),
        Some(b) => {
            let (w, h) = (image.width() as f64, image.height() as f64);
            if b.validate().is_err() || !b.within(w, h) {
                return Err(ApiError::new(400, format!("box {b:?} is not inside the {w}x{h} image")));
            }
            let region = crop(&image, &b.padded(state.models.crop_padding, w, h)).map_err(ApiError::internal)?;
            net.predict(&region)
        }
    }
    .map_err(ApiError::internal)?;
    Ok(PredictionBody::new(&pred, net.class_names()))
}

pub fn handle_grade(state: &AppState, req: &GradeRequest) -> ApiResult<GradeResponse> {
    let image = state.image(&req.image_id)?;
    let model = state.pipeline.as_ref().ok_or_else(|| ApiError::unavailable("grading pipeline"))?;
    let options = GradeOptions { force_disease: req.force_disease, scan: state.models.scan };
    let reports = model.grade_image(&image, &options).map_err(ApiError::internal)?;
    Ok(GradeResponse::from_reports(req.image_id.clone(), &reports, model))
}

pub fn handle_models(state: &AppState) -> ModelsResponse {
    let m = &state.models;
    ModelsResponse {
        detector: m.detector.as_ref().map(|d| DetectorInfo { window: d.window(), stages: d.stages.len() }),
        ripeness: m.ripeness.as_ref().map(ClassifierInfo::of),
        disease: m.disease.as_ref().map(ClassifierInfo::of),
        disease_trigger: m.disease_trigger.clone(),
        crop_padding: m.crop_padding,
        grading: state.pipeline.is_some(),
    }
}
