//! Dataset ingestion: folder-per-class trees, detection CSVs, seeded splits,
//! class balancing, annotation rescaling, augmentation and window sampling
//! for the cascade trainer.

mod augment;
mod loaders;
mod split;
mod windows;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::{BBox, ImagingError};

pub use augment::{augment, AugmentationSpec, Rotation90};
pub use loaders::{load_classification_tree, load_detection_csv, write_detection_csv, CSV_HEADER};
pub use split::{balanced_subsample, split_dataset, DatasetSplit, SplitManifest, Splittable};
pub use windows::{extract_positive_windows, resize_with_boxes, sample_negative_windows};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("no class directories with images under {0}")]
    EmptyDataset(PathBuf),
    #[error("class directory {0} contains no decodable images")]
    EmptyClass(PathBuf),
    #[error("cannot read directory {path}: {source}")]
    UnreadableDirectory {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing column `{0}` in detection csv header")]
    MissingColumn(&'static str),
    #[error("row {row}: non-numeric value `{value}` in column `{column}`")]
    NonNumericCoordinate { row: usize, column: &'static str, value: String },
    #[error("row {row}: bounding box outside the image or empty")]
    BoxOutOfBounds { row: usize },
    #[error("split fractions must be nonnegative and sum to 1 (got {0:?})")]
    BadFractions([f64; 3]),
    #[error("class `{class}` has {have} samples, {want} requested")]
    InsufficientClassCount { class: String, have: usize, want: usize },
    #[error("image is {found:?} but the sample declares {declared:?}")]
    DimensionMismatch { declared: (usize, usize), found: (usize, usize) },
    #[error("no boxes of class `{0}` found")]
    NoPositives(String),
    #[error("found only {found} of {wanted} negative windows")]
    ExhaustedNegatives { found: usize, wanted: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

/// One labelled image of a folder-per-class dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassificationSample {
    pub image_path: String,
    pub class_id: usize,
    pub class_name: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledBox {
    pub class_name: String,
    pub bbox: BBox,
}

/// An annotated image of a detection dataset; `objects` may be empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionSample {
    pub image_path: String,
    pub image_w: usize,
    pub image_h: usize,
    pub objects: Vec<LabeledBox>,
}

impl DetectionSample {
    pub fn boxes_of<'a>(&'a self, class_filter: &'a str) -> impl Iterator<Item = &'a BBox> + 'a {
        self.objects
            .iter()
            .filter(move |o| o.class_name == class_filter)
            .map(|o| &o.bbox)
    }
}
