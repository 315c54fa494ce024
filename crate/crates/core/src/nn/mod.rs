//! Residual and plain CNN classifiers with SGDM training.

mod gradcheck;
mod layers;
mod network;
mod spec;
mod tensor;
mod train;

use thiserror::Error;

pub use gradcheck::{gradient_check, gradient_check_report, GradCheckReport, TensorCheck, COORDS_PER_TENSOR};
pub use network::{argmax, softmax, LayerGrads, LayerParams, Mode, Network, Prediction, BN_EPS, BN_MOMENTUM};
pub use spec::{
    build_linear, build_mini_plain, build_mini_resnet, build_named, build_resnet18, ArchitectureSpec, Node, Op,
};
pub use tensor::Tensor;
pub use train::{
    evaluate_planar, loss_and_grad, lr_at_epoch, train_classifier, train_step, EpochRecord, Schedule, Solver,
    TrainConfig, TrainHistory, Trainer, Velocity,
};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid architecture: {0}")]
    InvalidSpec(String),
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite activation at node {node}")]
    NonFiniteActivation { node: usize },
    #[error("non-finite gradient at node {node}")]
    NonFiniteGradient { node: usize },
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("network has no dense head to replace")]
    NoHeadFound,
    #[error("training set is empty")]
    EmptyDataset,
    #[error(transparent)]
    Imaging(#[from] crate::imaging::ImagingError),
    #[error(transparent)]
    Dataset(#[from] crate::dataset::DatasetError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, NnError>;
