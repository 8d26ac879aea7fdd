//! Neural mesh likelihood, render-and-compare pose search and contrastive
//! training of vertex features.
//!
//! A pixel feature `f` scores `f . C` against the feature `C` that explains
//! it: the assigned vertex feature for foreground pixels covered by the
//! rendered silhouette, the background feature everywhere else. The negative
//! log-likelihood is `-(1/T)` times the summed scores.
//!
//! Pose optimization uses a smoothed version in which each foreground pixel
//! explains itself with a normalized blend of nearby projected vertex
//! features (plus a constant background share), which makes the objective
//! differentiable in the pose.

mod likelihood;
mod neural_mesh;
mod optimize;
mod train;

pub use likelihood::{evaluate, nll, nll_gradient, render_hard, render_soft, smooth_nll, Evaluation, SoftKernel};
pub use neural_mesh::{NeuralMesh, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, DEFAULT_MOMENTUM, DEFAULT_TEMPERATURE};
pub use optimize::{
    init_candidates, optimize_pose, parse_estimates, read_estimates, write_estimates, OptimizeOptions, PoseEstimate,
};
pub use train::{contrastive_loss, contrastive_step, train, train_epochs, TrainReport, TrainingItem, TrainingSet};

use std::path::PathBuf;

use thiserror::Error;

use crate::correspondence::CorrespondenceError;
use crate::featureio::FormatError;
use crate::geometry::GeometryError;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("expected {expected} channels, found {found}")]
    ChannelMismatch { expected: usize, found: usize },
    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("feature vector {0} is not unit norm")]
    NotUnit(usize),
    #[error("correspondence set is empty")]
    EmptyCorrespondence,
    #[error("correspondence set has not been refined")]
    NotRefined,
    #[error("match ({row}, {col}) -> vertex {vertex} is out of range")]
    MatchOutOfRange { row: usize, col: usize, vertex: usize },
    #[error("objective is not finite")]
    NonFinite,
    #[error("every pose candidate failed: {0}")]
    AllCandidatesFailed(String),
    #[error("no usable training images ({skipped} skipped)")]
    NoTrainingData { skipped: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("I/O error on {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Correspondence(#[from] CorrespondenceError),
}

pub type Result<T> = std::result::Result<T, RenderError>;
