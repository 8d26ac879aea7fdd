//! Pseudo-correspondences between image feature maps and template vertices.
//!
//! Matching runs in two passes: every foreground pixel is matched to the
//! vertex whose best per-view feature is most similar, the matches vote for a
//! discrete view of the bank, and scores of vertices hidden in the voted view
//! are then downweighted before re-matching.

mod bank;
mod export;
mod matching;

pub use bank::{build_view_bank, BankView, ViewBank};
pub use matching::{generate, match_raw, refine, vote_pose, VoteRule, DEFAULT_LAMBDA};

use std::path::PathBuf;

use thiserror::Error;

use crate::featureio::FormatError;
use crate::geometry::GeometryError;

#[derive(Debug, Error)]
pub enum CorrespondenceError {
    #[error("expected {expected} channels, found {found}")]
    ChannelMismatch { expected: usize, found: usize },
    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("{maps} feature maps for {poses} poses")]
    ViewCountMismatch { maps: usize, poses: usize },
    #[error("view bank needs at least one view")]
    NoViews,
    #[error("views {0} and {1} share the same pose")]
    DuplicateView(usize, usize),
    #[error("no vertex is visible in view {0}")]
    EmptyView(usize),
    #[error("mask has no foreground pixels")]
    EmptyForeground,
    #[error("correspondence set is empty")]
    EmptySet,
    #[error("pose label {label} out of range for {views} views")]
    InvalidPoseLabel { label: usize, views: usize },
    #[error("downweight factor {0} outside [0, 1]")]
    InvalidLambda(f64),
    #[error("correspondence set carries no per-vertex scores (was it loaded from a file?)")]
    MissingScores,
    #[error("{path:?} line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
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
}

pub type Result<T> = std::result::Result<T, CorrespondenceError>;

/// One pixel-to-vertex match.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub row: usize,
    pub col: usize,
    pub vertex: usize,
    /// Cosine similarity in `[-1, 1]`, after downweighting when refined.
    pub score: f32,
    /// Bank view whose feature achieved the score.
    pub view: usize,
}

/// Per-pixel, per-vertex best score and view kept by [`match_raw`] so that
/// [`refine`] can re-match without the image.
#[derive(Debug, Clone, PartialEq)]
struct ScoreTable {
    num_vertices: usize,
    scores: Vec<f32>,
    views: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceSet {
    pub matches: Vec<Match>,
    pub pose_label: Option<usize>,
    pub refined: bool,
    table: Option<ScoreTable>,
}

impl CorrespondenceSet {
    pub fn new(matches: Vec<Match>, pose_label: Option<usize>, refined: bool) -> Self {
        Self {
            matches,
            pose_label,
            refined,
            table: None,
        }
    }

    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }

    pub fn has_scores(&self) -> bool {
        self.table.is_some()
    }

    /// Mean match score.
    pub fn mean_score(&self) -> f64 {
        if self.matches.is_empty() {
            return 0.0;
        }
        self.matches.iter().map(|m| m.score as f64).sum::<f64>() / self.matches.len() as f64
    }
}
