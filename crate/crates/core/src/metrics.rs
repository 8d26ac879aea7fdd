//! Pose accuracy at angular thresholds, median rotation error and pooled
//! per-point PCK.
//!
//! Accuracy counts errors strictly below the threshold; PCK counts a point
//! as correct when its distance is at most `alpha * max(h, w)`. Displayed
//! percentages are rounded half-to-even to one decimal.

use std::f64::consts::PI;
use std::fmt::Write as _;

use thiserror::Error;

use crate::geometry::{geodesic_distance, GeometryError, Pose};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("empty input")]
    Empty,
    #[error("error {0} outside [0, pi]")]
    OutOfRange(f64),
    #[error("length mismatch: {0} predictions, {1} ground truth")]
    LengthMismatch(usize, usize),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("report line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

pub const PI_6: f64 = PI / 6.0;
pub const PI_18: f64 = PI / 18.0;

fn check_errors(errors: &[f64]) -> Result<()> {
    if errors.is_empty() {
        return Err(MetricsError::Empty);
    }
    match errors.iter().find(|e| !(0.0..=PI).contains(*e)) {
        Some(&e) => Err(MetricsError::OutOfRange(e)),
        None => Ok(()),
    }
}

/// Fraction of errors strictly below `threshold`.
pub fn pose_accuracy(errors: &[f64], threshold: f64) -> Result<f64> {
    check_errors(errors)?;
    Ok(errors.iter().filter(|&&e| e < threshold).count() as f64 / errors.len() as f64)
}

/// Lower median.
pub fn median_error(errors: &[f64]) -> Result<f64> {
    check_errors(errors)?;
    let mut v = errors.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(v[(v.len() - 1) / 2])
}

/// Geodesic rotation error between paired poses.
pub fn rotation_errors(pred: &[Pose], gt: &[Pose]) -> Result<Vec<f64>> {
    if pred.len() != gt.len() {
        return Err(MetricsError::LengthMismatch(pred.len(), gt.len()));
    }
    pred.iter()
        .zip(gt)
        .map(|(p, g)| Ok(geodesic_distance(&p.rotation(), &g.rotation())?))
        .collect()
}

fn percent(x: f64) -> String {
    format!("{:.1}", 100.0 * x)
}

fn parse_lines(text: &str) -> Result<Vec<(usize, String, f64)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |m: String| MetricsError::Parse {
            line: i + 1,
            message: m,
        };
        let mut parts = line.split_whitespace();
        let (Some(k), Some(v), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(bad(format!("expected `metric value`, got {line:?}")));
        };
        let v = v.parse::<f64>().map_err(|e| bad(format!("{v:?}: {e}")))?;
        out.push((i + 1, k.to_string(), v));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseEvalReport {
    pub acc_pi_6: f64,
    pub acc_pi_18: f64,
    pub median_error: f64,
    pub errors: Vec<f64>,
}

impl PoseEvalReport {
    pub fn from_errors(errors: Vec<f64>) -> Result<Self> {
        Ok(Self {
            acc_pi_6: pose_accuracy(&errors, PI_6)?,
            acc_pi_18: pose_accuracy(&errors, PI_18)?,
            median_error: median_error(&errors)?,
            errors,
        })
    }

    pub fn from_poses(pred: &[Pose], gt: &[Pose]) -> Result<Self> {
        Self::from_errors(rotation_errors(pred, gt)?)
    }

    /// `metric value` lines; per-sample errors follow as repeated `error` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "acc_pi_6 {}", self.acc_pi_6).unwrap();
        writeln!(s, "acc_pi_18 {}", self.acc_pi_18).unwrap();
        writeln!(s, "median_error {}", self.median_error).unwrap();
        writeln!(s, "count {}", self.errors.len()).unwrap();
        for e in &self.errors {
            writeln!(s, "error {e}").unwrap();
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let (mut a6, mut a18, mut med, mut count) = (None, None, None, None);
        let mut errors = Vec::new();
        for (line, k, v) in parse_lines(text)? {
            match k.as_str() {
                "acc_pi_6" => a6 = Some(v),
                "acc_pi_18" => a18 = Some(v),
                "median_error" => med = Some(v),
                "count" => count = Some(v as usize),
                "error" => errors.push(v),
                _ => {
                    return Err(MetricsError::Parse {
                        line,
                        message: format!("unknown metric {k:?}"),
                    })
                }
            }
        }
        let missing = |m: &str| MetricsError::Parse {
            line: 0,
            message: format!("missing {m}"),
        };
        if count.is_some_and(|c| c != errors.len()) {
            return Err(missing("error lines (count disagrees)"));
        }
        Ok(Self {
            acc_pi_6: a6.ok_or_else(|| missing("acc_pi_6"))?,
            acc_pi_18: a18.ok_or_else(|| missing("acc_pi_18"))?,
            median_error: med.ok_or_else(|| missing("median_error"))?,
            errors,
        })
    }

    /// Human-readable table, accuracies in percent.
    pub fn table(&self) -> String {
        format!(
            "samples        {}\nAcc@pi/6       {}\nAcc@pi/18      {}\nmedian (deg)   {:.1}\n",
            self.errors.len(),
            percent(self.acc_pi_6),
            percent(self.acc_pi_18),
            self.median_error.to_degrees()
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PckReport {
    pub alpha: f64,
    pub correct: usize,
    pub total: usize,
}

impl PckReport {
    pub fn empty(alpha: f64) -> Self {
        Self {
            alpha,
            correct: 0,
            total: 0,
        }
    }

    /// Percentage of correct points; 0 when there are none.
    pub fn pck(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            100.0 * self.correct as f64 / self.total as f64
        }
    }

    /// Pools the counts of two reports with the same alpha.
    pub fn merge(&self, other: &Self) -> Result<Self> {
        if self.alpha != other.alpha {
            return Err(MetricsError::InvalidParameter(format!(
                "cannot pool alpha {} with alpha {}",
                self.alpha, other.alpha
            )));
        }
        Ok(Self {
            alpha: self.alpha,
            correct: self.correct + other.correct,
            total: self.total + other.total,
        })
    }

    pub fn to_text(&self) -> String {
        format!(
            "pck {}\nalpha {}\ncorrect {}\ntotal {}\n",
            self.pck(),
            self.alpha,
            self.correct,
            self.total
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let (mut alpha, mut correct, mut total) = (None, None, None);
        for (line, k, v) in parse_lines(text)? {
            match k.as_str() {
                "pck" => {}
                "alpha" => alpha = Some(v),
                "correct" => correct = Some(v as usize),
                "total" => total = Some(v as usize),
                _ => {
                    return Err(MetricsError::Parse {
                        line,
                        message: format!("unknown metric {k:?}"),
                    })
                }
            }
        }
        let missing = |m: &str| MetricsError::Parse {
            line: 0,
            message: format!("missing {m}"),
        };
        let r = Self {
            alpha: alpha.ok_or_else(|| missing("alpha"))?,
            correct: correct.ok_or_else(|| missing("correct"))?,
            total: total.ok_or_else(|| missing("total"))?,
        };
        if r.correct > r.total {
            return Err(missing("consistent counts (correct > total)"));
        }
        Ok(r)
    }

    pub fn table(&self) -> String {
        format!(
            "points         {}\nPCK@{}       {:.1}\n",
            self.total,
            self.alpha,
            self.pck()
        )
    }
}

/// Per-point PCK of one set of keypoints against a `(h, w)` box.
pub fn pck(pred: &[(f64, f64)], gt: &[(f64, f64)], bbox: (f64, f64), alpha: f64) -> Result<PckReport> {
    if pred.len() != gt.len() {
        return Err(MetricsError::LengthMismatch(pred.len(), gt.len()));
    }
    if !(bbox.0 > 0.0 && bbox.1 > 0.0) {
        return Err(MetricsError::InvalidParameter(format!(
            "bbox must be positive, got {bbox:?}"
        )));
    }
    if !(alpha > 0.0) {
        return Err(MetricsError::InvalidParameter(format!(
            "alpha must be positive, got {alpha}"
        )));
    }
    let limit = alpha * bbox.0.max(bbox.1);
    let correct = pred
        .iter()
        .zip(gt)
        .filter(|(p, g)| (p.0 - g.0).hypot(p.1 - g.1) <= limit)
        .count();
    Ok(PckReport {
        alpha,
        correct,
        total: pred.len(),
    })
}
