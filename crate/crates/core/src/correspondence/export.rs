//! Text form of a correspondence set:
//!
//! ```text
//! pose_label 17
//! 3 5 120 0.9731 17
//! ```
//!
//! One `row col vertex score view` line per match. An unset label is written
//! as `pose_label -`. Loading marks a set refined iff it carries a label; the
//! per-vertex score table is not stored.

use std::fmt::Write as _;
use std::path::Path;

use super::{CorrespondenceError, CorrespondenceSet, Match, Result};

impl CorrespondenceSet {
    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(16 + 32 * self.matches.len());
        match self.pose_label {
            Some(k) => {
                let _ = writeln!(out, "pose_label {k}");
            }
            None => out.push_str("pose_label -\n"),
        }
        for m in &self.matches {
            let _ = writeln!(out, "{} {} {} {} {}", m.row, m.col, m.vertex, m.score, m.view);
        }
        out
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let err = |line: usize, message: String| CorrespondenceError::Parse {
            path: origin.to_path_buf(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| err(1, "missing pose_label header".into()))?;
        let label = match header.split_whitespace().collect::<Vec<_>>()[..] {
            ["pose_label", "-"] => None,
            ["pose_label", k] => Some(k.parse().map_err(|_| err(1, format!("bad pose label {k:?}")))?),
            _ => return Err(err(1, "expected 'pose_label <k>'".into())),
        };
        let mut matches = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 5 {
                return Err(err(i + 1, format!("expected 5 fields, got {}", f.len())));
            }
            let int = |s: &str| s.parse::<usize>().map_err(|_| err(i + 1, format!("bad integer {s:?}")));
            let score: f32 = f[3].parse().map_err(|_| err(i + 1, format!("bad score {:?}", f[3])))?;
            if !(-1.0..=1.0).contains(&score) {
                return Err(err(i + 1, format!("score {score} outside [-1, 1]")));
            }
            matches.push(Match {
                row: int(f[0])?,
                col: int(f[1])?,
                vertex: int(f[2])?,
                score,
                view: int(f[4])?,
            });
        }
        Ok(Self::new(matches, label, label.is_some()))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| CorrespondenceError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text, path)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|source| CorrespondenceError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}
