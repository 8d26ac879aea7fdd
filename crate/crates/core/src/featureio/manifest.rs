use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{FormatError, Result};
use crate::geometry::Pose;

/// One corpus item. Paths are resolved against the manifest's directory.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub feature_path: PathBuf,
    pub mask_path: Option<PathBuf>,
    /// Evaluation-only ground truth.
    pub pose: Option<Pose>,
}

/// Tab-separated corpus listing.
///
/// ```text
/// # id  feature  mask  azimuth  elevation  theta  distance
/// img0  img0.fmap  img0.msk  0.5  0.2  0  5
/// img1  img1.fmap  -  -
/// ```
///
/// A `-` mask means "no external mask"; a single `-` in place of the four pose
/// fields means "no ground truth".
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CorpusManifest {
    pub entries: Vec<ManifestEntry>,
}

impl CorpusManifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Self {
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Parses manifest text; relative paths are joined onto `base`.
    pub fn parse(text: &str, base: &Path, origin: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim_end_matches(['\r', '\n']);
            if trimmed.trim().is_empty() || trimmed.trim_start().starts_with('#') {
                continue;
            }
            let err = |message: String| FormatError::Manifest {
                path: origin.to_path_buf(),
                line,
                message,
            };
            let fields: Vec<&str> = trimmed.split('\t').collect();
            if fields.len() != 4 && fields.len() != 7 {
                return Err(err(format!(
                    "expected 4 or 7 tab-separated fields, got {}",
                    fields.len()
                )));
            }
            if fields[0].is_empty() || fields[1].is_empty() || fields[1] == "-" {
                return Err(err("id and feature path are required".into()));
            }
            let resolve = |p: &str| -> PathBuf {
                let p = Path::new(p);
                if p.is_absolute() {
                    p.to_path_buf()
                } else {
                    base.join(p)
                }
            };
            let pose = if fields.len() == 7 {
                let mut v = [0.0; 4];
                for (slot, s) in v.iter_mut().zip(&fields[3..]) {
                    *slot = s.parse().map_err(|_| err(format!("bad pose value {s:?}")))?;
                }
                Some(Pose::new(v[0], v[1], v[2], v[3]).map_err(|e| err(e.to_string()))?)
            } else if fields[3] == "-" {
                None
            } else {
                return Err(err(format!("expected '-' or four pose fields, got {:?}", fields[3])));
            };
            entries.push(ManifestEntry {
                id: fields[0].to_string(),
                feature_path: resolve(fields[1]),
                mask_path: (fields[2] != "-").then(|| resolve(fields[2])),
                pose,
            });
        }
        Ok(Self { entries })
    }

    /// Reads a manifest and checks that every referenced file exists.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| FormatError::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let manifest = Self::parse(&text, base, path)?;
        for e in &manifest.entries {
            for p in std::iter::once(&e.feature_path).chain(e.mask_path.as_ref()) {
                if !p.exists() {
                    return Err(FormatError::io(
                        p.clone(),
                        std::io::Error::new(std::io::ErrorKind::NotFound, format!("entry {:?}", e.id)),
                    ));
                }
            }
        }
        Ok(manifest)
    }

    /// Serializes with paths made relative to `base` where possible.
    pub fn to_text(&self, base: &Path) -> String {
        let rel = |p: &Path| -> String { p.strip_prefix(base).unwrap_or(p).to_string_lossy().into_owned() };
        let mut out = String::from("# id\tfeature\tmask\tazimuth\televation\ttheta\tdistance\n");
        for e in &self.entries {
            let mask = e.mask_path.as_deref().map(rel).unwrap_or_else(|| "-".into());
            let _ = write!(out, "{}\t{}\t{}", e.id, rel(&e.feature_path), mask);
            match &e.pose {
                Some(p) => {
                    let _ = writeln!(out, "\t{}\t{}\t{}\t{}", p.azimuth, p.elevation, p.theta, p.distance);
                }
                None => out.push_str("\t-\n"),
            }
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new("."));
        std::fs::write(path, self.to_text(base)).map_err(|e| FormatError::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_with_relative_paths() {
        let base = Path::new("/data/corpus");
        let m = CorpusManifest::new(vec![
            ManifestEntry {
                id: "a".into(),
                feature_path: base.join("a.fmap"),
                mask_path: Some(base.join("a.msk")),
                pose: Some(Pose::new(0.25, -0.1, 0.05, 5.5).unwrap()),
            },
            ManifestEntry {
                id: "b".into(),
                feature_path: PathBuf::from("/elsewhere/b.fmap"),
                mask_path: None,
                pose: None,
            },
        ]);
        let text = m.to_text(base);
        assert!(text.contains("a\ta.fmap\ta.msk\t0.25\t-0.1\t0.05\t5.5"));
        assert!(text.contains("b\t/elsewhere/b.fmap\t-\t-"));
        let back = CorpusManifest::parse(&text, base, Path::new("m.tsv")).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn errors_name_the_line() {
        let text = "# header\nok\tx.fmap\t-\t-\nbad\tx.fmap\t-\t1\t2\n";
        match CorpusManifest::parse(text, Path::new("."), Path::new("m.tsv")) {
            Err(FormatError::Manifest { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let neg = "x\tx.fmap\t-\t0\t0\t0\t-1\n";
        assert!(CorpusManifest::parse(neg, Path::new("."), Path::new("m.tsv")).is_err());
    }

    #[test]
    fn read_checks_paths() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.tsv");
        std::fs::write(&p, "x\tmissing.fmap\t-\t-\n").unwrap();
        assert!(matches!(CorpusManifest::read(&p), Err(FormatError::Io { .. })));
    }
}
