#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nmpose::featureio::CorpusManifest;

pub fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nmpose"))
        .args(args)
        .output()
        .expect("binary runs")
}

/// Runs the binary, panicking with its stderr unless it exits 0; returns stdout.
pub fn run_ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "nmpose {args:?} exited {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A corpus written by `nmpose synth`.
pub struct Corpus {
    pub dir: PathBuf,
}

impl Corpus {
    pub fn synth(dir: &Path, extra: &[&str]) -> Self {
        let mut args = vec!["synth", "--out", s(dir)];
        args.extend_from_slice(extra);
        run_ok(&args);
        Self { dir: dir.to_path_buf() }
    }

    pub fn manifest(&self) -> PathBuf {
        self.dir.join("manifest.tsv")
    }

    pub fn bank(&self) -> PathBuf {
        self.dir.join("bank").join("manifest.tsv")
    }

    pub fn template(&self) -> PathBuf {
        self.dir.join("template.obj")
    }

    pub fn camera(&self) -> PathBuf {
        self.dir.join("camera.cfg")
    }

    pub fn generator(&self) -> PathBuf {
        self.dir.join("generator.nmsh")
    }

    pub fn bank_args(&self) -> Vec<String> {
        vec![
            "--bank".into(),
            s(&self.bank()).into(),
            "--template".into(),
            s(&self.template()).into(),
            "--camera".into(),
            s(&self.camera()).into(),
        ]
    }

    /// Writes a manifest with entries `range` of the corpus manifest next to it.
    pub fn subset(&self, name: &str, range: std::ops::Range<usize>) -> PathBuf {
        let m = CorpusManifest::read(self.manifest()).unwrap();
        let path = self.dir.join(name);
        CorpusManifest::new(m.entries[range].to_vec()).write(&path).unwrap();
        path
    }
}

/// `metric value` lines into a lookup.
pub fn metric(text: &str, key: &str) -> f64 {
    text.lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix(' ')))
        .unwrap_or_else(|| panic!("no {key} in\n{text}"))
        .trim()
        .parse()
        .unwrap()
}
