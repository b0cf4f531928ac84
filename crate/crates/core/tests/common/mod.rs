#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use keysig::cli;

pub struct Fixture {
    _dir: tempfile::TempDir,
    pub root: PathBuf,
}

impl Fixture {
    pub fn cohort(&self) -> PathBuf {
        self.root.join("cohort")
    }
    pub fn metadata(&self) -> PathBuf {
        self.cohort().join("metadata.csv")
    }
    pub fn sigs(&self) -> PathBuf {
        self.root.join("sigs")
    }
    pub fn scored(&self) -> PathBuf {
        self.root.join("scored.json")
    }
    pub fn curated(&self) -> PathBuf {
        self.root.join("curated.json")
    }
}

pub fn keysig(args: &[&str]) -> i32 {
    let mut v = vec!["keysig"];
    v.extend_from_slice(args);
    cli::run(v)
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A small synthetic cohort (16 subjects x 2 images, 48^3, 2 mislabeled
/// images) taken through synth, detect, score and curate once per test binary.
pub fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let f = Fixture { _dir: dir, root };
        let cohort = f.cohort();
        assert_eq!(
            keysig(&["--seed", "11", "synth", "--out", s(&cohort), "--subjects", "16", "--size", "48", "--id-errors", "2"]),
            0
        );
        assert_eq!(keysig(&["detect", "--metadata", s(&f.metadata()), "--out", s(&f.sigs())]), 0);
        assert_eq!(
            keysig(&["score", "--sigs", s(&f.sigs()), "--metadata", s(&f.metadata()), "--out", s(&f.scored())]),
            0
        );
        assert_eq!(keysig(&["curate", "--report", s(&f.scored()), "--out", s(&f.curated())]), 0);
        f
    })
}
