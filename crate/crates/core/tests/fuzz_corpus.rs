//! Replays the checked-in fuzz corpus plus deterministic mutations of every
//! seed through the parsers, so decoder panics surface without a fuzzer.

use std::path::PathBuf;

use keysig::config::PipelineConfig;
use keysig::formats::{decode_signature, parse_decisions, parse_metadata, parse_relations};
use keysig::report::ReportDocument;
use keysig::volume::{parse_nifti, parse_raw, RawSidecar};

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fuzz/corpus").join(target);
    let mut out: Vec<_> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

/// Truncations, single bit flips and byte overwrites at a spread of offsets.
fn mutations(seed: &[u8]) -> Vec<Vec<u8>> {
    let mut out = Vec::new();
    let n = seed.len();
    let step = (n / 64).max(1);
    for cut in (0..n).step_by(step) {
        out.push(seed[..cut].to_vec());
    }
    for at in (0..n).step_by(step) {
        for bit in [0, 3, 7] {
            let mut m = seed.to_vec();
            m[at] ^= 1 << bit;
            out.push(m);
        }
        for val in [0x00, 0xff, b'9', b'"'] {
            let mut m = seed.to_vec();
            m[at] = val;
            out.push(m);
        }
    }
    let mut grown = seed.to_vec();
    grown.extend_from_slice(seed);
    out.push(grown);
    out
}

fn run(target: &str, f: impl Fn(&[u8]) -> bool) {
    for (name, seed) in seeds(target) {
        assert!(f(&seed), "{target}/{name} should parse");
        for m in mutations(&seed) {
            f(&m);
        }
    }
}

fn as_text(b: &[u8]) -> Option<&str> {
    std::str::from_utf8(b).ok()
}

#[test]
fn nifti() {
    run("nifti", |b| match parse_nifti(b) {
        Ok(v) => {
            assert_eq!(v.data().len(), v.dims().iter().product::<usize>());
            true
        }
        Err(_) => false,
    });
}

#[test]
fn raw_sidecar() {
    run("raw_sidecar", |b| {
        let Some((&split, rest)) = b.split_first() else { return false };
        let (json, payload) = rest.split_at((split as usize).min(rest.len()));
        RawSidecar::parse(json).and_then(|s| parse_raw(payload, &s)).is_ok()
    });
}

#[test]
fn ksig() {
    run("ksig", |b| decode_signature(b).is_ok());
}

#[test]
fn report() {
    run("report", |b| match ReportDocument::from_json(b) {
        Ok(r) => {
            let _ = keysig::plot::render_svg(&r);
            let _ = r.curated(&r.config.pipeline.flags, &[]);
            true
        }
        Err(_) => false,
    });
}

#[test]
fn decisions() {
    run("decisions", |b| as_text(b).is_some_and(|t| parse_decisions(t).is_ok()));
}

#[test]
fn tables() {
    for (name, seed) in seeds("tables") {
        let parse = |b: &[u8]| {
            if name.starts_with("relations") {
                parse_relations(b).is_ok()
            } else {
                parse_metadata(b).is_ok()
            }
        };
        assert!(parse(&seed), "tables/{name} should parse");
        for m in mutations(&seed) {
            parse(&m);
            let _ = parse_metadata(m.as_slice());
            let _ = parse_relations(m.as_slice());
        }
    }
}

#[test]
fn config() {
    for (name, seed) in seeds("config") {
        let parse = |t: &str| {
            if name.ends_with(".json") {
                PipelineConfig::from_json(t).is_ok()
            } else {
                PipelineConfig::from_toml(t).is_ok()
            }
        };
        assert!(parse(as_text(&seed).unwrap()), "config/{name} should parse");
        for m in mutations(&seed) {
            if let Some(t) = as_text(&m) {
                let _ = PipelineConfig::from_toml(t);
                let _ = PipelineConfig::from_json(t);
            }
        }
    }
}
