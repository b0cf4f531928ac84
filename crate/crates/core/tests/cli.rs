mod common;

use std::path::Path;
use std::process::Command;

use common::{fixture, keysig, s};
use keysig::curation::RelationshipLabel;
use keysig::formats::{read_signature, DecisionRecord};
use keysig::report::ReportDocument;
use keysig::volume::synth::textured;
use keysig::volume::{write_nifti, DType, Volume};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_keysig"))
}

fn write_vol(dir: &Path, name: &str, v: &Volume) {
    write_nifti(v, DType::Int16, &dir.join(name)).unwrap();
}

fn int16ish(v: &Volume) -> Volume {
    v.map(|x| (x * 1000.0).round())
}

#[test]
fn detect_writes_one_signature_per_volume() {
    let t = tempfile::tempdir().unwrap();
    let vols = t.path().join("vols");
    std::fs::create_dir(&vols).unwrap();
    for i in 0..3 {
        write_vol(&vols, &format!("v{i}.nii"), &int16ish(&textured(i, [40; 3])));
    }
    let out = t.path().join("sigs");
    let o = bin().args(["detect", "--in", s(&vols), "--out", s(&out)]).output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(stdout.lines().filter(|l| l.contains("keypoints")).count(), 3);
    for i in 0..3 {
        let sig = read_signature(&out.join(format!("v{i}.ksig"))).unwrap();
        assert_eq!(sig.image_id, format!("v{i}"));
        assert_eq!(sig.source_dims, [40; 3]);
        assert_eq!(sig.source_voxel_bytes, 2);
        assert!(!sig.is_empty());
    }
}

#[test]
fn detect_is_deterministic() {
    let t = tempfile::tempdir().unwrap();
    write_vol(t.path(), "a.nii", &int16ish(&textured(5, [40; 3])));
    let (o1, o2) = (t.path().join("o1"), t.path().join("o2"));
    assert_eq!(keysig(&["detect", "--in", s(&t.path().join("a.nii")), "--out", s(&o1)]), 0);
    assert_eq!(
        keysig(&["--threads", "1", "detect", "--in", s(&t.path().join("a.nii")), "--out", s(&o2)]),
        0
    );
    assert_eq!(std::fs::read(o1.join("a.ksig")).unwrap(), std::fs::read(o2.join("a.ksig")).unwrap());
}

#[test]
fn constant_volume_gives_empty_signature_and_warning() {
    let t = tempfile::tempdir().unwrap();
    let v = Volume::new("flat", [32; 3], [1.0; 3], vec![7.0; 32 * 32 * 32]).unwrap();
    write_vol(t.path(), "flat.nii", &v);
    let out = t.path().join("sigs");
    let o = bin()
        .args(["detect", "--in", s(&t.path().join("flat.nii")), "--out", s(&out)])
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("warning"));
    assert!(read_signature(&out.join("flat.ksig")).unwrap().is_empty());
}

#[test]
fn corrupt_inputs_are_listed_and_exit_nonzero() {
    let t = tempfile::tempdir().unwrap();
    let vols = t.path().join("vols");
    std::fs::create_dir(&vols).unwrap();
    write_vol(&vols, "good.nii", &int16ish(&textured(1, [32; 3])));
    std::fs::write(vols.join("bad1.nii"), b"not a nifti file").unwrap();
    let mut trunc = std::fs::read(vols.join("good.nii")).unwrap();
    trunc.truncate(trunc.len() / 2);
    std::fs::write(vols.join("bad2.nii"), trunc).unwrap();
    let o = bin()
        .args(["detect", "--in", s(&vols), "--out", s(&t.path().join("sigs"))])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("bad1.nii") && err.contains("bad2.nii"), "{err}");
    assert!(t.path().join("sigs/good.ksig").exists());
}

fn metadata(path: &Path, rows: &[(&str, &str, &str)]) {
    let mut t = String::from("image_id,subject_id,database,path\n");
    for (i, s, d) in rows {
        t.push_str(&format!("{i},{s},{d},\n"));
    }
    std::fs::write(path, t).unwrap();
}

#[test]
fn duplicate_signatures_score_zero_distance() {
    let t = tempfile::tempdir().unwrap();
    let vol = int16ish(&textured(3, [40; 3]));
    write_vol(t.path(), "a.nii", &vol);
    write_vol(t.path(), "b.nii", &vol);
    let sigs = t.path().join("sigs");
    assert_eq!(
        keysig(&["detect", "--in", s(&t.path().join("a.nii")), s(&t.path().join("b.nii")), "--out", s(&sigs)]),
        0
    );
    let meta = t.path().join("m.csv");
    metadata(&meta, &[("a", "s1", "db"), ("b", "s2", "db")]);
    let out = t.path().join("r.json");
    assert_eq!(keysig(&["score", "--sigs", s(&sigs), "--metadata", s(&meta), "--out", s(&out)]), 0);
    let r = ReportDocument::read(&out).unwrap();
    assert_eq!(r.total_pairs, 1);
    assert_eq!(r.pairs.len(), 1);
    assert_eq!(r.pairs[0].distance, 0.0);
    assert_eq!(r.pairs[0].jaccard, 1.0);
    assert_eq!(r.version, 0);
    assert!(r.flags.is_empty());
}

#[test]
fn score_requires_metadata_for_every_signature() {
    let f = fixture();
    let t = tempfile::tempdir().unwrap();
    let meta = t.path().join("m.csv");
    let full = std::fs::read_to_string(f.metadata()).unwrap();
    let dropped: Vec<&str> = full.lines().filter(|l| !l.starts_with("img-0003-1")).collect();
    std::fs::write(&meta, dropped.join("\n")).unwrap();
    let o = bin()
        .args(["score", "--sigs", s(&f.sigs()), "--metadata", s(&meta), "--out", s(&t.path().join("r.json"))])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("img-0003-1"));
}

#[test]
fn cross_database_pairs_are_unrelated() {
    let f = fixture();
    let t = tempfile::tempdir().unwrap();
    // give both images of subject 2 the same subject id but different databases,
    // and move subject 4 to another database entirely
    let text = std::fs::read_to_string(f.metadata()).unwrap();
    let edited: String = text
        .lines()
        .map(|l| {
            if l.starts_with("img-0004-") {
                l.replace(",synth,", ",other,")
            } else {
                l.to_string()
            }
        })
        .map(|l| l + "\n")
        .collect();
    let meta = t.path().join("m.csv");
    std::fs::write(&meta, edited).unwrap();
    let rel = t.path().join("rel.csv");
    std::fs::write(&rel, "subject_a,subject_b,label\nsub-0004,sub-0005,MZ\nsub-0008,sub-0009,DZ\n").unwrap();
    let out = t.path().join("r.json");
    assert_eq!(
        keysig(&["score", "--sigs", s(&f.sigs()), "--metadata", s(&meta), "--relations", s(&rel), "--out", s(&out)]),
        0
    );
    let r = ReportDocument::read(&out).unwrap();
    let db = |i: u32| r.images[i as usize].database.as_str();
    let subj = |i: u32| r.images[i as usize].subject_id.as_str();
    for p in &r.pairs {
        if db(p.a) != db(p.b) && subj(p.a) != subj(p.b) {
            assert_eq!(p.label, RelationshipLabel::UR);
        }
    }
    // the cross-database relation is ignored, the same-database one applies
    let dz = r.stats_for(RelationshipLabel::DZ).unwrap();
    assert_eq!(dz.n_finite + dz.n_no_evidence, 4);
    assert!(r.stats_for(RelationshipLabel::MZ).is_none());
}

#[test]
fn curate_reports_malformed_decision_line() {
    let f = fixture();
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d.jsonl");
    std::fs::write(
        &d,
        "{\"pair\":[\"img-0000-0\",\"img-0000-1\"],\"verdict\":\"same\",\"curator\":\"a\",\"timestamp\":\"2024-01-01T00:00:00Z\"}\n{oops\n",
    )
    .unwrap();
    let o = bin()
        .args(["curate", "--report", s(&f.scored()), "--decisions", s(&d), "--out", s(&t.path().join("c.json"))])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));
}

#[test]
fn empty_decisions_equal_flag_only_run() {
    let f = fixture();
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d.jsonl");
    std::fs::write(&d, "").unwrap();
    let out = t.path().join("c.json");
    assert_eq!(
        keysig(&["curate", "--report", s(&f.scored()), "--decisions", s(&d), "--out", s(&out)]),
        0
    );
    assert_eq!(std::fs::read(out).unwrap(), std::fs::read(f.curated()).unwrap());
}

#[test]
fn fixture_flags_recover_injected_errors_and_fixpoint_holds() {
    let f = fixture();
    let r = ReportDocument::read(&f.curated()).unwrap();
    assert_eq!(r.version, 1);
    let truth = std::fs::read_to_string(f.cohort().join("truth.csv")).unwrap();
    let bad: Vec<&str> = truth
        .lines()
        .skip(1)
        .filter_map(|l| {
            let c: Vec<&str> = l.split(',').collect();
            (c[1] != c[2]).then_some(c[0])
        })
        .collect();
    assert_eq!(bad.len(), 2);
    for b in &bad {
        let partner = format!("{}0", &b[..b.len() - 1]);
        assert!(
            r.flags.iter().any(|fl| {
                let ids = [&r.images[fl.pair.a as usize].image_id, &r.images[fl.pair.b as usize].image_id];
                ids.contains(&&b.to_string()) && ids.contains(&&partner)
            }),
            "{b} not flagged"
        );
    }
    // confirm every flag as suggested and re-curate
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d.jsonl");
    let lines: String = r
        .flags
        .iter()
        .map(|fl| {
            let verdict = match fl.suggested {
                keysig::curation::Suggestion::SameSubject => keysig::curation::Verdict::Same,
                keysig::curation::Suggestion::DifferentSubject => keysig::curation::Verdict::Different,
            };
            DecisionRecord {
                pair: [
                    r.images[fl.pair.a as usize].image_id.clone(),
                    r.images[fl.pair.b as usize].image_id.clone(),
                ],
                verdict,
                curator: "test".into(),
                timestamp: "2024-01-01T00:00:00Z".parse().unwrap(),
            }
            .to_line()
                + "\n"
        })
        .collect();
    std::fs::write(&d, lines).unwrap();
    let out = t.path().join("c2.json");
    assert_eq!(
        keysig(&["curate", "--report", s(&f.curated()), "--decisions", s(&d), "--out", s(&out)]),
        0
    );
    let r2 = ReportDocument::read(&out).unwrap();
    assert_eq!(r2.version, 2);
    assert!(r2.flags.is_empty(), "{:?}", r2.flags);
    assert_eq!(r2.decisions_applied, r.flags.len());
}

#[test]
fn plot_writes_panels_in_median_order() {
    let f = fixture();
    let t = tempfile::tempdir().unwrap();
    let out = t.path().join("fig.svg");
    assert_eq!(keysig(&["plot", "--report", s(&f.curated()), "--out", s(&out)]), 0);
    let svg = std::fs::read_to_string(&out).unwrap();
    let sm = svg.find(r#"data-label="SM""#).unwrap();
    let ur = svg.find(r#"data-label="UR""#).unwrap();
    assert!(sm < ur);
    let r = ReportDocument::read(&f.curated()).unwrap();
    assert_eq!(svg.matches(r#"class="flag""#).count(), r.flags.len());
}

#[test]
fn exit_codes() {
    assert_eq!(keysig(&[]), 1);
    assert_eq!(keysig(&["detect"]), 1);
    assert_eq!(keysig(&["frobnicate"]), 1);
    assert_eq!(keysig(&["--help"]), 0);
    let t = tempfile::tempdir().unwrap();
    assert_eq!(keysig(&["plot", "--report", s(&t.path().join("none.json")), "--out", "x.svg"]), 2);
    let cfg = t.path().join("c.toml");
    std::fs::write(&cfg, "[matching]\nratio = 3.0\n").unwrap();
    assert_eq!(keysig(&["--config", s(&cfg), "plot", "--report", "r.json", "--out", "x.svg"]), 2);
    std::fs::write(&cfg, "[flags]\nz_threshold = 4.5\n").unwrap();
    let f = fixture();
    let out = t.path().join("c.json");
    assert_eq!(keysig(&["--config", s(&cfg), "curate", "--report", s(&f.scored()), "--out", s(&out)]), 0);
    assert_eq!(ReportDocument::read(&out).unwrap().config.pipeline.flags.z_threshold, 4.5);
    let o = bin().arg("bogus").output().unwrap();
    assert_eq!(o.status.code(), Some(1));
}
