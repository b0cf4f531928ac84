//! Regenerates the fuzz corpus seeds under `fuzz/corpus/<target>/`.
//!
//! cargo run --example fuzz_seeds

use std::path::{Path, PathBuf};

use keysig::config::PipelineConfig;
use keysig::curation::{FlagParams, ImageMeta};
use keysig::descriptor::describe;
use keysig::detector::{detect, ScaleSpaceParams};
use keysig::formats::encode_signature;
use keysig::pairwise::{score_pair, PairKey};
use keysig::report::ReportDocument;
use keysig::volume::synth::textured;
use keysig::volume::{encode_nifti, DType, Volume};

fn put(dir: &Path, name: &str, bytes: &[u8]) {
    std::fs::create_dir_all(dir).unwrap();
    std::fs::write(dir.join(name), bytes).unwrap();
}

fn main() {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fuzz/corpus");
    let small = Volume::new("s", [3, 2, 2], [1.0, 2.0, 0.5], (0..12).map(|i| i as f32).collect()).unwrap();

    let d = root.join("nifti");
    for dt in [DType::Uint8, DType::Int16, DType::Uint16, DType::Float32] {
        put(&d, &format!("small_{dt:?}.nii").to_lowercase(), &encode_nifti(&small, dt));
    }
    let fixtures = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    for f in ["ref_int16.nii", "ref_uint8_scaled.nii.gz", "ref_float32_be.nii"] {
        put(&d, f, &std::fs::read(fixtures.join(f)).unwrap());
    }

    let d = root.join("raw_sidecar");
    let json = br#"{"dims":[3,2,2],"spacing":[1,1,1],"dtype":"int16"}"#;
    let mut seed = vec![json.len() as u8];
    seed.extend_from_slice(json);
    seed.extend_from_slice(&vec![1u8; 24]);
    put(&d, "int16", &seed);
    let json = br#"{"dims":[2,2,2],"dtype":"float32"}"#;
    let mut seed = vec![json.len() as u8];
    seed.extend_from_slice(json);
    seed.extend_from_slice(&[0u8; 32]);
    put(&d, "float32", &seed);

    let v = textured(3, [32; 3]);
    let mut sig = describe(&v, &detect(&v, &ScaleSpaceParams::default()));
    sig.keypoints.truncate(4);
    sig.subject_id = "sub-0003".into();
    put(&root.join("ksig"), "four.ksig", &encode_signature(&sig).unwrap());
    sig.keypoints.clear();
    put(&root.join("ksig"), "empty.ksig", &encode_signature(&sig).unwrap());

    let images: Vec<ImageMeta> = (0..4)
        .map(|i| ImageMeta {
            image_id: format!("img-{i}"),
            subject_id: format!("sub-{}", i / 2),
            database: "db".into(),
            keypoints: 20,
        })
        .collect();
    let scores = [
        score_pair(PairKey::new(0, 1).unwrap(), 20, 20, 12, 11).unwrap(),
        score_pair(PairKey::new(1, 2).unwrap(), 20, 20, 1, 0).unwrap(),
    ];
    let r = ReportDocument::scored(images, Vec::new(), &scores, PipelineConfig::default()).unwrap();
    put(&root.join("report"), "scored.json", &r.to_json());
    put(
        &root.join("report"),
        "curated.json",
        &r.curated(&FlagParams::default(), &[]).unwrap().to_json(),
    );

    put(
        &root.join("decisions"),
        "two.jsonl",
        b"{\"pair\":[\"img-0\",\"img-1\"],\"verdict\":\"same\",\"curator\":\"ana\",\"timestamp\":\"2024-01-02T03:04:05.006Z\"}\n\
{\"pair\":[\"img-1\",\"img-2\"],\"verdict\":\"different\",\"curator\":\"ana\",\"timestamp\":\"2024-01-02T03:04:06Z\"}\n",
    );

    put(
        &root.join("tables"),
        "metadata.csv",
        b"image_id,subject_id,database,path\nimg-0,sub-0,db,vols/img-0.nii\nimg-1,sub-0,db,\n",
    );
    put(&root.join("tables"), "relations.csv", b"subject_a,subject_b,label\nsub-0,sub-1,MZ\n");

    put(
        &root.join("config"),
        "config.toml",
        b"[detector]\ncontrast_threshold = 0.02\n\n[index]\nchecks = 64\n\n[flags]\nz_threshold = 4.0\n",
    );
    put(&root.join("config"), "config.json", br#"{"matching": {"ratio": 0.85, "min_matches": 2}}"#);
    println!("corpus written to {}", root.display());
}
