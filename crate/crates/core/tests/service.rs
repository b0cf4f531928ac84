mod common;

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use common::fixture;
use keysig::curation::RelationshipLabel;
use keysig::report::ReportDocument;
use keysig::review::{router, ReviewState};
use keysig::volume::synth::{synth_blobs, Blob};
use keysig::volume::{write_nifti, DType};

struct Session {
    _dir: tempfile::TempDir,
    log: PathBuf,
    app: Router,
}

fn session_with(volumes: Option<HashMap<String, PathBuf>>, ui: Option<PathBuf>) -> Session {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("decisions.jsonl");
    let state = ReviewState::open(&fixture().curated(), log.clone(), volumes).unwrap();
    Session {
        _dir: dir,
        log,
        app: router(Arc::new(state), ui),
    }
}

fn session() -> Session {
    session_with(None, None)
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, axum::http::HeaderMap, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let headers = resp.headers().clone();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, headers, bytes)
}

async fn get_json(app: &Router, uri: &str) -> (StatusCode, Value) {
    let (st, _, b) = call(app, "GET", uri, None).await;
    (st, serde_json::from_slice(&b).unwrap())
}

fn report() -> ReportDocument {
    ReportDocument::read(&fixture().curated()).unwrap()
}

fn flag_pair(r: &ReportDocument, i: usize) -> [String; 2] {
    let f = &r.flags[i];
    [
        r.images[f.pair.a as usize].image_id.clone(),
        r.images[f.pair.b as usize].image_id.clone(),
    ]
}

#[tokio::test]
async fn report_is_byte_identical_to_curate_output() {
    let s = session();
    let (st, h, body) = call(&s.app, "GET", "/api/report", None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(h["x-report-version"], "1");
    assert_eq!(body, std::fs::read(fixture().curated()).unwrap());
}

#[tokio::test]
async fn flag_filters() {
    let s = session();
    let r = report();
    assert!(!r.flags.is_empty());
    let (st, all) = get_json(&s.app, "/api/flags").await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(all.as_array().unwrap().len(), r.flags.len());
    let sev: Vec<f64> = all.as_array().unwrap().iter().map(|f| f["severity"].as_f64().unwrap()).collect();
    assert!(sev.windows(2).all(|w| w[0] >= w[1]));

    let (_, ur) = get_json(&s.app, "/api/flags?label=UR").await;
    for f in ur.as_array().unwrap() {
        assert_eq!(f["label"], "UR");
        assert_eq!(f["direction"], "too_similar");
    }
    let (_, none) = get_json(&s.app, "/api/flags?min_severity=1e9").await;
    assert!(none.as_array().unwrap().is_empty());
    let (st, err) = get_json(&s.app, "/api/flags?label=XX").await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    assert!(err["detail"].as_str().unwrap().contains("SM, MZ, DZ, FS, UR"));
    assert!(err["error"].is_string());
    let (st, _) = get_json(&s.app, "/api/flags?min_severity=abc").await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn decisions_are_appended_and_validated() {
    let s = session();
    let r = report();
    let pair = flag_pair(&r, 0);
    let (st, _, b) = call(
        &s.app,
        "POST",
        "/api/decisions",
        Some(json!({"pair": pair, "verdict": "same", "curator": "ana"})),
    )
    .await;
    assert_eq!(st, StatusCode::CREATED);
    let stored: Value = serde_json::from_slice(&b).unwrap();
    assert_eq!(stored["verdict"], "same");
    assert_eq!(stored["pair"], json!(pair));
    assert!(stored["timestamp"].is_string());
    let first = std::fs::read(&s.log).unwrap();

    let (st, _, _) = call(
        &s.app,
        "POST",
        "/api/decisions",
        Some(json!({"pair": [pair[1], pair[0]], "verdict": "unsure", "curator": "ana"})),
    )
    .await;
    assert_eq!(st, StatusCode::CREATED);
    let second = std::fs::read(&s.log).unwrap();
    assert!(second.starts_with(&first));
    let (_, log) = get_json(&s.app, "/api/decisions").await;
    assert_eq!(log.as_array().unwrap().len(), 2);
    assert_eq!(log[1]["verdict"], "unsure");

    let (st, _, b) = call(
        &s.app,
        "POST",
        "/api/decisions",
        Some(json!({"pair": pair, "verdict": "maybe", "curator": "ana"})),
    )
    .await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    let e: Value = serde_json::from_slice(&b).unwrap();
    assert!(e["error"].is_string() && e["detail"].is_string());
    let (st, _, _) = call(
        &s.app,
        "POST",
        "/api/decisions",
        Some(json!({"pair": ["img-0000-0", "nope"], "verdict": "same", "curator": "ana"})),
    )
    .await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    let (st, _, _) = call(&s.app, "POST", "/api/decisions", Some(json!({"verdict": "same"}))).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    assert_eq!(std::fs::read(&s.log).unwrap(), second);
}

fn without_version(mut v: Value) -> Value {
    v.as_object_mut().unwrap().remove("version");
    v
}

#[tokio::test]
async fn recurate_without_decisions_only_bumps_version() {
    let s = session();
    let (_, before) = get_json(&s.app, "/api/report").await;
    let (st, h, b) = call(&s.app, "POST", "/api/recurate", None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(h["x-report-version"], "2");
    let after: Value = serde_json::from_slice(&b).unwrap();
    assert_eq!(after["version"], 2);
    assert_eq!(without_version(before), without_version(after));
    let (_, now) = get_json(&s.app, "/api/report").await;
    assert_eq!(now["version"], 2);
}

#[tokio::test]
async fn deciding_every_flag_as_suggested_clears_all_flags() {
    let s = session();
    let r = report();
    for (i, f) in r.flags.iter().enumerate() {
        let verdict = match f.suggested {
            keysig::curation::Suggestion::SameSubject => "same",
            keysig::curation::Suggestion::DifferentSubject => "different",
        };
        let (st, _, _) = call(
            &s.app,
            "POST",
            "/api/decisions",
            Some(json!({"pair": flag_pair(&r, i), "verdict": verdict, "curator": "ana"})),
        )
        .await;
        assert_eq!(st, StatusCode::CREATED);
    }
    let (st, _, b) = call(&s.app, "POST", "/api/recurate", None).await;
    assert_eq!(st, StatusCode::OK);
    let next: ReportDocument = serde_json::from_slice(&b).unwrap();
    assert_eq!(next.version, 2);
    assert!(next.flags.is_empty());
    for f in &r.flags {
        let p = next.pairs.iter().find(|p| p.a == f.pair.a && p.b == f.pair.b).unwrap();
        assert_eq!(p.label, RelationshipLabel::SM);
    }
    let (_, flags) = get_json(&s.app, "/api/flags").await;
    assert!(flags.as_array().unwrap().is_empty());
}

#[tokio::test]
async fn decisions_on_unflagged_pairs_are_honored() {
    let s = session();
    let r = report();
    let sm = r
        .pairs
        .iter()
        .find(|p| p.label == RelationshipLabel::SM && !r.flags.iter().any(|f| f.pair.a == p.a && f.pair.b == p.b))
        .unwrap();
    let ids = [r.images[sm.a as usize].image_id.clone(), r.images[sm.b as usize].image_id.clone()];
    call(&s.app, "POST", "/api/decisions", Some(json!({"pair": ids, "verdict": "different", "curator": "ana"}))).await;
    let (_, _, b) = call(&s.app, "POST", "/api/recurate", None).await;
    let next: ReportDocument = serde_json::from_slice(&b).unwrap();
    let p = next.pairs.iter().find(|p| p.a == sm.a && p.b == sm.b).unwrap();
    assert_eq!(p.label, RelationshipLabel::UR);
    assert_eq!(next.decisions_applied, 1);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn concurrent_recurate_conflicts_and_reads_are_consistent() {
    let s = session();
    let mut handles = Vec::new();
    for _ in 0..4 {
        let app = s.app.clone();
        handles.push(tokio::spawn(async move { call(&app, "POST", "/api/recurate", None).await.0 }));
    }
    let mut readers = Vec::new();
    for _ in 0..8 {
        let app = s.app.clone();
        readers.push(tokio::spawn(async move {
            let (_, h, b) = call(&app, "GET", "/api/report", None).await;
            let v: Value = serde_json::from_slice(&b).unwrap();
            assert_eq!(h["x-report-version"].to_str().unwrap(), v["version"].to_string());
        }));
    }
    let codes: Vec<StatusCode> = futures_join(handles).await;
    for r in readers {
        r.await.unwrap();
    }
    assert!(codes.iter().all(|c| *c == StatusCode::OK || *c == StatusCode::CONFLICT));
    let ok = codes.iter().filter(|c| **c == StatusCode::OK).count() as u64;
    assert!(ok >= 1);
    let (_, now) = get_json(&s.app, "/api/report").await;
    assert_eq!(now["version"], 1 + ok);
}

async fn futures_join(hs: Vec<tokio::task::JoinHandle<StatusCode>>) -> Vec<StatusCode> {
    let mut out = Vec::new();
    for h in hs {
        out.push(h.await.unwrap());
    }
    out
}

#[tokio::test]
async fn recurate_is_exclusive() {
    let s = session();
    let req = || call(&s.app, "POST", "/api/recurate", None);
    let (a, b) = tokio::join!(req(), req());
    let mut codes = [a.0, b.0];
    codes.sort();
    assert_eq!(codes, [StatusCode::OK, StatusCode::CONFLICT]);
}

#[tokio::test]
async fn slices() {
    let dir = tempfile::tempdir().unwrap();
    let dims = [32, 24, 20];
    let blob = synth_blobs(1, dims, &[Blob::new([20.0, 7.0, 10.0], 2.5, 1.0)], None);
    let path = dir.path().join("blob.nii");
    write_nifti(&blob.map(|x| (x * 1000.0).round()), DType::Int16, &path).unwrap();
    let volumes = HashMap::from([("img-0000-0".to_string(), path)]);
    let s = session_with(Some(volumes), None);

    let (st, h, png_bytes) = call(&s.app, "GET", "/api/images/img-0000-0/slice?axis=z&index=10", None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(h["content-type"], "image/png");
    let decoder = png::Decoder::new(std::io::Cursor::new(png_bytes.clone()));
    let mut reader = decoder.read_info().unwrap();
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).unwrap();
    assert_eq!((info.width, info.height), (32, 24));
    let px = &buf[..info.buffer_size()];
    let (argmax, &max) = px.iter().enumerate().max_by_key(|(i, v)| (**v, std::cmp::Reverse(*i))).unwrap();
    assert_eq!(max, 255);
    assert_eq!((argmax % 32, argmax / 32), (20, 7));
    // deterministic
    let (_, _, again) = call(&s.app, "GET", "/api/images/img-0000-0/slice?axis=z&index=10", None).await;
    assert_eq!(again, png_bytes);

    let (st, _, _) = call(&s.app, "GET", "/api/images/img-0000-0/slice?axis=x&index=31", None).await;
    assert_eq!(st, StatusCode::OK);
    let (st, _, _) = call(&s.app, "GET", "/api/images/img-0000-0/slice?axis=x&index=32", None).await;
    assert_eq!(st, StatusCode::RANGE_NOT_SATISFIABLE);
    let (st, _, _) = call(&s.app, "GET", "/api/images/img-0000-0/slice?axis=q&index=1", None).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    let (st, _, _) = call(&s.app, "GET", "/api/images/nope/slice?axis=z&index=1", None).await;
    assert_eq!(st, StatusCode::NOT_FOUND);

    let plain = session();
    let (st, _, b) = call(&plain.app, "GET", "/api/images/img-0000-0/slice?axis=z&index=1", None).await;
    assert_eq!(st, StatusCode::SERVICE_UNAVAILABLE);
    assert!(serde_json::from_slice::<Value>(&b).unwrap()["error"].is_string());
}

#[tokio::test]
async fn ui_bundle_served_at_root() {
    let ui = tempfile::tempdir().unwrap();
    std::fs::write(ui.path().join("index.html"), "<!doctype html><title>review</title>").unwrap();
    let s = session_with(None, Some(ui.path().to_path_buf()));
    let (st, _, b) = call(&s.app, "GET", "/", None).await;
    assert_eq!(st, StatusCode::OK);
    assert!(String::from_utf8(b).unwrap().contains("review"));
    let (st, _, _) = call(&s.app, "GET", "/api/report", None).await;
    assert_eq!(st, StatusCode::OK);
}

#[test]
fn startup_rejects_bad_decision_log() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("d.jsonl");
    std::fs::write(&log, "garbage\n").unwrap();
    assert!(ReviewState::open(&fixture().curated(), log, None).is_err());
}
