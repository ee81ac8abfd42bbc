//! Ingest from disk, checked against an independent re-read of the files.

mod common;

use std::fs;
use std::path::Path;

use serde_json::{json, Value};
use vmx_core::corpus::{frames_in_window, ingest_video, load_corpus, CorpusError, TaskManifest};

fn write_transcript(path: &Path, video_id: &str, n: usize) {
    let sentences: Vec<Value> = (0..n)
        .map(|i| json!({ "index": i, "text": format!("sentence {i}"), "start_s": i as f64 * 3.5, "end_s": i as f64 * 3.5 + 3.0 }))
        .collect();
    let doc = json!({
        "video_id": video_id,
        "task_name": "Build a desk",
        "category": "woodworking",
        "playback_ref": format!("https://videos.example.org/{video_id}"),
        "sentences": sentences,
    });
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    fs::write(path, doc.to_string()).unwrap();
}

fn write_manifest(dir: &Path, entries: Value) -> std::path::PathBuf {
    let path = dir.join("manifest.json");
    fs::write(&path, json!({ "task_name": "Build a desk", "videos": entries }).to_string()).unwrap();
    path
}

#[test]
fn long_video_with_frames() {
    let dir = tempfile::tempdir().unwrap();
    let t = dir.path().join("v1.json");
    write_transcript(&t, "v1", 120);
    let frames = dir.path().join("frames");
    fs::create_dir_all(&frames).unwrap();
    for s in 0..430 {
        fs::write(frames.join(format!("v1_{s:04}.jpg")), b"x").unwrap();
    }
    fs::write(frames.join("notes.txt"), b"ignored").unwrap();
    fs::write(frames.join("v2_0001.jpg"), b"other video").unwrap();

    let v = ingest_video(&t, Some(&frames), None).unwrap();

    let reparsed: Value = serde_json::from_str(&fs::read_to_string(&t).unwrap()).unwrap();
    let on_disk = fs::read_dir(&frames)
        .unwrap()
        .filter(|e| {
            let name = e.as_ref().unwrap().file_name().into_string().unwrap();
            name.starts_with("v1_") && name.ends_with(".jpg")
        })
        .count();
    assert_eq!(v.sentences.len(), reparsed["sentences"].as_array().unwrap().len());
    assert_eq!(v.sentences.len(), 120);
    assert_eq!(v.frames.len(), on_disk);
    assert_eq!(v.frames.len(), 430);
    assert!(!v.degraded);
    assert!(v.frames.windows(2).all(|w| w[0].t_s < w[1].t_s));
    assert_eq!(frames_in_window(&v, 10.0, 13.0, 1.0).len(), 4);
    assert_eq!(frames_in_window(&v, 0.0, 60.0, 5.0).len(), 13);
}

#[test]
fn empty_transcript_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let t = dir.path().join("v0.json");
    write_transcript(&t, "v0", 0);
    assert!(matches!(ingest_video(&t, None, None), Err(CorpusError::Validation { .. })));
}

#[test]
fn missing_frames_dir_degrades() {
    let dir = tempfile::tempdir().unwrap();
    let t = dir.path().join("v1.json");
    write_transcript(&t, "v1", 5);
    let v = ingest_video(&t, Some(&dir.path().join("nope")), None).unwrap();
    assert!(v.degraded);
    assert!(frames_in_window(&v, 0.0, 100.0, 1.0).is_empty());
}

#[test]
fn non_monotone_timestamps_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let t = dir.path().join("bad.json");
    let doc = json!({
        "video_id": "bad", "task_name": "Build a desk", "category": "c", "playback_ref": "p",
        "sentences": [
            { "index": 0, "text": "a", "start_s": 5.0, "end_s": 6.0 },
            { "index": 1, "text": "b", "start_s": 1.0, "end_s": 2.0 }
        ]
    });
    fs::write(&t, doc.to_string()).unwrap();
    assert!(matches!(ingest_video(&t, None, None), Err(CorpusError::Validation { .. })));
}

#[test]
fn manifest_of_95_videos() {
    let dir = tempfile::tempdir().unwrap();
    let entries: Vec<Value> = (0..95)
        .map(|i| {
            let id = format!("desk{i:03}");
            write_transcript(&dir.path().join(format!("t/{id}.json")), &id, 3 + i % 7);
            json!({ "transcript": format!("t/{id}.json") })
        })
        .collect();
    let (corpus, report) = load_corpus(&write_manifest(dir.path(), Value::Array(entries))).unwrap();
    assert_eq!(corpus.len(), 95);
    assert_eq!(report.ingested, 95);
    assert!(report.failures.is_empty());
    assert_eq!(report.degraded.len(), 95);
}

#[test]
fn partial_failure_is_reported_not_fatal() {
    let dir = tempfile::tempdir().unwrap();
    write_transcript(&dir.path().join("a.json"), "a", 3);
    write_transcript(&dir.path().join("b.json"), "b", 3);
    fs::write(dir.path().join("c.json"), "{ not json").unwrap();
    let manifest = write_manifest(
        dir.path(),
        json!([{ "transcript": "a.json" }, { "transcript": "b.json", "playback_ref": "override" }, { "transcript": "c.json" }]),
    );
    let (corpus, report) = load_corpus(&manifest).unwrap();
    assert_eq!(corpus.len(), 2);
    assert_eq!(report.failures.len(), 1);
    assert!(report.failures[0].transcript.ends_with("c.json"));
    assert_eq!(corpus.get("b").unwrap().playback_ref, "override");
}

#[test]
fn single_entry_manifest() {
    let dir = tempfile::tempdir().unwrap();
    write_transcript(&dir.path().join("a.json"), "a", 2);
    let (corpus, _) = load_corpus(&write_manifest(dir.path(), json!([{ "transcript": "a.json" }]))).unwrap();
    assert_eq!(corpus.len(), 1);
}

#[test]
fn unreadable_or_empty_manifest_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_corpus(&dir.path().join("missing.json")), Err(CorpusError::Manifest { .. })));
    let empty = write_manifest(dir.path(), json!([]));
    assert!(matches!(TaskManifest::read(&empty), Err(CorpusError::Manifest { .. })));
}

#[test]
fn fixture_corpus_round_trips_through_disk() {
    let corpus = common::jambalaya_corpus(24);
    let dir = tempfile::tempdir().unwrap();
    let manifest = common::write_corpus(&corpus, dir.path());
    let (loaded, report) = load_corpus(&manifest).unwrap();
    assert_eq!(report.ingested, 24);
    assert_eq!(report.degraded.len(), 8);
    for (id, v) in &corpus.videos {
        let w = loaded.get(id).unwrap();
        assert_eq!(w.sentences, v.sentences);
        assert_eq!(w.frames.len(), v.frames.len());
        assert_eq!(w.degraded, v.degraded);
    }
}
