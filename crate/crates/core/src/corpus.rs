//! Per-task video corpora: transcripts with sentence timestamps, pre-extracted
//! frame assets and playback references.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed transcript {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid video {video_id}: {message}")]
    Validation { video_id: String, message: String },
    #[error("unreadable manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sentence {
    pub index: usize,
    pub text: String,
    pub start_s: f64,
    pub end_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameAsset {
    pub video_id: String,
    pub t_s: f64,
    pub uri: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoRecord {
    pub video_id: String,
    pub task_name: String,
    pub category: String,
    pub sentences: Vec<Sentence>,
    pub frames: Vec<FrameAsset>,
    pub playback_ref: String,
    /// Set when no frame assets could be resolved; such videos go through
    /// transcript-only prompts.
    pub degraded: bool,
}

impl VideoRecord {
    /// Time range covered by sentences `first..=last`.
    pub fn sentence_window(&self, first: usize, last: usize) -> Option<(f64, f64)> {
        let a = self.sentences.get(first)?;
        let b = self.sentences.get(last)?;
        Some((a.start_s, b.end_s))
    }

    pub fn duration_s(&self) -> f64 {
        self.sentences.last().map(|s| s.end_s).unwrap_or(0.0)
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let fail = |message: String| CorpusError::Validation {
            video_id: self.video_id.clone(),
            message,
        };
        if self.video_id.trim().is_empty() {
            return Err(fail("empty video_id".into()));
        }
        if self.sentences.is_empty() {
            return Err(fail("transcript has no sentences".into()));
        }
        let mut prev_start = f64::NEG_INFINITY;
        for (i, s) in self.sentences.iter().enumerate() {
            if s.index != i {
                return Err(fail(format!(
                    "sentence indices must be contiguous from 0; found {} at position {i}",
                    s.index
                )));
            }
            if s.text.trim().is_empty() {
                return Err(fail(format!("sentence {i} has empty text")));
            }
            if !(s.start_s.is_finite() && s.end_s.is_finite()) || s.start_s < 0.0 {
                return Err(fail(format!("sentence {i} has invalid timestamps")));
            }
            if s.end_s <= s.start_s {
                return Err(fail(format!("sentence {i} ends before it starts")));
            }
            if s.start_s < prev_start {
                return Err(fail(format!("sentence {i} start time goes backwards")));
            }
            prev_start = s.start_s;
        }
        if self
            .frames
            .windows(2)
            .any(|w| w[1].t_s < w[0].t_s)
        {
            return Err(fail("frames are not sorted by timestamp".into()));
        }
        if self.frames.iter().any(|f| !(f.t_s >= 0.0)) {
            return Err(fail("frame with negative timestamp".into()));
        }
        Ok(())
    }
}

/// On-disk transcript layout, one file per video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptFile {
    pub video_id: String,
    pub task_name: String,
    pub category: String,
    pub playback_ref: String,
    pub sentences: Vec<Sentence>,
}

impl From<&VideoRecord> for TranscriptFile {
    fn from(v: &VideoRecord) -> Self {
        Self {
            video_id: v.video_id.clone(),
            task_name: v.task_name.clone(),
            category: v.category.clone(),
            playback_ref: v.playback_ref.clone(),
            sentences: v.sentences.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub transcript: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frames_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub playback_ref: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskManifest {
    pub task_name: String,
    pub videos: Vec<ManifestEntry>,
}

impl TaskManifest {
    pub fn read(path: &Path) -> Result<Self, CorpusError> {
        let text = fs::read_to_string(path).map_err(|e| CorpusError::Manifest {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let manifest: TaskManifest =
            serde_json::from_str(&text).map_err(|e| CorpusError::Manifest {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?;
        if manifest.videos.is_empty() {
            return Err(CorpusError::Manifest {
                path: path.to_path_buf(),
                message: "manifest lists no videos".into(),
            });
        }
        Ok(manifest)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestFailure {
    pub transcript: PathBuf,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub ingested: usize,
    pub degraded: Vec<String>,
    pub failures: Vec<IngestFailure>,
}

/// All videos of one task. Immutable after load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub task_name: String,
    pub videos: BTreeMap<String, VideoRecord>,
}

impl Corpus {
    pub fn new(task_name: impl Into<String>) -> Self {
        Self {
            task_name: task_name.into(),
            videos: BTreeMap::new(),
        }
    }

    /// Adds a validated video. Rejects duplicates and task mismatches.
    pub fn insert(&mut self, video: VideoRecord) -> Result<(), CorpusError> {
        video.validate()?;
        if video.task_name != self.task_name {
            return Err(CorpusError::Validation {
                video_id: video.video_id.clone(),
                message: format!(
                    "task_name {:?} does not match corpus task {:?}",
                    video.task_name, self.task_name
                ),
            });
        }
        if self.videos.contains_key(&video.video_id) {
            return Err(CorpusError::Validation {
                video_id: video.video_id.clone(),
                message: "duplicate video_id".into(),
            });
        }
        self.videos.insert(video.video_id.clone(), video);
        Ok(())
    }

    pub fn get(&self, video_id: &str) -> Option<&VideoRecord> {
        self.videos.get(video_id)
    }

    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }
}

pub fn parse_transcript(path: &Path, text: &str) -> Result<TranscriptFile, CorpusError> {
    serde_json::from_str(text).map_err(|e| CorpusError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Reads `<video_id>_<tttt>.jpg` files; anything else in the directory is ignored.
pub fn scan_frames(dir: &Path, video_id: &str) -> Vec<FrameAsset> {
    let Ok(entries) = fs::read_dir(dir) else {
        return Vec::new();
    };
    let prefix = format!("{video_id}_");
    let mut frames: Vec<FrameAsset> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let stamp = name.strip_prefix(&prefix)?.strip_suffix(".jpg")?;
            if stamp.len() < 4 || !stamp.bytes().all(|b| b.is_ascii_digit()) {
                return None;
            }
            let t_s: u64 = stamp.parse().ok()?;
            Some(FrameAsset {
                video_id: video_id.to_string(),
                t_s: t_s as f64,
                uri: e.path().to_string_lossy().into_owned(),
            })
        })
        .collect();
    frames.sort_by(|a, b| a.t_s.total_cmp(&b.t_s));
    frames
}

/// Reads one transcript file plus its optional frame directory.
pub fn ingest_video(
    transcript: &Path,
    frames_dir: Option<&Path>,
    playback_ref: Option<&str>,
) -> Result<VideoRecord, CorpusError> {
    let text = fs::read_to_string(transcript).map_err(|e| CorpusError::Io {
        path: transcript.to_path_buf(),
        source: e,
    })?;
    let file = parse_transcript(transcript, &text)?;
    let frames = frames_dir
        .map(|d| scan_frames(d, &file.video_id))
        .unwrap_or_default();
    let video = VideoRecord {
        degraded: frames.is_empty(),
        video_id: file.video_id,
        task_name: file.task_name,
        category: file.category,
        sentences: file.sentences,
        frames,
        playback_ref: playback_ref
            .map(str::to_string)
            .unwrap_or(file.playback_ref),
    };
    video.validate()?;
    Ok(video)
}

/// Loads every parseable video listed by the manifest. Per-video failures
/// land in the report and never abort the load.
pub fn load_corpus(manifest_path: &Path) -> Result<(Corpus, IngestReport), CorpusError> {
    let manifest = TaskManifest::read(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };

    let results: Vec<(PathBuf, Result<VideoRecord, CorpusError>)> = manifest
        .videos
        .par_iter()
        .map(|entry| {
            let transcript = resolve(&entry.transcript);
            let frames_dir = entry.frames_dir.as_deref().map(resolve);
            let res = ingest_video(
                &transcript,
                frames_dir.as_deref(),
                entry.playback_ref.as_deref(),
            );
            (entry.transcript.clone(), res)
        })
        .collect();

    let mut corpus = Corpus::new(manifest.task_name.clone());
    let mut report = IngestReport::default();
    for (transcript, res) in results {
        match res.and_then(|v| {
            let id = v.video_id.clone();
            let degraded = v.degraded;
            corpus.insert(v).map(|_| (id, degraded))
        }) {
            Ok((id, degraded)) => {
                report.ingested += 1;
                if degraded {
                    report.degraded.push(id);
                }
            }
            Err(e) => {
                tracing::warn!(transcript = %transcript.display(), error = %e, "video excluded at ingest");
                report.failures.push(IngestFailure {
                    transcript,
                    error: e.to_string(),
                });
            }
        }
    }
    Ok((corpus, report))
}

/// Frames nearest to `start_s, start_s + stride_s, ...` (up to `end_s`),
/// accepting a match only within half a stride of its target.
pub fn frames_in_window(
    video: &VideoRecord,
    start_s: f64,
    end_s: f64,
    stride_s: f64,
) -> Vec<FrameAsset> {
    if video.degraded || video.frames.is_empty() || !(stride_s > 0.0) || start_s > end_s {
        return Vec::new();
    }
    let frames = &video.frames;
    let half = stride_s / 2.0;
    let eps = stride_s * 1e-9;
    let mut picked: Vec<usize> = Vec::new();
    let mut k = 0u64;
    loop {
        let target = start_s + k as f64 * stride_s;
        if target > end_s + eps {
            break;
        }
        k += 1;
        let pos = frames.partition_point(|f| f.t_s < target);
        let candidates = [pos.checked_sub(1), Some(pos).filter(|&p| p < frames.len())];
        let best = candidates
            .into_iter()
            .flatten()
            .min_by(|&a, &b| {
                let da = (frames[a].t_s - target).abs();
                let db = (frames[b].t_s - target).abs();
                da.total_cmp(&db).then(a.cmp(&b))
            });
        if let Some(i) = best {
            if (frames[i].t_s - target).abs() <= half && picked.last() != Some(&i) {
                picked.push(i);
            }
        }
    }
    picked.into_iter().map(|i| frames[i].clone()).collect()
}
