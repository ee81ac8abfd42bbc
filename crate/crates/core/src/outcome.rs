//! Outcome types: which part of each video shows the finished result, what it
//! looks like, and how the videos group by result.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{frames_in_window, Corpus, FrameAsset, VideoRecord};
use crate::gateway::{render_list, render_transcript, Gateway, GatewayError, PromptCall, TemplateId};
use crate::graph::{Flag, FlagReason};
use crate::pipeline::Stage;

#[derive(Debug, Error)]
pub enum OutcomeError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("video {0} has no outcome segments")]
    EmptySegments(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeSegments {
    pub video_id: String,
    pub indices: Vec<usize>,
}

impl OutcomeSegments {
    /// Maximal runs of consecutive indices, as inclusive `(first, last)` pairs.
    pub fn runs(&self) -> Vec<(usize, usize)> {
        let mut runs: Vec<(usize, usize)> = Vec::new();
        for &i in &self.indices {
            match runs.last_mut() {
                Some(r) if r.1 + 1 == i => r.1 = i,
                _ => runs.push((i, i)),
            }
        }
        runs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeDescription {
    pub video_id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeCluster {
    pub name: String,
    pub member_video_ids: BTreeSet<String>,
    pub representative_frames: Vec<FrameAsset>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DescribeMode {
    /// Require outcome segments; frames come from inside them.
    Strict,
    /// Allow empty segments and describe from the transcript alone.
    TranscriptOnly,
}

/// Sentence indices the model marks as showing the outcome, clipped to the
/// transcript and sorted.
pub fn extract_outcome_segments(
    gateway: &Gateway,
    video: &VideoRecord,
) -> Result<OutcomeSegments, GatewayError> {
    let call = PromptCall::new(TemplateId::OutcomeSegments)
        .with("task_name", &video.task_name)
        .with("transcript_data", render_transcript(&video.sentences));
    let resp = gateway.call(&call)?;
    let n = video.sentences.len() as i64;
    let mut indices: Vec<usize> = resp.payload["index"]
        .as_array()
        .into_iter()
        .flatten()
        .filter_map(|v| v.as_i64().or_else(|| v.as_f64().map(|f| f as i64)))
        .filter(|&i| (0..n).contains(&i))
        .map(|i| i as usize)
        .collect();
    indices.sort_unstable();
    indices.dedup();
    Ok(OutcomeSegments {
        video_id: video.video_id.clone(),
        indices,
    })
}

/// Frames at one per second across every outcome run.
pub fn outcome_frames(video: &VideoRecord, segs: &OutcomeSegments) -> Vec<FrameAsset> {
    let mut frames: Vec<FrameAsset> = Vec::new();
    for (a, b) in segs.runs() {
        if let Some((start, end)) = video.sentence_window(a, b) {
            for f in frames_in_window(video, start, end, 1.0) {
                if frames.last().is_none_or(|l| l.t_s < f.t_s) {
                    frames.push(f);
                }
            }
        }
    }
    frames
}

pub(crate) fn frames_note(frames: &[FrameAsset]) -> String {
    if frames.is_empty() {
        return String::new();
    }
    let stamps: Vec<String> = frames.iter().map(|f| format!("{}", f.t_s)).collect();
    format!(
        "The attached images are frames from the video at these timestamps (seconds): {}",
        stamps.join(", ")
    )
}

pub fn describe_outcome(
    gateway: &Gateway,
    video: &VideoRecord,
    segs: &OutcomeSegments,
    mode: DescribeMode,
) -> Result<OutcomeDescription, OutcomeError> {
    if segs.indices.is_empty() && mode == DescribeMode::Strict {
        return Err(OutcomeError::EmptySegments(video.video_id.clone()));
    }
    let frames = outcome_frames(video, segs);
    let call = PromptCall::new(TemplateId::OutcomeDesc)
        .with("visual_frames", frames_note(&frames))
        .with("task_name", &video.task_name)
        .with("transcript_data", render_transcript(&video.sentences))
        .with_images(frames);
    let resp = gateway.call(&call)?;
    Ok(OutcomeDescription {
        video_id: video.video_id.clone(),
        text: resp.payload["description"].as_str().unwrap_or("").trim().to_string(),
    })
}

/// Two to four outcome type names. With fewer than two descriptions no
/// model call is made and the task name stands in as the single type.
pub fn cluster_outcomes(
    gateway: &Gateway,
    task_name: &str,
    descriptions: &[OutcomeDescription],
) -> Result<Vec<String>, GatewayError> {
    if descriptions.len() < 2 {
        return Ok(vec![task_name.to_string()]);
    }
    let listing = descriptions
        .iter()
        .map(|d| format!("{}: {}", d.video_id, d.text))
        .collect::<Vec<_>>()
        .join("\n");
    let call = PromptCall::new(TemplateId::OutcomeCluster)
        .with("task_name", task_name)
        .with("outcome_descriptions", listing);
    let resp = gateway.call(&call)?;
    Ok(resp.payload["clusters"]
        .as_array()
        .into_iter()
        .flatten()
        .filter_map(|v| v.as_str())
        .map(|s| s.trim().to_string())
        .collect())
}

pub fn assign_outcome(
    gateway: &Gateway,
    description: &OutcomeDescription,
    cluster_names: &[String],
) -> Result<String, GatewayError> {
    if let [only] = cluster_names {
        return Ok(only.clone());
    }
    let call = PromptCall::new(TemplateId::OutcomeAssign)
        .with("outcome_description", &description.text)
        .with("outcome_types", render_list(cluster_names))
        .with_options(cluster_names.to_vec());
    let resp = gateway.call(&call)?;
    Ok(resp.payload["outcome"].as_str().unwrap_or_default().to_string())
}

/// Frame nearest to `t_s`; ties go to the earlier frame.
pub fn nearest_frame(video: &VideoRecord, t_s: f64) -> Option<&FrameAsset> {
    video
        .frames
        .iter()
        .min_by(|a, b| (a.t_s - t_s).abs().total_cmp(&(b.t_s - t_s).abs()))
}

/// For up to two randomly chosen members, the frame nearest the midpoint of
/// their last outcome run.
pub fn pick_representative_frames(
    members: &BTreeSet<String>,
    corpus: &Corpus,
    segments: &BTreeMap<String, OutcomeSegments>,
    seed: u64,
) -> Vec<FrameAsset> {
    let candidates: Vec<(&str, FrameAsset)> = members
        .iter()
        .filter_map(|id| {
            let video = corpus.get(id)?;
            let (a, b) = *segments.get(id)?.runs().last()?;
            let (start, end) = video.sentence_window(a, b)?;
            let frame = nearest_frame(video, (start + end) / 2.0)?;
            Some((id.as_str(), frame.clone()))
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<&(&str, FrameAsset)> = candidates.choose_multiple(&mut rng, 2).collect();
    chosen.sort_by_key(|(id, _)| *id);
    chosen.into_iter().map(|(_, f)| f.clone()).collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OutcomeStageOutput {
    pub segments: BTreeMap<String, OutcomeSegments>,
    pub descriptions: BTreeMap<String, OutcomeDescription>,
    pub cluster_names: Vec<String>,
    /// Non-empty clusters ordered by name.
    pub clusters: Vec<OutcomeCluster>,
    pub flags: Vec<Flag>,
}

impl OutcomeStageOutput {
    pub fn clustered_video_ids(&self) -> BTreeSet<String> {
        self.clusters
            .iter()
            .flat_map(|c| c.member_video_ids.iter().cloned())
            .collect()
    }
}

fn flag(video_id: &str, reason: FlagReason) -> Flag {
    Flag::new(Stage::Outcomes, video_id, reason)
}

/// Runs segment extraction, description, clustering and assignment over the
/// whole corpus. Schema failures exclude the video; other gateway errors abort.
pub fn run_outcome_stage(
    gateway: &Gateway,
    corpus: &Corpus,
    seed: u64,
) -> Result<OutcomeStageOutput, GatewayError> {
    let videos: Vec<&VideoRecord> = corpus.videos.values().collect();

    type PerVideo = Result<(Option<OutcomeSegments>, Option<OutcomeDescription>, Option<Flag>), GatewayError>;
    let per_video: Vec<PerVideo> = videos
        .par_iter()
        .map(|video| {
            let segs = match extract_outcome_segments(gateway, video) {
                Ok(s) => s,
                Err(e) if e.is_schema() => {
                    return Ok((None, None, Some(flag(&video.video_id, FlagReason::SchemaError))))
                }
                Err(e) => return Err(e),
            };
            if segs.indices.is_empty() {
                return Ok((Some(segs), None, Some(flag(&video.video_id, FlagReason::NoOutcome))));
            }
            match describe_outcome(gateway, video, &segs, DescribeMode::Strict) {
                Ok(d) if !d.text.is_empty() => Ok((Some(segs), Some(d), None)),
                Ok(_) => Ok((Some(segs), None, Some(flag(&video.video_id, FlagReason::SchemaError)))),
                Err(OutcomeError::Gateway(e)) if e.is_schema() => {
                    Ok((Some(segs), None, Some(flag(&video.video_id, FlagReason::SchemaError))))
                }
                Err(OutcomeError::Gateway(e)) => Err(e),
                Err(OutcomeError::EmptySegments(_)) => unreachable!("segments checked above"),
            }
        })
        .collect();

    let mut out = OutcomeStageOutput::default();
    for r in per_video {
        let (segs, desc, fl) = r?;
        if let Some(s) = segs {
            out.segments.insert(s.video_id.clone(), s);
        }
        if let Some(d) = desc {
            out.descriptions.insert(d.video_id.clone(), d);
        }
        out.flags.extend(fl);
    }

    let descriptions: Vec<OutcomeDescription> = out.descriptions.values().cloned().collect();
    if descriptions.is_empty() {
        return Ok(out);
    }
    out.cluster_names = match cluster_outcomes(gateway, &corpus.task_name, &descriptions) {
        Ok(names) => names,
        Err(e) if e.is_schema() => {
            out.flags.push(flag(&corpus.task_name, FlagReason::SchemaError));
            vec![corpus.task_name.clone()]
        }
        Err(e) => return Err(e),
    };

    let assignments: Vec<Result<(String, Option<String>), GatewayError>> = descriptions
        .par_iter()
        .map(|d| match assign_outcome(gateway, d, &out.cluster_names) {
            Ok(name) => Ok((d.video_id.clone(), Some(name))),
            Err(e) if e.is_schema() => Ok((d.video_id.clone(), None)),
            Err(e) => Err(e),
        })
        .collect();

    let mut members: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for a in assignments {
        match a? {
            (vid, Some(name)) => {
                members.entry(name).or_default().insert(vid);
            }
            (vid, None) => out.flags.push(flag(&vid, FlagReason::Unassigned)),
        }
    }
    for name in &out.cluster_names {
        if !members.contains_key(name) {
            tracing::warn!(cluster = %name, "outcome type received no videos; dropped");
        }
    }
    for (i, (name, ids)) in members.into_iter().enumerate() {
        let frames = pick_representative_frames(&ids, corpus, &out.segments, seed.wrapping_add(i as u64));
        out.clusters.push(OutcomeCluster {
            name,
            member_video_ids: ids,
            representative_frames: frames,
        });
    }
    out.flags.sort();
    Ok(out)
}
