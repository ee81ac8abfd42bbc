//! Dynamic approach identification: induce a step taxonomy over the videos
//! of one outcome type, ground each step in every video, and pick the
//! standard, simplest and most complex step sequences.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::corpus::{Corpus, VideoRecord};
use crate::outcome::OutcomeStageOutput;
use crate::gateway::{render_list, render_transcript, Gateway, GatewayError, PromptCall, TemplateId};
use crate::graph::{Flag, FlagReason};
use crate::pipeline::Stage;

#[derive(Debug, Error)]
pub enum DaiError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("step identification failed for every video")]
    AllVideosFailed,
    #[error("no video has a non-empty step sequence")]
    NoSequences,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepTaxonomy {
    pub steps: Vec<String>,
}

impl StepTaxonomy {
    pub fn contains(&self, name: &str) -> bool {
        self.steps.iter().any(|s| s == name)
    }

    pub fn is_superset_of(&self, other: &StepTaxonomy) -> bool {
        other.steps.iter().all(|s| self.contains(s))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSpan {
    pub video_id: String,
    pub step_name: String,
    pub sentence_start: usize,
    pub sentence_end: usize,
    pub start_s: f64,
    pub end_s: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CanonicalSequence {
    pub steps: Vec<String>,
    pub support: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ApproachKind {
    Standard,
    Simple,
    Complex,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Approach {
    pub kind: ApproachKind,
    pub sequence: CanonicalSequence,
    pub supporting_video_ids: BTreeSet<String>,
}

/// One refinement pass: the returned taxonomy always contains `taxonomy`.
pub fn extend_taxonomy(
    gateway: &Gateway,
    video: &VideoRecord,
    taxonomy: &StepTaxonomy,
) -> Result<StepTaxonomy, GatewayError> {
    let call = PromptCall::new(TemplateId::StepIdentify)
        .with("task_name", &video.task_name)
        .with("original_step", render_list(&taxonomy.steps))
        .with("transcript_data", render_transcript(&video.sentences));
    let resp = gateway.call(&call)?;
    let mut steps = taxonomy.steps.clone();
    for name in resp.payload["steps"].as_array().into_iter().flatten() {
        if let Some(name) = name.as_str().map(str::trim) {
            if !name.is_empty() && !steps.iter().any(|s| s == name) {
                steps.push(name.to_string());
            }
        }
    }
    Ok(StepTaxonomy { steps })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TaxonomyBuild {
    pub taxonomy: StepTaxonomy,
    /// Taxonomy after each processed video, in processing order.
    pub history: Vec<StepTaxonomy>,
    /// Videos whose step identification failed schema validation.
    pub skipped: Vec<String>,
}

/// Folds [`extend_taxonomy`] over the videos in ascending `video_id` order.
pub fn build_taxonomy(gateway: &Gateway, videos: &[&VideoRecord]) -> Result<TaxonomyBuild, DaiError> {
    let mut ordered: Vec<&VideoRecord> = videos.to_vec();
    ordered.sort_by(|a, b| a.video_id.cmp(&b.video_id));
    let mut build = TaxonomyBuild::default();
    for video in ordered {
        match extend_taxonomy(gateway, video, &build.taxonomy) {
            Ok(next) => {
                debug_assert!(next.is_superset_of(&build.taxonomy));
                build.taxonomy = next;
                build.history.push(build.taxonomy.clone());
            }
            Err(e) if e.is_schema() => build.skipped.push(video.video_id.clone()),
            Err(e) => return Err(e.into()),
        }
    }
    if build.history.is_empty() {
        return Err(DaiError::AllVideosFailed);
    }
    Ok(build)
}

/// A span as returned by the model, before repair.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSpan {
    pub step_name: String,
    pub start: i64,
    pub end: i64,
}

/// Makes model spans well-formed: unknown steps dropped, indices clamped to
/// the transcript, spans sorted, and each overlap resolved by ending the
/// earlier span just before the later one starts (dropping it if that
/// leaves nothing).
pub fn repair_spans(video: &VideoRecord, raw: Vec<RawSpan>, taxonomy: &StepTaxonomy) -> Vec<StepSpan> {
    let n = video.sentences.len() as i64;
    let mut spans: Vec<RawSpan> = raw
        .into_iter()
        .filter(|r| taxonomy.contains(&r.step_name))
        .filter_map(|mut r| {
            r.start = r.start.max(0);
            r.end = r.end.min(n - 1);
            (r.start <= r.end).then_some(r)
        })
        .collect();
    spans.sort_by_key(|r| (r.start, r.end));

    let mut kept: Vec<RawSpan> = Vec::with_capacity(spans.len());
    for cur in spans {
        while let Some(last) = kept.last_mut() {
            if last.end < cur.start {
                break;
            }
            last.end = cur.start - 1;
            if last.end < last.start {
                kept.pop();
            } else {
                break;
            }
        }
        kept.push(cur);
    }
    kept.into_iter()
        .map(|r| {
            let (a, b) = (r.start as usize, r.end as usize);
            let (start_s, end_s) = video.sentence_window(a, b).expect("clamped to transcript");
            StepSpan {
                video_id: video.video_id.clone(),
                step_name: r.step_name,
                sentence_start: a,
                sentence_end: b,
                start_s,
                end_s,
            }
        })
        .collect()
}

pub fn assign_steps(
    gateway: &Gateway,
    video: &VideoRecord,
    taxonomy: &StepTaxonomy,
) -> Result<Vec<StepSpan>, GatewayError> {
    let call = PromptCall::new(TemplateId::StepAssign)
        .with("task_name", &video.task_name)
        .with("whole_step", render_list(&taxonomy.steps))
        .with("transcript_data", render_transcript(&video.sentences));
    let resp = gateway.call(&call)?;
    let as_int = |v: &Value| v.as_i64().or_else(|| v.as_f64().map(|f| f as i64));
    let raw: Vec<RawSpan> = resp.payload["steps"]
        .as_array()
        .into_iter()
        .flatten()
        .filter_map(|s| {
            Some(RawSpan {
                step_name: s["step_name"].as_str()?.trim().to_string(),
                start: as_int(&s["sentence_start"])?,
                end: as_int(&s["sentence_end"])?,
            })
        })
        .collect();
    Ok(repair_spans(video, raw, taxonomy))
}

/// A video's step sequence with each step's normalized temporal midpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoSteps {
    pub sequence: Vec<String>,
    /// Midpoint of each span divided by video duration, aligned with `sequence`.
    pub midpoints: Vec<f64>,
}

impl VideoSteps {
    pub fn from_spans(video: &VideoRecord, spans: &[StepSpan]) -> Self {
        let duration = video.duration_s().max(f64::MIN_POSITIVE);
        Self {
            sequence: spans.iter().map(|s| s.step_name.clone()).collect(),
            midpoints: spans
                .iter()
                .map(|s| (s.start_s + s.end_s) / 2.0 / duration)
                .collect(),
        }
    }

    /// Plain sequence without timing; midpoints fall back to rank order.
    pub fn from_sequence(sequence: Vec<String>) -> Self {
        let n = sequence.len().max(1) as f64;
        let midpoints = (0..sequence.len()).map(|i| (i as f64 + 0.5) / n).collect();
        Self { sequence, midpoints }
    }
}

/// `max(2, ceil(0.05 * cluster_size))`.
pub fn default_min_support(cluster_size: usize) -> usize {
    cluster_size.div_ceil(20).max(2)
}

/// Shorter first, then lexicographic by step names.
fn shape_order(a: &[String], b: &[String]) -> Ordering {
    a.len().cmp(&b.len()).then_with(|| a.cmp(b))
}

/// Steps present in more than half of the videos, ordered by mean midpoint.
fn composite_standard(assignments: &BTreeMap<String, VideoSteps>) -> Option<Approach> {
    let videos: Vec<(&String, &VideoSteps)> = assignments
        .iter()
        .filter(|(_, v)| !v.sequence.is_empty())
        .collect();
    let n = videos.len();
    let mut presence: BTreeMap<&str, usize> = BTreeMap::new();
    let mut positions: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for (_, v) in &videos {
        let distinct: BTreeSet<&str> = v.sequence.iter().map(String::as_str).collect();
        for s in distinct {
            *presence.entry(s).or_default() += 1;
        }
        for (s, m) in v.sequence.iter().zip(&v.midpoints) {
            let e = positions.entry(s.as_str()).or_default();
            e.0 += m;
            e.1 += 1;
        }
    }
    let mut common: Vec<(&str, f64)> = presence
        .into_iter()
        .filter(|&(_, c)| 2 * c > n)
        .map(|(s, _)| {
            let (sum, k) = positions[s];
            (s, sum / k as f64)
        })
        .collect();
    if common.is_empty() {
        return None;
    }
    common.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(b.0)));
    let steps: Vec<String> = common.iter().map(|(s, _)| s.to_string()).collect();
    let supporting: BTreeSet<String> = videos
        .iter()
        .filter(|(_, v)| steps.iter().all(|s| v.sequence.contains(s)))
        .map(|(id, _)| (*id).clone())
        .collect();
    if supporting.is_empty() {
        return None;
    }
    Some(Approach {
        kind: ApproachKind::Standard,
        sequence: CanonicalSequence {
            steps,
            support: supporting.len(),
        },
        supporting_video_ids: supporting,
    })
}

/// Selects the standard approach (modal sequence) and, when they exist with
/// enough support, the simple (fewest steps) and complex (most steps) ones.
pub fn identify_approaches(
    assignments: &BTreeMap<String, VideoSteps>,
    min_support: usize,
) -> Result<Vec<Approach>, DaiError> {
    let mut groups: BTreeMap<&[String], BTreeSet<String>> = BTreeMap::new();
    for (id, v) in assignments {
        if !v.sequence.is_empty() {
            groups.entry(v.sequence.as_slice()).or_default().insert(id.clone());
        }
    }
    if groups.is_empty() {
        return Err(DaiError::NoSequences);
    }
    let total: usize = groups.values().map(BTreeSet::len).sum();

    let modal = groups
        .iter()
        .min_by(|a, b| b.1.len().cmp(&a.1.len()).then_with(|| shape_order(a.0, b.0)))
        .expect("non-empty");
    let exact = |seq: &[String], ids: &BTreeSet<String>, kind| Approach {
        kind,
        sequence: CanonicalSequence {
            steps: seq.to_vec(),
            support: ids.len(),
        },
        supporting_video_ids: ids.clone(),
    };

    let standard = if modal.1.len() == 1 && total > 1 {
        composite_standard(assignments).unwrap_or_else(|| exact(modal.0, modal.1, ApproachKind::Standard))
    } else {
        exact(modal.0, modal.1, ApproachKind::Standard)
    };
    let std_len = standard.sequence.steps.len();

    let eligible = || {
        groups.iter().filter(|(seq, ids)| {
            ids.len() >= min_support && **seq != standard.sequence.steps.as_slice()
        })
    };
    let simple = eligible()
        .filter(|(seq, _)| seq.len() < std_len)
        .min_by(|a, b| {
            a.0.len()
                .cmp(&b.0.len())
                .then_with(|| b.1.len().cmp(&a.1.len()))
                .then_with(|| a.0.cmp(b.0))
        })
        .map(|(seq, ids)| exact(seq, ids, ApproachKind::Simple));
    let complex = eligible()
        .filter(|(seq, _)| seq.len() > std_len)
        .min_by(|a, b| {
            b.0.len()
                .cmp(&a.0.len())
                .then_with(|| b.1.len().cmp(&a.1.len()))
                .then_with(|| a.0.cmp(b.0))
        })
        .map(|(seq, ids)| exact(seq, ids, ApproachKind::Complex));

    let mut out = vec![standard];
    out.extend(simple);
    out.extend(complex);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterDai {
    pub cluster_name: String,
    pub min_support: usize,
    pub taxonomy: TaxonomyBuild,
    pub spans: BTreeMap<String, Vec<StepSpan>>,
    pub approaches: Vec<Approach>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DaiStageOutput {
    pub clusters: Vec<ClusterDai>,
    pub flags: Vec<Flag>,
}

/// Taxonomy, grounding and approach selection for one outcome cluster.
pub fn run_cluster(
    gateway: &Gateway,
    cluster_name: &str,
    videos: &[&VideoRecord],
    min_support: Option<usize>,
    flags: &mut Vec<Flag>,
) -> Result<ClusterDai, GatewayError> {
    let min_support = min_support.unwrap_or_else(|| default_min_support(videos.len()));
    let mut result = ClusterDai {
        cluster_name: cluster_name.to_string(),
        min_support,
        taxonomy: TaxonomyBuild::default(),
        spans: BTreeMap::new(),
        approaches: Vec::new(),
    };
    result.taxonomy = match build_taxonomy(gateway, videos) {
        Ok(b) => b,
        Err(DaiError::Gateway(e)) => return Err(e),
        Err(_) => {
            flags.push(Flag::new(Stage::Dai, cluster_name, FlagReason::AllVideosFailed));
            for v in videos {
                flags.push(Flag::new(Stage::Dai, &v.video_id, FlagReason::TaxonomySkipped));
            }
            return Ok(result);
        }
    };
    for id in &result.taxonomy.skipped {
        flags.push(Flag::new(Stage::Dai, id, FlagReason::TaxonomySkipped));
    }
    let taxonomy = &result.taxonomy.taxonomy;

    let assigned: Vec<(String, Result<Vec<StepSpan>, GatewayError>)> = videos
        .par_iter()
        .map(|v| (v.video_id.clone(), assign_steps(gateway, v, taxonomy)))
        .collect();
    let mut sequences: BTreeMap<String, VideoSteps> = BTreeMap::new();
    for (id, res) in assigned {
        match res {
            Ok(spans) if spans.is_empty() => {
                flags.push(Flag::new(Stage::Dai, &id, FlagReason::NoSteps));
            }
            Ok(spans) => {
                let video = videos.iter().find(|v| v.video_id == id).expect("own video");
                sequences.insert(id.clone(), VideoSteps::from_spans(video, &spans));
                result.spans.insert(id, spans);
            }
            Err(e) if e.is_schema() => {
                flags.push(Flag::new(Stage::Dai, &id, FlagReason::SchemaError));
            }
            Err(e) => return Err(e),
        }
    }
    match identify_approaches(&sequences, min_support) {
        Ok(a) => result.approaches = a,
        Err(_) => flags.push(Flag::new(Stage::Dai, cluster_name, FlagReason::NoSteps)),
    }
    Ok(result)
}

/// Runs [`run_cluster`] for every outcome cluster.
pub fn run_dai_stage(
    gateway: &Gateway,
    corpus: &Corpus,
    outcomes: &OutcomeStageOutput,
    min_support: Option<usize>,
) -> Result<DaiStageOutput, GatewayError> {
    let results: Vec<Result<(ClusterDai, Vec<Flag>), GatewayError>> = outcomes
        .clusters
        .par_iter()
        .map(|c| {
            let videos: Vec<&VideoRecord> = c.member_video_ids.iter().filter_map(|id| corpus.get(id)).collect();
            let mut flags = Vec::new();
            let dai = run_cluster(gateway, &c.name, &videos, min_support, &mut flags)?;
            Ok((dai, flags))
        })
        .collect();
    let mut out = DaiStageOutput::default();
    for r in results {
        let (dai, flags) = r?;
        out.clusters.push(dai);
        out.flags.extend(flags);
    }
    out.flags.sort();
    Ok(out)
}
