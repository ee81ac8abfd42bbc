//! Materials, ingredients and tools: extracted once per video, tallied per
//! approach over its supporting videos.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{frames_in_window, Corpus, VideoRecord};
use crate::gateway::{render_transcript, Gateway, GatewayError, PromptCall, TemplateId};
use crate::graph::{Flag, FlagReason};
use crate::outcome::frames_note;
use crate::pipeline::Stage;

/// Seconds between frames sent with the requirements prompt.
pub const FRAME_STRIDE_S: f64 = 5.0;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequirementSet {
    pub video_id: String,
    pub ingredients: Vec<String>,
    pub tools: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ItemKind {
    Ingredient,
    Tool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TallyItem {
    pub name: String,
    pub kind: ItemKind,
    pub count: usize,
    pub fraction: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RequirementTally {
    pub approach_key: String,
    pub items: Vec<TallyItem>,
}

/// Frequency bucket used for shading.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shade {
    Dark,
    Medium,
    Light,
}

pub fn shade(fraction: f64) -> Shade {
    if fraction >= 0.75 {
        Shade::Dark
    } else if fraction >= 0.4 {
        Shade::Medium
    } else {
        Shade::Light
    }
}

/// Lowercase, punctuation dropped, whitespace-collapsed, with a trailing plural `s`
/// removed from the last word (`screws` → `screw`, but `glass` stays).
pub fn normalize_item(raw: &str) -> String {
    let mut words: Vec<String> = raw
        .to_lowercase()
        .split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|c| c.is_alphanumeric() || matches!(c, '-' | '\''))
                .collect::<String>()
        })
        .filter(|w| !w.is_empty())
        .collect();
    if let Some(last) = words.last_mut() {
        if last.chars().count() > 3 && last.ends_with('s') && !last.ends_with("ss") {
            last.pop();
        }
    }
    words.join(" ")
}

fn normalize_list(items: impl IntoIterator<Item = String>) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for item in items {
        let n = normalize_item(&item);
        if !n.is_empty() && !out.contains(&n) {
            out.push(n);
        }
    }
    out
}

pub fn extract_requirements(gateway: &Gateway, video: &VideoRecord) -> Result<RequirementSet, GatewayError> {
    let frames = frames_in_window(video, 0.0, video.duration_s(), FRAME_STRIDE_S);
    let call = PromptCall::new(TemplateId::Requirements)
        .with("visual_frames", frames_note(&frames))
        .with("task_name", &video.task_name)
        .with("transcript_data", render_transcript(&video.sentences))
        .with_images(frames);
    let resp = gateway.call(&call)?;
    let strings = |key: &str| -> Vec<String> {
        resp.payload[key]
            .as_array()
            .into_iter()
            .flatten()
            .filter_map(|v| v.as_str().map(str::to_string))
            .collect()
    };
    Ok(RequirementSet {
        video_id: video.video_id.clone(),
        ingredients: normalize_list(strings("ingredients")),
        tools: normalize_list(strings("tools and equipment")),
    })
}

/// Counts, for each item, how many supporting videos list it.
pub fn tally_requirements(
    sets: &[RequirementSet],
    supporting_ids: &BTreeSet<String>,
    approach_key: &str,
) -> RequirementTally {
    let mut counts: BTreeMap<(String, ItemKind), usize> = BTreeMap::new();
    let mut seen_videos: BTreeSet<&str> = BTreeSet::new();
    for set in sets.iter().filter(|s| supporting_ids.contains(&s.video_id)) {
        if !seen_videos.insert(&set.video_id) {
            continue;
        }
        let lists = [(ItemKind::Ingredient, &set.ingredients), (ItemKind::Tool, &set.tools)];
        for (kind, list) in lists {
            let names: BTreeSet<String> = list.iter().map(|s| normalize_item(s)).collect();
            for name in names.into_iter().filter(|n| !n.is_empty()) {
                *counts.entry((name, kind)).or_default() += 1;
            }
        }
    }
    let denom = supporting_ids.len().max(1) as f64;
    let mut items: Vec<TallyItem> = counts
        .into_iter()
        .map(|((name, kind), count)| TallyItem {
            name,
            kind,
            count,
            fraction: count as f64 / denom,
        })
        .collect();
    items.sort_by(|a, b| {
        b.count
            .cmp(&a.count)
            .then_with(|| a.name.cmp(&b.name))
            .then_with(|| a.kind.cmp(&b.kind))
    });
    RequirementTally {
        approach_key: approach_key.to_string(),
        items,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RequirementsStageOutput {
    pub sets: BTreeMap<String, RequirementSet>,
    pub flags: Vec<Flag>,
}

/// Extracts requirements for every listed video. Schema failures give an
/// empty set and a flag.
pub fn run_requirements_stage(
    gateway: &Gateway,
    corpus: &Corpus,
    video_ids: &BTreeSet<String>,
) -> Result<RequirementsStageOutput, GatewayError> {
    let videos: Vec<&VideoRecord> = video_ids.iter().filter_map(|id| corpus.get(id)).collect();
    let results: Vec<(String, Result<RequirementSet, GatewayError>)> = videos
        .par_iter()
        .map(|v| (v.video_id.clone(), extract_requirements(gateway, v)))
        .collect();
    let mut out = RequirementsStageOutput::default();
    for (id, res) in results {
        let set = match res {
            Ok(set) => set,
            Err(e) if e.is_schema() => {
                out.flags
                    .push(Flag::new(Stage::Requirements, &id, FlagReason::RequirementsFailed));
                RequirementSet {
                    video_id: id.clone(),
                    ..RequirementSet::default()
                }
            }
            Err(e) => return Err(e),
        };
        out.sets.insert(id, set);
    }
    Ok(out)
}
