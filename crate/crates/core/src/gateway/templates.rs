//! Prompt templates and rendering.
//!
//! Template bodies are kept byte-for-byte as the model is meant to see them,
//! including trailing whitespace and the original spelling. Do not reformat.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::GatewayError;
use crate::corpus::Sentence;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TemplateId {
    OutcomeSegments,
    OutcomeDesc,
    OutcomeCluster,
    OutcomeAssign,
    Requirements,
    StepIdentify,
    StepAssign,
    MethodCluster,
    MethodAssign,
    Tips,
    ClipSummary,
}

impl TemplateId {
    pub const ALL: [TemplateId; 11] = [
        TemplateId::OutcomeSegments,
        TemplateId::OutcomeDesc,
        TemplateId::OutcomeCluster,
        TemplateId::OutcomeAssign,
        TemplateId::Requirements,
        TemplateId::StepIdentify,
        TemplateId::StepAssign,
        TemplateId::MethodCluster,
        TemplateId::MethodAssign,
        TemplateId::Tips,
        TemplateId::ClipSummary,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateId::OutcomeSegments => "OUTCOME_SEGMENTS",
            TemplateId::OutcomeDesc => "OUTCOME_DESC",
            TemplateId::OutcomeCluster => "OUTCOME_CLUSTER",
            TemplateId::OutcomeAssign => "OUTCOME_ASSIGN",
            TemplateId::Requirements => "REQUIREMENTS",
            TemplateId::StepIdentify => "STEP_IDENTIFY",
            TemplateId::StepAssign => "STEP_ASSIGN",
            TemplateId::MethodCluster => "METHOD_CLUSTER",
            TemplateId::MethodAssign => "METHOD_ASSIGN",
            TemplateId::Tips => "TIPS",
            TemplateId::ClipSummary => "CLIP_SUMMARY",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.as_str() == s)
    }

    pub fn text(self) -> &'static str {
        match self {
            TemplateId::OutcomeSegments => OUTCOME_SEGMENTS,
            TemplateId::OutcomeDesc => OUTCOME_DESC,
            TemplateId::OutcomeCluster => OUTCOME_CLUSTER,
            TemplateId::OutcomeAssign => OUTCOME_ASSIGN,
            TemplateId::Requirements => REQUIREMENTS,
            TemplateId::StepIdentify => STEP_IDENTIFY,
            TemplateId::StepAssign => STEP_ASSIGN,
            TemplateId::MethodCluster => METHOD_CLUSTER,
            TemplateId::MethodAssign => METHOD_ASSIGN,
            TemplateId::Tips => TIPS,
            TemplateId::ClipSummary => CLIP_SUMMARY,
        }
    }

    /// Name of the function exposed to the model for structured output.
    pub fn function_name(self) -> &'static str {
        match self {
            TemplateId::OutcomeSegments => "extract_outcome_segments",
            TemplateId::OutcomeDesc => "describe_outcome",
            TemplateId::OutcomeCluster => "cluster_outcomes",
            TemplateId::OutcomeAssign => "assign_outcome",
            TemplateId::Requirements => "extract_requirements",
            TemplateId::StepIdentify => "identify_steps",
            TemplateId::StepAssign => "assign_steps",
            TemplateId::MethodCluster => "cluster_methods",
            TemplateId::MethodAssign => "assign_method",
            TemplateId::Tips => "extract_tips",
            TemplateId::ClipSummary => "summarize_clip",
        }
    }

    /// Placeholders in order of first appearance.
    pub fn placeholders(self) -> Vec<&'static str> {
        let mut out: Vec<&'static str> = Vec::new();
        for (_, name) in scan(self.text()) {
            if let Some(name) = name {
                if !out.contains(&name) {
                    out.push(name);
                }
            }
        }
        out
    }

    pub fn accepts_images(self) -> bool {
        self.text().contains("{visual_frames}")
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub const OUTCOME_SEGMENTS: &str = r#"You are given the transcript of the tutorial video related to {task_name}.
Identify the part of the transcript that describes the fnal results of the procedure, such as "Look
how beautiful our cake turned out."
The transcript is as follows: {transcript_data}
Return the sentence indices that describe the outcome."#;

pub const OUTCOME_DESC: &str = r#"{visual_frames}
The transcript of this tutorial video related to {task_name} is as follows: {transcript_data}.
Provide a one-sentence description of the final outcome of the tutorial video related to {task_name}. 
Focus solely on its appearance without introductory phrases, subjective language, or references to the methods used."#;

pub const OUTCOME_CLUSTER: &str = r#"You are provided with descriptions of outcomes from tutorial videos related to {task_name}.
Your task is to group similar outcomes into clusters based on common themes. 
Create between 2 and 4 clusters, and assign a descriptive name to each cluster that reflects the shared theme of the outcomes within it. Return only the names of the clusters.

Below are the outcome descriptions from each video:
{outcome_descriptions}"#;

pub const OUTCOME_ASSIGN: &str = r#"Assign the video outcome to one of the outcome types.
video outcome: {outcome_description}
outcome types: {outcome_types}"#;

pub const REQUIREMENTS: &str = r#"{visual_frames}
The transcript of this tutorial video related to {task_name} is as follows: {transcript_data}.

Identify the ingredients, tools and equipment used in this tutorial video.

Extract and list the ingredients, tools, and equipment without specifying quantities or any descriptors."#;

pub const STEP_IDENTIFY: &str = r#"Given the transcript of a tutorial video related to {task_name}, extract the key high-level steps involved in the task.
Follow these guidelines when extracting steps:
1. Steps should be high-level and concise.
2. Base each step on an intermediate outcome with tangible results (e.g., "Make Dough", "Grill Steak"), instead of individual actions (e.g., "Add Flour", "Turn on Grill").
3. Avoid using specific ingredients in the step name (e.g., "Add Tomato Paste"). Instead, focus on the purpose of the step (e.g., "Make Sauce" instead of "Add Tomato Paste").
4. Group together related low-level actions into a single, high-level step. (e.g., combine "Add Salt" and "Add Lime" into "Make Sauce").
5. A step must span multiple transcript sentences, not just a single sentence. It should be high-level enough.
6. Use a concise "verb + object" format to describe each step, containing only one verb (e.g., "Boil Potatoes").
7. Exclude any steps unrelated to the core task, such as introductions, conclusions, or general commentary.

First, review the existing list of steps to identify if any of them are mentioned in the transcript. 
Use the same step names to ensure consistency whenever possible.
If you identify new steps that are not in the existing list, add them appropriately.

Here is the existing list of steps:
{original_step}

Here is the transcript of the videos:
{transcript_data}

Return a series of concise, high-level steps as a list."#;

pub const STEP_ASSIGN: &str = r#"You are provided with a transcript of a tutorial video about {task_name}, along with a list of possible steps for the task.

Your task is to read through the transcript sequentially and assign the appropriate steps from the provided list to the corresponding sections of the transcript. 
The steps may not be in order in the list, and some steps may not be used at all. Only assign a step when the content clearly matches the step.
For each step you assign, specify the corresponding section of the transcript by identifying the start and end indices. 

Here is the list of steps:
{whole_step}

Here is the transcript data:
{transcript_data}

Return the assigned steps in the order they occur in the transcript."#;

pub const METHOD_CLUSTER: &str = r#"You are given video transcripts from multiple videos about {task_name}, all demonstrating the same step, "{step_name}". 
Your task is to cluster the different methods or approaches used in these videos.
When clustering, focus on the type of tools, equipment, or techniques used.

Examples:
- Step: Boil Potatoes
-- Variations: Boiling using stove, Boiling using oven, Boiling using microwave.

- Step: Mix Ingredients
-- Variations: Mixing with spoon, Mixing with whisk, Mixing with blender.

Remember to ground variations on the provided video transcripts.
To ensure clustering based on the same criteria, each cluster name should start with the same action word (e.g., "Using [Tool Name]", "Applying [Technique]").
Create up to 3 clusters based on these variations.

Here are the transcripts of the step: 
{transcripts}"#;

pub const METHOD_ASSIGN: &str = r#"You are given a video transcript demonstrating the step "{step_name}". 
Your task is to assign the method described in the transcript to one of the existing method types.

Method types: {variation}
Video transcript: {transcript}

Identify which method type best matches the approach described in the transcript."#;

pub const TIPS: &str = r#" You are provided with video transcripts about {task_name}, focusing on the part related to {step_name}. 
Your task is to extract useful tips from the transcripts.
Tips can include:

- Suggestions to improve efficiency or results
- Common mistakes to avoid
- Best practices to follow
- Warnings or important reminders

Extract the top 3 most common tips, advice, or recommendations from the transcripts. 
You should ground each tip on the sentence indices in the transcript where they were found.
You can include more than one video for each tip if the tip is mentioned in multiple videos.

Transcripts: {transcripts}"#;

pub const CLIP_SUMMARY: &str = r#"You are given a segment of a tutorial video transcript about {task_name}, demonstrating the step "{step_name}".
Summarize what is done in this segment in one short sentence.
Do not add introductory phrases or information that is not in the transcript.

Transcript segment:
{transcript}"#;

/// Splits a template into literal runs and `{placeholder}` names.
fn scan(text: &'static str) -> Vec<(&'static str, Option<&'static str>)> {
    let mut parts = Vec::new();
    let mut rest = text;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        let close = after.find('}');
        let name = close.map(|c| &after[..c]).filter(|n| {
            !n.is_empty() && n.bytes().all(|b| b.is_ascii_lowercase() || b == b'_')
        });
        match name {
            Some(name) => {
                parts.push((&rest[..open], Some(name)));
                rest = &after[name.len() + 1..];
            }
            None => {
                parts.push((&rest[..=open], None));
                rest = after;
            }
        }
    }
    parts.push((rest, None));
    parts
}

/// Fills every placeholder of `template`. Substituted values are inserted
/// literally; braces inside them are never expanded.
pub fn render_prompt(
    template: TemplateId,
    substitutions: &BTreeMap<String, String>,
) -> Result<String, GatewayError> {
    let mut out = String::with_capacity(template.text().len() + 256);
    for (literal, name) in scan(template.text()) {
        out.push_str(literal);
        if let Some(name) = name {
            let value = substitutions
                .get(name)
                .ok_or_else(|| GatewayError::MissingPlaceholder {
                    template,
                    placeholder: name.to_string(),
                })?;
            out.push_str(value);
        }
    }
    Ok(out)
}

/// `index: text` lines, one per sentence.
pub fn render_transcript<'a>(sentences: impl IntoIterator<Item = &'a Sentence>) -> String {
    sentences
        .into_iter()
        .map(|s| format!("{}: {}", s.index, s.text))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Several transcript excerpts, each headed by its video id.
pub fn render_multi_transcript<'a>(
    excerpts: impl IntoIterator<Item = (&'a str, &'a [Sentence])>,
) -> String {
    excerpts
        .into_iter()
        .map(|(id, sentences)| format!("video_id: {id}\n{}", render_transcript(sentences)))
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// JSON array of strings, used for step lists and enum options.
pub fn render_list<S: AsRef<str>>(items: &[S]) -> String {
    let items: Vec<&str> = items.iter().map(AsRef::as_ref).collect();
    serde_json::to_string(&items).expect("string list serializes")
}
