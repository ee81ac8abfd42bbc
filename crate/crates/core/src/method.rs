//! Per-step method variations, their clips and grounded tips.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::corpus::{Corpus, Sentence, VideoRecord};
use crate::dai::{Approach, ApproachKind, DaiStageOutput, StepSpan};
use crate::gateway::{
    render_list, render_multi_transcript, render_transcript, Gateway, GatewayError, PromptCall, TemplateId,
};
use crate::graph::{Flag, FlagReason};
use crate::pipeline::Stage;

pub const MAX_METHODS: usize = 3;
pub const MAX_TIPS: usize = 3;
pub const SUMMARY_FALLBACK_CHARS: usize = 120;
/// Spans fed to a step-description call.
const DESCRIPTION_SPANS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodClip {
    pub span: StepSpan,
    pub summary: String,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Grounding {
    pub video_id: String,
    pub sentence_start: usize,
    pub sentence_end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tip {
    pub text: String,
    pub groundings: Vec<Grounding>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodCluster {
    pub step_name: String,
    pub name: String,
    pub clips: Vec<MethodClip>,
    pub tips: Vec<Tip>,
}

impl MethodCluster {
    pub fn member_spans(&self) -> impl Iterator<Item = &StepSpan> + Clone {
        self.clips.iter().map(|c| &c.span)
    }
}

fn span_sentences<'a>(video: &'a VideoRecord, span: &StepSpan) -> &'a [Sentence] {
    let end = (span.sentence_end + 1).min(video.sentences.len());
    &video.sentences[span.sentence_start.min(end)..end]
}

fn excerpts<'a>(spans: &[&'a StepSpan], corpus: &'a Corpus) -> Vec<(&'a str, &'a [Sentence])> {
    spans
        .iter()
        .filter_map(|s| {
            let v = corpus.get(&s.video_id)?;
            Some((s.video_id.as_str(), span_sentences(v, s)))
        })
        .collect()
}

fn leading_word(name: &str) -> String {
    name.split_whitespace().next().unwrap_or("").to_lowercase()
}

/// Up to three variation names for a step.
pub fn cluster_methods(
    gateway: &Gateway,
    task_name: &str,
    step_name: &str,
    spans: &[&StepSpan],
    corpus: &Corpus,
) -> Result<Vec<String>, GatewayError> {
    let call = PromptCall::new(TemplateId::MethodCluster)
        .with("task_name", task_name)
        .with("step_name", step_name)
        .with("transcripts", render_multi_transcript(excerpts(spans, corpus)));
    let resp = gateway.call(&call)?;
    let names: Vec<String> = resp.payload["clusters"]
        .as_array()
        .into_iter()
        .flatten()
        .filter_map(Value::as_str)
        .map(|s| s.trim().to_string())
        .collect();
    if let Some(first) = names.first() {
        let word = leading_word(first);
        if names.iter().any(|n| leading_word(n) != word) {
            tracing::warn!(step = step_name, ?names, "method names do not share a leading action word");
        }
    }
    Ok(names)
}

pub fn assign_method(
    gateway: &Gateway,
    span: &StepSpan,
    video: &VideoRecord,
    cluster_names: &[String],
) -> Result<String, GatewayError> {
    if let [only] = cluster_names {
        return Ok(only.clone());
    }
    let call = PromptCall::new(TemplateId::MethodAssign)
        .with("step_name", &span.step_name)
        .with("variation", render_list(cluster_names))
        .with("transcript", render_transcript(span_sentences(video, span)))
        .with_options(cluster_names.to_vec());
    let resp = gateway.call(&call)?;
    Ok(resp.payload["method"].as_str().unwrap_or_default().to_string())
}

/// A tip as returned by the model, before grounding checks.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTip {
    pub text: String,
    pub groundings: Vec<(String, f64, f64)>,
}

/// Intersects each grounding with the method's member spans of the same
/// video; tips left without groundings are dropped and at most
/// [`MAX_TIPS`] survive.
pub fn clip_tips<'a>(raw: Vec<RawTip>, member_spans: impl Iterator<Item = &'a StepSpan> + Clone) -> Vec<Tip> {
    let mut tips = Vec::new();
    for tip in raw {
        let text = tip.text.trim().to_string();
        if text.is_empty() {
            continue;
        }
        let mut groundings: Vec<Grounding> = Vec::new();
        for (vid, a, b) in tip.groundings {
            if !(a.is_finite() && b.is_finite()) {
                continue;
            }
            let (a, b) = (a.round() as i64, b.round() as i64);
            if a > b {
                continue;
            }
            for span in member_spans.clone().filter(|s| s.video_id == vid) {
                let lo = a.max(span.sentence_start as i64);
                let hi = b.min(span.sentence_end as i64);
                if lo <= hi {
                    let g = Grounding {
                        video_id: vid.clone(),
                        sentence_start: lo as usize,
                        sentence_end: hi as usize,
                    };
                    if !groundings.contains(&g) {
                        groundings.push(g);
                    }
                }
            }
        }
        if !groundings.is_empty() {
            tips.push(Tip { text, groundings });
        }
        if tips.len() == MAX_TIPS {
            break;
        }
    }
    tips
}

pub fn extract_tips(
    gateway: &Gateway,
    task_name: &str,
    method: &MethodCluster,
    corpus: &Corpus,
) -> Result<Vec<Tip>, GatewayError> {
    let spans: Vec<&StepSpan> = method.member_spans().collect();
    let call = PromptCall::new(TemplateId::Tips)
        .with("task_name", task_name)
        .with("step_name", &method.step_name)
        .with("transcripts", render_multi_transcript(excerpts(&spans, corpus)));
    let resp = gateway.call(&call)?;
    let raw: Vec<RawTip> = resp.payload["tips"]
        .as_array()
        .into_iter()
        .flatten()
        .map(|t| RawTip {
            text: t["tip"].as_str().unwrap_or_default().to_string(),
            groundings: t["videos"]
                .as_array()
                .into_iter()
                .flatten()
                .filter_map(|g| {
                    Some((
                        g["video_id"].as_str()?.to_string(),
                        g["start_index"].as_f64()?,
                        g["end_index"].as_f64()?,
                    ))
                })
                .collect(),
        })
        .collect();
    Ok(clip_tips(raw, method.member_spans()))
}

/// First sentence of the span, cut to [`SUMMARY_FALLBACK_CHARS`].
pub fn fallback_summary(span: &StepSpan, video: &VideoRecord) -> String {
    span_sentences(video, span)
        .first()
        .map(|s| s.text.trim().chars().take(SUMMARY_FALLBACK_CHARS).collect())
        .unwrap_or_else(|| span.step_name.clone())
}

fn first_sentence(text: &str) -> &str {
    let text = text.trim();
    text.char_indices()
        .find(|&(i, c)| {
            matches!(c, '.' | '!' | '?')
                && text[i + c.len_utf8()..].starts_with(char::is_whitespace)
        })
        .map(|(i, c)| &text[..i + c.len_utf8()])
        .unwrap_or(text)
}

/// One-sentence summary of a clip. Returns the text and whether the
/// fallback was used.
pub fn summarize_clip(
    gateway: &Gateway,
    task_name: &str,
    span: &StepSpan,
    video: &VideoRecord,
) -> Result<(String, bool), GatewayError> {
    let call = PromptCall::new(TemplateId::ClipSummary)
        .with("task_name", task_name)
        .with("step_name", &span.step_name)
        .with("transcript", render_transcript(span_sentences(video, span)));
    match gateway.call(&call) {
        Ok(resp) => {
            let text = first_sentence(resp.payload["summary"].as_str().unwrap_or_default());
            if text.is_empty() {
                Ok((fallback_summary(span, video), true))
            } else {
                Ok((text.to_string(), false))
            }
        }
        Err(e) if e.is_schema() => Ok((fallback_summary(span, video), true)),
        Err(e) => Err(e),
    }
}

/// One-line description of a step from a few of its spans.
pub fn describe_step(
    gateway: &Gateway,
    task_name: &str,
    step_name: &str,
    spans: &[&StepSpan],
    corpus: &Corpus,
) -> Result<(String, bool), GatewayError> {
    let picked: Vec<&StepSpan> = spans.iter().take(DESCRIPTION_SPANS).copied().collect();
    let Some(first) = picked.first() else {
        return Ok((step_name.to_string(), true));
    };
    let call = PromptCall::new(TemplateId::ClipSummary)
        .with("task_name", task_name)
        .with("step_name", step_name)
        .with("transcript", render_multi_transcript(excerpts(&picked, corpus)));
    let fallback = || {
        corpus
            .get(&first.video_id)
            .map(|v| fallback_summary(first, v))
            .unwrap_or_else(|| step_name.to_string())
    };
    match gateway.call(&call) {
        Ok(resp) => {
            let text = first_sentence(resp.payload["summary"].as_str().unwrap_or_default());
            Ok(if text.is_empty() { (fallback(), true) } else { (text.to_string(), false) })
        }
        Err(e) if e.is_schema() => Ok((fallback(), true)),
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMethods {
    pub cluster_name: String,
    pub step_name: String,
    pub description: String,
    pub methods: Vec<MethodCluster>,
}

/// Clusters, assigns, summarizes and mines tips for every span of one step.
/// `description_spans` are the spans the step description is drawn from.
pub fn build_step_methods(
    gateway: &Gateway,
    task_name: &str,
    cluster_name: &str,
    step_name: &str,
    spans: &[&StepSpan],
    description_spans: &[&StepSpan],
    corpus: &Corpus,
    flags: &mut Vec<Flag>,
) -> Result<StepMethods, GatewayError> {
    let subject = format!("{cluster_name}/{step_name}");
    let mut names = match cluster_methods(gateway, task_name, step_name, spans, corpus) {
        Ok(n) if !n.is_empty() => n,
        Ok(_) => vec![step_name.to_string()],
        Err(e) if e.is_schema() => {
            flags.push(Flag::new(Stage::Methods, &subject, FlagReason::MethodClusterFallback));
            vec![step_name.to_string()]
        }
        Err(e) => return Err(e),
    };
    names.truncate(MAX_METHODS);

    type Assigned = Result<(Option<String>, String, bool), GatewayError>;
    let assigned: Vec<Assigned> = spans
        .par_iter()
        .map(|span| {
            let video = corpus.get(&span.video_id).expect("span of a corpus video");
            let method = match assign_method(gateway, span, video, &names) {
                Ok(m) => Some(m),
                Err(e) if e.is_schema() => None,
                Err(e) => return Err(e),
            };
            let (summary, fell_back) = summarize_clip(gateway, task_name, span, video)?;
            Ok((method, summary, fell_back))
        })
        .collect();

    let mut buckets: BTreeMap<&str, Vec<MethodClip>> = names.iter().map(|n| (n.as_str(), Vec::new())).collect();
    let mut unplaced: Vec<MethodClip> = Vec::new();
    for (span, res) in spans.iter().zip(assigned) {
        let (method, summary, fell_back) = res?;
        if fell_back {
            flags.push(Flag::new(Stage::Methods, &span.video_id, FlagReason::SummaryFallback));
        }
        let clip = MethodClip {
            span: (*span).clone(),
            summary,
        };
        match method.as_deref().and_then(|m| buckets.get_mut(m)) {
            Some(bucket) => bucket.push(clip),
            None => {
                flags.push(Flag::new(Stage::Methods, &span.video_id, FlagReason::MethodUnassigned));
                unplaced.push(clip);
            }
        }
    }
    if !unplaced.is_empty() {
        // largest cluster; earliest name on ties
        let target = names
            .iter()
            .max_by(|a, b| buckets[b.as_str()].len().cmp(&buckets[a.as_str()].len()).reverse().then(b.cmp(a)))
            .expect("at least one method")
            .clone();
        buckets.get_mut(target.as_str()).unwrap().extend(unplaced);
    }

    let mut methods: Vec<MethodCluster> = Vec::new();
    for name in &names {
        let mut clips = buckets.remove(name.as_str()).unwrap_or_default();
        if clips.is_empty() {
            continue;
        }
        clips.sort_by(|a, b| {
            a.span
                .video_id
                .cmp(&b.span.video_id)
                .then(a.span.start_s.total_cmp(&b.span.start_s))
        });
        methods.push(MethodCluster {
            step_name: step_name.to_string(),
            name: name.clone(),
            clips,
            tips: Vec::new(),
        });
    }

    let tips: Vec<Result<Option<Vec<Tip>>, GatewayError>> = methods
        .par_iter()
        .map(|m| match extract_tips(gateway, task_name, m, corpus) {
            Ok(t) => Ok(Some(t)),
            Err(e) if e.is_schema() => Ok(None),
            Err(e) => Err(e),
        })
        .collect();
    for (m, t) in methods.iter_mut().zip(tips) {
        match t? {
            Some(t) => m.tips = t,
            None => flags.push(Flag::new(
                Stage::Methods,
                &format!("{subject}/{}", m.name),
                FlagReason::TipsFailed,
            )),
        }
    }

    let (description, fell_back) = describe_step(gateway, task_name, step_name, description_spans, corpus)?;
    if fell_back {
        flags.push(Flag::new(Stage::Methods, &subject, FlagReason::DescriptionFallback));
    }
    Ok(StepMethods {
        cluster_name: cluster_name.to_string(),
        step_name: step_name.to_string(),
        description,
        methods,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MethodsStageOutput {
    pub steps: Vec<StepMethods>,
    pub flags: Vec<Flag>,
}

/// Methods for every step that appears in some approach, per outcome
/// cluster. Each step's spans are all spans of that step in the cluster.
pub fn run_methods_stage(
    gateway: &Gateway,
    corpus: &Corpus,
    dai: &DaiStageOutput,
) -> Result<MethodsStageOutput, GatewayError> {
    struct Job<'a> {
        cluster: &'a str,
        step: &'a str,
        spans: Vec<&'a StepSpan>,
        description_spans: Vec<&'a StepSpan>,
    }
    let mut jobs: Vec<Job> = Vec::new();
    for c in &dai.clusters {
        let standard: Option<&Approach> = c.approaches.iter().find(|a| a.kind == ApproachKind::Standard);
        let steps: BTreeSet<&str> = c
            .approaches
            .iter()
            .flat_map(|a| a.sequence.steps.iter().map(String::as_str))
            .collect();
        for step in steps {
            let spans: Vec<&StepSpan> = c.spans.values().flatten().filter(|s| s.step_name == step).collect();
            if spans.is_empty() {
                continue;
            }
            let mut description_spans: Vec<&StepSpan> = spans
                .iter()
                .filter(|s| standard.is_some_and(|a| a.supporting_video_ids.contains(&s.video_id)))
                .copied()
                .collect();
            if description_spans.is_empty() {
                description_spans = spans.clone();
            }
            jobs.push(Job {
                cluster: &c.cluster_name,
                step,
                spans,
                description_spans,
            });
        }
    }
    let task_name = corpus.task_name.as_str();
    let results: Vec<Result<(StepMethods, Vec<Flag>), GatewayError>> = jobs
        .par_iter()
        .map(|j| {
            let mut flags = Vec::new();
            let sm = build_step_methods(
                gateway,
                task_name,
                j.cluster,
                j.step,
                &j.spans,
                &j.description_spans,
                corpus,
                &mut flags,
            )?;
            Ok((sm, flags))
        })
        .collect();
    let mut out = MethodsStageOutput::default();
    for r in results {
        let (sm, flags) = r?;
        out.steps.push(sm);
        out.flags.extend(flags);
    }
    out.flags.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn span(vid: &str, a: usize, b: usize) -> StepSpan {
        StepSpan {
            video_id: vid.into(),
            step_name: "Cook".into(),
            sentence_start: a,
            sentence_end: b,
            start_s: a as f64,
            end_s: b as f64 + 1.0,
        }
    }

    #[test]
    fn groundings_are_clipped_to_member_spans() {
        let spans = [span("v1", 10, 20), span("v2", 0, 5)];
        let raw = vec![
            RawTip {
                text: "Add vegetables first".into(),
                groundings: vec![("v1".into(), 18.0, 25.0), ("v2".into(), 3.0, 3.0)],
            },
            RawTip {
                text: "Outside".into(),
                groundings: vec![("v1".into(), 30.0, 40.0), ("v9".into(), 0.0, 1.0)],
            },
        ];
        let tips = clip_tips(raw, spans.iter());
        assert_eq!(tips.len(), 1);
        assert_eq!(
            tips[0].groundings,
            vec![
                Grounding { video_id: "v1".into(), sentence_start: 18, sentence_end: 20 },
                Grounding { video_id: "v2".into(), sentence_start: 3, sentence_end: 3 },
            ]
        );
    }

    #[test]
    fn at_most_three_tips() {
        let spans = [span("v1", 0, 10)];
        let raw: Vec<RawTip> = (0..5)
            .map(|i| RawTip {
                text: format!("tip {i}"),
                groundings: vec![("v1".into(), i as f64, i as f64)],
            })
            .collect();
        assert_eq!(clip_tips(raw, spans.iter()).len(), 3);
    }

    #[test]
    fn first_sentence_only() {
        assert_eq!(first_sentence("Glue the joint. Then clamp it."), "Glue the joint.");
        assert_eq!(first_sentence("  v1.5 release  "), "v1.5 release");
        assert_eq!(first_sentence(""), "");
    }
}
