//! Deterministic stand-in for the model.
//!
//! A [`Ruleset`] is an ordered list of rules; the first rule whose template
//! and `when` matchers fit the call decides the output. A rule either returns
//! a fixed payload, returns raw text verbatim (useful for malformed output),
//! or derives the payload from inline annotations in the fixture transcripts:
//!
//! | annotation              | used by                                 |
//! |-------------------------|-----------------------------------------|
//! | `[[outcome]]`           | OUTCOME_SEGMENTS, OUTCOME_DESC fallback |
//! | `[[desc:...]]`          | OUTCOME_DESC                            |
//! | `[[ingredient:...]]`    | REQUIREMENTS                            |
//! | `[[tool:...]]`          | REQUIREMENTS                            |
//! | `[[step:...]]`          | STEP_IDENTIFY, STEP_ASSIGN              |
//! | `[[method:...]]`        | METHOD_CLUSTER, METHOD_ASSIGN           |
//! | `[[tip:...]]`           | TIPS                                    |
//! | `[[summary:...]]`       | CLIP_SUMMARY                            |
//!
//! OUTCOME_CLUSTER has no derivation and must be scripted with `respond`.
//! OUTCOME_ASSIGN derives by word overlap between description and options.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{Backend, BackendError, BackendRequest, PromptCall, TemplateId};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    /// Template id, or `*` for any.
    pub template: String,
    /// Placeholder → required substring. Key `*` matches any substitution,
    /// key `prompt` matches the rendered prompt.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub when: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub respond: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub respond_raw: Option<String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub derive: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ruleset {
    #[serde(default)]
    pub rules: Vec<Rule>,
    /// When no rule matches, fall back to annotation-driven derivation.
    #[serde(default = "default_true")]
    pub derive_from_tags: bool,
}

fn default_true() -> bool {
    true
}

impl Default for Ruleset {
    fn default() -> Self {
        Self {
            rules: Vec::new(),
            derive_from_tags: true,
        }
    }
}

impl Ruleset {
    pub fn from_json(text: &str) -> Result<Self, String> {
        let rs: Ruleset = serde_json::from_str(text).map_err(|e| e.to_string())?;
        for (i, rule) in rs.rules.iter().enumerate() {
            if rule.template != "*" && TemplateId::parse(&rule.template).is_none() {
                return Err(format!("rule {i}: unknown template {:?}", rule.template));
            }
            let actions = [rule.respond.is_some(), rule.respond_raw.is_some(), rule.derive];
            if actions.iter().filter(|a| **a).count() != 1 {
                return Err(format!(
                    "rule {i}: exactly one of respond, respond_raw, derive is required"
                ));
            }
        }
        Ok(rs)
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::from_json(&text)
    }

    pub fn respond(mut self, template: TemplateId, payload: Value) -> Self {
        self.rules.push(Rule {
            template: template.as_str().into(),
            respond: Some(payload),
            ..Rule::default()
        });
        self
    }

    pub fn push(mut self, rule: Rule) -> Self {
        self.rules.push(rule);
        self
    }
}

impl Rule {
    fn matches(&self, call: &PromptCall, prompt: &str) -> bool {
        if self.template != "*" && self.template != call.template.as_str() {
            return false;
        }
        self.when.iter().all(|(key, needle)| match key.as_str() {
            "*" => call.substitutions.values().any(|v| v.contains(needle.as_str())),
            "prompt" => prompt.contains(needle.as_str()),
            k => call
                .substitutions
                .get(k)
                .is_some_and(|v| v.contains(needle.as_str())),
        })
    }
}

/// Pure function of (call, ruleset).
#[derive(Debug, Clone, Default)]
pub struct ScriptedBackend {
    ruleset: Ruleset,
}

impl ScriptedBackend {
    pub fn new(ruleset: Ruleset) -> Self {
        Self { ruleset }
    }

    pub fn respond_to(&self, call: &PromptCall, prompt: &str) -> Result<String, BackendError> {
        let rule = self.ruleset.rules.iter().find(|r| r.matches(call, prompt));
        match rule {
            Some(Rule { respond: Some(v), .. }) => Ok(v.to_string()),
            Some(Rule { respond_raw: Some(raw), .. }) => Ok(raw.clone()),
            Some(_) => derive(call, prompt).map(|v| v.to_string()),
            None if self.ruleset.derive_from_tags => derive(call, prompt).map(|v| v.to_string()),
            None => Err(BackendError::UncoveredTemplate(call.template)),
        }
    }
}

impl Backend for ScriptedBackend {
    fn complete(&self, request: &BackendRequest<'_>) -> Result<String, BackendError> {
        self.respond_to(request.call, request.prompt)
    }
}

/// Inline `[[key]]` / `[[key:value]]` annotations.
pub mod tags {
    pub fn parse(text: &str) -> Vec<(&str, Option<&str>)> {
        let mut out = Vec::new();
        let mut rest = text;
        while let Some(open) = rest.find("[[") {
            let after = &rest[open + 2..];
            let Some(close) = after.find("]]") else { break };
            let body = &after[..close];
            match body.split_once(':') {
                Some((k, v)) => out.push((k.trim(), Some(v.trim()))),
                None => out.push((body.trim(), None)),
            }
            rest = &after[close + 2..];
        }
        out
    }

    pub fn values<'a>(text: &'a str, key: &str) -> Vec<&'a str> {
        parse(text)
            .into_iter()
            .filter(|(k, _)| *k == key)
            .filter_map(|(_, v)| v)
            .collect()
    }

    pub fn has(text: &str, key: &str) -> bool {
        parse(text).iter().any(|(k, _)| *k == key)
    }

    pub fn strip(text: &str) -> String {
        let mut out = String::with_capacity(text.len());
        let mut rest = text;
        while let Some(open) = rest.find("[[") {
            let after = &rest[open + 2..];
            let Some(close) = after.find("]]") else { break };
            out.push_str(&rest[..open]);
            rest = &after[close + 2..];
        }
        out.push_str(rest);
        out.split_whitespace().collect::<Vec<_>>().join(" ")
    }
}

/// One transcript line recovered from a rendered transcript substitution.
#[derive(Debug, Clone, PartialEq)]
struct Line<'a> {
    video_id: Option<&'a str>,
    index: i64,
    text: &'a str,
}

fn parse_lines(text: &str) -> Vec<Line<'_>> {
    let mut video_id = None;
    let mut out = Vec::new();
    for raw in text.lines() {
        if let Some(id) = raw.strip_prefix("video_id: ") {
            video_id = Some(id.trim());
            continue;
        }
        let Some((idx, body)) = raw.split_once(": ") else { continue };
        if let Ok(index) = idx.trim().parse::<i64>() {
            out.push(Line {
                video_id,
                index,
                text: body,
            });
        }
    }
    out
}

fn sub<'a>(call: &'a PromptCall, key: &str) -> &'a str {
    call.substitutions.get(key).map(String::as_str).unwrap_or("")
}

fn push_unique(list: &mut Vec<String>, item: &str) {
    if !item.is_empty() && !list.iter().any(|x| x == item) {
        list.push(item.to_string());
    }
}

fn truncate_chars(s: &str, max: usize) -> String {
    s.chars().take(max).collect()
}

fn derive(call: &PromptCall, prompt: &str) -> Result<Value, BackendError> {
    let transcript = sub(call, "transcript_data");
    Ok(match call.template {
        TemplateId::OutcomeSegments => {
            let index: Vec<i64> = parse_lines(transcript)
                .into_iter()
                .filter(|l| tags::has(l.text, "outcome"))
                .map(|l| l.index)
                .collect();
            json!({ "index": index })
        }
        TemplateId::OutcomeDesc => {
            let lines = parse_lines(transcript);
            let desc = lines
                .iter()
                .find_map(|l| tags::values(l.text, "desc").first().map(|s| s.to_string()))
                .or_else(|| {
                    lines
                        .iter()
                        .find(|l| tags::has(l.text, "outcome"))
                        .or(lines.first())
                        .map(|l| tags::strip(l.text))
                })
                .unwrap_or_default();
            json!({ "description": desc })
        }
        TemplateId::OutcomeCluster => return Err(BackendError::UncoveredTemplate(call.template)),
        TemplateId::OutcomeAssign => {
            let options = call.options.clone().unwrap_or_default();
            json!({ "outcome": best_overlap(sub(call, "outcome_description"), &options) })
        }
        TemplateId::Requirements => {
            let strip = prompt.contains("without specifying quantities");
            let mut ingredients = Vec::new();
            let mut tools = Vec::new();
            for line in parse_lines(transcript) {
                for (key, value) in tags::parse(line.text) {
                    let Some(value) = value else { continue };
                    let item = if strip { strip_quantity(value) } else { value.to_string() };
                    match key {
                        "ingredient" => push_unique(&mut ingredients, &item),
                        "tool" => push_unique(&mut tools, &item),
                        _ => {}
                    }
                }
            }
            json!({ "ingredients": ingredients, "tools and equipment": tools })
        }
        TemplateId::StepIdentify => {
            let mut steps = Vec::new();
            for line in parse_lines(transcript) {
                for v in tags::values(line.text, "step") {
                    push_unique(&mut steps, v);
                }
            }
            json!({ "steps": steps })
        }
        TemplateId::StepAssign => {
            let allowed: Vec<String> =
                serde_json::from_str(sub(call, "whole_step")).unwrap_or_default();
            let mut spans: Vec<(String, i64, i64)> = Vec::new();
            let mut prev: Option<i64> = None;
            for line in parse_lines(transcript) {
                let step = tags::values(line.text, "step")
                    .into_iter()
                    .find(|s| allowed.iter().any(|a| a == s));
                match (step, spans.last_mut()) {
                    (Some(s), Some(last)) if last.0 == s && prev == Some(line.index - 1) => {
                        last.2 = line.index;
                    }
                    (Some(s), _) => spans.push((s.to_string(), line.index, line.index)),
                    (None, _) => {}
                }
                prev = step.map(|_| line.index);
            }
            let steps: Vec<Value> = spans
                .into_iter()
                .map(|(name, a, b)| json!({ "step_name": name, "sentence_start": a, "sentence_end": b }))
                .collect();
            json!({ "steps": steps })
        }
        TemplateId::MethodCluster => {
            let mut names = Vec::new();
            for line in parse_lines(sub(call, "transcripts")) {
                for v in tags::values(line.text, "method") {
                    push_unique(&mut names, v);
                }
            }
            if names.is_empty() {
                names.push(sub(call, "step_name").to_string());
            }
            json!({ "clusters": names })
        }
        TemplateId::MethodAssign => {
            let options = call.options.clone().unwrap_or_default();
            let tagged = parse_lines(sub(call, "transcript"))
                .into_iter()
                .find_map(|l| tags::values(l.text, "method").first().map(|s| s.to_string()));
            let method = tagged.or_else(|| options.first().cloned()).unwrap_or_default();
            json!({ "method": method })
        }
        TemplateId::Tips => {
            // tip text -> (first position, groundings, distinct videos)
            let mut tips: Vec<(String, Vec<(String, i64, i64)>, Vec<String>)> = Vec::new();
            for line in parse_lines(sub(call, "transcripts")) {
                let vid = line.video_id.unwrap_or("").to_string();
                for text in tags::values(line.text, "tip") {
                    let pos = match tips.iter().position(|t| t.0 == text) {
                        Some(p) => p,
                        None => {
                            tips.push((text.to_string(), Vec::new(), Vec::new()));
                            tips.len() - 1
                        }
                    };
                    let entry = &mut tips[pos];
                    match entry.1.last_mut() {
                        Some(g) if g.0 == vid && g.2 + 1 == line.index => g.2 = line.index,
                        _ => entry.1.push((vid.clone(), line.index, line.index)),
                    }
                    push_unique(&mut entry.2, &vid);
                }
            }
            // stable sort keeps first-appearance order among equal counts
            tips.sort_by_key(|t| std::cmp::Reverse(t.2.len()));
            let tips: Vec<Value> = tips
                .into_iter()
                .take(3)
                .map(|(tip, groundings, _)| {
                    let videos: Vec<Value> = groundings
                        .into_iter()
                        .map(|(v, a, b)| json!({ "video_id": v, "start_index": a, "end_index": b }))
                        .collect();
                    json!({ "tip": tip, "videos": videos })
                })
                .collect();
            json!({ "tips": tips })
        }
        TemplateId::ClipSummary => {
            let lines = parse_lines(sub(call, "transcript"));
            let summary = lines
                .iter()
                .find_map(|l| tags::values(l.text, "summary").first().map(|s| s.to_string()))
                .or_else(|| lines.first().map(|l| truncate_chars(&tags::strip(l.text), 120)))
                .unwrap_or_default();
            json!({ "summary": summary })
        }
    })
}

fn words(s: &str) -> Vec<String> {
    s.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Option sharing the most words with `text`; ties go to the earlier option.
fn best_overlap(text: &str, options: &[String]) -> String {
    let have = words(text);
    let mut best: Option<(usize, &String)> = None;
    for opt in options {
        let score = words(opt).iter().filter(|w| have.contains(w)).count();
        if best.is_none_or(|(s, _)| score > s) {
            best = Some((score, opt));
        }
    }
    best.map(|(_, o)| o.clone()).unwrap_or_default()
}

const QUANTITY_WORDS: &[&str] = &[
    "a", "an", "some", "few", "several", "of", "pinch", "pinches", "dash", "dashes", "cup",
    "cups", "tablespoon", "tablespoons", "tbsp", "teaspoon", "teaspoons", "tsp", "gram", "grams",
    "g", "kg", "ml", "l", "liter", "liters", "ounce", "ounces", "oz", "pound", "pounds", "lb",
    "lbs", "handful", "clove", "cloves", "slice", "slices", "piece", "pieces", "sheet", "sheets",
    "fresh", "large", "small", "medium", "big", "chopped", "minced", "diced", "sliced", "whole",
    "extra",
];

/// Drops leading quantities, units and simple descriptors ("a pinch of salt" → "salt").
pub fn strip_quantity(item: &str) -> String {
    let tokens: Vec<&str> = item.split_whitespace().collect();
    let is_quantity = |w: &str| {
        let lw = w.to_lowercase();
        QUANTITY_WORDS.contains(&lw.as_str())
            || lw.chars().all(|c| c.is_ascii_digit() || "/.½¼¾-".contains(c))
    };
    let skip = tokens.iter().take_while(|w| is_quantity(w)).count();
    if skip == tokens.len() {
        return tokens.join(" ");
    }
    tokens[skip..].join(" ")
}
