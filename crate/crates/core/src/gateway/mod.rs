//! Typed access to the vision-language model.
//!
//! Every call renders a fixed template, goes to a [`Backend`], and comes back
//! only once its payload validates against the template's schema. Schema
//! violations are fed back to the backend as a corrective turn, up to
//! `max_retries` times.

pub mod live;
pub mod schema;
pub mod scripted;
pub mod templates;

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::corpus::FrameAsset;
pub use templates::{render_list, render_multi_transcript, render_prompt, render_transcript, TemplateId};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("template {template} is missing placeholder {{{placeholder}}}")]
    MissingPlaceholder { template: TemplateId, placeholder: String },
    #[error("template {0} does not accept images")]
    ImagesNotAccepted(TemplateId),
    #[error("{template}: no schema-valid output after {attempts} attempts: {violation}")]
    Schema {
        template: TemplateId,
        attempts: u32,
        violation: String,
    },
    #[error("{template}: backend failure: {message}")]
    Transport { template: TemplateId, message: String },
    #[error("scripted ruleset has no rule for {0}")]
    UncoveredTemplate(TemplateId),
    #[error("invalid gateway config: {0}")]
    Config(String),
}

impl GatewayError {
    /// Schema failures are per-item problems the engines recover from by
    /// flagging. Everything else is systemic.
    pub fn is_schema(&self) -> bool {
        matches!(self, GatewayError::Schema { .. })
    }
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("{0}")]
    Transport(String),
    #[error("no rule covers {0}")]
    UncoveredTemplate(TemplateId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Live,
    Scripted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewayConfig {
    pub backend: BackendKind,
    pub model_name: String,
    pub temperature: f64,
    pub max_retries: u32,
    /// Calls per minute for the live backend.
    pub rate_limit: u32,
    /// Long-side pixel cap for transmitted frames.
    pub max_image_px: u32,
    /// Prompts longer than this get their transcript truncated.
    pub max_prompt_chars: usize,
    pub reproducible: bool,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            backend: BackendKind::Scripted,
            model_name: "gpt-4o-2024-05-13".into(),
            temperature: 0.0,
            max_retries: 3,
            rate_limit: 60,
            max_image_px: 512,
            max_prompt_chars: 400_000,
            reproducible: true,
        }
    }
}

impl GatewayConfig {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.max_retries == 0 {
            return Err(GatewayError::Config("max_retries must be positive".into()));
        }
        if self.rate_limit == 0 {
            return Err(GatewayError::Config("rate_limit must be positive".into()));
        }
        if self.reproducible && self.temperature != 0.0 {
            return Err(GatewayError::Config(
                "temperature must be 0 in reproducible mode".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptCall {
    pub template: TemplateId,
    pub substitutions: BTreeMap<String, String>,
    pub images: Vec<FrameAsset>,
    /// Allowed values for enum-constrained outputs (outcome and method assignment).
    pub options: Option<Vec<String>>,
}

impl PromptCall {
    pub fn new(template: TemplateId) -> Self {
        Self {
            template,
            substitutions: BTreeMap::new(),
            images: Vec::new(),
            options: None,
        }
    }

    pub fn with(mut self, key: &str, value: impl Into<String>) -> Self {
        self.substitutions.insert(key.to_string(), value.into());
        self
    }

    pub fn with_images(mut self, images: Vec<FrameAsset>) -> Self {
        self.images = images;
        self
    }

    pub fn with_options(mut self, options: Vec<String>) -> Self {
        self.options = Some(options);
        self
    }

    pub fn schema(&self) -> Value {
        schema::schema_for(self.template, self.options.as_deref())
    }

    pub fn render(&self) -> Result<String, GatewayError> {
        render_prompt(self.template, &self.substitutions)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelResponse {
    pub payload: Value,
    pub raw: String,
    pub attempt_count: u32,
}

/// A rejected output and the reason, replayed to the backend on retry.
#[derive(Debug, Clone, PartialEq)]
pub struct Correction {
    pub raw: String,
    pub violation: String,
}

pub struct BackendRequest<'a> {
    pub call: &'a PromptCall,
    pub prompt: &'a str,
    pub schema: &'a Value,
    pub corrections: &'a [Correction],
}

pub trait Backend: Send + Sync {
    /// Returns the raw structured output (a JSON document as text).
    fn complete(&self, request: &BackendRequest<'_>) -> Result<String, BackendError>;
}

pub type CallCounts = BTreeMap<TemplateId, u64>;

pub struct Gateway {
    backend: Arc<dyn Backend>,
    config: GatewayConfig,
    counts: Mutex<CallCounts>,
}

impl Gateway {
    pub fn new(backend: Arc<dyn Backend>, config: GatewayConfig) -> Result<Self, GatewayError> {
        config.validate()?;
        Ok(Self {
            backend,
            config,
            counts: Mutex::new(BTreeMap::new()),
        })
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    /// Backend invocations so far, per template.
    pub fn call_counts(&self) -> CallCounts {
        self.counts.lock().unwrap().clone()
    }

    pub fn call(&self, call: &PromptCall) -> Result<ModelResponse, GatewayError> {
        if !call.images.is_empty() && !call.template.accepts_images() {
            return Err(GatewayError::ImagesNotAccepted(call.template));
        }
        let prompt = self.fit_prompt(call)?;
        let schema = call.schema();
        let max_attempts = self.config.max_retries + 1;
        let mut corrections: Vec<Correction> = Vec::new();
        let mut last_violation = String::new();

        for attempt in 1..=max_attempts {
            *self.counts.lock().unwrap().entry(call.template).or_default() += 1;
            let request = BackendRequest {
                call,
                prompt: &prompt,
                schema: &schema,
                corrections: &corrections,
            };
            let raw = match self.backend.complete(&request) {
                Ok(raw) => raw,
                Err(BackendError::UncoveredTemplate(t)) => {
                    return Err(GatewayError::UncoveredTemplate(t))
                }
                Err(BackendError::Transport(message)) => {
                    tracing::warn!(template = %call.template, attempt, %message, "backend failure");
                    if attempt == max_attempts {
                        return Err(GatewayError::Transport {
                            template: call.template,
                            message,
                        });
                    }
                    continue;
                }
            };
            match accept(call, &schema, &raw) {
                Ok(payload) => {
                    return Ok(ModelResponse {
                        payload,
                        raw,
                        attempt_count: attempt,
                    })
                }
                Err(violation) => {
                    tracing::debug!(template = %call.template, attempt, %violation, "schema violation");
                    last_violation = violation.clone();
                    corrections.push(Correction { raw, violation });
                }
            }
        }
        Err(GatewayError::Schema {
            template: call.template,
            attempts: max_attempts,
            violation: last_violation,
        })
    }

    /// Renders the prompt, dropping trailing transcript lines when it exceeds
    /// the configured size.
    fn fit_prompt(&self, call: &PromptCall) -> Result<String, GatewayError> {
        let prompt = call.render()?;
        let limit = self.config.max_prompt_chars;
        if prompt.len() <= limit {
            return Ok(prompt);
        }
        let key = ["transcript_data", "transcripts", "transcript"]
            .into_iter()
            .filter(|k| call.substitutions.contains_key(*k))
            .max_by_key(|k| call.substitutions[*k].len());
        let Some(key) = key else {
            return Ok(prompt);
        };
        let excess = prompt.len() - limit;
        let text = &call.substitutions[key];
        let mut keep = text.len().saturating_sub(excess);
        while keep > 0 && !text.is_char_boundary(keep) {
            keep -= 1;
        }
        let cut = text[..keep].rfind('\n').unwrap_or(0);
        tracing::warn!(
            template = %call.template,
            dropped_bytes = text.len() - cut,
            "prompt exceeds max_prompt_chars; transcript truncated"
        );
        let mut trimmed = call.clone();
        trimmed.substitutions.insert(key.to_string(), text[..cut].to_string());
        trimmed.render()
    }
}

fn accept(call: &PromptCall, schema: &Value, raw: &str) -> Result<Value, String> {
    let payload: Value =
        serde_json::from_str(raw).map_err(|e| format!("output is not valid JSON: {e}"))?;
    schema::validate(schema, &payload)?;
    Ok(match call.template {
        TemplateId::StepIdentify => union_with_original(call, payload),
        _ => payload,
    })
}

/// Step identification may only grow the taxonomy: names the model dropped
/// from `original_step` are put back, in their original order.
fn union_with_original(call: &PromptCall, payload: Value) -> Value {
    let original: Vec<String> = call
        .substitutions
        .get("original_step")
        .and_then(|s| serde_json::from_str(s).ok())
        .unwrap_or_default();
    let mut steps: Vec<String> = Vec::new();
    let proposed = payload["steps"]
        .as_array()
        .into_iter()
        .flatten()
        .filter_map(Value::as_str)
        .map(|s| s.trim().to_string());
    for name in original.into_iter().chain(proposed) {
        if !name.is_empty() && !steps.contains(&name) {
            steps.push(name);
        }
    }
    serde_json::json!({ "steps": steps })
}
