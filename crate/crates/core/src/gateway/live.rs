//! Chat-completions client with function calling.

use std::io::Cursor;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use base64::Engine;
use serde_json::{json, Value};

use super::{Backend, BackendError, BackendRequest, GatewayConfig};

pub const ENV_API_KEY: &str = "MODEL_API_KEY";
pub const ENV_BASE_URL: &str = "MODEL_BASE_URL";
pub const DEFAULT_BASE_URL: &str = "https://api.openai.com/v1";

/// Spaces calls evenly at `per_minute`; callers block while holding the slot.
#[derive(Debug)]
pub struct RateLimiter {
    interval: Duration,
    next: Mutex<Option<Instant>>,
}

impl RateLimiter {
    pub fn new(per_minute: u32) -> Self {
        Self {
            interval: Duration::from_secs_f64(60.0 / per_minute.max(1) as f64),
            next: Mutex::new(None),
        }
    }

    pub fn acquire(&self) {
        let mut next = self.next.lock().unwrap();
        let now = Instant::now();
        if let Some(at) = *next {
            if at > now {
                std::thread::sleep(at - now);
            }
        }
        *next = Some(Instant::now() + self.interval);
    }
}

pub struct LiveBackend {
    agent: ureq::Agent,
    base_url: String,
    api_key: String,
    model: String,
    temperature: f64,
    max_image_px: u32,
    limiter: RateLimiter,
}

impl LiveBackend {
    pub fn new(config: &GatewayConfig, base_url: impl Into<String>, api_key: impl Into<String>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(300)))
            .build()
            .into();
        Self {
            agent,
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key: api_key.into(),
            model: config.model_name.clone(),
            temperature: config.temperature,
            max_image_px: config.max_image_px,
            limiter: RateLimiter::new(config.rate_limit),
        }
    }

    /// Reads `MODEL_API_KEY` and `MODEL_BASE_URL`.
    pub fn from_env(config: &GatewayConfig) -> Result<Self, String> {
        let key = std::env::var(ENV_API_KEY).map_err(|_| format!("{ENV_API_KEY} is not set"))?;
        let base = std::env::var(ENV_BASE_URL).unwrap_or_else(|_| DEFAULT_BASE_URL.to_string());
        Ok(Self::new(config, base, key))
    }

    pub fn request_body(&self, request: &BackendRequest<'_>) -> Value {
        let template = request.call.template;
        let images: Vec<String> = request
            .call
            .images
            .iter()
            .filter_map(|f| encode_image(&f.uri, self.max_image_px))
            .collect();
        let first = if images.is_empty() {
            json!({ "role": "user", "content": request.prompt })
        } else {
            let mut parts = vec![json!({ "type": "text", "text": request.prompt })];
            parts.extend(
                images
                    .into_iter()
                    .map(|url| json!({ "type": "image_url", "image_url": { "url": url } })),
            );
            json!({ "role": "user", "content": parts })
        };
        let mut messages = vec![first];
        for c in request.corrections {
            messages.push(json!({ "role": "assistant", "content": c.raw }));
            messages.push(json!({
                "role": "user",
                "content": format!(
                    "The previous output was rejected: {}. Call {} again with arguments that satisfy its parameter schema exactly.",
                    c.violation,
                    template.function_name()
                )
            }));
        }
        json!({
            "model": self.model,
            "temperature": self.temperature,
            "messages": messages,
            "tools": [{
                "type": "function",
                "function": {
                    "name": template.function_name(),
                    "parameters": request.schema,
                }
            }],
            "tool_choice": { "type": "function", "function": { "name": template.function_name() } }
        })
    }
}

/// Pulls the function-call arguments out of a chat-completions response,
/// falling back to plain message content.
pub fn extract_arguments(response: &Value) -> Option<String> {
    let message = response.pointer("/choices/0/message")?;
    if let Some(args) = message.pointer("/tool_calls/0/function/arguments") {
        return match args {
            Value::String(s) => Some(s.clone()),
            other => Some(other.to_string()),
        };
    }
    message.get("content").and_then(Value::as_str).map(str::to_string)
}

impl Backend for LiveBackend {
    fn complete(&self, request: &BackendRequest<'_>) -> Result<String, BackendError> {
        let body = self.request_body(request);
        self.limiter.acquire();
        let url = format!("{}/chat/completions", self.base_url);
        let mut response = self
            .agent
            .post(&url)
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(&body)
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let value: Value = response
            .body_mut()
            .read_json()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        extract_arguments(&value)
            .ok_or_else(|| BackendError::Transport("response carries no message".into()))
    }
}

/// Remote URLs pass through; local files are downscaled to `max_px` on the
/// long side and inlined as JPEG data URLs.
pub fn encode_image(uri: &str, max_px: u32) -> Option<String> {
    if uri.starts_with("http://") || uri.starts_with("https://") || uri.starts_with("data:") {
        return Some(uri.to_string());
    }
    let img = match image::open(uri) {
        Ok(img) => img,
        Err(e) => {
            tracing::warn!(uri, error = %e, "frame skipped");
            return None;
        }
    };
    let img = if img.width().max(img.height()) > max_px {
        img.thumbnail(max_px, max_px)
    } else {
        img
    };
    let mut buf = Cursor::new(Vec::new());
    image::DynamicImage::ImageRgb8(img.to_rgb8())
        .write_to(&mut buf, image::ImageFormat::Jpeg)
        .ok()?;
    let b64 = base64::engine::general_purpose::STANDARD.encode(buf.into_inner());
    Some(format!("data:image/jpeg;base64,{b64}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::FrameAsset;
    use crate::gateway::{Correction, PromptCall, TemplateId};

    #[test]
    fn body_has_function_call_and_zero_temperature() {
        let backend = LiveBackend::new(&GatewayConfig::default(), "http://localhost:1", "k");
        let call = PromptCall::new(TemplateId::OutcomeSegments);
        let schema = call.schema();
        let corrections = vec![Correction {
            raw: "{}".into(),
            violation: "/: missing required property \"index\"".into(),
        }];
        let req = BackendRequest {
            call: &call,
            prompt: "hello",
            schema: &schema,
            corrections: &corrections,
        };
        let body = backend.request_body(&req);
        assert_eq!(body["temperature"], 0.0);
        assert_eq!(body["model"], "gpt-4o-2024-05-13");
        assert_eq!(body["tools"][0]["function"]["name"], "extract_outcome_segments");
        assert_eq!(body["tools"][0]["function"]["parameters"], schema);
        assert_eq!(body["messages"].as_array().unwrap().len(), 3);
    }

    #[test]
    fn local_frames_are_downscaled() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v_0001.jpg");
        image::RgbImage::new(1024, 256).save(&path).unwrap();
        let url = encode_image(path.to_str().unwrap(), 512).unwrap();
        let b64 = url.strip_prefix("data:image/jpeg;base64,").unwrap();
        let bytes = base64::engine::general_purpose::STANDARD.decode(b64).unwrap();
        let img = image::load_from_memory(&bytes).unwrap();
        assert_eq!((img.width(), img.height()), (512, 128));

        let call = PromptCall::new(TemplateId::OutcomeDesc).with_images(vec![FrameAsset {
            video_id: "v".into(),
            t_s: 1.0,
            uri: path.to_string_lossy().into_owned(),
        }]);
        let schema = call.schema();
        let req = BackendRequest { call: &call, prompt: "p", schema: &schema, corrections: &[] };
        let backend = LiveBackend::new(&GatewayConfig::default(), "http://x", "k");
        let body = backend.request_body(&req);
        assert_eq!(body["messages"][0]["content"][1]["type"], "image_url");
    }

    #[test]
    fn arguments_extracted_from_tool_call() {
        let resp = json!({"choices": [{"message": {"tool_calls": [{"function": {"name": "f", "arguments": "{\"index\":[1]}"}}]}}]});
        assert_eq!(extract_arguments(&resp).unwrap(), "{\"index\":[1]}");
        let plain = json!({"choices": [{"message": {"content": "{}"}}]});
        assert_eq!(extract_arguments(&plain).unwrap(), "{}");
        assert!(extract_arguments(&json!({})).is_none());
    }
}
