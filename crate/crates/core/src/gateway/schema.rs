//! Structured-output schemas and a validator for the JSON-Schema subset they use
//! (`type`, `properties`, `required`, `items`, `enum`, `minItems`, `maxItems`,
//! `uniqueItems`, `minLength`).

use serde_json::{json, Value};

use super::TemplateId;

/// Parameters schema for a template's function call. Enum templates take the
/// allowed option list.
pub fn schema_for(template: TemplateId, options: Option<&[String]>) -> Value {
    let string_array = json!({ "type": "array", "items": { "type": "string" } });
    match template {
        TemplateId::OutcomeSegments => json!({
            "type": "object",
            "properties": {
                "index": { "type": "array", "items": { "type": "integer" } }
            },
            "required": ["index"]
        }),
        TemplateId::OutcomeDesc => json!({
            "type": "object",
            "properties": { "description": { "type": "string", "minLength": 1 } },
            "required": ["description"]
        }),
        TemplateId::OutcomeCluster => json!({
            "type": "object",
            "properties": {
                "clusters": {
                    "type": "array",
                    "items": { "type": "string", "minLength": 1 },
                    "minItems": 2,
                    "maxItems": 4,
                    "uniqueItems": true
                }
            },
            "required": ["clusters"]
        }),
        TemplateId::OutcomeAssign => json!({
            "type": "object",
            "properties": {
                "outcome": { "type": "string", "enum": options.unwrap_or_default() }
            },
            "required": ["outcome"]
        }),
        TemplateId::Requirements => json!({
            "type": "object",
            "properties": {
                "ingredients": string_array,
                "tools and equipment": string_array
            },
            "required": ["ingredients", "tools and equipment"]
        }),
        TemplateId::StepIdentify => json!({
            "type": "object",
            "properties": {
                "steps": { "type": "array", "items": { "type": "string", "minLength": 1 } }
            },
            "required": ["steps"]
        }),
        TemplateId::StepAssign => json!({
            "type": "object",
            "properties": {
                "steps": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "properties": {
                            "step_name": { "type": "string" },
                            "sentence_start": { "type": "integer" },
                            "sentence_end": { "type": "integer" }
                        },
                        "required": ["step_name", "sentence_start", "sentence_end"]
                    }
                }
            },
            "required": ["steps"]
        }),
        TemplateId::MethodCluster => json!({
            "type": "object",
            "properties": {
                "clusters": {
                    "type": "array",
                    "items": { "type": "string", "minLength": 1 },
                    "minItems": 1,
                    "maxItems": 3,
                    "uniqueItems": true
                }
            },
            "required": ["clusters"]
        }),
        TemplateId::MethodAssign => json!({
            "type": "object",
            "properties": {
                "method": { "type": "string", "enum": options.unwrap_or_default() }
            },
            "required": ["method"]
        }),
        TemplateId::Tips => json!({
            "type": "object",
            "properties": {
                "tips": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "properties": {
                            "tip": { "type": "string" },
                            "videos": {
                                "type": "array",
                                "items": {
                                    "type": "object",
                                    "properties": {
                                        "video_id": { "type": "string" },
                                        "start_index": { "type": "number" },
                                        "end_index": { "type": "number" }
                                    },
                                    "required": ["video_id", "start_index", "end_index"]
                                }
                            }
                        },
                        "required": ["tip", "videos"]
                    }
                }
            },
            "required": ["tips"]
        }),
        TemplateId::ClipSummary => json!({
            "type": "object",
            "properties": { "summary": { "type": "string", "minLength": 1 } },
            "required": ["summary"]
        }),
    }
}

/// Returns the first violation found, as a JSON-pointer-prefixed message.
pub fn validate(schema: &Value, value: &Value) -> Result<(), String> {
    check(schema, value, "")
}

fn type_matches(expected: &str, value: &Value) -> bool {
    match expected {
        "object" => value.is_object(),
        "array" => value.is_array(),
        "string" => value.is_string(),
        "boolean" => value.is_boolean(),
        "null" => value.is_null(),
        "number" => value.is_number(),
        "integer" => {
            value.is_i64()
                || value.is_u64()
                || value.as_f64().is_some_and(|f| f.fract() == 0.0 && f.is_finite())
        }
        _ => false,
    }
}

fn check(schema: &Value, value: &Value, path: &str) -> Result<(), String> {
    let at = if path.is_empty() { "/" } else { path };
    if let Some(ty) = schema.get("type").and_then(Value::as_str) {
        if !type_matches(ty, value) {
            return Err(format!("{at}: expected {ty}, got {}", kind(value)));
        }
    }
    if let Some(options) = schema.get("enum").and_then(Value::as_array) {
        if !options.contains(value) {
            return Err(format!("{at}: {value} is not one of {}", Value::Array(options.clone())));
        }
    }
    if let (Some(min), Some(s)) = (
        schema.get("minLength").and_then(Value::as_u64),
        value.as_str(),
    ) {
        if (s.trim().chars().count() as u64) < min {
            return Err(format!("{at}: string shorter than {min}"));
        }
    }
    if let Some(obj) = value.as_object() {
        if let Some(required) = schema.get("required").and_then(Value::as_array) {
            for key in required.iter().filter_map(Value::as_str) {
                if !obj.contains_key(key) {
                    return Err(format!("{at}: missing required property {key:?}"));
                }
            }
        }
        if let Some(props) = schema.get("properties").and_then(Value::as_object) {
            for (key, sub) in props {
                if let Some(v) = obj.get(key) {
                    check(sub, v, &format!("{path}/{key}"))?;
                }
            }
        }
    }
    if let Some(items) = value.as_array() {
        let n = items.len() as u64;
        if let Some(min) = schema.get("minItems").and_then(Value::as_u64) {
            if n < min {
                return Err(format!("{at}: expected at least {min} items, got {n}"));
            }
        }
        if let Some(max) = schema.get("maxItems").and_then(Value::as_u64) {
            if n > max {
                return Err(format!("{at}: expected at most {max} items, got {n}"));
            }
        }
        if schema.get("uniqueItems").and_then(Value::as_bool) == Some(true) {
            for (i, a) in items.iter().enumerate() {
                if items[..i].contains(a) {
                    return Err(format!("{at}: duplicate item {a}"));
                }
            }
        }
        if let Some(item_schema) = schema.get("items") {
            for (i, v) in items.iter().enumerate() {
                check(item_schema, v, &format!("{path}/{i}"))?;
            }
        }
    }
    Ok(())
}

fn kind(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}
