//! Recovery of structured records from free-form completions.
//!
//! Models wrap the requested JSON in prose, code fences or both. Extraction
//! scans for balanced `{...}` / `[...]` spans (string-aware) and takes the
//! first one that parses and carries the schema's required fields.

use serde_json::{Map, Value};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StructuredError {
    #[error("no structured object found in completion: {raw:?}")]
    NoParse { raw: String },
    #[error("field `{field}` value {value} is outside the allowed range")]
    RangeViolation { field: String, value: String, raw: String },
    #[error("field `{field}` has the wrong type: {value}")]
    TypeMismatch { field: String, value: String, raw: String },
}

#[derive(Debug, Clone, PartialEq)]
pub enum FieldKind {
    Text,
    Integer { allowed: Option<Vec<i64>> },
    Any,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldSpec {
    pub name: &'static str,
    pub kind: FieldKind,
    pub required: bool,
}

/// Expected fields of a completion.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputSchema {
    pub fields: Vec<FieldSpec>,
}

impl OutputSchema {
    /// m2: `{"analysis": text, "err_code": -1 | 0}`.
    pub fn validity() -> Self {
        Self {
            fields: vec![
                FieldSpec { name: "analysis", kind: FieldKind::Text, required: false },
                FieldSpec {
                    name: "err_code",
                    kind: FieldKind::Integer { allowed: Some(vec![-1, 0]) },
                    required: true,
                },
            ],
        }
    }

    /// m3: `{"instruction": text}`.
    pub fn instruction() -> Self {
        Self {
            fields: vec![FieldSpec { name: "instruction", kind: FieldKind::Text, required: true }],
        }
    }

    /// m5: `{"analysis": text, "score": 1 | 2 | 3}`.
    pub fn quality() -> Self {
        Self {
            fields: vec![
                FieldSpec { name: "analysis", kind: FieldKind::Text, required: false },
                FieldSpec {
                    name: "score",
                    kind: FieldKind::Integer { allowed: Some(vec![1, 2, 3]) },
                    required: true,
                },
            ],
        }
    }

    /// m7: a documentation revision in registry shape.
    pub fn documentation() -> Self {
        Self {
            fields: vec![
                FieldSpec { name: "description", kind: FieldKind::Text, required: false },
                FieldSpec { name: "parameters", kind: FieldKind::Any, required: true },
            ],
        }
    }

    /// Judge verdict.
    pub fn verdict() -> Self {
        Self {
            fields: vec![
                FieldSpec { name: "verdict", kind: FieldKind::Text, required: true },
                FieldSpec { name: "reason", kind: FieldKind::Text, required: false },
            ],
        }
    }
}

/// End index (exclusive) of the balanced span opening at `start`, honoring
/// JSON string literals and escapes.
fn balanced_end(text: &str, start: usize) -> Option<usize> {
    let bytes = text.as_bytes();
    let mut stack = Vec::new();
    let mut in_string = false;
    let mut escaped = false;
    for (offset, &b) in bytes[start..].iter().enumerate() {
        if in_string {
            match b {
                _ if escaped => escaped = false,
                b'\\' => escaped = true,
                b'"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' | b'[' => stack.push(b),
            b'}' | b']' => {
                let open = stack.pop()?;
                if (open == b'{') != (b == b'}') {
                    return None;
                }
                if stack.is_empty() {
                    return Some(start + offset + 1);
                }
            }
            _ => {}
        }
    }
    None
}

/// Every balanced JSON value in `text` that starts with one of `openers`,
/// in order of its opening position.
pub fn json_values<'a>(text: &'a str, openers: &[u8]) -> impl Iterator<Item = Value> + 'a {
    let openers = openers.to_vec();
    text.bytes()
        .enumerate()
        .filter(move |(_, b)| openers.contains(b))
        .filter_map(move |(i, _)| {
            let end = balanced_end(text, i)?;
            serde_json::from_str::<Value>(&text[i..end]).ok()
        })
}

fn as_integer(value: &Value) -> Option<i64> {
    match value {
        Value::Number(n) => n
            .as_i64()
            .or_else(|| n.as_f64().filter(|f| f.fract() == 0.0).map(|f| f as i64)),
        Value::String(s) => s.trim().parse().ok(),
        _ => None,
    }
}

/// Extracts the first object carrying every required field, then type- and
/// range-checks it. Integer fields are normalized to JSON integers and text
/// fields to strings.
pub fn parse_structured_output(text: &str, schema: &OutputSchema) -> Result<Map<String, Value>, StructuredError> {
    let candidate = json_values(text, b"{")
        .filter_map(|v| match v {
            Value::Object(map) => Some(map),
            _ => None,
        })
        .find(|map| schema.fields.iter().filter(|f| f.required).all(|f| map.contains_key(f.name)))
        .ok_or_else(|| StructuredError::NoParse { raw: text.to_string() })?;

    let mut record = candidate;
    for field in &schema.fields {
        let Some(value) = record.get(field.name).cloned() else { continue };
        let normalized = match &field.kind {
            FieldKind::Any => value,
            FieldKind::Text => match value {
                Value::String(s) => Value::String(s),
                Value::Null => Value::String(String::new()),
                other => Value::String(other.to_string()),
            },
            FieldKind::Integer { allowed } => {
                let n = as_integer(&value).ok_or_else(|| StructuredError::TypeMismatch {
                    field: field.name.to_string(),
                    value: value.to_string(),
                    raw: text.to_string(),
                })?;
                if let Some(allowed) = allowed {
                    if !allowed.contains(&n) {
                        return Err(StructuredError::RangeViolation {
                            field: field.name.to_string(),
                            value: n.to_string(),
                            raw: text.to_string(),
                        });
                    }
                }
                Value::from(n)
            }
        };
        record.insert(field.name.to_string(), normalized);
    }
    Ok(record)
}

/// A function call as written by a model, before tool resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct RawCall {
    pub name: String,
    pub arguments: Map<String, Value>,
}

fn call_from_object(map: &Map<String, Value>) -> Option<RawCall> {
    let name = match map.get("name")? {
        Value::String(s) => s.trim().to_string(),
        _ => return None,
    };
    let args = map.get("arguments").or_else(|| map.get("parameters"));
    let arguments = match args {
        None | Some(Value::Null) => Map::new(),
        Some(Value::Object(obj)) => match obj.get("properties") {
            // m1 shape: {"parameters": {"properties": {...}}}
            Some(Value::Object(props)) if obj.len() == 1 => props.clone(),
            _ => obj.clone(),
        },
        // Some models emit arguments as a JSON-encoded string.
        Some(Value::String(s)) => match serde_json::from_str::<Value>(s) {
            Ok(Value::Object(obj)) => obj,
            _ => return None,
        },
        Some(_) => return None,
    };
    Some(RawCall { name, arguments })
}

/// First call or list of calls found in `text`. Accepts `{"name", "arguments"}`,
/// `{"name", "parameters": {"properties": ...}}` and arrays of either.
pub fn extract_calls(text: &str) -> Option<Vec<RawCall>> {
    json_values(text, b"{[").find_map(|value| match value {
        Value::Object(map) => call_from_object(&map).map(|c| vec![c]),
        Value::Array(items) => {
            let calls: Option<Vec<RawCall>> = items
                .iter()
                .map(|item| item.as_object().and_then(call_from_object))
                .collect();
            calls.filter(|c| !c.is_empty())
        }
        _ => None,
    })
}
