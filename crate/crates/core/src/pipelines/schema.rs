//! Validation of SFT JSONL files as a fine-tuning consumer reads them.

use std::fmt;
use std::path::Path;

use serde::Serialize;
use serde_json::{Map, Value};

use crate::env_core::EnvKind;

use super::PipelineKind;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    /// 1-based line number.
    pub line: usize,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct SchemaReport {
    pub records: usize,
    /// Longest record in characters, prompt turns plus target.
    pub max_chars: usize,
    pub violations: Vec<Violation>,
}

impl SchemaReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks every line of an SFT JSONL document. An empty document is valid.
pub fn validate_sft_text(text: &str) -> SchemaReport {
    let mut report = SchemaReport::default();
    let mut first_tags: Option<(String, String)> = None;
    if !text.is_empty() && !text.ends_with('\n') {
        report.violations.push(Violation {
            line: text.lines().count(),
            message: "final line is not newline-terminated (truncated file?)".into(),
        });
    }
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        let mut fail = |message: String| report.violations.push(Violation { line: n, message });
        if line.trim().is_empty() {
            fail("blank line".into());
            continue;
        }
        let obj = match serde_json::from_str::<Value>(line) {
            Ok(Value::Object(o)) => o,
            Ok(_) => {
                fail("record is not a JSON object".into());
                continue;
            }
            Err(e) => {
                fail(format!("invalid JSON: {e}"));
                continue;
            }
        };
        let mut errors = Vec::new();
        let chars = check_record(&obj, &mut errors);
        if let Some(tags) = obj.get("tags").and_then(Value::as_object) {
            let key = (
                tags.get("pipeline").map(Value::to_string).unwrap_or_default(),
                tags.get("env").map(Value::to_string).unwrap_or_default(),
            );
            match &first_tags {
                None => first_tags = Some(key),
                Some(first) if *first != key => errors.push(format!(
                    "tags mix datasets: {}/{} after {}/{}",
                    key.0, key.1, first.0, first.1
                )),
                _ => {}
            }
        }
        if errors.is_empty() {
            report.records += 1;
            report.max_chars = report.max_chars.max(chars);
        }
        for e in errors {
            fail(e);
        }
    }
    report
}

pub fn validate_sft_file(path: &Path) -> std::io::Result<SchemaReport> {
    Ok(validate_sft_text(&std::fs::read_to_string(path)?))
}

fn check_record(obj: &Map<String, Value>, errors: &mut Vec<String>) -> usize {
    for k in obj.keys() {
        if !matches!(k.as_str(), "messages" | "target" | "tags") {
            errors.push(format!("unexpected field `{k}`"));
        }
    }
    let mut chars = 0;
    match obj.get("messages") {
        Some(Value::Array(turns)) if !turns.is_empty() => chars += check_turns(turns, errors),
        Some(Value::Array(_)) => errors.push("`messages` is empty".into()),
        Some(_) => errors.push("`messages` is not an array".into()),
        None => errors.push("missing `messages`".into()),
    }
    match obj.get("target") {
        Some(Value::String(t)) if !t.trim().is_empty() => chars += t.chars().count(),
        Some(Value::String(_)) => errors.push("`target` is empty".into()),
        Some(_) => errors.push("`target` is not a string".into()),
        None => errors.push("missing `target`".into()),
    }
    match obj.get("tags") {
        Some(Value::Object(tags)) => check_tags(tags, errors),
        Some(_) => errors.push("`tags` is not an object".into()),
        None => errors.push("missing `tags`".into()),
    }
    chars
}

/// Optional leading system turn, then user and assistant alternating, ending on user.
fn check_turns(turns: &[Value], errors: &mut Vec<String>) -> usize {
    let mut chars = 0;
    let mut expect_user = true;
    for (i, t) in turns.iter().enumerate() {
        let Some(t) = t.as_object() else {
            errors.push(format!("messages[{i}] is not an object"));
            return chars;
        };
        let role = t.get("role").and_then(Value::as_str).unwrap_or("");
        match t.get("content").and_then(Value::as_str) {
            Some(c) if !c.is_empty() => chars += c.chars().count(),
            _ => errors.push(format!("messages[{i}] has no content")),
        }
        match role {
            "system" if i == 0 => {}
            "system" => errors.push(format!("messages[{i}]: system turn after the first position")),
            "user" if expect_user => expect_user = false,
            "assistant" if !expect_user => expect_user = true,
            "user" | "assistant" => errors.push(format!("messages[{i}]: `{role}` out of turn")),
            other => errors.push(format!("messages[{i}]: unknown role `{other}`")),
        }
    }
    if expect_user {
        errors.push("messages must end with a user turn".into());
    }
    chars
}

fn check_tags(tags: &Map<String, Value>, errors: &mut Vec<String>) {
    if !tags
        .get("iteration")
        .is_some_and(|v| v.as_u64().is_some_and(|n| n <= u64::from(u32::MAX)))
    {
        errors.push("`tags.iteration` must be a non-negative integer".into());
    }
    let pipeline = tags.get("pipeline").cloned().unwrap_or(Value::Null);
    if serde_json::from_value::<PipelineKind>(pipeline).is_err() {
        errors.push("`tags.pipeline` is not a known pipeline".into());
    }
    let env = tags.get("env").cloned().unwrap_or(Value::Null);
    if serde_json::from_value::<EnvKind>(env).is_err() {
        errors.push("`tags.env` is not a known environment".into());
    }
}
