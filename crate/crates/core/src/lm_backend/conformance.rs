//! Checks any backend, or a raw chat-completions endpoint, against the
//! request/response contract the pipelines rely on.

use std::time::Duration;

use serde::Serialize;
use serde_json::json;

use super::http::{chat_url, parse_response_body, ChatRequestBody};
use super::{complete_many, Backend, BackendError, ChatTurn, CompletionRequest, SamplingParams};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ConformanceReport {
    pub checks: Vec<CheckResult>,
}

impl ConformanceReport {
    pub fn passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.passed)
    }

    fn record(&mut self, name: &'static str, outcome: Result<String, String>) {
        let (passed, detail) = match outcome {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        self.checks.push(CheckResult { name, passed, detail });
    }

    pub fn merge(mut self, other: ConformanceReport) -> Self {
        self.checks.extend(other.checks);
        self
    }

    pub fn render(&self) -> String {
        self.checks
            .iter()
            .map(|c| format!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

fn answered(backend: &dyn Backend, turns: Vec<ChatTurn>, params: SamplingParams) -> Result<String, String> {
    let req = CompletionRequest::new(turns, params);
    match backend.complete(&req) {
        Ok(r) if !r.text.is_empty() => Ok(format!("{} chars", r.text.len())),
        Ok(_) => Err("empty completion".into()),
        Err(e) => Err(e.to_string()),
    }
}

/// Contract checks through the [`Backend`] interface.
pub fn backend_conformance(backend: &dyn Backend) -> ConformanceReport {
    let mut report = ConformanceReport::default();
    let params = SamplingParams::default();
    report.record(
        "single_user_turn",
        answered(backend, vec![ChatTurn::user("Reply with the word ok.")], params.clone()),
    );
    report.record(
        "system_and_user",
        answered(
            backend,
            vec![
                ChatTurn::system("You answer briefly."),
                ChatTurn::user("Name a colour."),
            ],
            params.clone(),
        ),
    );
    report.record(
        "multi_turn",
        answered(
            backend,
            vec![
                ChatTurn::system("You answer briefly."),
                ChatTurn::user("Name a colour."),
                ChatTurn::assistant("Blue."),
                ChatTurn::user("Name another."),
            ],
            params.clone(),
        ),
    );
    report.record(
        "seeded_greedy",
        answered(
            backend,
            vec![ChatTurn::user("Count to three.")],
            SamplingParams {
                temperature: 0.0,
                ..params.with_seed(7)
            },
        ),
    );
    let n = backend.max_in_flight().max(1) * 2;
    let batch: Vec<CompletionRequest> = (0..n)
        .map(|i| CompletionRequest::new(vec![ChatTurn::user(format!("Request {i}: reply ok."))], params.clone()))
        .collect();
    let results = complete_many(backend, &batch);
    let failed: Vec<String> = results
        .iter()
        .filter_map(|r| r.as_ref().err().map(|e| e.to_string()))
        .collect();
    report.record(
        "concurrent_requests",
        if failed.is_empty() {
            Ok(format!("{n} answered"))
        } else {
            Err(format!("{} of {n} failed: {}", failed.len(), failed[0]))
        },
    );
    let empty = CompletionRequest::new(Vec::new(), params);
    report.record(
        "rejects_empty_request",
        match backend.complete(&empty) {
            Err(BackendError::InvalidRequest(_)) => Ok("rejected".into()),
            Err(e) => Err(format!("wrong error: {e}")),
            Ok(_) => Err("accepted a request without turns".into()),
        },
    );
    report
}

/// Contract checks on the raw chat-completions route at `base_url`.
pub fn wire_conformance(base_url: &str, model: &str, timeout: Duration) -> ConformanceReport {
    let mut report = ConformanceReport::default();
    let client = match reqwest::blocking::Client::builder().timeout(timeout).build() {
        Ok(c) => c,
        Err(e) => {
            report.record("client", Err(e.to_string()));
            return report;
        }
    };
    let url = chat_url(base_url);
    let post = |body: String| -> Result<(u16, String), String> {
        let resp = client
            .post(&url)
            .header("content-type", "application/json")
            .body(body)
            .send()
            .map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        Ok((status, resp.text().map_err(|e| e.to_string())?))
    };
    let req = CompletionRequest::new(
        vec![ChatTurn::user("Reply with the word ok.")],
        SamplingParams::default(),
    );
    let body = serde_json::to_string(&ChatRequestBody::from_request(model, &req)).expect("body serializes");
    report.record(
        "response_shape",
        post(body).and_then(|(status, text)| {
            if status != 200 {
                return Err(format!("status {status}"));
            }
            parse_response_body(&text)
                .map(|t| format!("{} chars", t.len()))
                .map_err(|e| e.to_string())
        }),
    );
    let rejects = |body: String| {
        post(body).and_then(|(status, text)| {
            if !(400..500).contains(&status) {
                return Err(format!("status {status}"));
            }
            let v: serde_json::Value =
                serde_json::from_str(&text).map_err(|_| format!("status {status}, body not JSON"))?;
            if v.get("error").is_some() {
                Ok(format!("status {status}"))
            } else {
                Err(format!("status {status}, no `error` field"))
            }
        })
    };
    report.record("malformed_body_rejected", rejects("{\"model\": ".to_string()));
    report.record(
        "missing_messages_rejected",
        rejects(json!({ "model": model }).to_string()),
    );
    report
}
