use std::collections::HashMap;
use std::path::Path;
use std::time::Duration;

use serde::Deserialize;

use super::{Backend, BackendError, CompletionRequest, CompletionResult};

/// Script line: either a precomputed digest or a full request to hash.
#[derive(Debug, Deserialize)]
struct ScriptLine {
    digest: Option<String>,
    request: Option<CompletionRequest>,
    reply: String,
}

/// Deterministic lookup of canned replies by request digest.
#[derive(Debug, Default)]
pub struct MockBackend {
    replies: HashMap<String, String>,
    max_in_flight: usize,
}

impl MockBackend {
    pub fn new() -> Self {
        MockBackend {
            replies: HashMap::new(),
            max_in_flight: 1,
        }
    }

    pub fn from_file(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path).map_err(|e| BackendError::Io(e.to_string()))?;
        let mut m = Self::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let l: ScriptLine = serde_json::from_str(line)
                .map_err(|e| BackendError::Config(format!("{}:{}: {e}", path.display(), i + 1)))?;
            let digest = match (l.digest, l.request) {
                (Some(d), _) => d,
                (None, Some(r)) => r.digest(),
                (None, None) => {
                    return Err(BackendError::Config(format!(
                        "{}:{}: needs `digest` or `request`",
                        path.display(),
                        i + 1
                    )))
                }
            };
            m.replies.insert(digest, l.reply);
        }
        Ok(m)
    }

    pub fn with_max_in_flight(mut self, n: usize) -> Self {
        self.max_in_flight = n.max(1);
        self
    }

    pub fn register(&mut self, req: &CompletionRequest, reply: impl Into<String>) {
        self.replies.insert(req.digest(), reply.into());
    }

    pub fn register_digest(&mut self, digest: impl Into<String>, reply: impl Into<String>) {
        self.replies.insert(digest.into(), reply.into());
    }
}

impl Backend for MockBackend {
    fn id(&self) -> &str {
        "mock"
    }

    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        req.validate()?;
        let d = req.digest();
        match self.replies.get(&d) {
            Some(text) => Ok(CompletionResult {
                text: text.clone(),
                backend_id: "mock".into(),
                cached: true,
                latency: Duration::ZERO,
            }),
            None => Err(BackendError::CacheMiss(d)),
        }
    }

    fn max_in_flight(&self) -> usize {
        self.max_in_flight
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm_backend::{complete_many, ChatTurn, SamplingParams};

    fn req(s: &str) -> CompletionRequest {
        CompletionRequest::new(vec![ChatTurn::user(s)], SamplingParams::default())
    }

    #[test]
    fn registered_digest_returns_exact_text() {
        let mut m = MockBackend::new();
        m.register(&req("board"), "{\"best_move\": 7}");
        let r = m.complete(&req("board")).unwrap();
        assert_eq!(r.text, "{\"best_move\": 7}");
        assert!(r.cached);
        assert!(matches!(m.complete(&req("other")), Err(BackendError::CacheMiss(_))));
    }

    #[test]
    fn batch_of_three() {
        let mut m = MockBackend::new().with_max_in_flight(2);
        for s in ["a", "b", "c"] {
            m.register(&req(s), s.to_uppercase());
        }
        let out = complete_many(&m, &[req("a"), req("b"), req("c")]);
        let texts: Vec<_> = out.into_iter().map(|r| r.unwrap().text).collect();
        assert_eq!(texts, ["A", "B", "C"]);
    }

    #[test]
    fn script_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("script.jsonl");
        let line_a = serde_json::json!({"request": req("a"), "reply": "x"});
        let line_b = serde_json::json!({"digest": req("b").digest(), "reply": "y"});
        std::fs::write(&p, format!("{line_a}\n{line_b}\n")).unwrap();
        let m = MockBackend::from_file(&p).unwrap();
        assert_eq!(m.complete(&req("a")).unwrap().text, "x");
        assert_eq!(m.complete(&req("b")).unwrap().text, "y");
        std::fs::write(&p, "{\"reply\": \"z\"}\n").unwrap();
        assert!(matches!(MockBackend::from_file(&p), Err(BackendError::Config(_))));
    }
}
