use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{Backend, BackendError, ChatTurn, CompletionRequest, CompletionResult, InFlightGate};

/// Request body of the chat-completions route.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequestBody {
    pub model: String,
    pub messages: Vec<ChatTurn>,
    pub temperature: f64,
    pub top_p: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_k: Option<u32>,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl ChatRequestBody {
    pub fn from_request(model: &str, req: &CompletionRequest) -> Self {
        ChatRequestBody {
            model: model.to_string(),
            messages: req.turns.clone(),
            temperature: req.params.temperature,
            top_p: req.params.top_p,
            top_k: Some(req.params.top_k),
            max_tokens: req.params.max_tokens,
            seed: req.params.seed,
        }
    }
}

#[derive(Debug, Deserialize)]
struct ChatResponseBody {
    choices: Vec<Choice>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    message: ResponseMessage,
}

#[derive(Debug, Deserialize)]
struct ResponseMessage {
    content: Option<String>,
}

/// Extracts `choices[0].message.content` from a response body.
pub fn parse_response_body(body: &str) -> Result<String, BackendError> {
    let parsed: ChatResponseBody =
        serde_json::from_str(body).map_err(|e| BackendError::MalformedResponse(e.to_string()))?;
    let text = parsed
        .choices
        .into_iter()
        .next()
        .and_then(|c| c.message.content)
        .ok_or_else(|| BackendError::MalformedResponse("no choices[0].message.content".into()))?;
    if text.is_empty() {
        return Err(BackendError::MalformedResponse("empty completion".into()));
    }
    Ok(text)
}

pub fn chat_url(base_url: &str) -> String {
    format!("{}/chat/completions", base_url.trim_end_matches('/'))
}

enum Attempt {
    Retry(BackendError),
    Fatal(BackendError),
}

/// OpenAI-compatible chat-completions client with exponential backoff.
pub struct HttpBackend {
    client: reqwest::blocking::Client,
    url: String,
    model: String,
    api_key: Option<String>,
    max_retries: u32,
    backoff: Duration,
    gate: InFlightGate,
    id: String,
}

impl HttpBackend {
    pub fn new(base_url: &str, model: &str, timeout: Duration, max_retries: u32) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        Ok(HttpBackend {
            client,
            url: chat_url(base_url),
            model: model.to_string(),
            api_key: None,
            max_retries,
            backoff: Duration::from_millis(250),
            gate: InFlightGate::new(1),
            id: format!("http:{model}"),
        })
    }

    /// Reads the bearer token from the named environment variable, if set.
    pub fn with_api_key_env(mut self, var: Option<&str>) -> Self {
        self.api_key = var.and_then(|v| std::env::var(v).ok()).filter(|k| !k.is_empty());
        self
    }

    pub fn with_backoff(mut self, base: Duration) -> Self {
        self.backoff = base;
        self
    }

    pub fn with_max_in_flight(mut self, n: usize) -> Self {
        self.gate = InFlightGate::new(n);
        self
    }

    fn attempt(&self, body: &ChatRequestBody) -> Result<String, Attempt> {
        let mut rb = self.client.post(&self.url).json(body);
        if let Some(k) = &self.api_key {
            rb = rb.bearer_auth(k);
        }
        let resp = rb.send().map_err(|e| {
            if e.is_timeout() {
                Attempt::Retry(BackendError::Timeout)
            } else {
                Attempt::Retry(BackendError::Http(e.to_string()))
            }
        })?;
        let status = resp.status();
        let text = resp.text().map_err(|e| {
            if e.is_timeout() {
                Attempt::Retry(BackendError::Timeout)
            } else {
                Attempt::Retry(BackendError::Http(e.to_string()))
            }
        })?;
        if status.as_u16() == 429 {
            return Err(Attempt::Retry(BackendError::RateLimited(0)));
        }
        if status.is_server_error() {
            return Err(Attempt::Retry(BackendError::Http(format!("status {status}"))));
        }
        if !status.is_success() {
            return Err(Attempt::Fatal(BackendError::Http(format!("status {status}: {text}"))));
        }
        parse_response_body(&text).map_err(Attempt::Fatal)
    }
}

impl Backend for HttpBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        req.validate()?;
        let _slot = self.gate.enter();
        let body = ChatRequestBody::from_request(&self.model, req);
        let start = Instant::now();
        let mut last = BackendError::Timeout;
        for attempt in 0..=self.max_retries {
            if attempt > 0 {
                std::thread::sleep(self.backoff * 2u32.saturating_pow(attempt - 1));
            }
            match self.attempt(&body) {
                Ok(text) => {
                    return Ok(CompletionResult {
                        text,
                        backend_id: self.id.clone(),
                        cached: false,
                        latency: start.elapsed(),
                    })
                }
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(e)) => last = e,
            }
        }
        Err(match last {
            BackendError::RateLimited(_) => BackendError::RateLimited(self.max_retries + 1),
            other => other,
        })
    }

    fn max_in_flight(&self) -> usize {
        self.gate.limit()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm_backend::SamplingParams;

    #[test]
    fn request_body_field_names() {
        let req = CompletionRequest::new(
            vec![ChatTurn::system("s"), ChatTurn::user("u")],
            SamplingParams::default(),
        );
        let v = serde_json::to_value(ChatRequestBody::from_request("m", &req)).unwrap();
        assert_eq!(
            v,
            serde_json::json!({
                "model": "m",
                "messages": [{"role": "system", "content": "s"}, {"role": "user", "content": "u"}],
                "temperature": 1.0,
                "top_p": 0.95,
                "top_k": 50,
                "max_tokens": 512
            })
        );
    }

    #[test]
    fn response_parsing() {
        let ok = r#"{"id":"x","choices":[{"index":0,"message":{"role":"assistant","content":"hi"}}]}"#;
        assert_eq!(parse_response_body(ok).unwrap(), "hi");
        for bad in [
            "",
            "{}",
            r#"{"choices":[]}"#,
            r#"{"choices":[{"message":{"content":""}}]}"#,
        ] {
            assert!(
                matches!(parse_response_body(bad), Err(BackendError::MalformedResponse(_))),
                "{bad}"
            );
        }
    }

    #[test]
    fn url_joining() {
        assert_eq!(chat_url("http://h:1/v1/"), "http://h:1/v1/chat/completions");
    }
}
