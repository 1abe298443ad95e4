//! Chat-completion backends behind one trait: HTTP, mock, record/replay,
//! oracle-scripted and a memorizing stand-in for a fine-tuned model.

pub mod conformance;
pub mod http;
pub mod mock;
pub mod oracle;
pub mod replay;
pub mod tuned;

use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env_core::EnvKind;
use crate::util::sha256_hex;

pub use self::http::HttpBackend;
pub use self::mock::MockBackend;
pub use self::oracle::{OracleBackend, OracleOptions, PolicyMode, ValueMode};
pub use self::replay::{RecordingBackend, ReplayBackend};
pub use self::tuned::SftLookupBackend;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChatTurn {
    pub role: Role,
    pub content: String,
}

impl ChatTurn {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        ChatTurn {
            role,
            content: content.into(),
        }
    }

    pub fn system(content: impl Into<String>) -> Self {
        Self::new(Role::System, content)
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self::new(Role::User, content)
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self::new(Role::Assistant, content)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_k: u32,
    pub top_p: f64,
    pub max_tokens: u32,
    /// Per-request sampling seed; distinct seeds give distinct digests.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for SamplingParams {
    fn default() -> Self {
        SamplingParams {
            temperature: 1.0,
            top_k: 50,
            top_p: 0.95,
            max_tokens: 512,
            seed: None,
        }
    }
}

impl SamplingParams {
    pub fn validate(&self) -> Result<(), BackendError> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(BackendError::InvalidRequest("temperature must be >= 0".into()));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(BackendError::InvalidRequest("top_p must be in (0, 1]".into()));
        }
        if self.max_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_tokens must be positive".into()));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        SamplingParams {
            seed: Some(seed),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub turns: Vec<ChatTurn>,
    pub params: SamplingParams,
}

impl CompletionRequest {
    pub fn new(turns: Vec<ChatTurn>, params: SamplingParams) -> Self {
        CompletionRequest { turns, params }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.turns.is_empty() {
            return Err(BackendError::InvalidRequest("no turns".into()));
        }
        if let Some(t) = self.turns.iter().find(|t| t.content.is_empty()) {
            return Err(BackendError::InvalidRequest(format!("empty {} turn", t.role)));
        }
        self.params.validate()
    }

    /// Hex SHA-256 over the canonical JSON of turns and params.
    pub fn digest(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("request serializes");
        sha256_hex(&canonical)
    }

    /// Digest over the turns alone, ignoring sampling parameters.
    pub fn turns_digest(&self) -> String {
        turns_digest(&self.turns)
    }
}

pub fn turns_digest(turns: &[ChatTurn]) -> String {
    sha256_hex(&serde_json::to_vec(turns).expect("turns serialize"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub text: String,
    pub backend_id: String,
    pub cached: bool,
    #[serde(with = "duration_ms")]
    pub latency: Duration,
}

mod duration_ms {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("request timed out")]
    Timeout,
    #[error("rate limited after {0} attempts")]
    RateLimited(u32),
    #[error("no cached response for digest {0}")]
    CacheMiss(String),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("http error: {0}")]
    Http(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("backend configuration: {0}")]
    Config(String),
    #[error("oracle has no script for this prompt: {0}")]
    Unscripted(String),
    #[error("io: {0}")]
    Io(String),
}

impl BackendError {
    /// Errors that a retry might fix.
    pub fn is_transient(&self) -> bool {
        matches!(
            self,
            BackendError::Timeout | BackendError::RateLimited(_) | BackendError::Http(_)
        )
    }
}

pub trait Backend: Send + Sync {
    fn id(&self) -> &str;

    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResult, BackendError>;

    fn max_in_flight(&self) -> usize {
        1
    }
}

pub type SharedBackend = Arc<dyn Backend>;

/// Counting semaphore that bounds concurrent requests.
#[derive(Debug)]
pub struct InFlightGate {
    limit: usize,
    busy: Mutex<usize>,
    freed: Condvar,
}

impl InFlightGate {
    pub fn new(limit: usize) -> Self {
        InFlightGate {
            limit: limit.max(1),
            busy: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    pub fn limit(&self) -> usize {
        self.limit
    }

    /// Blocks until a slot is free; the slot is released when the guard drops.
    pub fn enter(&self) -> GateGuard<'_> {
        let mut busy = self.busy.lock().expect("gate lock");
        while *busy >= self.limit {
            busy = self.freed.wait(busy).expect("gate lock");
        }
        *busy += 1;
        GateGuard(self)
    }
}

pub struct GateGuard<'a>(&'a InFlightGate);

impl Drop for GateGuard<'_> {
    fn drop(&mut self) {
        *self.0.busy.lock().expect("gate lock") -= 1;
        self.0.freed.notify_one();
    }
}

/// Runs a batch with at most `backend.max_in_flight()` requests outstanding.
/// Results stay aligned with the input and failures stay in their slot.
pub fn complete_many(
    backend: &dyn Backend,
    batch: &[CompletionRequest],
) -> Vec<Result<CompletionResult, BackendError>> {
    let workers = backend.max_in_flight().max(1).min(batch.len());
    if workers <= 1 {
        return batch.iter().map(|r| backend.complete(r)).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<CompletionResult, BackendError>>>> =
        Mutex::new((0..batch.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= batch.len() {
                    break;
                }
                let r = backend.complete(&batch[i]);
                slots.lock().expect("slot lock")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("slot lock")
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendKind {
    Http {
        base_url: String,
        model_name: String,
        api_key_env: Option<String>,
        timeout_secs: u64,
        max_retries: u32,
    },
    Mock {
        script_path: String,
    },
    Oracle {
        env_kind: EnvKind,
        #[serde(flatten)]
        options: OracleOptions,
    },
    Replay {
        cache_dir: String,
        strict: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    #[serde(flatten)]
    pub kind: BackendKind,
    pub max_in_flight: usize,
}

impl BackendConfig {
    pub fn new(kind: BackendKind) -> Self {
        BackendConfig { kind, max_in_flight: 1 }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.max_in_flight == 0 {
            return Err(BackendError::Config("max_in_flight must be at least 1".into()));
        }
        match &self.kind {
            BackendKind::Http {
                base_url,
                max_retries: _,
                timeout_secs,
                ..
            } => {
                if !(base_url.starts_with("http://") || base_url.starts_with("https://")) {
                    return Err(BackendError::Config(format!("base_url `{base_url}` is not http(s)")));
                }
                if *timeout_secs == 0 {
                    return Err(BackendError::Config("timeout must be positive".into()));
                }
            }
            BackendKind::Mock { script_path } => {
                if !std::path::Path::new(script_path).is_file() {
                    return Err(BackendError::Config(format!("mock script `{script_path}` not found")));
                }
            }
            BackendKind::Oracle { options, .. } => options.validate()?,
            BackendKind::Replay { .. } => {}
        }
        Ok(())
    }

    pub fn build(&self) -> Result<SharedBackend, BackendError> {
        self.validate()?;
        Ok(match &self.kind {
            BackendKind::Http {
                base_url,
                model_name,
                api_key_env,
                timeout_secs,
                max_retries,
            } => Arc::new(
                HttpBackend::new(base_url, model_name, Duration::from_secs(*timeout_secs), *max_retries)?
                    .with_api_key_env(api_key_env.as_deref())
                    .with_max_in_flight(self.max_in_flight),
            ),
            BackendKind::Mock { script_path } => Arc::new(
                MockBackend::from_file(std::path::Path::new(script_path))?.with_max_in_flight(self.max_in_flight),
            ),
            BackendKind::Oracle { env_kind, options } => {
                Arc::new(OracleBackend::new(*env_kind, options.clone())?.with_max_in_flight(self.max_in_flight))
            }
            BackendKind::Replay { cache_dir, strict } => {
                Arc::new(ReplayBackend::new(cache_dir, *strict, None).with_max_in_flight(self.max_in_flight))
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Echo {
        fail_on: usize,
    }

    impl Backend for Echo {
        fn id(&self) -> &str {
            "echo"
        }

        fn complete(&self, req: &CompletionRequest) -> Result<CompletionResult, BackendError> {
            let n: usize = req.turns[0].content.parse().unwrap();
            if n == self.fail_on {
                return Err(BackendError::Timeout);
            }
            Ok(CompletionResult {
                text: req.turns[0].content.clone(),
                backend_id: "echo".into(),
                cached: false,
                latency: Duration::ZERO,
            })
        }

        fn max_in_flight(&self) -> usize {
            4
        }
    }

    fn req(s: &str) -> CompletionRequest {
        CompletionRequest::new(vec![ChatTurn::user(s)], SamplingParams::default())
    }

    #[test]
    fn digest_is_pinned() {
        let r = req("hello");
        assert_eq!(r.digest(), r.clone().digest());
        // Any change to the canonical encoding breaks caches; pin one value.
        assert_eq!(
            String::from_utf8(serde_json::to_vec(&r).unwrap()).unwrap(),
            r#"{"turns":[{"role":"user","content":"hello"}],"params":{"temperature":1.0,"top_k":50,"top_p":0.95,"max_tokens":512}}"#
        );
        let mut hotter = r.clone();
        hotter.params.temperature = 0.7;
        assert_ne!(r.digest(), hotter.digest());
        let seeded = CompletionRequest::new(r.turns.clone(), r.params.with_seed(1));
        assert_ne!(r.digest(), seeded.digest());
        assert_eq!(r.turns_digest(), seeded.turns_digest());
    }

    #[test]
    fn batch_alignment_and_isolation() {
        let batch: Vec<_> = (0..20).map(|i| req(&i.to_string())).collect();
        let out = complete_many(&Echo { fail_on: 7 }, &batch);
        assert_eq!(out.len(), 20);
        for (i, r) in out.iter().enumerate() {
            if i == 7 {
                assert_eq!(r, &Err(BackendError::Timeout));
            } else {
                assert_eq!(r.as_ref().unwrap().text, i.to_string());
            }
        }
    }

    #[test]
    fn params_validation() {
        assert!(SamplingParams::default().validate().is_ok());
        let mut p = SamplingParams::default();
        p.top_p = 0.0;
        assert!(p.validate().is_err());
        p.top_p = 1.0;
        p.temperature = -0.1;
        assert!(p.validate().is_err());
        assert!(
            CompletionRequest::new(vec![ChatTurn::user("")], SamplingParams::default())
                .validate()
                .is_err()
        );
    }
}
