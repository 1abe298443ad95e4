use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{Backend, BackendError, CompletionRequest, CompletionResult, SharedBackend};
use crate::util::atomic_write;

/// One cache file: `<cache_dir>/<digest>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub digest: String,
    pub request: CompletionRequest,
    pub response: CachedResponse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CachedResponse {
    pub text: String,
    pub backend_id: String,
}

pub fn cache_path(dir: &Path, digest: &str) -> PathBuf {
    dir.join(format!("{digest}.json"))
}

pub fn read_entry(dir: &Path, digest: &str) -> Result<Option<CacheEntry>, BackendError> {
    let p = cache_path(dir, digest);
    match std::fs::read(&p) {
        Ok(bytes) => serde_json::from_slice(&bytes)
            .map(Some)
            .map_err(|e| BackendError::Io(format!("{}: {e}", p.display()))),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(BackendError::Io(e.to_string())),
    }
}

pub fn write_entry(dir: &Path, req: &CompletionRequest, res: &CompletionResult) -> Result<(), BackendError> {
    let digest = req.digest();
    let entry = CacheEntry {
        digest: digest.clone(),
        request: req.clone(),
        response: CachedResponse {
            text: res.text.clone(),
            backend_id: res.backend_id.clone(),
        },
    };
    let bytes = serde_json::to_vec_pretty(&entry).map_err(|e| BackendError::Io(e.to_string()))?;
    atomic_write(&cache_path(dir, &digest), &bytes).map_err(|e| BackendError::Io(e.to_string()))
}

/// Serves responses from a cache directory. Strict mode fails on a miss;
/// otherwise the miss is forwarded to `fallback` when one is set.
pub struct ReplayBackend {
    dir: PathBuf,
    strict: bool,
    fallback: Option<SharedBackend>,
    max_in_flight: usize,
}

impl ReplayBackend {
    pub fn new(dir: impl Into<PathBuf>, strict: bool, fallback: Option<SharedBackend>) -> Self {
        ReplayBackend {
            dir: dir.into(),
            strict,
            fallback,
            max_in_flight: 1,
        }
    }

    pub fn with_max_in_flight(mut self, n: usize) -> Self {
        self.max_in_flight = n.max(1);
        self
    }
}

impl Backend for ReplayBackend {
    fn id(&self) -> &str {
        "replay"
    }

    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        req.validate()?;
        let d = req.digest();
        if let Some(e) = read_entry(&self.dir, &d)? {
            return Ok(CompletionResult {
                text: e.response.text,
                backend_id: e.response.backend_id,
                cached: true,
                latency: Duration::ZERO,
            });
        }
        match (&self.fallback, self.strict) {
            (Some(f), false) => f.complete(req),
            _ => Err(BackendError::CacheMiss(d)),
        }
    }

    fn max_in_flight(&self) -> usize {
        self.max_in_flight
    }
}

/// Forwards to `inner` and writes every successful exchange to the cache.
pub struct RecordingBackend {
    inner: SharedBackend,
    dir: PathBuf,
}

impl RecordingBackend {
    pub fn new(inner: SharedBackend, dir: impl Into<PathBuf>) -> Self {
        RecordingBackend { inner, dir: dir.into() }
    }
}

impl Backend for RecordingBackend {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        let start = Instant::now();
        let res = self.inner.complete(req)?;
        write_entry(&self.dir, req, &res)?;
        Ok(CompletionResult {
            latency: start.elapsed(),
            ..res
        })
    }

    fn max_in_flight(&self) -> usize {
        self.inner.max_in_flight()
    }
}
