use std::collections::HashMap;
use std::sync::RwLock;
use std::time::Duration;

use super::{turns_digest, Backend, BackendError, ChatTurn, CompletionRequest, CompletionResult, SharedBackend};

/// Stand-in for a model fine-tuned on SFT data: answers any prompt it was
/// trained on with the newest target for that prompt, and defers everything
/// else to a base backend. Sampling parameters are ignored for the lookup.
pub struct SftLookupBackend {
    memory: RwLock<HashMap<String, String>>,
    base: SharedBackend,
    id: String,
}

impl SftLookupBackend {
    pub fn new(base: SharedBackend) -> Self {
        let id = format!("tuned({})", base.id());
        SftLookupBackend {
            memory: RwLock::new(HashMap::new()),
            base,
            id,
        }
    }

    /// Adds examples in order; later targets replace earlier ones.
    pub fn absorb<'a>(&self, examples: impl IntoIterator<Item = (&'a [ChatTurn], &'a str)>) {
        let mut mem = self.memory.write().expect("memory lock");
        for (turns, target) in examples {
            mem.insert(turns_digest(turns), target.to_string());
        }
    }

    pub fn len(&self) -> usize {
        self.memory.read().expect("memory lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Backend for SftLookupBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        req.validate()?;
        if let Some(t) = self.memory.read().expect("memory lock").get(&req.turns_digest()) {
            return Ok(CompletionResult {
                text: t.clone(),
                backend_id: self.id.clone(),
                cached: false,
                latency: Duration::ZERO,
            });
        }
        self.base.complete(req)
    }

    fn max_in_flight(&self) -> usize {
        self.base.max_in_flight()
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::lm_backend::{MockBackend, SamplingParams};

    #[test]
    fn memorized_then_base() {
        let turns = vec![ChatTurn::user("p")];
        let mut base = MockBackend::new();
        base.register(
            &CompletionRequest::new(turns.clone(), SamplingParams::default()),
            "base",
        );
        let t = SftLookupBackend::new(Arc::new(base));
        let req = CompletionRequest::new(turns.clone(), SamplingParams::default());
        assert_eq!(t.complete(&req).unwrap().text, "base");
        t.absorb([(turns.as_slice(), "old"), (turns.as_slice(), "new")]);
        assert_eq!(t.complete(&req).unwrap().text, "new");
        let seeded = CompletionRequest::new(turns.clone(), SamplingParams::default().with_seed(3));
        assert_eq!(t.complete(&seeded).unwrap().text, "new");
    }
}
