use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use super::prompt::{last_field, NO_ERRORS};
use crate::error::{Error, Result};

/// Something that answers a prompt with text.
pub trait Backend: Send + Sync {
    fn id(&self) -> &str;
    /// Model snapshot tag recorded with every annotation.
    fn snapshot(&self) -> &str;
    fn send(&self, prompt: &str) -> Result<String>;
}

/// Scripted backend keyed by the input block's source sentence.
#[derive(Debug, Default)]
pub struct MockBackend {
    responses: HashMap<String, String>,
    default_response: Option<String>,
    failures: Mutex<HashMap<String, usize>>,
    calls: AtomicUsize,
}

impl MockBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn respond(mut self, source: &str, response: &str) -> Self {
        self.responses.insert(source.trim().to_string(), response.to_string());
        self
    }

    /// Answer for sources without a script; without one they are errors.
    pub fn fallback(mut self, response: &str) -> Self {
        self.default_response = Some(response.to_string());
        self
    }

    pub fn no_errors_by_default(self) -> Self {
        self.fallback(NO_ERRORS)
    }

    /// The first `times` calls for `source` fail.
    pub fn fail(self, source: &str, times: usize) -> Self {
        self.failures.lock().unwrap().insert(source.trim().to_string(), times);
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Backend for MockBackend {
    fn id(&self) -> &str {
        "mock"
    }

    fn snapshot(&self) -> &str {
        "mock-1"
    }

    fn send(&self, prompt: &str) -> Result<String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let source = last_field(prompt, "Source Sentence")
            .ok_or_else(|| Error::Backend("prompt has no source sentence".into()))?;
        if let Some(left) = self.failures.lock().unwrap().get_mut(source) {
            if *left > 0 {
                *left -= 1;
                return Err(Error::Backend(format!("scripted failure for {source:?}")));
            }
        }
        self.responses
            .get(source)
            .or(self.default_response.as_ref())
            .cloned()
            .ok_or_else(|| Error::Backend(format!("no scripted response for {source:?}")))
    }
}
