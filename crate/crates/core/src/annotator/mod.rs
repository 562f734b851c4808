//! LLM-based mistranslation labels for source words.
//!
//! A request is rendered into a fixed few-shot prompt, sent to a
//! [`Backend`], and the `source → candidate → reference` triples in the
//! reply are mapped back onto source word positions. Every reply is cached
//! on disk keyed by the prompt hash, so repeated runs never hit the backend.

mod backend;
mod cache;
mod parse;
mod prompt;
mod resolve;

use std::sync::Mutex;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

pub use backend::{Backend, MockBackend};
pub use cache::{request_hash, AnnotationCache, AnnotationRecord};
pub use parse::{parse_response, MistranslationTriple, ParsedResponse};
pub use prompt::{build_prompt, last_field, AnnotationRequest, ExampleSet, NO_ERRORS, TRIPLE_PATTERN};
pub use resolve::{match_key, resolve_to_source, Resolution};

use crate::error::{Error, Result};
use crate::exec::Execution;

#[derive(Debug, Clone, Copy)]
pub struct AnnotateOptions {
    pub attempts: usize,
    /// Delay before the first retry; doubles after each failure.
    pub backoff: Duration,
    /// Upper bound on backend calls in flight.
    pub parallelism: usize,
    pub exec: Execution,
}

impl Default for AnnotateOptions {
    fn default() -> Self {
        Self { attempts: 3, backoff: Duration::from_millis(500), parallelism: 4, exec: Execution::Parallel }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AnnotateStats {
    pub cache_hits: usize,
    pub backend_calls: usize,
    pub failed: usize,
    pub parse_warnings: usize,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn call_with_retry(backend: &dyn Backend, prompt: &str, opts: &AnnotateOptions) -> (Result<String>, usize) {
    let mut delay = opts.backoff;
    let mut last = Error::Backend("no attempts made".into());
    for attempt in 1..=opts.attempts.max(1) {
        match backend.send(prompt) {
            Ok(text) => return (Ok(text), attempt),
            Err(e) => {
                log::warn!("annotator attempt {attempt} failed: {e}");
                last = e;
            }
        }
        if attempt < opts.attempts {
            std::thread::sleep(delay);
            delay *= 2;
        }
    }
    (Err(last), opts.attempts.max(1))
}

/// Annotates every request, consulting and extending `cache`.
///
/// Returns one record per request in input order. Backend failures that
/// survive all retries become failed records rather than errors.
pub fn annotate(
    requests: &[AnnotationRequest],
    backend: &dyn Backend,
    cache: &Mutex<AnnotationCache>,
    opts: &AnnotateOptions,
) -> Result<(Vec<AnnotationRecord>, AnnotateStats)> {
    for (i, r) in requests.iter().enumerate() {
        r.validate().map_err(|e| Error::Validation(format!("request {i}: {e}")))?;
    }
    let one = |request: &AnnotationRequest| -> Result<(AnnotationRecord, AnnotateStats)> {
        let prompt = build_prompt(request);
        let hash = request_hash(backend.snapshot(), &prompt);
        if let Some(hit) = cache.lock().unwrap().get(&hash) {
            return Ok((hit.clone(), AnnotateStats { cache_hits: 1, ..Default::default() }));
        }
        let (reply, calls) = call_with_retry(backend, &prompt, opts);
        let mut stats = AnnotateStats { backend_calls: calls, ..Default::default() };
        let record = match reply {
            Ok(raw) => {
                let parsed = parse_response(&raw);
                stats.parse_warnings = parsed.warning.is_some() as usize;
                AnnotationRecord {
                    request_hash: hash,
                    backend: backend.id().to_string(),
                    snapshot: backend.snapshot().to_string(),
                    raw_response: Some(raw),
                    triples: parsed.triples,
                    no_errors: parsed.no_errors,
                    warning: parsed.warning,
                    error: None,
                    timestamp: now(),
                }
            }
            Err(e) => {
                stats.failed = 1;
                AnnotationRecord {
                    request_hash: hash,
                    backend: backend.id().to_string(),
                    snapshot: backend.snapshot().to_string(),
                    raw_response: None,
                    triples: Vec::new(),
                    no_errors: false,
                    warning: None,
                    error: Some(e.to_string()),
                    timestamp: now(),
                }
            }
        };
        cache.lock().unwrap().insert(record.clone())?;
        Ok((record, stats))
    };

    let mut records = Vec::with_capacity(requests.len());
    let mut stats = AnnotateStats::default();
    for chunk in requests.chunks(opts.parallelism.max(1)) {
        for result in opts.exec.map(chunk, one) {
            let (record, s) = result?;
            stats.cache_hits += s.cache_hits;
            stats.backend_calls += s.backend_calls;
            stats.failed += s.failed;
            stats.parse_warnings += s.parse_warnings;
            records.push(record);
        }
    }
    Ok((records, stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    const SHARKS: &str = "Greenland sharks swim leisurely along the sea floor of the North Atlantic, covering an average of 1,220 metres in an hour.";
    const SHARKS_OUTPUT: &str = "Greenland sharks → Grönland → Grönlandhai\nleisurely → rasch → Gemächlich\n\nExplanation:\n\"Grönland\" (Greenland) is incorrectly used.";

    fn request(source: &str) -> AnnotationRequest {
        AnnotationRequest {
            source_lang: "English".into(),
            target_lang: "German".into(),
            source: source.into(),
            candidate: "Kandidat.".into(),
            reference: "Referenz.".into(),
            examples: ExampleSet::default(),
        }
    }

    fn fast() -> AnnotateOptions {
        AnnotateOptions { backoff: Duration::ZERO, ..Default::default() }
    }

    #[test]
    fn second_run_is_all_hits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let backend = MockBackend::new().respond(SHARKS, SHARKS_OUTPUT).no_errors_by_default();
        let reqs = vec![request(SHARKS), request("A quiet day."), request("Another sentence.")];

        let cache = Mutex::new(AnnotationCache::open(&path).unwrap());
        let (first, s1) = annotate(&reqs, &backend, &cache, &fast()).unwrap();
        assert_eq!(s1.backend_calls, 3);
        assert_eq!(first[0].triples.len(), 2);
        assert!(first[1].no_errors);

        let cache = Mutex::new(AnnotationCache::open(&path).unwrap());
        let (second, s2) = annotate(&reqs, &backend, &cache, &fast()).unwrap();
        assert_eq!(s2.backend_calls, 0);
        assert_eq!(s2.cache_hits, 3);
        assert_eq!(backend.calls(), 3);
        assert_eq!(first, second);
    }

    #[test]
    fn retries_then_fails_open() {
        let backend = MockBackend::new().respond(SHARKS, SHARKS_OUTPUT).fail(SHARKS, 2);
        let cache = Mutex::new(AnnotationCache::in_memory());
        let (recs, stats) = annotate(&[request(SHARKS)], &backend, &cache, &fast()).unwrap();
        assert_eq!(stats.backend_calls, 3);
        assert_eq!(recs[0].triples.len(), 2);

        let backend = MockBackend::new().respond(SHARKS, SHARKS_OUTPUT).fail(SHARKS, 3);
        let cache = Mutex::new(AnnotationCache::in_memory());
        let (recs, stats) = annotate(&[request(SHARKS)], &backend, &cache, &fast()).unwrap();
        assert_eq!((stats.backend_calls, stats.failed), (3, 1));
        assert!(recs[0].is_failed() && recs[0].error.is_some());
        // A failed entry is retried on the next run.
        let (recs, _) = annotate(&[request(SHARKS)], &backend, &cache, &fast()).unwrap();
        assert!(!recs[0].is_failed());
    }

    #[test]
    fn garbage_reply_is_recorded_with_warning() {
        let backend = MockBackend::new().fallback("lorem ipsum");
        let cache = Mutex::new(AnnotationCache::in_memory());
        let (recs, stats) = annotate(&[request("Hi there.")], &backend, &cache, &fast()).unwrap();
        assert!(recs[0].triples.is_empty() && recs[0].warning.is_some());
        assert_eq!(stats.parse_warnings, 1);
    }

    #[test]
    fn corrupt_cache_refuses_to_start() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let backend = MockBackend::new().respond(SHARKS, SHARKS_OUTPUT);
        let cache = Mutex::new(AnnotationCache::open(&path).unwrap());
        annotate(&[request(SHARKS)], &backend, &cache, &fast()).unwrap();

        let good = std::fs::read_to_string(&path).unwrap();
        let tampered = good.replace("Grönlandhai", "Walhai").replacen("Walhai", "Grönlandhai", 1);
        std::fs::write(&path, format!("{good}{tampered}")).unwrap();
        let err = AnnotationCache::open(&path).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");

        std::fs::write(&path, format!("{good}{{not json\n")).unwrap();
        let err = AnnotationCache::open(&path).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn parallel_matches_sequential() {
        let reqs: Vec<_> = (0..12).map(|i| request(&format!("Sentence number {i}."))).collect();
        let backend = MockBackend::new().respond("Sentence number 3.", "number → Zahl → Nummer").no_errors_by_default();
        let run = |exec| {
            let cache = Mutex::new(AnnotationCache::in_memory());
            let opts = AnnotateOptions { exec, ..fast() };
            let (recs, _) = annotate(&reqs, &backend, &cache, &opts).unwrap();
            recs.into_iter().map(|r| (r.request_hash, r.triples)).collect::<Vec<_>>()
        };
        assert_eq!(run(Execution::Sequential), run(Execution::Parallel));
    }
}
