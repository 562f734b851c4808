//! A synthetic translation task with known mistranslations.
//!
//! Source and target words are pseudo-words built from disjoint syllable
//! inventories and translate one-to-one, in order. Three kinds of source
//! word exist: regular words with a single translation, ambiguous words
//! whose training translation is drawn between two options, and held-out
//! words that never occur in training. Test references are drawn the same
//! way as training targets, so the model gets held-out words wrong and
//! ambiguous words wrong part of the time. [`OracleBackend`] plays the
//! annotator: it labels exactly those held-out and ambiguous source words
//! whose reference translation is missing from the candidate.

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotator::{annotate, last_field, AnnotateOptions, AnnotationCache, AnnotationRecord, Backend, NO_ERRORS};
use crate::attribution::{write_pharaoh, AttributionConfig, HardAlignment};
use crate::checkpoint::Checkpoint;
use crate::corpus::{write_testset, write_tsv, SentencePair, TestItem};
use crate::decode::Decoding;
use crate::error::{Error, Result};
use crate::evaluation::MetricsReport;
use crate::exec::Execution;
use crate::pipeline::{annotation_requests, candidates, evaluate_all, labels_from_records, Candidate};
use crate::tokenizer::pretokenize;
use crate::train::{train_model, TrainConfig, TrainReport};

const SOURCE_CONSONANTS: &[u8] = b"ptkbdgmnlsr";
const TARGET_CONSONANTS: &[u8] = b"fvzhjwcxq";
const VOWELS: &[u8] = b"aeiou";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub regular_words: usize,
    pub ambiguous_words: usize,
    pub held_out_words: usize,
    /// Training frequency of an ambiguous word's first translation.
    pub ambiguous_bias: f64,
    pub train_pairs: usize,
    pub test_sentences: usize,
    pub min_words: usize,
    pub max_words: usize,
    /// Chance that a test sentence contains one held-out word.
    pub held_out_rate: f64,
    pub train: TrainConfig,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            regular_words: 60,
            ambiguous_words: 8,
            held_out_words: 12,
            ambiguous_bias: 0.7,
            train_pairs: 3000,
            test_sentences: 300,
            min_words: 4,
            max_words: 8,
            held_out_rate: 0.35,
            train: TrainConfig { vocab_size: 400, epochs: 15, batch_size: 16, ..TrainConfig::default() },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WordKind {
    Regular,
    Ambiguous,
    HeldOut,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LexiconEntry {
    pub source: String,
    pub kind: WordKind,
    /// Reference translation first; ambiguous words carry a second option.
    pub targets: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticData {
    pub lexicon: Vec<LexiconEntry>,
    pub train: Vec<SentencePair>,
    pub test: Vec<TestItem>,
}

fn pseudo_word(rng: &mut ChaCha8Rng, consonants: &[u8], taken: &mut BTreeSet<String>) -> String {
    loop {
        let syllables = rng.random_range(2..=3);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push(consonants[rng.random_range(0..consonants.len())] as char);
            w.push(VOWELS[rng.random_range(0..VOWELS.len())] as char);
        }
        if taken.insert(w.clone()) {
            return w;
        }
    }
}

pub fn generate(config: &SyntheticConfig) -> Result<SyntheticData> {
    if config.min_words == 0 || config.min_words > config.max_words {
        return Err(Error::Config("synthetic sentence length range is empty".into()));
    }
    if config.regular_words + config.ambiguous_words < config.max_words {
        return Err(Error::Config("too few trainable words for the maximum sentence length".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (mut src_taken, mut tgt_taken) = (BTreeSet::new(), BTreeSet::new());
    let mut lexicon = Vec::new();
    let kinds = [
        (WordKind::Regular, config.regular_words),
        (WordKind::Ambiguous, config.ambiguous_words),
        (WordKind::HeldOut, config.held_out_words),
    ];
    for (kind, count) in kinds {
        for _ in 0..count {
            let source = pseudo_word(&mut rng, SOURCE_CONSONANTS, &mut src_taken);
            let n = if kind == WordKind::Ambiguous { 2 } else { 1 };
            let targets = (0..n).map(|_| pseudo_word(&mut rng, TARGET_CONSONANTS, &mut tgt_taken)).collect();
            lexicon.push(LexiconEntry { source, kind, targets });
        }
    }
    let trainable: Vec<usize> = (0..lexicon.len()).filter(|&i| lexicon[i].kind != WordKind::HeldOut).collect();
    let held_out: Vec<usize> = (0..lexicon.len()).filter(|&i| lexicon[i].kind == WordKind::HeldOut).collect();

    let sentence = |rng: &mut ChaCha8Rng| -> Vec<usize> {
        let n = rng.random_range(config.min_words..=config.max_words);
        trainable.choose_multiple(rng, n).copied().collect()
    };
    let render = |words: &[usize], pick: &mut dyn FnMut(&LexiconEntry) -> usize| -> (String, String) {
        let src: Vec<&str> = words.iter().map(|&w| lexicon[w].source.as_str()).collect();
        let tgt: Vec<&str> = words
            .iter()
            .map(|&w| {
                let e = &lexicon[w];
                e.targets[pick(e)].as_str()
            })
            .collect();
        (format!("{}.", src.join(" ")), format!("{}.", tgt.join(" ")))
    };

    let draw_targets = |rng: &mut ChaCha8Rng, words: &[usize]| {
        let mut draws: Vec<f64> = (0..words.len()).map(|_| rng.random()).collect();
        let mut pick = |e: &LexiconEntry| {
            let u = draws.pop().unwrap_or(0.0);
            usize::from(e.kind == WordKind::Ambiguous && u >= config.ambiguous_bias)
        };
        render(words, &mut pick)
    };

    let mut train = Vec::with_capacity(config.train_pairs);
    for _ in 0..config.train_pairs {
        let words = sentence(&mut rng);
        let (source, target) = draw_targets(&mut rng, &words);
        train.push(SentencePair { source, target });
    }

    let mut test = Vec::with_capacity(config.test_sentences);
    for _ in 0..config.test_sentences {
        let mut words = sentence(&mut rng);
        if !held_out.is_empty() && rng.random_bool(config.held_out_rate) {
            let at = rng.random_range(0..words.len());
            words[at] = held_out[rng.random_range(0..held_out.len())];
        }
        let (source, reference) = draw_targets(&mut rng, &words);
        test.push(TestItem { source, reference });
    }
    Ok(SyntheticData { lexicon, train, test })
}

impl SyntheticData {
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_tsv(&dir.join("train.tsv"), &self.train)?;
        write_testset(&dir.join("test.jsonl"), &self.test)?;
        let path = dir.join("lexicon.json");
        let json = serde_json::to_string_pretty(&self.lexicon).expect("lexicon serializes");
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }
}

/// Longest common subsequence of two word lists, as matched index pairs.
pub fn lcs_pairs<S: AsRef<str>, T: AsRef<str>>(a: &[S], b: &[T]) -> Vec<(usize, usize)> {
    let (n, m) = (a.len(), b.len());
    let mut dp = vec![vec![0usize; m + 1]; n + 1];
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            dp[i][j] = if a[i].as_ref() == b[j].as_ref() { dp[i + 1][j + 1] + 1 } else { dp[i + 1][j].max(dp[i][j + 1]) };
        }
    }
    let (mut i, mut j, mut out) = (0, 0, Vec::new());
    while i < n && j < m {
        if a[i].as_ref() == b[j].as_ref() {
            out.push((i, j));
            i += 1;
            j += 1;
        } else if dp[i + 1][j] >= dp[i][j + 1] {
            i += 1;
        } else {
            j += 1;
        }
    }
    out
}

/// Unmatched stretches between LCS matches: `(reference range, candidate range)`.
fn gaps(matches: &[(usize, usize)], ref_len: usize, cand_len: usize) -> Vec<((usize, usize), (usize, usize))> {
    let mut out = Vec::new();
    let (mut r, mut c) = (0, 0);
    for &(mr, mc) in matches.iter().chain(std::iter::once(&(ref_len, cand_len))) {
        if r < mr || c < mc {
            out.push(((r, mr), (c, mc)));
        }
        r = mr + 1;
        c = mc + 1;
    }
    out
}

/// Word-level source/candidate alignment for a monotone one-to-one language:
/// reference word `k` translates source word `k`, matched words align
/// directly, and unmatched words inside a gap pair up in order.
pub fn gold_alignment<S: AsRef<str>, T: AsRef<str>>(reference: &[S], candidate: &[T]) -> Result<HardAlignment> {
    let matches = lcs_pairs(reference, candidate);
    let mut pairs: Vec<(usize, usize)> = matches.clone();
    for ((rs, re), (cs, ce)) in gaps(&matches, reference.len(), candidate.len()) {
        if rs == re {
            continue;
        }
        for (k, c) in (cs..ce).enumerate() {
            pairs.push(((rs + k).min(re - 1), c));
        }
    }
    HardAlignment::new(pairs, reference.len(), candidate.len())
}

impl SyntheticData {
    /// Source words whose translation the benchmark controls.
    pub fn controlled_words(&self) -> BTreeSet<String> {
        self.lexicon.iter().filter(|e| e.kind != WordKind::Regular).map(|e| e.source.clone()).collect()
    }
}

/// Annotator stand-in that knows the reference is a word-by-word
/// translation of the source and which source words are controlled.
#[derive(Debug, Default)]
pub struct OracleBackend {
    pub controlled: BTreeSet<String>,
}

impl OracleBackend {
    pub fn new(controlled: BTreeSet<String>) -> Self {
        Self { controlled }
    }

    pub fn respond(&self, source: &str, candidate: &str, reference: &str) -> String {
        let words = |s: &str| pretokenize(s).into_iter().map(|w| w.text.to_string()).collect::<Vec<_>>();
        let (src, cand, refw) = (words(source), words(candidate), words(reference));
        let matches = lcs_pairs(&refw, &cand);
        let mut lines = Vec::new();
        for ((rs, re), (cs, ce)) in gaps(&matches, refw.len(), cand.len()) {
            for k in rs..re {
                let Some(s) = src.get(k).filter(|s| self.controlled.contains(s.as_str())) else { continue };
                let c = cand.get((cs + (k - rs)).min(ce.saturating_sub(1))).filter(|_| cs < ce);
                lines.push(format!("{s} → {} → {}", c.map_or("∅", |c| c.as_str()), refw[k]));
            }
        }
        if lines.is_empty() {
            return NO_ERRORS.to_string();
        }
        lines.push(String::new());
        lines.push("Explanation: each listed candidate word differs from the lexicon translation in the reference.".into());
        lines.join("\n")
    }
}

impl Backend for OracleBackend {
    fn id(&self) -> &str {
        "synthetic-oracle"
    }

    fn snapshot(&self) -> &str {
        "oracle-1"
    }

    fn send(&self, prompt: &str) -> Result<String> {
        let field = |label| last_field(prompt, label).ok_or_else(|| Error::Backend(format!("prompt lacks {label}")));
        Ok(self.respond(field("Source Sentence")?, field("Candidate Translation")?, field("Reference Translation")?))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkOutcome {
    pub reports: Vec<MetricsReport>,
    pub train: TrainReport,
    pub sentences: usize,
    pub words: usize,
    pub mistranslated_words: usize,
    pub exact_translations: usize,
    pub seconds: f64,
}

impl BenchmarkOutcome {
    pub fn report(&self, method: &str) -> Option<&MetricsReport> {
        self.reports.iter().find(|r| r.method == method)
    }
}

/// Everything a benchmark run leaves behind, for inspection or re-evaluation.
pub struct BenchmarkArtifacts {
    pub data: SyntheticData,
    pub checkpoint: Checkpoint,
    pub candidates: Vec<Candidate>,
    pub records: Vec<AnnotationRecord>,
    pub alignments: Vec<HardAlignment>,
}

impl BenchmarkArtifacts {
    /// Writes data files, the checkpoint and gold alignments under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        self.data.write(dir)?;
        self.checkpoint.save(&dir.join("model"))?;
        write_pharaoh(&dir.join("alignments.txt"), &self.alignments)
    }
}

/// Generates data, trains, translates, annotates with the oracle, and
/// evaluates all three methods.
pub fn run_benchmark(
    config: &SyntheticConfig,
    cache: Option<&Path>,
    exec: Execution,
) -> Result<(BenchmarkOutcome, BenchmarkArtifacts)> {
    let start = Instant::now();
    let data = generate(config)?;
    let (checkpoint, train) = train_model(&data.train, &config.train, exec)?;
    let cands = candidates(&checkpoint, &data.test, Decoding::Greedy, exec)?;

    let requests = annotation_requests(&data.test, &cands, "Synthetic-S", "Synthetic-T");
    let cache = Mutex::new(match cache {
        Some(p) => AnnotationCache::open(p)?,
        None => AnnotationCache::in_memory(),
    });
    let opts = AnnotateOptions { backoff: Duration::ZERO, exec, ..Default::default() };
    let (records, _) = annotate(&requests, &OracleBackend::new(data.controlled_words()), &cache, &opts)?;
    let (labels, unresolved) = labels_from_records(&cands, &records)?;

    let alignments = data
        .test
        .iter()
        .zip(&cands)
        .map(|(item, c)| {
            let reference: Vec<&str> = pretokenize(&item.reference).into_iter().map(|w| w.text).collect();
            gold_alignment(&reference, &c.translation.sentence.surface_words)
        })
        .collect::<Result<Vec<_>>>()?;

    let reports = evaluate_all(&checkpoint, &cands, &labels, unresolved, Some(&alignments), AttributionConfig::default(), exec)?;
    let exact = data.test.iter().zip(&cands).filter(|(t, c)| t.reference == c.translation.text).count();
    let outcome = BenchmarkOutcome {
        reports,
        train,
        sentences: data.test.len(),
        words: labels.iter().map(Vec::len).sum(),
        mistranslated_words: labels.iter().flatten().filter(|l| **l).count(),
        exact_translations: exact,
        seconds: start.elapsed().as_secs_f64(),
    };
    Ok((outcome, BenchmarkArtifacts { data, checkpoint, candidates: cands, records, alignments }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotator::{parse_response, resolve_to_source};

    #[test]
    fn generator_is_deterministic_and_holds_out() {
        let cfg = SyntheticConfig { train_pairs: 50, test_sentences: 40, ..Default::default() };
        let a = generate(&cfg).unwrap();
        assert_eq!(a, generate(&cfg).unwrap());
        let held: BTreeSet<&str> =
            a.lexicon.iter().filter(|e| e.kind == WordKind::HeldOut).map(|e| e.source.as_str()).collect();
        for p in &a.train {
            assert!(p.source.split([' ', '.']).all(|w| !held.contains(w)));
        }
        for t in &a.test {
            let n = pretokenize(&t.source).len();
            assert_eq!(n, pretokenize(&t.reference).len());
        }
    }

    #[test]
    fn oracle_labels_substitutions_and_deletions() {
        let oracle = OracleBackend::new(["ki", "lu", "mo"].map(String::from).into());
        let reply = oracle.respond("pa ki mo lu.", "fa zo he.", "fa vi he wo.");
        let parsed = parse_response(&reply);
        let got: Vec<(&str, &str, &str)> = parsed
            .triples
            .iter()
            .map(|t| (t.source_word.as_str(), t.candidate_word.as_str(), t.reference_word.as_str()))
            .collect();
        assert_eq!(got, vec![("ki", "zo", "vi"), ("lu", "∅", "wo")]);
        let src: Vec<&str> = pretokenize("pa ki mo lu.").into_iter().map(|w| w.text).collect();
        let labels = resolve_to_source(&parsed.triples, &src).labels(src.len());
        assert_eq!(labels, vec![false, true, false, true, false]);
        assert_eq!(oracle.respond("pa ki.", "fa vi.", "fa vi."), NO_ERRORS);
        // Regular words are never labelled, even when wrong.
        assert_eq!(oracle.respond("pa ki.", "fu vi.", "fa vi."), NO_ERRORS);
    }

    #[test]
    fn gold_alignment_fills_gaps() {
        let a = gold_alignment(&["fa", "vi", "he", "wo", "."], &["fa", "zo", "qu", "he", "."]).unwrap();
        assert_eq!(a.to_pharaoh(), "0-0 1-1 1-2 2-3 4-4");
        let a = gold_alignment(&["a", "b", "."], &["."]).unwrap();
        assert_eq!(a.to_pharaoh(), "2-0");
    }
}
