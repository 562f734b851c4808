//! End-to-end scoring: translate a source sentence, then attribute
//! uncertainty to its words with each method.

use serde::{Deserialize, Serialize};

use crate::annotator::{resolve_to_source, AnnotationRecord, AnnotationRequest, ExampleSet};
use crate::attribution::{
    alignment_projection, attention_projection, gradient_uncertainty, target_word_uncertainty, AttributionConfig,
    AttributionResult, HardAlignment, Method,
};
use crate::checkpoint::Checkpoint;
use crate::corpus::TestItem;
use crate::decode::{translate, Decoding, Translation};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_method, MetricsReport};
use crate::exec::Execution;
use crate::model::{scored_targets, GradientOptions};
use crate::tokenizer::TokenizedSentence;

/// A translated sentence with gradient attribution over its source words.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    pub source: TokenizedSentence,
    pub translation: Translation,
    pub attribution: AttributionResult,
}

/// Translates `text` and scores each source word by the gradient method.
pub fn analyze(checkpoint: &Checkpoint, text: &str, decoding: Decoding, config: AttributionConfig) -> Result<Analysis> {
    let source = checkpoint.tokenize(text)?;
    let translation = translate(checkpoint, &source, decoding)?;
    let attribution = gradient_scores(checkpoint, &source, &translation.sentence, config)?;
    Ok(Analysis { source, translation, attribution })
}

pub fn gradient_scores(
    checkpoint: &Checkpoint,
    source: &TokenizedSentence,
    candidate: &TokenizedSentence,
    config: AttributionConfig,
) -> Result<AttributionResult> {
    let targets = scored_targets(&candidate.token_ids);
    let grad = checkpoint.model.input_embedding_gradient(&source.token_ids, &targets, GradientOptions::default())?;
    if let Some(r) = (0..grad.rows).find(|&r| !grad.row(r).iter().all(|v| v.is_finite())) {
        return Err(Error::Numerical { position: r, message: "non-finite input gradient".into() });
    }
    gradient_uncertainty(&grad, &source.word_spans, AttributionConfig { method: Method::Gradient, ..config })
}

/// Per-word `1 - P(word)` for the candidate under teacher forcing.
pub fn candidate_uncertainty(
    checkpoint: &Checkpoint,
    source: &TokenizedSentence,
    candidate: &TokenizedSentence,
) -> Result<Vec<f64>> {
    let targets = scored_targets(&candidate.token_ids);
    let score = checkpoint.model.sequence_score(&source.token_ids, &targets)?;
    target_word_uncertainty(&score.per_token_probs, &candidate.word_spans)
}

pub fn attention_scores(
    checkpoint: &Checkpoint,
    source: &TokenizedSentence,
    candidate: &TokenizedSentence,
    config: AttributionConfig,
) -> Result<AttributionResult> {
    let targets = scored_targets(&candidate.token_ids);
    let attention = checkpoint.model.cross_attention(&source.token_ids, &targets)?;
    let uncertainty = candidate_uncertainty(checkpoint, source, candidate)?;
    attention_projection(&uncertainty, &attention, &source.word_spans, &candidate.word_spans, config)
}

pub fn alignment_scores(
    checkpoint: &Checkpoint,
    source: &TokenizedSentence,
    candidate: &TokenizedSentence,
    alignment: &HardAlignment,
    config: AttributionConfig,
) -> Result<AttributionResult> {
    if alignment.source_len != source.num_words() || alignment.target_len != candidate.num_words() {
        return Err(Error::Validation(format!(
            "alignment covers {}x{} words but the pair has {}x{}",
            alignment.source_len,
            alignment.target_len,
            source.num_words(),
            candidate.num_words()
        )));
    }
    let uncertainty = candidate_uncertainty(checkpoint, source, candidate)?;
    alignment_projection(&uncertainty, alignment, config)
}

/// A test sentence with its machine translation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub source: TokenizedSentence,
    pub translation: Translation,
}

pub fn candidates(checkpoint: &Checkpoint, items: &[TestItem], decoding: Decoding, exec: Execution) -> Result<Vec<Candidate>> {
    exec.map(items, |item| {
        let source = checkpoint.tokenize(&item.source)?;
        let translation = translate(checkpoint, &source, decoding)?;
        Ok(Candidate { source, translation })
    })
    .into_iter()
    .collect()
}

pub fn annotation_requests(
    items: &[TestItem],
    candidates: &[Candidate],
    source_lang: &str,
    target_lang: &str,
) -> Vec<AnnotationRequest> {
    items
        .iter()
        .zip(candidates)
        .map(|(item, c)| AnnotationRequest {
            source_lang: source_lang.to_string(),
            target_lang: target_lang.to_string(),
            source: item.source.clone(),
            candidate: if c.translation.text.trim().is_empty() { "∅".into() } else { c.translation.text.clone() },
            reference: item.reference.clone(),
            examples: ExampleSet::default(),
        })
        .collect()
}

/// Word labels for each sentence, plus the number of annotated errors that
/// could not be placed on a source word.
pub fn labels_from_records(candidates: &[Candidate], records: &[AnnotationRecord]) -> Result<(Vec<Vec<bool>>, usize)> {
    if candidates.len() != records.len() {
        return Err(Error::Validation(format!("{} annotations for {} sentences", records.len(), candidates.len())));
    }
    let mut unresolved = 0;
    let labels = candidates
        .iter()
        .zip(records)
        .map(|(c, r)| {
            let res = resolve_to_source(&r.triples, &c.source.surface_words);
            unresolved += res.unresolved.len();
            res.labels(c.source.num_words())
        })
        .collect();
    Ok((labels, unresolved))
}

/// Scores every candidate with every available method and evaluates each
/// against `labels`. Alignment projection runs only when alignments are
/// supplied.
pub fn evaluate_all(
    checkpoint: &Checkpoint,
    candidates: &[Candidate],
    labels: &[Vec<bool>],
    unresolved: usize,
    alignments: Option<&[HardAlignment]>,
    config: AttributionConfig,
    exec: Execution,
) -> Result<Vec<MetricsReport>> {
    if let Some(a) = alignments {
        if a.len() != candidates.len() {
            return Err(Error::Validation(format!("{} alignments for {} sentences", a.len(), candidates.len())));
        }
    }
    let mut methods = vec![Method::Gradient, Method::AttentionProjection];
    if alignments.is_some() {
        methods.push(Method::AlignmentProjection);
    }
    let mut reports = Vec::new();
    for method in methods {
        let cfg = AttributionConfig { method, ..config };
        let results: Result<Vec<AttributionResult>> = exec
            .map_range(candidates.len(), |i| {
                let c = &candidates[i];
                let cand = &c.translation.sentence;
                match method {
                    Method::Gradient => gradient_scores(checkpoint, &c.source, cand, cfg),
                    Method::AttentionProjection => attention_scores(checkpoint, &c.source, cand, cfg),
                    Method::AlignmentProjection => {
                        alignment_scores(checkpoint, &c.source, cand, &alignments.expect("checked above")[i], cfg)
                    }
                }
            })
            .into_iter()
            .collect();
        reports.push(evaluate_method(method.as_str(), &results?, labels, unresolved)?);
    }
    Ok(reports)
}
