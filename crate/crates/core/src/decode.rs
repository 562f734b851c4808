//! Greedy and beam-search decoding.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::model::Transformer;
use crate::tokenizer::{TokenizedSentence, BOS, EOS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decoding {
    #[default]
    Greedy,
    Beam(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Translation {
    /// Output subwords, closed by `</s>` unless `truncated`.
    pub sentence: TokenizedSentence,
    pub text: String,
    /// No `</s>` within the output length limit.
    pub truncated: bool,
}

/// Most probable next token; equal scores go to the lower id.
fn argmax(log_probs: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &lp) in log_probs.iter().enumerate() {
        if lp > log_probs[best] {
            best = i;
        }
    }
    best as u32
}

pub fn greedy(model: &Transformer, source: &[u32], max_output: usize) -> Result<(Vec<u32>, bool)> {
    model.validate_ids(source, "source")?;
    let memory = model.encoder_states(source)?;
    let mut prefix = vec![BOS];
    while prefix.len() <= max_output {
        let next = argmax(&model.next_token_log_probs(&memory, source, &prefix));
        prefix.push(next);
        if next == EOS {
            return Ok((prefix[1..].to_vec(), false));
        }
    }
    Ok((prefix[1..].to_vec(), true))
}

#[derive(Clone)]
struct Hypothesis {
    tokens: Vec<u32>,
    score: f64,
}

struct Candidate {
    parent: usize,
    token: u32,
    log_prob: f64,
    score: f64,
}

/// Best-first ordering: higher score, then earlier parent, then higher token
/// log-probability, then lower token id.
fn candidate_order(a: &Candidate, b: &Candidate) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.parent.cmp(&b.parent))
        .then(b.log_prob.total_cmp(&a.log_prob))
        .then(a.token.cmp(&b.token))
}

fn hypothesis_order(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.tokens.cmp(&b.tokens))
}

/// Beam search over summed log-probabilities (no length normalization), so
/// a width of one reproduces greedy decoding exactly.
pub fn beam(model: &Transformer, source: &[u32], width: usize, max_output: usize) -> Result<(Vec<u32>, bool)> {
    if width == 0 {
        return Err(Error::Validation("beam width must be at least 1".into()));
    }
    model.validate_ids(source, "source")?;
    let memory = model.encoder_states(source)?;
    let mut alive = vec![Hypothesis { tokens: vec![BOS], score: 0.0 }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_output {
        let mut candidates = Vec::new();
        for (parent, hyp) in alive.iter().enumerate() {
            let lps = model.next_token_log_probs(&memory, source, &hyp.tokens);
            let mut ranked: Vec<(u32, f64)> = lps.iter().enumerate().map(|(t, &lp)| (t as u32, lp)).collect();
            ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            for &(token, log_prob) in ranked.iter().take(width) {
                candidates.push(Candidate { parent, token, log_prob, score: hyp.score + log_prob });
            }
        }
        candidates.sort_by(candidate_order);
        let mut next = Vec::with_capacity(width);
        for c in candidates.into_iter().take(width) {
            let mut tokens = alive[c.parent].tokens.clone();
            tokens.push(c.token);
            let hyp = Hypothesis { tokens, score: c.score };
            if c.token == EOS {
                finished.push(hyp);
            } else {
                next.push(hyp);
            }
        }
        alive = next;
        finished.sort_by(hypothesis_order);
        let best_alive = alive.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
        if finished.len() >= width || alive.is_empty() || finished.first().is_some_and(|f| f.score >= best_alive) {
            break;
        }
    }
    if let Some(best) = finished.into_iter().next() {
        return Ok((best.tokens[1..].to_vec(), false));
    }
    alive.sort_by(hypothesis_order);
    let best = alive.into_iter().next().expect("beam keeps at least one hypothesis");
    Ok((best.tokens[1..].to_vec(), true))
}

pub fn decode_ids(model: &Transformer, source: &[u32], decoding: Decoding) -> Result<(Vec<u32>, bool)> {
    let max_output = 2 * model.config().max_len;
    match decoding {
        Decoding::Greedy => greedy(model, source, max_output),
        Decoding::Beam(width) => beam(model, source, width, max_output),
    }
}

pub fn translate(checkpoint: &Checkpoint, source: &TokenizedSentence, decoding: Decoding) -> Result<Translation> {
    let (ids, truncated) = decode_ids(&checkpoint.model, &source.token_ids, decoding)?;
    let sentence = checkpoint.subwords.sentence_from_ids(&ids);
    let text = checkpoint.subwords.detokenize(&ids);
    Ok(Translation { sentence, text, truncated })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn beam_one_equals_greedy_on_untrained_models() {
        for seed in 0..4 {
            let m = Transformer::new(ModelConfig { max_len: 8, ..ModelConfig::tiny(15) }, seed).unwrap();
            let src = [5, 6, 7, 8];
            assert_eq!(greedy(&m, &src, 16).unwrap(), beam(&m, &src, 1, 16).unwrap());
        }
    }

    #[test]
    fn truncation_flagged_not_error() {
        let m = Transformer::new(ModelConfig { max_len: 3, ..ModelConfig::tiny(15) }, 1).unwrap();
        let (ids, truncated) = decode_ids(&m, &[5, 6], Decoding::Greedy).unwrap();
        if truncated {
            assert_eq!(ids.len(), 6);
            assert!(!ids.contains(&EOS));
        } else {
            assert_eq!(ids.last(), Some(&EOS));
        }
    }

    #[test]
    fn over_length_source_rejected() {
        let m = Transformer::new(ModelConfig { max_len: 3, ..ModelConfig::tiny(15) }, 1).unwrap();
        assert!(matches!(decode_ids(&m, &[5, 6, 7, 8], Decoding::Greedy), Err(Error::Validation(_))));
        assert!(beam(&m, &[5], 0, 4).is_err());
    }

    #[test]
    fn beam_is_deterministic() {
        let m = Transformer::new(ModelConfig { max_len: 8, ..ModelConfig::tiny(15) }, 9).unwrap();
        let a = beam(&m, &[5, 9, 11], 3, 16).unwrap();
        let b = beam(&m, &[5, 9, 11], 3, 16).unwrap();
        assert_eq!(a, b);
    }
}
