//! Replacement-word suggestions by nearest-neighbour search over encoder
//! embeddings.
//!
//! Index vectors come from encoding each vocabulary word on its own; query
//! vectors come from the word's states inside the sentence being edited.
//! Both are averaged over the word's subwords and scaled to unit length, so
//! the inner product is the cosine similarity. Search is an exact scan.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::tensor::Mat;
use crate::tokenizer::{is_punctuation, pretokenize, TokenizedSentence};

pub const INDEX_FORMAT: &str = "sourceconf-index/1";
pub const DEFAULT_MIN_FREQUENCY: u64 = 10;
pub const DEFAULT_K: usize = 5;
const MAGIC: &[u8; 8] = b"SCIDX001";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexMeta {
    pub format: String,
    pub checkpoint_id: String,
    pub corpus_id: String,
    pub min_frequency: u64,
    pub dim: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuggestionIndex {
    pub meta: IndexMeta,
    pub words: Vec<String>,
    pub frequencies: Vec<u64>,
    /// Row-major `count x dim`.
    pub vectors: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Suggestion {
    pub word: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuggestionList {
    pub word: String,
    pub word_index: usize,
    pub suggestions: Vec<Suggestion>,
    /// Fewer than `k` candidates were available.
    pub truncated: bool,
}

/// Surface word counts over pretokenized text, punctuation-only tokens skipped.
pub fn word_frequencies<S: AsRef<str>>(corpus: &[S]) -> HashMap<String, u64> {
    let mut counts = HashMap::new();
    for line in corpus {
        for w in pretokenize(line.as_ref()) {
            if !w.text.chars().all(is_punctuation) {
                *counts.entry(w.text.to_string()).or_insert(0) += 1;
            }
        }
    }
    counts
}

fn corpus_id<S: AsRef<str>>(corpus: &[S]) -> String {
    let mut h = Sha256::new();
    for line in corpus {
        h.update(line.as_ref().as_bytes());
        h.update(b"\n");
    }
    hex::encode(&h.finalize()[..8])
}

/// Mean of `states` rows over `span`, scaled to unit length.
fn pooled(states: &Mat, (start, end): (usize, usize)) -> Vec<f64> {
    let mut v = vec![0.0; states.cols];
    for r in start..end {
        for (a, b) in v.iter_mut().zip(states.row(r)) {
            *a += b;
        }
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

/// Context-free vector for one word.
pub fn standalone_vector(checkpoint: &Checkpoint, word: &str) -> Result<Vec<f64>> {
    let sentence = checkpoint.tokenize(word)?;
    let span = match sentence.word_spans.as_slice() {
        [] => return Err(Error::Validation(format!("{word:?} tokenizes to nothing"))),
        // Edge punctuation is split off; pool over every piece.
        spans => (spans[0].0, spans[spans.len() - 1].1),
    };
    let states = checkpoint.model.encoder_states(&sentence.token_ids)?;
    Ok(pooled(&states, span))
}

/// Contextual vector for word `index` of `sentence`.
pub fn contextual_vector(checkpoint: &Checkpoint, sentence: &TokenizedSentence, index: usize) -> Result<Vec<f64>> {
    let span = *sentence
        .word_spans
        .get(index)
        .ok_or_else(|| Error::Validation(format!("word index {index} out of range for {} words", sentence.num_words())))?;
    let states = checkpoint.model.encoder_states(&sentence.token_ids)?;
    Ok(pooled(&states, span))
}

/// Indexes every corpus word seen at least `min_frequency` times.
pub fn build_index<S: AsRef<str>>(corpus: &[S], checkpoint: &Checkpoint, min_frequency: u64) -> Result<SuggestionIndex> {
    let mut kept: Vec<(String, u64)> =
        word_frequencies(corpus).into_iter().filter(|(_, f)| *f >= min_frequency).collect();
    if kept.is_empty() {
        return Err(Error::Config(format!("no corpus word occurs at least {min_frequency} times")));
    }
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let dim = checkpoint.model.config().d_model;
    let mut vectors = Vec::with_capacity(kept.len() * dim);
    for (word, _) in &kept {
        vectors.extend(standalone_vector(checkpoint, word)?.iter().map(|&x| x as f32));
    }
    let (words, frequencies) = kept.into_iter().unzip::<_, _, Vec<_>, Vec<_>>();
    Ok(SuggestionIndex {
        meta: IndexMeta {
            format: INDEX_FORMAT.to_string(),
            checkpoint_id: checkpoint.id(),
            corpus_id: corpus_id(corpus),
            min_frequency,
            dim,
            count: words.len(),
        },
        words,
        frequencies,
        vectors,
    })
}

impl SuggestionIndex {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Short content hash over words and vectors.
    pub fn id(&self) -> String {
        let mut h = Sha256::new();
        for w in &self.words {
            h.update((w.len() as u32).to_le_bytes());
            h.update(w.as_bytes());
        }
        for v in &self.vectors {
            h.update(v.to_le_bytes());
        }
        hex::encode(&h.finalize()[..8])
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.meta.dim..(i + 1) * self.meta.dim]
    }

    pub fn position(&self, word: &str) -> Option<usize> {
        self.words.iter().position(|w| w == word)
    }

    /// Inner product of `query` with every stored vector.
    pub fn scores(&self, query: &[f64]) -> Vec<f64> {
        (0..self.len())
            .map(|i| self.vector(i).iter().zip(query).map(|(&a, &b)| a as f64 * b).sum())
            .collect()
    }

    /// Top `k` by inner product, skipping entries equal to `exclude`
    /// case-insensitively. Ties break by index order. The flag reports
    /// whether fewer than `k` entries were available.
    pub fn search(&self, query: &[f64], k: usize, exclude: Option<&str>) -> Result<(Vec<Suggestion>, bool)> {
        if query.len() != self.meta.dim {
            return Err(Error::Validation(format!("query has dimension {}, index has {}", query.len(), self.meta.dim)));
        }
        let exclude = exclude.map(str::to_lowercase);
        let scores = self.scores(query);
        let mut order: Vec<usize> =
            (0..self.len()).filter(|&i| exclude.as_deref() != Some(self.words[i].to_lowercase().as_str())).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        let truncated = order.len() < k;
        order.truncate(k);
        let out = order
            .into_iter()
            .map(|i| Suggestion { word: self.words[i].clone(), score: scores[i].clamp(-1.0, 1.0) })
            .collect();
        Ok((out, truncated))
    }

    fn check_checkpoint(&self, checkpoint: &Checkpoint) -> Result<()> {
        let id = checkpoint.id();
        if id != self.meta.checkpoint_id {
            return Err(Error::Validation(format!(
                "index was built from checkpoint {} but {id} is loaded",
                self.meta.checkpoint_id
            )));
        }
        Ok(())
    }

    /// Suggestions for word `index` of `sentence`.
    pub fn query_at(
        &self,
        checkpoint: &Checkpoint,
        sentence: &TokenizedSentence,
        index: usize,
        k: usize,
    ) -> Result<SuggestionList> {
        self.check_checkpoint(checkpoint)?;
        let q = contextual_vector(checkpoint, sentence, index)?;
        let word = sentence.surface_words[index].clone();
        let (suggestions, truncated) = self.search(&q, k, Some(&word))?;
        Ok(SuggestionList { word, word_index: index, suggestions, truncated })
    }

    /// Suggestions for the first occurrence of `word` in `sentence`.
    pub fn query(
        &self,
        checkpoint: &Checkpoint,
        word: &str,
        sentence: &TokenizedSentence,
        k: usize,
    ) -> Result<SuggestionList> {
        let index = sentence
            .surface_words
            .iter()
            .position(|w| w == word)
            .or_else(|| sentence.surface_words.iter().position(|w| w.to_lowercase() == word.to_lowercase()))
            .ok_or_else(|| Error::Validation(format!("{word:?} does not occur in the sentence")))?;
        self.query_at(checkpoint, sentence, index, k)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::with_capacity(self.vectors.len() * 4 + 1024);
        out.extend_from_slice(MAGIC);
        let header = serde_json::to_vec(&self.meta).expect("index header serializes");
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for (w, f) in self.words.iter().zip(&self.frequencies) {
            out.extend_from_slice(&(w.len() as u32).to_le_bytes());
            out.extend_from_slice(w.as_bytes());
            out.extend_from_slice(&f.to_le_bytes());
        }
        for v in &self.vectors {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |m: &str| Error::format(path, m.to_string());
        let mut r = Reader { bytes: &bytes, pos: 0 };
        if r.take(8).ok_or_else(|| bad("truncated magic"))? != MAGIC {
            return Err(bad("not a suggestion index"));
        }
        let header_len = r.u32().ok_or_else(|| bad("truncated header"))? as usize;
        let header = r.take(header_len).ok_or_else(|| bad("truncated header"))?;
        let meta: IndexMeta = serde_json::from_slice(header).map_err(|e| bad(&e.to_string()))?;
        if meta.format != INDEX_FORMAT {
            return Err(bad(&format!("unsupported index format {:?}", meta.format)));
        }
        let mut words = Vec::with_capacity(meta.count);
        let mut frequencies = Vec::with_capacity(meta.count);
        for _ in 0..meta.count {
            let len = r.u32().ok_or_else(|| bad("truncated word table"))? as usize;
            let w = r.take(len).ok_or_else(|| bad("truncated word table"))?;
            words.push(String::from_utf8(w.to_vec()).map_err(|_| bad("word is not UTF-8"))?);
            frequencies.push(r.u64().ok_or_else(|| bad("truncated word table"))?);
        }
        let n = meta.count * meta.dim;
        let raw = r.take(n * 4).ok_or_else(|| bad("truncated vectors"))?;
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes after vectors"));
        }
        let vectors = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(Self { meta, words, frequencies, vectors })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frequencies_skip_punctuation() {
        let f = word_frequencies(&["a cat, a dog.", "A cat"]);
        assert_eq!(f.get("a"), Some(&2));
        assert_eq!(f.get("A"), Some(&1));
        assert_eq!(f.get("cat"), Some(&2));
        assert!(!f.contains_key(",") && !f.contains_key("."));
    }

    #[test]
    fn pooled_is_unit_mean() {
        let m = Mat::from_vec(3, 2, vec![1.0, 0.0, 3.0, 0.0, 0.0, 5.0]);
        assert_eq!(pooled(&m, (0, 2)), vec![1.0, 0.0]);
        let v = pooled(&m, (1, 3));
        assert!((v.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
