use serde::{Deserialize, Serialize};

use super::parse::MistranslationTriple;
use crate::tokenizer::is_punctuation;

/// Lowercased with punctuation removed; the key both sides are compared on.
pub fn match_key(word: &str) -> String {
    word.chars().filter(|c| !is_punctuation(*c)).flat_map(char::to_lowercase).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Resolution {
    pub triples: Vec<MistranslationTriple>,
    pub unresolved: Vec<String>,
}

impl Resolution {
    /// One label per source word: true where some triple resolved.
    pub fn labels(&self, num_words: usize) -> Vec<bool> {
        let mut out = vec![false; num_words];
        for i in self.triples.iter().filter_map(|t| t.resolved_source_index) {
            if i < num_words {
                out[i] = true;
            }
        }
        out
    }
}

/// Maps each triple to a source word position. Multi-word source phrases
/// resolve to their last word; positions are consumed left to right so two
/// triples never share one.
pub fn resolve_to_source<S: AsRef<str>>(triples: &[MistranslationTriple], source_words: &[S]) -> Resolution {
    let keys: Vec<String> = source_words.iter().map(|w| match_key(w.as_ref())).collect();
    let mut used = vec![false; keys.len()];
    let mut out = Resolution::default();
    for t in triples {
        let parts: Vec<String> =
            t.source_word.split_whitespace().map(match_key).filter(|k| !k.is_empty()).collect();
        let mut resolved = t.clone();
        resolved.resolved_source_index = find_span(&keys, &parts, &used);
        match resolved.resolved_source_index {
            Some(i) => used[i] = true,
            None => out.unresolved.push(t.source_word.clone()),
        }
        out.triples.push(resolved);
    }
    out
}

fn find_span(keys: &[String], parts: &[String], used: &[bool]) -> Option<usize> {
    if parts.is_empty() {
        return None;
    }
    // Punctuation-only source words have empty keys and are skipped over,
    // so "1,220 metres" still lines up with ["1,220", "metres"].
    let content: Vec<usize> = (0..keys.len()).filter(|&i| !keys[i].is_empty()).collect();
    content.windows(parts.len()).find_map(|w| {
        let head = *w.last()?;
        (!used[head] && w.iter().zip(parts).all(|(&i, p)| keys[i] == *p)).then_some(head)
    })
}
