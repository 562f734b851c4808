use serde::{Deserialize, Serialize};

use super::prompt::NO_ERRORS;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MistranslationTriple {
    pub source_word: String,
    pub candidate_word: String,
    pub reference_word: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolved_source_index: Option<usize>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub explanation: String,
}

impl MistranslationTriple {
    pub fn new(source: &str, candidate: &str, reference: &str) -> Self {
        Self {
            source_word: source.into(),
            candidate_word: candidate.into(),
            reference_word: reference.into(),
            resolved_source_index: None,
            explanation: String::new(),
        }
    }

    pub fn to_line(&self) -> String {
        format!("{} → {} → {}", self.source_word, self.candidate_word, self.reference_word)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ParsedResponse {
    pub triples: Vec<MistranslationTriple>,
    /// The sentinel line was present.
    pub no_errors: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

fn clean(part: &str) -> &str {
    part.trim().trim_matches(|c: char| matches!(c, '`' | '*' | '"' | '\'' | '“' | '”')).trim()
}

fn parse_triple(line: &str) -> Option<(String, String, String)> {
    let mut body = line.trim();
    body = body.trim_start_matches(|c: char| matches!(c, '-' | '*' | '•') || c.is_whitespace());
    body = body.trim_matches('`').trim();
    if let Some(inner) = body.strip_prefix('(').and_then(|b| b.strip_suffix(')')) {
        body = inner;
    }
    let parts: Vec<&str> = if body.contains('→') { body.split('→').collect() } else { body.split("->").collect() };
    if parts.len() != 3 {
        return None;
    }
    let [a, b, c] = [clean(parts[0]), clean(parts[1]), clean(parts[2])];
    if a.is_empty() || b.is_empty() || c.is_empty() {
        return None;
    }
    Some((a.to_string(), b.to_string(), c.to_string()))
}

/// Extracts `A → B → C` triples. Text after the last triple (typically an
/// `Explanation:` paragraph) is attached to every triple.
pub fn parse_response(text: &str) -> ParsedResponse {
    let mut triples = Vec::new();
    let mut trailing = Vec::new();
    let mut no_errors = false;
    for line in text.lines() {
        if line.contains(NO_ERRORS) {
            no_errors = true;
            continue;
        }
        if let Some((a, b, c)) = parse_triple(line) {
            triples.push(MistranslationTriple::new(&a, &b, &c));
            trailing.clear();
        } else if !triples.is_empty() && !line.trim().is_empty() {
            trailing.push(line.trim());
        }
    }
    if no_errors {
        let warning = (!triples.is_empty())
            .then(|| format!("sentinel present alongside {} triples; triples dropped", triples.len()));
        return ParsedResponse { triples: Vec::new(), no_errors, warning };
    }
    if triples.is_empty() {
        log::warn!("annotator response has neither triples nor the sentinel");
        return ParsedResponse {
            triples,
            no_errors,
            warning: Some("response has neither triples nor the no-error sentinel".into()),
        };
    }
    let explanation = trailing.join(" ");
    let explanation = explanation.strip_prefix("Explanation:").unwrap_or(&explanation).trim().to_string();
    for t in &mut triples {
        t.explanation.clone_from(&explanation);
    }
    ParsedResponse { triples, no_errors, warning: None }
}
