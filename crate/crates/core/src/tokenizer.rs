//! Byte-pair-encoding subword model with a word-initial marker.
//!
//! Text is first split into surface words: whitespace-delimited chunks with
//! leading and trailing punctuation peeled off into words of their own
//! (`"blossoms."` becomes `blossoms` + `.`, `"country's"` stays whole).
//! The first piece of a word that follows whitespace carries the `▁` marker;
//! punctuation glued to the previous word does not, which keeps
//! `detokenize(tokenize(s))` equal to `s` up to whitespace.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const NUM_SPECIAL: usize = 4;

pub const MARKER: char = '\u{2581}';
const SPECIAL_PIECES: [&str; NUM_SPECIAL] = ["<pad>", "<s>", "</s>", "<unk>"];
const UNK_SURFACE: &str = "\u{2047}";
const FORMAT: &str = "sourceconf-subwords/1";

pub fn is_special(id: u32) -> bool {
    (id as usize) < NUM_SPECIAL
}

/// Padding and sequence delimiters; these never belong to a surface word.
/// `<unk>` stands in for content and does.
pub fn is_structural(id: u32) -> bool {
    matches!(id, PAD | BOS | EOS)
}

pub fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '«' | '»' | '„' | '“' | '”' | '‘' | '’' | '‚' | '…' | '–' | '—' | '¿' | '¡' | '·'
        )
}

/// A surface word produced by [`pretokenize`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreWord<'a> {
    pub text: &'a str,
    /// Byte offset of the word in the input.
    pub start: usize,
    /// Glued to the previous word (no whitespace in between).
    pub attached: bool,
}

pub fn pretokenize<'t>(text: &'t str) -> Vec<PreWord<'t>> {
    let mut words = Vec::new();
    let mut chunk_start = None;
    let flush = |words: &mut Vec<PreWord<'t>>, start: usize, end: usize| {
        let chunk = &text[start..end];
        let chars: Vec<(usize, char)> = chunk.char_indices().collect();
        let lead = chars.iter().take_while(|(_, c)| is_punctuation(*c)).count();
        if lead == chars.len() {
            for (i, (off, c)) in chars.iter().enumerate() {
                let s = start + off;
                words.push(PreWord { text: &text[s..s + c.len_utf8()], start: s, attached: i > 0 });
            }
            return;
        }
        let trail = chars.iter().rev().take_while(|(_, c)| is_punctuation(*c)).count();
        let mut first = true;
        for (off, c) in &chars[..lead] {
            let s = start + off;
            words.push(PreWord { text: &text[s..s + c.len_utf8()], start: s, attached: !first });
            first = false;
        }
        let core_start = start + chars[lead].0;
        let core_end = if trail == 0 { end } else { start + chars[chars.len() - trail].0 };
        words.push(PreWord { text: &text[core_start..core_end], start: core_start, attached: !first });
        for (off, c) in &chars[chars.len() - trail..] {
            let s = start + off;
            words.push(PreWord { text: &text[s..s + c.len_utf8()], start: s, attached: true });
        }
    };
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if let Some(s) = chunk_start.take() {
                flush(&mut words, s, i);
            }
        } else if chunk_start.is_none() {
            chunk_start = Some(i);
        }
    }
    if let Some(s) = chunk_start {
        flush(&mut words, s, text.len());
    }
    words
}

/// Collapses runs of whitespace and trims.
pub fn normalize_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Subword ids plus the map from surface words to subword ranges.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedSentence {
    pub token_ids: Vec<u32>,
    /// Half-open `(start, end)` subword ranges, one per surface word.
    pub word_spans: Vec<(usize, usize)>,
    pub surface_words: Vec<String>,
}

impl TokenizedSentence {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn num_words(&self) -> usize {
        self.word_spans.len()
    }

    /// Checks the span partition invariant: spans are ordered, disjoint,
    /// non-empty, and cover exactly the non-special positions.
    pub fn check_spans(&self) -> Result<()> {
        if self.word_spans.len() != self.surface_words.len() {
            return Err(Error::Validation("one surface word per span required".into()));
        }
        let mut covered = vec![false; self.token_ids.len()];
        let mut prev_end = 0;
        for &(s, e) in &self.word_spans {
            if s >= e || s < prev_end || e > self.token_ids.len() {
                return Err(Error::Validation(format!("malformed span ({s}, {e})")));
            }
            for c in &mut covered[s..e] {
                *c = true;
            }
            prev_end = e;
        }
        for (i, (&id, &c)) in self.token_ids.iter().zip(&covered).enumerate() {
            if c == is_structural(id) {
                return Err(Error::Validation(format!("position {i} breaks the span partition")));
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct SubwordFile {
    format: String,
    pieces: Vec<String>,
    merges: Vec<(String, String)>,
}

/// Learned subword inventory. Ids `0..4` are `<pad> <s> </s> <unk>`; then
/// every alphabet character in plain and `▁`-marked form; then merges.
#[derive(Debug, Clone)]
pub struct SubwordModel {
    pieces: Vec<String>,
    merges: Vec<(String, String)>,
    piece_ids: HashMap<String, u32>,
    merge_ranks: HashMap<(String, String), usize>,
}

impl PartialEq for SubwordModel {
    fn eq(&self, other: &Self) -> bool {
        self.pieces == other.pieces && self.merges == other.merges
    }
}

/// Smallest vocabulary that can represent `corpus` at character level.
pub fn minimum_vocab_size<S: AsRef<str>>(corpus: &[S]) -> usize {
    NUM_SPECIAL + 2 * alphabet(corpus).len()
}

fn alphabet<S: AsRef<str>>(corpus: &[S]) -> Vec<char> {
    let mut chars: Vec<char> = corpus
        .iter()
        .flat_map(|l| l.as_ref().chars())
        .filter(|c| !c.is_whitespace() && *c != MARKER)
        .collect();
    chars.sort_unstable();
    chars.dedup();
    chars
}

fn initial_symbols(word: &str, attached: bool) -> Vec<String> {
    word.chars()
        .enumerate()
        .map(|(i, c)| if i == 0 && !attached { format!("{MARKER}{c}") } else { c.to_string() })
        .collect()
}

fn apply_merge(symbols: &mut Vec<String>, left: &str, right: &str) {
    let mut i = 0;
    while i + 1 < symbols.len() {
        if symbols[i] == left && symbols[i + 1] == right {
            let merged = format!("{}{}", symbols[i], symbols[i + 1]);
            symbols[i] = merged;
            symbols.remove(i + 1);
        }
        i += 1;
    }
}

/// Learns a BPE model with at most `vocab_size` entries. Ties between equally
/// frequent pairs go to the lexicographically smallest pair, so training is a
/// pure function of its inputs.
pub fn train_subwords<S: AsRef<str>>(corpus: &[S], vocab_size: usize) -> Result<SubwordModel> {
    if corpus.iter().all(|l| l.as_ref().trim().is_empty()) {
        return Err(Error::Config("cannot train a subword model on an empty corpus".into()));
    }
    let chars = alphabet(corpus);
    let minimum = NUM_SPECIAL + 2 * chars.len();
    if vocab_size < minimum {
        return Err(Error::Config(format!(
            "vocab_size {vocab_size} is too small for this corpus; the minimum is {minimum}"
        )));
    }

    let mut pieces: Vec<String> = SPECIAL_PIECES.iter().map(|s| s.to_string()).collect();
    pieces.extend(chars.iter().map(|c| c.to_string()));
    pieces.extend(chars.iter().map(|c| format!("{MARKER}{c}")));
    let mut known: HashMap<String, u32> =
        pieces.iter().enumerate().map(|(i, p)| (p.clone(), i as u32)).collect();

    let mut unit_counts: BTreeMap<(String, bool), u64> = BTreeMap::new();
    for line in corpus {
        for w in pretokenize(line.as_ref()) {
            *unit_counts.entry((w.text.to_string(), w.attached)).or_default() += 1;
        }
    }
    let mut units: Vec<(Vec<String>, u64)> = unit_counts
        .into_iter()
        .map(|((w, attached), n)| (initial_symbols(&w, attached), n))
        .collect();

    let mut merges = Vec::new();
    while pieces.len() < vocab_size {
        let mut pair_counts: HashMap<(&str, &str), u64> = HashMap::new();
        for (symbols, n) in &units {
            for pair in symbols.windows(2) {
                *pair_counts.entry((&pair[0], &pair[1])).or_default() += n;
            }
        }
        let best = pair_counts
            .into_iter()
            .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)))
            .map(|((a, b), _)| (a.to_string(), b.to_string()));
        let Some((left, right)) = best else { break };
        for (symbols, _) in &mut units {
            apply_merge(symbols, &left, &right);
        }
        let merged = format!("{left}{right}");
        if !known.contains_key(&merged) {
            known.insert(merged.clone(), pieces.len() as u32);
            pieces.push(merged);
        }
        merges.push((left, right));
    }
    Ok(SubwordModel::from_parts(pieces, merges))
}

impl SubwordModel {
    fn from_parts(pieces: Vec<String>, merges: Vec<(String, String)>) -> Self {
        let piece_ids = pieces.iter().enumerate().map(|(i, p)| (p.clone(), i as u32)).collect();
        let merge_ranks = merges.iter().enumerate().map(|(i, m)| (m.clone(), i)).collect();
        Self { pieces, merges, piece_ids, merge_ranks }
    }

    pub fn vocab_size(&self) -> usize {
        self.pieces.len()
    }

    pub fn piece(&self, id: u32) -> Option<&str> {
        self.pieces.get(id as usize).map(String::as_str)
    }

    pub fn id_of(&self, piece: &str) -> Option<u32> {
        self.piece_ids.get(piece).copied()
    }

    pub fn num_merges(&self) -> usize {
        self.merges.len()
    }

    fn encode_word(&self, word: &str, attached: bool, out: &mut Vec<u32>) {
        let mut symbols = initial_symbols(word, attached);
        loop {
            let best = symbols
                .windows(2)
                .filter_map(|p| self.merge_ranks.get(&(p[0].clone(), p[1].clone())).copied())
                .min();
            let Some(rank) = best else { break };
            let (l, r) = &self.merges[rank];
            apply_merge(&mut symbols, l, r);
        }
        out.extend(symbols.iter().map(|s| self.id_of(s).unwrap_or(UNK)));
    }

    pub fn tokenize(&self, text: &str) -> Result<TokenizedSentence> {
        if text.trim().is_empty() {
            return Err(Error::Validation("cannot tokenize empty text".into()));
        }
        let mut token_ids = Vec::new();
        let mut word_spans = Vec::new();
        let mut surface_words = Vec::new();
        for (i, w) in pretokenize(text).into_iter().enumerate() {
            let start = token_ids.len();
            self.encode_word(w.text, w.attached && i > 0, &mut token_ids);
            word_spans.push((start, token_ids.len()));
            surface_words.push(w.text.to_string());
        }
        Ok(TokenizedSentence { token_ids, word_spans, surface_words })
    }

    fn render(&self, id: u32) -> String {
        match id {
            PAD | BOS | EOS => String::new(),
            UNK => UNK_SURFACE.to_string(),
            _ => self.piece(id).unwrap_or(UNK_SURFACE).replace(MARKER, " "),
        }
    }

    pub fn detokenize(&self, ids: &[u32]) -> String {
        let text: String = ids.iter().map(|&id| self.render(id)).collect();
        text.trim().to_string()
    }

    /// Rebuilds word spans for an arbitrary id sequence (e.g. decoder output):
    /// each subword joins the surface word containing its first character.
    pub fn sentence_from_ids(&self, ids: &[u32]) -> TokenizedSentence {
        let mut text = String::new();
        let mut starts = Vec::with_capacity(ids.len());
        for &id in ids {
            let r = self.render(id);
            let lead = r.len() - r.trim_start().len();
            starts.push(if r.trim().is_empty() { None } else { Some(text.len() + lead) });
            text.push_str(&r);
        }
        let words = pretokenize(&text);
        let word_of = |offset: usize| words.iter().rposition(|w| w.start <= offset).unwrap_or(0);

        let mut word_spans: Vec<(usize, usize)> = Vec::new();
        let mut surface_words: Vec<String> = Vec::new();
        let mut current: Option<usize> = None;
        for (pos, &id) in ids.iter().enumerate() {
            let start = match starts[pos] {
                Some(s) if !is_structural(id) => s,
                _ => {
                    current = None;
                    continue;
                }
            };
            let w = word_of(start).max(current.unwrap_or(0));
            let piece = self.render(id);
            match current {
                Some(c) if c == w => {
                    let last = word_spans.last_mut().expect("open span");
                    last.1 = pos + 1;
                    surface_words.last_mut().expect("open word").push_str(&piece);
                }
                _ => {
                    word_spans.push((pos, pos + 1));
                    surface_words.push(piece.trim_start().to_string());
                }
            }
            current = Some(w);
        }
        TokenizedSentence { token_ids: ids.to_vec(), word_spans, surface_words }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = SubwordFile {
            format: FORMAT.to_string(),
            pieces: self.pieces.clone(),
            merges: self.merges.clone(),
        };
        let json = serde_json::to_string_pretty(&file).expect("subword model serializes");
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: SubwordFile =
            serde_json::from_str(&raw).map_err(|e| Error::format(path, e.to_string()))?;
        if file.format != FORMAT {
            return Err(Error::format(path, format!("unsupported subword format {}", file.format)));
        }
        if file.pieces.len() < NUM_SPECIAL || file.pieces[..NUM_SPECIAL] != SPECIAL_PIECES {
            return Err(Error::format(path, "special pieces missing"));
        }
        Ok(Self::from_parts(file.pieces, file.merges))
    }
}
