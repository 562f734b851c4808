//! Parallel-corpus and test-set ingestion.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentencePair {
    pub source: String,
    pub target: String,
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Two line-aligned files of equal length.
pub fn read_parallel(source: &Path, target: &Path) -> Result<Vec<SentencePair>> {
    let src = read(source)?;
    let tgt = read(target)?;
    let src: Vec<&str> = src.lines().collect();
    let tgt: Vec<&str> = tgt.lines().collect();
    if src.len() != tgt.len() {
        return Err(Error::Validation(format!(
            "corpus length mismatch: {} has {} lines, {} has {}",
            source.display(),
            src.len(),
            target.display(),
            tgt.len()
        )));
    }
    Ok(src
        .into_iter()
        .zip(tgt)
        .map(|(s, t)| SentencePair { source: s.to_string(), target: t.to_string() })
        .collect())
}

/// One `source<TAB>target` pair per line.
pub fn read_tsv(path: &Path) -> Result<Vec<SentencePair>> {
    parse_tsv(&read(path)?).map_err(|(line, msg)| Error::format(path, format!("line {line}: {msg}")))
}

pub fn parse_tsv(text: &str) -> std::result::Result<Vec<SentencePair>, (usize, String)> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let (s, t) = line.split_once('\t').ok_or((i + 1, "missing tab separator".to_string()))?;
            Ok(SentencePair { source: s.to_string(), target: t.to_string() })
        })
        .collect()
}

pub fn write_tsv(path: &Path, pairs: &[SentencePair]) -> Result<()> {
    let mut out = String::new();
    for p in pairs {
        out.push_str(&p.source);
        out.push('\t');
        out.push_str(&p.target);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Test-set item: `{"source": ..., "reference": ...}` per JSON line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestItem {
    pub source: String,
    pub reference: String,
}

pub fn read_testset(path: &Path) -> Result<Vec<TestItem>> {
    let raw = read(path)?;
    raw.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))
        })
        .collect()
}

pub fn write_testset(path: &Path, items: &[TestItem]) -> Result<()> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("test item serializes"));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mismatched_files_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let s = dir.path().join("s.txt");
        let t = dir.path().join("t.txt");
        std::fs::write(&s, "a\nb\n").unwrap();
        std::fs::write(&t, "x\n").unwrap();
        assert!(matches!(read_parallel(&s, &t), Err(Error::Validation(_))));
        std::fs::write(&t, "x\ny\n").unwrap();
        assert_eq!(read_parallel(&s, &t).unwrap().len(), 2);
    }

    #[test]
    fn tsv_requires_tab() {
        assert_eq!(parse_tsv("a\tb\n\nc\td\n").unwrap().len(), 2);
        assert_eq!(parse_tsv("a b\n").unwrap_err().0, 1);
    }
}
