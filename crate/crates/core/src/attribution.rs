//! Per-source-word uncertainty scores.
//!
//! The gradient method reads the input-embedding gradient of the
//! translation probability directly. The two projection baselines start
//! from target-side word uncertainty and carry it back to the source, once
//! through averaged cross-attention and once through a hard word alignment.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::AttentionTensor;
use crate::tensor::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum Norm {
    #[default]
    L1,
    L2,
    Linf,
}

impl Norm {
    pub const ALL: [Norm; 3] = [Norm::L1, Norm::L2, Norm::Linf];

    pub fn apply(self, v: &[f64]) -> f64 {
        match self {
            Norm::L1 => v.iter().map(|x| x.abs()).sum(),
            Norm::L2 => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
            Norm::Linf => v.iter().fold(0.0, |m, x| m.max(x.abs())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Sum,
    Avg,
    Max,
}

impl Aggregation {
    pub const ALL: [Aggregation; 3] = [Aggregation::Sum, Aggregation::Avg, Aggregation::Max];

    pub fn apply(self, v: &[f64]) -> f64 {
        match self {
            Aggregation::Sum => v.iter().sum(),
            Aggregation::Avg if v.is_empty() => 0.0,
            Aggregation::Avg => v.iter().sum::<f64>() / v.len() as f64,
            Aggregation::Max => v.iter().fold(0.0, |m: f64, &x| m.max(x)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Gradient,
    AttentionProjection,
    AlignmentProjection,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Gradient, Method::AttentionProjection, Method::AlignmentProjection];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Gradient => "gradient",
            Method::AttentionProjection => "attention_projection",
            Method::AlignmentProjection => "alignment_projection",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

impl FromStr for Norm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(Norm::L1),
            "l2" => Ok(Norm::L2),
            "linf" => Ok(Norm::Linf),
            _ => Err(Error::Config(format!("unknown norm {s:?}"))),
        }
    }
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Aggregation::Sum),
            "avg" => Ok(Aggregation::Avg),
            "max" => Ok(Aggregation::Max),
            _ => Err(Error::Config(format!("unknown aggregation {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttributionConfig {
    pub norm: Norm,
    pub aggregation: Aggregation,
    pub threshold: f64,
    pub method: Method,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        Self { norm: Norm::L1, aggregation: Aggregation::Sum, threshold: 0.0, method: Method::Gradient }
    }
}

impl AttributionConfig {
    pub fn with_method(method: Method) -> Self {
        Self { method, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.threshold.is_nan() || self.threshold < 0.0 {
            return Err(Error::Config(format!("threshold must be >= 0, got {}", self.threshold)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionResult {
    pub config: AttributionConfig,
    /// Empty for the projection methods, which work at word level.
    pub per_subword_scores: Vec<f64>,
    pub per_word_scores: Vec<f64>,
    pub highlighted: Vec<bool>,
}

impl AttributionResult {
    fn new(config: AttributionConfig, per_subword_scores: Vec<f64>, per_word_scores: Vec<f64>) -> Self {
        let highlighted = classify(&per_word_scores, config.threshold);
        Self { config, per_subword_scores, per_word_scores, highlighted }
    }

    /// Re-thresholds without recomputing scores.
    pub fn with_threshold(mut self, threshold: f64) -> Self {
        self.config.threshold = threshold;
        self.highlighted = classify(&self.per_word_scores, threshold);
        self
    }
}

/// Strict `score > threshold` per word.
pub fn classify(scores: &[f64], threshold: f64) -> Vec<bool> {
    scores.iter().map(|&s| s > threshold).collect()
}

fn check_spans(spans: &[(usize, usize)], len: usize, what: &str) -> Result<()> {
    for &(s, e) in spans {
        if s >= e || e > len {
            return Err(Error::Validation(format!("{what} span ({s}, {e}) is out of range for length {len}")));
        }
    }
    Ok(())
}

/// Gradient norms per subword, aggregated over each word span.
pub fn gradient_uncertainty(
    gradients: &Mat,
    spans: &[(usize, usize)],
    config: AttributionConfig,
) -> Result<AttributionResult> {
    config.validate()?;
    if config.method != Method::Gradient {
        return Err(Error::Config(format!("gradient_uncertainty called with method {}", config.method)));
    }
    check_spans(spans, gradients.rows, "source")?;
    let per_subword: Vec<f64> = (0..gradients.rows).map(|r| config.norm.apply(gradients.row(r))).collect();
    let per_word = spans.iter().map(|&(s, e)| config.aggregation.apply(&per_subword[s..e])).collect();
    Ok(AttributionResult::new(config, per_subword, per_word))
}

/// `1 - prod(p)` over each target word's subword probabilities.
pub fn target_word_uncertainty(per_token_probs: &[f64], spans: &[(usize, usize)]) -> Result<Vec<f64>> {
    check_spans(spans, per_token_probs.len(), "target")?;
    Ok(spans.iter().map(|&(s, e)| 1.0 - per_token_probs[s..e].iter().product::<f64>()).collect())
}

/// Word-level attention matrix: source columns summed within a span,
/// target rows averaged within a span, rows renormalized.
pub fn word_attention(
    attention: &AttentionTensor,
    source_spans: &[(usize, usize)],
    target_spans: &[(usize, usize)],
) -> Result<Mat> {
    check_spans(source_spans, attention.source_len, "source")?;
    check_spans(target_spans, attention.target_len, "target")?;
    let avg = attention.averaged();
    let mut out = Mat::zeros(target_spans.len(), source_spans.len());
    for (j, &(ts, te)) in target_spans.iter().enumerate() {
        let row = out.row_mut(j);
        for t in ts..te {
            let src = avg.row(t);
            for (i, &(ss, se)) in source_spans.iter().enumerate() {
                row[i] += src[ss..se].iter().sum::<f64>();
            }
        }
        let total: f64 = row.iter().sum();
        if total > 0.0 {
            row.iter_mut().for_each(|v| *v /= total);
        }
    }
    Ok(out)
}

/// Distributes target-word uncertainty over source words by attention.
pub fn attention_projection(
    target_scores: &[f64],
    attention: &AttentionTensor,
    source_spans: &[(usize, usize)],
    target_spans: &[(usize, usize)],
    config: AttributionConfig,
) -> Result<AttributionResult> {
    config.validate()?;
    if target_scores.len() != target_spans.len() {
        return Err(Error::Validation(format!(
            "{} target scores for {} target words",
            target_scores.len(),
            target_spans.len()
        )));
    }
    let a = word_attention(attention, source_spans, target_spans)?;
    let mut per_word = vec![0.0; source_spans.len()];
    for (j, &t) in target_scores.iter().enumerate() {
        for (s, &w) in per_word.iter_mut().zip(a.row(j)) {
            *s += t * w;
        }
    }
    let config = AttributionConfig { method: Method::AttentionProjection, ..config };
    Ok(AttributionResult::new(config, Vec::new(), per_word))
}

/// Source-to-target word links for one sentence pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HardAlignment {
    pub pairs: BTreeSet<(usize, usize)>,
    pub source_len: usize,
    pub target_len: usize,
}

impl HardAlignment {
    pub fn new(pairs: impl IntoIterator<Item = (usize, usize)>, source_len: usize, target_len: usize) -> Result<Self> {
        let mut set = BTreeSet::new();
        for (i, j) in pairs {
            if i >= source_len || j >= target_len {
                return Err(Error::Validation(format!(
                    "alignment pair {i}-{j} is outside {source_len}x{target_len}"
                )));
            }
            if !set.insert((i, j)) {
                return Err(Error::Validation(format!("duplicate alignment pair {i}-{j}")));
            }
        }
        Ok(Self { pairs: set, source_len, target_len })
    }

    /// Parses one Pharaoh line (`0-0 1-2 ...`).
    pub fn parse_pharaoh(line: &str, source_len: usize, target_len: usize) -> Result<Self> {
        let mut pairs = Vec::new();
        for item in line.split_whitespace() {
            let parsed = item
                .split_once('-')
                .and_then(|(a, b)| Some((a.parse::<usize>().ok()?, b.parse::<usize>().ok()?)));
            match parsed {
                Some(p) => pairs.push(p),
                None => return Err(Error::Validation(format!("malformed alignment item {item:?}"))),
            }
        }
        Self::new(pairs, source_len, target_len)
    }

    pub fn to_pharaoh(&self) -> String {
        self.pairs.iter().map(|(i, j)| format!("{i}-{j}")).collect::<Vec<_>>().join(" ")
    }
}

/// Reads a Pharaoh file; `lengths` holds `(source_words, target_words)` per line.
pub fn read_pharaoh(path: &Path, lengths: &[(usize, usize)]) -> Result<Vec<HardAlignment>> {
    let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let lines: Vec<&str> = raw.lines().collect();
    if lines.len() != lengths.len() {
        return Err(Error::format(path, format!("{} alignment lines for {} sentence pairs", lines.len(), lengths.len())));
    }
    lines
        .iter()
        .zip(lengths)
        .enumerate()
        .map(|(n, (line, &(s, t)))| {
            HardAlignment::parse_pharaoh(line, s, t).map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))
        })
        .collect()
}

pub fn write_pharaoh(path: &Path, alignments: &[HardAlignment]) -> Result<()> {
    let mut out = String::new();
    for a in alignments {
        out.push_str(&a.to_pharaoh());
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Max over aligned target uncertainties; unaligned source words get 0.
pub fn alignment_projection(
    target_scores: &[f64],
    alignment: &HardAlignment,
    config: AttributionConfig,
) -> Result<AttributionResult> {
    config.validate()?;
    if target_scores.len() != alignment.target_len {
        return Err(Error::Validation(format!(
            "{} target scores for an alignment over {} target words",
            target_scores.len(),
            alignment.target_len
        )));
    }
    let mut per_word = vec![0.0f64; alignment.source_len];
    for &(i, j) in &alignment.pairs {
        per_word[i] = per_word[i].max(target_scores[j]);
    }
    let config = AttributionConfig { method: Method::AlignmentProjection, ..config };
    Ok(AttributionResult::new(config, Vec::new(), per_word))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn attention(m: usize, n: usize, rows: &[&[f64]]) -> AttentionTensor {
        let values = rows.iter().flat_map(|r| r.iter().copied()).collect();
        AttentionTensor { layers: 1, heads: 1, target_len: m, source_len: n, values }
    }

    #[test]
    fn hand_norms() {
        let g = [0.5, -0.5, 0.0];
        assert_eq!(Norm::L1.apply(&g), 1.0);
        assert_abs_diff_eq!(Norm::L2.apply(&g), 0.5f64.sqrt(), epsilon = 1e-15);
        assert_eq!(Norm::Linf.apply(&g), 0.5);
    }

    #[test]
    fn hand_aggregations() {
        let v = [1.0, 2.0, 3.0];
        assert_eq!(Aggregation::Sum.apply(&v), 6.0);
        assert_eq!(Aggregation::Avg.apply(&v), 2.0);
        assert_eq!(Aggregation::Max.apply(&v), 3.0);
    }

    #[test]
    fn zero_gradients_flag_nothing() {
        let g = Mat::zeros(3, 4);
        let cfg = AttributionConfig { threshold: 1e-12, ..Default::default() };
        let r = gradient_uncertainty(&g, &[(0, 2), (2, 3)], cfg).unwrap();
        assert_eq!(r.per_word_scores, vec![0.0, 0.0]);
        assert_eq!(r.highlighted, vec![false, false]);
    }

    #[test]
    fn gradient_rejects_bad_spans_and_method() {
        let g = Mat::zeros(2, 4);
        assert!(gradient_uncertainty(&g, &[(0, 3)], AttributionConfig::default()).is_err());
        let cfg = AttributionConfig::with_method(Method::AttentionProjection);
        assert!(gradient_uncertainty(&g, &[(0, 2)], cfg).is_err());
        let cfg = AttributionConfig { threshold: -1.0, ..Default::default() };
        assert!(matches!(gradient_uncertainty(&g, &[(0, 2)], cfg), Err(Error::Config(_))));
    }

    #[test]
    fn classify_threshold_cases() {
        assert_eq!(classify(&[8.5, 2.0], 8.38), vec![true, false]);
        assert_eq!(classify(&[0.0, 1e-9], 0.0), vec![false, true]);
        assert_eq!(classify(&[1e300], f64::INFINITY), vec![false]);
    }

    #[test]
    fn uniform_attention_splits_evenly() {
        let att = attention(1, 2, &[&[0.5, 0.5]]);
        let r = attention_projection(&[0.6], &att, &[(0, 1), (1, 2)], &[(0, 1)], Default::default()).unwrap();
        assert_abs_diff_eq!(r.per_word_scores[0], 0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(r.per_word_scores[1], 0.3, epsilon = 1e-12);
    }

    #[test]
    fn one_hot_attention_moves_everything() {
        let att = attention(2, 3, &[&[0.0, 0.0, 1.0], &[1.0, 0.0, 0.0]]);
        let spans = [(0, 1), (1, 2), (2, 3)];
        let r = attention_projection(&[0.4, 0.0], &att, &spans, &[(0, 1), (1, 2)], Default::default()).unwrap();
        assert_eq!(r.per_word_scores, vec![0.0, 0.0, 0.4]);
        let r = attention_projection(&[0.0, 0.0], &att, &spans, &[(0, 1), (1, 2)], Default::default()).unwrap();
        assert_eq!(r.per_word_scores, vec![0.0; 3]);
    }

    #[test]
    fn word_attention_collapse() {
        // Two target subwords form one word; the EOS row is outside every span.
        let att = attention(3, 3, &[&[0.2, 0.3, 0.5], &[0.6, 0.2, 0.2], &[0.0, 0.0, 1.0]]);
        let a = word_attention(&att, &[(0, 2), (2, 3)], &[(0, 2)]).unwrap();
        assert_abs_diff_eq!(a.get(0, 0), 0.65, epsilon = 1e-12);
        assert_abs_diff_eq!(a.get(0, 1), 0.35, epsilon = 1e-12);
    }

    #[test]
    fn attention_shape_mismatch() {
        let att = attention(1, 2, &[&[0.5, 0.5]]);
        assert!(attention_projection(&[0.1, 0.2], &att, &[(0, 2)], &[(0, 1)], Default::default()).is_err());
        assert!(attention_projection(&[0.1], &att, &[(0, 3)], &[(0, 1)], Default::default()).is_err());
    }

    #[test]
    fn target_uncertainty_is_one_minus_product() {
        let u = target_word_uncertainty(&[0.5, 0.8, 1.0, 0.9], &[(0, 2), (2, 3)]).unwrap();
        assert_abs_diff_eq!(u[0], 0.6, epsilon = 1e-12);
        assert_eq!(u[1], 0.0);
    }

    #[test]
    fn alignment_cases() {
        let a = HardAlignment::new([(0, 0), (1, 1)], 2, 2).unwrap();
        let r = alignment_projection(&[0.2, 0.9], &a, Default::default()).unwrap();
        assert_eq!(r.per_word_scores, vec![0.2, 0.9]);

        let a = HardAlignment::new([(0, 0), (0, 1)], 2, 2).unwrap();
        let r = alignment_projection(&[0.3, 0.7], &a, Default::default()).unwrap();
        assert_eq!(r.per_word_scores, vec![0.7, 0.0]);
        assert_eq!(r.config.method, Method::AlignmentProjection);
    }

    #[test]
    fn alignment_validation() {
        assert!(HardAlignment::new([(2, 0)], 2, 2).is_err());
        assert!(HardAlignment::new([(0, 0), (0, 0)], 2, 2).is_err());
        assert!(HardAlignment::parse_pharaoh("0-0 1:1", 2, 2).is_err());
        let a = HardAlignment::parse_pharaoh(" 1-0  0-1 ", 2, 2).unwrap();
        assert_eq!(a.to_pharaoh(), "0-1 1-0");
        let empty = HardAlignment::parse_pharaoh("", 3, 1).unwrap();
        assert!(empty.pairs.is_empty());
    }

    #[test]
    fn pharaoh_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("align.txt");
        let aligns = vec![HardAlignment::new([(0, 0)], 1, 1).unwrap(), HardAlignment::new([], 2, 0).unwrap()];
        write_pharaoh(&path, &aligns).unwrap();
        assert_eq!(read_pharaoh(&path, &[(1, 1), (2, 0)]).unwrap(), aligns);
        assert!(matches!(read_pharaoh(&path, &[(1, 1)]), Err(Error::Format { .. })));
    }

    #[test]
    fn method_names_roundtrip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert!("grad".parse::<Method>().is_err());
    }
}
