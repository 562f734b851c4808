//! Threshold sweeps and ranking metrics for per-word uncertainty scores.
//!
//! A word is predicted positive when its score is strictly greater than the
//! threshold, the same rule [`crate::attribution::classify`] uses. The sweep
//! evaluates every distinct score as a threshold plus both infinities, so
//! the resulting curve covers the full range from "everything flagged" to
//! "nothing flagged". Precision with no predicted positives is taken as 1.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attribution::AttributionResult;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledScore {
    pub sentence: usize,
    pub word: usize,
    pub score: f64,
    pub label: bool,
    pub method: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    #[serde(with = "extended_f64")]
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub fpr: f64,
    pub tpr: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl CurvePoint {
    fn from_counts(threshold: f64, tp: usize, fp: usize, positives: usize, negatives: usize) -> Self {
        let precision = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
        let recall = tp as f64 / positives as f64;
        let fpr = fp as f64 / negatives as f64;
        Self { threshold, precision, recall, fpr, tpr: recall, tp, fp, tn: negatives - fp, fn_: positives - tp }
    }

    pub fn f1(&self) -> f64 {
        if self.tp == 0 {
            0.0
        } else {
            2.0 * self.precision * self.recall / (self.precision + self.recall)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    /// Ascending threshold order: `-inf`, each distinct score, `+inf`.
    pub points: Vec<CurvePoint>,
    pub max_f1: f64,
    #[serde(with = "extended_f64")]
    pub threshold_at_max_f1: f64,
    pub positives: usize,
    pub negatives: usize,
}

fn class_counts(scores: &[(f64, bool)]) -> Result<(usize, usize)> {
    if let Some((s, _)) = scores.iter().find(|(s, _)| s.is_nan()) {
        return Err(Error::Metrics(format!("score {s} is not a number")));
    }
    let positives = scores.iter().filter(|(_, l)| *l).count();
    let negatives = scores.len() - positives;
    match (positives, negatives) {
        (0, 0) => Err(Error::Metrics("no scored words".into())),
        (0, _) => Err(Error::Metrics("no positive labels; cannot evaluate".into())),
        (_, 0) => Err(Error::Metrics("no negative labels; cannot evaluate".into())),
        _ => Ok((positives, negatives)),
    }
}

/// Sweeps all distinct thresholds on `(score, label)` pairs.
pub fn sweep(scores: &[(f64, bool)]) -> Result<Sweep> {
    let (positives, negatives) = class_counts(scores)?;
    let mut sorted: Vec<(f64, bool)> = scores.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Walking up in score, every item at or below the threshold is predicted
    // negative; the rest are predicted positive.
    let mut points = Vec::with_capacity(sorted.len() + 2);
    points.push(CurvePoint::from_counts(f64::NEG_INFINITY, positives, negatives, positives, negatives));
    let (mut tp, mut fp) = (positives, negatives);
    let mut i = 0;
    while i < sorted.len() {
        let v = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == v {
            if sorted[i].1 {
                tp -= 1;
            } else {
                fp -= 1;
            }
            i += 1;
        }
        points.push(CurvePoint::from_counts(v, tp, fp, positives, negatives));
    }
    if points.last().is_some_and(|p| p.threshold != f64::INFINITY) {
        points.push(CurvePoint::from_counts(f64::INFINITY, 0, 0, positives, negatives));
    }

    let mut best = 0;
    for (k, p) in points.iter().enumerate() {
        if p.f1() > points[best].f1() {
            best = k;
        }
    }
    Ok(Sweep {
        max_f1: points[best].f1(),
        threshold_at_max_f1: points[best].threshold,
        points,
        positives,
        negatives,
    })
}

/// Trapezoid area under precision over recall, walking thresholds downward.
pub fn auc_pr(points: &[CurvePoint]) -> f64 {
    let mut ordered: Vec<&CurvePoint> = points.iter().collect();
    ordered.sort_by(|a, b| b.threshold.total_cmp(&a.threshold));
    ordered.windows(2).map(|w| (w[1].recall - w[0].recall) * (w[1].precision + w[0].precision) / 2.0).sum()
}

/// Trapezoid area under the ROC curve.
pub fn auc_roc_trapezoid(points: &[CurvePoint]) -> f64 {
    let mut ordered: Vec<&CurvePoint> = points.iter().collect();
    ordered.sort_by(|a, b| b.threshold.total_cmp(&a.threshold));
    ordered.windows(2).map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0).sum()
}

/// Mann-Whitney statistic normalized to `[0, 1]`; ties count one half.
pub fn auc_roc(scores: &[(f64, bool)]) -> Result<f64> {
    let (positives, negatives) = class_counts(scores)?;
    let mut sorted: Vec<(f64, bool)> = scores.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            j += 1;
        }
        // Ranks i+1..=j share their mean.
        let mean_rank = (i + 1 + j) as f64 / 2.0;
        rank_sum += mean_rank * sorted[i..j].iter().filter(|(_, l)| *l).count() as f64;
        i = j;
    }
    let p = positives as f64;
    let u = rank_sum - p * (p + 1.0) / 2.0;
    Ok(u / (p * negatives as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub max_f1: f64,
    #[serde(with = "extended_f64")]
    pub threshold_at_max_f1: f64,
    pub auc_pr: f64,
    pub auc_roc: f64,
    pub positives: usize,
    pub negatives: usize,
    /// Annotated errors that could not be placed on a source word.
    pub unresolved: usize,
    pub points: Vec<CurvePoint>,
}

impl MetricsReport {
    pub fn summary(&self) -> Summary {
        Summary {
            max_f1: self.max_f1,
            threshold_at_max_f1: self.threshold_at_max_f1,
            auc_pr: self.auc_pr,
            auc_roc: self.auc_roc,
            positives: self.positives,
            negatives: self.negatives,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub max_f1: f64,
    #[serde(with = "extended_f64")]
    pub threshold_at_max_f1: f64,
    pub auc_pr: f64,
    pub auc_roc: f64,
    pub positives: usize,
    pub negatives: usize,
}

pub fn report_from_pairs(method: &str, scores: &[(f64, bool)], unresolved: usize) -> Result<MetricsReport> {
    let s = sweep(scores)?;
    Ok(MetricsReport {
        method: method.to_string(),
        max_f1: s.max_f1,
        threshold_at_max_f1: s.threshold_at_max_f1,
        auc_pr: auc_pr(&s.points),
        auc_roc: auc_roc(scores)?,
        positives: s.positives,
        negatives: s.negatives,
        unresolved,
        points: s.points,
    })
}

/// Flattens per-sentence results against per-sentence word labels.
pub fn join_labels(method: &str, results: &[AttributionResult], labels: &[Vec<bool>]) -> Result<Vec<LabeledScore>> {
    if results.len() != labels.len() {
        return Err(Error::Validation(format!("{} results for {} labelled sentences", results.len(), labels.len())));
    }
    let mut out = Vec::new();
    for (sentence, (r, l)) in results.iter().zip(labels).enumerate() {
        if r.per_word_scores.len() != l.len() {
            return Err(Error::Validation(format!(
                "sentence {sentence}: {} scores for {} labelled words",
                r.per_word_scores.len(),
                l.len()
            )));
        }
        for (word, (&score, &label)) in r.per_word_scores.iter().zip(l).enumerate() {
            out.push(LabeledScore { sentence, word, score, label, method: method.to_string() });
        }
    }
    Ok(out)
}

/// Full report for one method. Words without an annotation are negatives.
pub fn evaluate_method(
    method: &str,
    results: &[AttributionResult],
    labels: &[Vec<bool>],
    unresolved: usize,
) -> Result<MetricsReport> {
    let joined = join_labels(method, results, labels)?;
    if joined.is_empty() {
        return Err(Error::Metrics(format!("{method}: no words to evaluate")));
    }
    let pairs: Vec<(f64, bool)> = joined.iter().map(|s| (s.score, s.label)).collect();
    report_from_pairs(method, &pairs, unresolved)
}

pub const CSV_HEADER: &str = "threshold,precision,recall,fpr,tpr,tp,fp,tn,fn";
pub const SUMMARY_FILE: &str = "summary.json";

fn curve_csv(points: &[CurvePoint]) -> String {
    let mut ordered: Vec<&CurvePoint> = points.iter().collect();
    ordered.sort_by(|a, b| b.threshold.total_cmp(&a.threshold));
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for p in ordered {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            p.threshold, p.precision, p.recall, p.fpr, p.tpr, p.tp, p.fp, p.tn, p.fn_
        );
    }
    out
}

fn write(path: PathBuf, contents: &str) -> Result<PathBuf> {
    std::fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Writes `{method}_pr.csv`, `{method}_roc.csv` and `summary.json` into
/// `dir`. Both CSVs carry every sweep point in descending threshold order.
pub fn export_curves(reports: &[MetricsReport], dir: &Path) -> Result<Vec<PathBuf>> {
    if reports.is_empty() {
        return Err(Error::Metrics("no reports to export".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let mut summary = BTreeMap::new();
    for r in reports {
        let csv = curve_csv(&r.points);
        written.push(write(dir.join(format!("{}_pr.csv", r.method)), &csv)?);
        written.push(write(dir.join(format!("{}_roc.csv", r.method)), &csv)?);
        summary.insert(r.method.clone(), r.summary());
    }
    let mut json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    json.push('\n');
    written.push(write(dir.join(SUMMARY_FILE), &json)?);
    Ok(written)
}

pub fn read_curve_csv(path: &Path) -> Result<Vec<CurvePoint>> {
    let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = raw.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::format(path, "unexpected CSV header"));
    }
    lines
        .enumerate()
        .map(|(n, line)| {
            let bad = |what: &str| Error::format(path, format!("line {}: {what}", n + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 9 {
                return Err(bad("expected 9 fields"));
            }
            let real = |i: usize| f[i].parse::<f64>().map_err(|_| bad("bad number"));
            let count = |i: usize| f[i].parse::<usize>().map_err(|_| bad("bad count"));
            Ok(CurvePoint {
                threshold: real(0)?,
                precision: real(1)?,
                recall: real(2)?,
                fpr: real(3)?,
                tpr: real(4)?,
                tp: count(5)?,
                fp: count(6)?,
                tn: count(7)?,
                fn_: count(8)?,
            })
        })
        .collect()
}

pub fn read_summary(path: &Path) -> Result<BTreeMap<String, Summary>> {
    let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&raw).map_err(|e| Error::format(path, e.to_string()))
}

/// JSON has no infinities; write them as the strings `"inf"` / `"-inf"`.
mod extended_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}
