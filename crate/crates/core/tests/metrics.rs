use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sourceconf_core::attribution::{AttributionConfig, AttributionResult};
use sourceconf_core::evaluation::{
    auc_pr, auc_roc, auc_roc_trapezoid, evaluate_method, export_curves, read_curve_csv, read_summary,
    report_from_pairs, sweep,
};

fn pair_count_auc(d: &[(f64, bool)]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for &(p, _) in d.iter().filter(|x| x.1) {
        for &(n, _) in d.iter().filter(|x| !x.1) {
            pairs += 1.0;
            wins += if p > n { 1.0 } else if p == n { 0.5 } else { 0.0 };
        }
    }
    wins / pairs
}

fn brute_max_f1(d: &[(f64, bool)]) -> f64 {
    let mut values: Vec<f64> = d.iter().map(|x| x.0).collect();
    values.sort_by(f64::total_cmp);
    values.dedup();
    let mut cuts = vec![values[0] - 1.0, values[values.len() - 1] + 1.0];
    cuts.extend(values.windows(2).map(|w| (w[0] + w[1]) / 2.0));
    cuts.iter()
        .map(|&t| {
            let tp = d.iter().filter(|x| x.1 && x.0 > t).count() as f64;
            let fp = d.iter().filter(|x| !x.1 && x.0 > t).count() as f64;
            let fneg = d.iter().filter(|x| x.1 && x.0 <= t).count() as f64;
            if tp == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fneg) }
        })
        .fold(0.0, f64::max)
}

/// Random instance with ties (scores quantized) and both classes present.
fn instance(rng: &mut ChaCha8Rng, n: usize) -> Vec<(f64, bool)> {
    loop {
        let d: Vec<(f64, bool)> =
            (0..n).map(|_| ((rng.random_range(0..20) as f64) / 7.0, rng.random_bool(0.3))).collect();
        if d.iter().any(|x| x.1) && d.iter().any(|x| !x.1) {
            return d;
        }
    }
}

#[test]
fn mann_whitney_equals_pair_counting_and_trapezoid() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let n = rng.random_range(2..80);
        let d = instance(&mut rng, n);
        let mw = auc_roc(&d).unwrap();
        assert!((mw - pair_count_auc(&d)).abs() <= 1e-9);
        assert!((mw - auc_roc_trapezoid(&sweep(&d).unwrap().points)).abs() <= 1e-9);
    }
}

#[test]
fn max_f1_equals_midpoint_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..100 {
        let d = instance(&mut rng, 50);
        assert!((sweep(&d).unwrap().max_f1 - brute_max_f1(&d)).abs() <= 1e-12);
    }
}

#[test]
fn random_scores_give_chance_level() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let rate = 0.2;
    let d: Vec<(f64, bool)> = (0..10_000).map(|_| (rng.random::<f64>(), rng.random_bool(rate))).collect();
    let pos_rate = d.iter().filter(|x| x.1).count() as f64 / d.len() as f64;
    let roc = auc_roc(&d).unwrap();
    let pr = auc_pr(&sweep(&d).unwrap().points);
    assert!((roc - 0.5).abs() <= 0.03, "auc_roc {roc}");
    assert!((pr - pos_rate).abs() <= 0.05, "auc_pr {pr} vs rate {pos_rate}");
}

#[test]
fn monotone_transform_and_label_swap() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..50 {
        let d = instance(&mut rng, 40);
        let a = report_from_pairs("a", &d, 0).unwrap();
        let t: Vec<(f64, bool)> = d.iter().map(|&(s, l)| ((3.0 * s + 1.0).exp(), l)).collect();
        let b = report_from_pairs("b", &t, 0).unwrap();
        assert!((a.max_f1 - b.max_f1).abs() <= 1e-12);
        assert!((a.auc_pr - b.auc_pr).abs() <= 1e-12);
        assert!((a.auc_roc - b.auc_roc).abs() <= 1e-12);

        let swapped: Vec<(f64, bool)> = d.iter().map(|&(s, l)| (s, !l)).collect();
        assert!((auc_roc(&swapped).unwrap() - (1.0 - a.auc_roc)).abs() <= 1e-12);

        let mut recall = f64::INFINITY;
        for p in &a.points {
            assert!(p.recall <= recall);
            recall = p.recall;
        }
    }
}

fn result(scores: Vec<f64>) -> AttributionResult {
    let highlighted = vec![false; scores.len()];
    AttributionResult { config: AttributionConfig::default(), per_subword_scores: vec![], per_word_scores: scores, highlighted }
}

#[test]
fn evaluate_method_joins_sentences() {
    let results = vec![result(vec![0.8, 0.5]), result(vec![0.3, 0.1])];
    let labels = vec![vec![true, false], vec![true, false]];
    let r = evaluate_method("gradient", &results, &labels, 2).unwrap();
    assert!((r.auc_roc - 0.75).abs() < 1e-12);
    assert_eq!((r.positives, r.negatives, r.unresolved), (2, 2, 2));

    let zeros = vec![result(vec![0.0, 0.0]), result(vec![0.0, 0.0])];
    let z = evaluate_method("zero", &zeros, &labels, 0).unwrap();
    assert!((z.max_f1 - 2.0 / 3.0).abs() < 1e-12);
    let again = evaluate_method("zero", &zeros, &labels, 0).unwrap();
    assert_eq!(z, again);

    assert!(evaluate_method("x", &results, &labels[..1], 0).is_err());
    assert!(evaluate_method("x", &[], &[], 0).is_err());
}

#[test]
fn export_roundtrip() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let reports: Vec<_> = ["gradient", "attention_projection", "alignment_projection"]
        .iter()
        .map(|m| report_from_pairs(m, &instance(&mut rng, 200), 0).unwrap())
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let files = export_curves(&reports, dir.path()).unwrap();
    assert_eq!(files.iter().filter(|f| f.extension().unwrap() == "csv").count(), 6);
    assert_eq!(files.iter().filter(|f| f.extension().unwrap() == "json").count(), 1);

    let before: Vec<Vec<u8>> = files.iter().map(|f| std::fs::read(f).unwrap()).collect();
    export_curves(&reports, dir.path()).unwrap();
    let after: Vec<Vec<u8>> = files.iter().map(|f| std::fs::read(f).unwrap()).collect();
    assert_eq!(before, after);

    for r in &reports {
        let points = read_curve_csv(&dir.path().join(format!("{}_pr.csv", r.method))).unwrap();
        assert!((auc_pr(&points) - r.auc_pr).abs() <= 1e-9);
        let points = read_curve_csv(&dir.path().join(format!("{}_roc.csv", r.method))).unwrap();
        assert!((auc_roc_trapezoid(&points) - r.auc_roc).abs() <= 1e-9);
    }
    let summary = read_summary(&dir.path().join("summary.json")).unwrap();
    assert_eq!(summary.len(), 3);
    assert_eq!(summary["gradient"], reports[0].summary());
}
