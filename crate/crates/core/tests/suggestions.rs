use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sourceconf_core::checkpoint::TrainingMeta;
use sourceconf_core::suggestions::{build_index, standalone_vector, word_frequencies, SuggestionIndex};
use sourceconf_core::tokenizer::train_subwords;
use sourceconf_core::{Checkpoint, ModelConfig, Transformer};

const WORDS: [&str; 12] =
    ["river", "stone", "lamp", "garden", "Quiet", "quiet", "window", "bread", "winter", "mill", "orchard", "copper"];

/// Word `i` appears `3 * i + 1` times, so thresholds cut the list cleanly.
fn corpus() -> Vec<String> {
    let mut tokens = Vec::new();
    for (i, w) in WORDS.iter().enumerate() {
        tokens.extend(std::iter::repeat_n(*w, 3 * i + 1));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for i in (1..tokens.len()).rev() {
        tokens.swap(i, rng.random_range(0..=i));
    }
    tokens.chunks(6).map(|c| format!("{}.", c.join(" "))).collect()
}

fn checkpoint(corpus: &[String]) -> Checkpoint {
    let subwords = train_subwords(corpus, 60).unwrap();
    let model = Transformer::new(ModelConfig::tiny(subwords.vocab_size()), 9).unwrap();
    Checkpoint { model, subwords, meta: TrainingMeta::default() }
}

#[test]
fn pruning_matches_frequency_oracle() {
    let corpus = corpus();
    let ckpt = checkpoint(&corpus);
    let freqs = word_frequencies(&corpus);
    for (i, w) in WORDS.iter().enumerate() {
        assert_eq!(freqs[*w], 3 * i as u64 + 1);
    }
    for min in [1, 9, 10, 20, 34] {
        let index = build_index(&corpus, &ckpt, min).unwrap();
        let expect = freqs.values().filter(|&&f| f >= min).count();
        assert_eq!(index.len(), expect, "min_frequency {min}");
        assert!(index.frequencies.iter().all(|&f| f >= min));
    }
    // "garden" appears 10 times, "lamp" 7.
    let index = build_index(&corpus, &ckpt, 10).unwrap();
    assert!(index.position("garden").is_some() && index.position("lamp").is_none());
    let lower = build_index(&corpus, &ckpt, 4).unwrap();
    assert!(index.words.iter().all(|w| lower.position(w).is_some()));
    assert!(build_index(&corpus, &ckpt, 1000).is_err());
}

#[test]
fn vectors_are_unit_and_self_similar() {
    let corpus = corpus();
    let ckpt = checkpoint(&corpus);
    let index = build_index(&corpus, &ckpt, 1).unwrap();
    for i in 0..index.len() {
        let n: f64 = index.vector(i).iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() <= 1e-6, "{} has norm {n}", index.words[i]);
    }
    let i = index.position("winter").unwrap();
    let q = standalone_vector(&ckpt, "winter").unwrap();
    let (top, _) = index.search(&q, 1, None).unwrap();
    assert_eq!(top[0].word, "winter");
    assert!((top[0].score - 1.0).abs() <= 1e-6);
    let (top, _) = index.search(&q, 3, Some("WINTER")).unwrap();
    assert!(top.iter().all(|s| s.word != "winter"));
    assert!((index.scores(&q)[i] - 1.0).abs() <= 1e-6);
}

#[test]
fn exact_search_matches_exhaustive_scan() {
    let corpus = corpus();
    let ckpt = checkpoint(&corpus);
    let index = build_index(&corpus, &ckpt, 1).unwrap();
    let sentences: Vec<_> = corpus.iter().map(|s| ckpt.tokenize(s).unwrap()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..100 {
        let s = &sentences[rng.random_range(0..sentences.len())];
        let w = rng.random_range(0..s.num_words());
        let got = index.query_at(&ckpt, s, w, 5).unwrap();

        let q = sourceconf_core::suggestions::contextual_vector(&ckpt, s, w).unwrap();
        let mut brute: Vec<(usize, f64)> = (0..index.len())
            .filter(|&i| index.words[i].to_lowercase() != s.surface_words[w].to_lowercase())
            .map(|i| (i, index.vector(i).iter().zip(&q).map(|(&a, &b)| a as f64 * b).sum()))
            .collect();
        brute.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let expect: Vec<&str> = brute.iter().take(5).map(|(i, _)| index.words[*i].as_str()).collect();
        let words: Vec<&str> = got.suggestions.iter().map(|s| s.word.as_str()).collect();
        assert_eq!(words, expect);
        assert!(got.suggestions.windows(2).all(|p| p[0].score >= p[1].score));
        assert!(got.suggestions.iter().all(|s| (-1.0..=1.0).contains(&s.score)));
    }
}

#[test]
fn roundtrip_and_truncation() {
    let corpus = corpus();
    let ckpt = checkpoint(&corpus);
    let index = build_index(&corpus, &ckpt, 20).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("index.bin");
    index.save(&path).unwrap();
    let back = SuggestionIndex::load(&path).unwrap();
    assert_eq!(back, index);
    let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&back.vectors), bits(&index.vectors));

    let s = ckpt.tokenize("the copper mill by the river").unwrap();
    let a = index.query(&ckpt, "copper", &s, 50).unwrap();
    let b = back.query(&ckpt, "copper", &s, 50).unwrap();
    assert_eq!(a, b);
    assert!(a.truncated);
    assert_eq!(a.suggestions.len(), index.len() - 1);
    assert!(index.query(&ckpt, "absent", &s, 5).is_err());

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
    assert!(SuggestionIndex::load(&path).is_err());
}
