use std::hint::black_box;
use std::time::Duration;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use sourceconf_core::attribution::AttributionConfig;
use sourceconf_core::pipeline::{candidates, gradient_scores, Candidate};
use sourceconf_core::synthetic::{generate, SyntheticConfig};
use sourceconf_core::train::{train_model, train_with, TrainConfig};
use sourceconf_core::{Checkpoint, Decoding, Execution, Transformer};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn setup() -> (SyntheticConfig, Checkpoint, Vec<Candidate>) {
    let cfg = SyntheticConfig {
        train_pairs: 256,
        test_sentences: 32,
        train: TrainConfig { vocab_size: 300, epochs: 1, batch_size: 32, warmup_steps: 4, ..Default::default() },
        ..Default::default()
    };
    let data = generate(&cfg).unwrap();
    let (ckpt, _) = train_model(&data.train, &cfg.train, Execution::Parallel).unwrap();
    let cands = candidates(&ckpt, &data.test, Decoding::Greedy, Execution::Sequential).unwrap();
    (cfg, ckpt, cands)
}

fn attribute(ckpt: &Checkpoint, cands: &[Candidate], exec: Execution) -> Vec<Vec<f64>> {
    exec.map(cands, |c| {
        gradient_scores(ckpt, &c.source, &c.translation.sentence, AttributionConfig::default()).unwrap().per_word_scores
    })
}

fn run(c: &mut Criterion) {
    let (cfg, ckpt, cands) = setup();
    let data = generate(&cfg).unwrap();

    let mut group = c.benchmark_group("gradient_attribution");
    group.sample_size(10).measurement_time(Duration::from_secs(10));
    let expected = attribute(&ckpt, &cands, Execution::Sequential);
    for (name, exec) in MODES {
        assert_eq!(attribute(&ckpt, &cands, exec), expected);
        group.bench_with_input(BenchmarkId::new(name, cands.len()), &exec, |b, &exec| {
            b.iter(|| attribute(black_box(&ckpt), black_box(&cands), exec))
        });
    }
    group.finish();

    let mut group = c.benchmark_group("decode");
    group.sample_size(10).measurement_time(Duration::from_secs(10));
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::new(name, data.test.len()), &exec, |b, &exec| {
            b.iter(|| candidates(black_box(&ckpt), black_box(&data.test), Decoding::Greedy, exec).unwrap())
        });
    }
    group.finish();

    let mut group = c.benchmark_group("training_epoch");
    group.sample_size(10).measurement_time(Duration::from_secs(20));
    let init = Transformer::new(ckpt.model.config().clone(), 1).unwrap();
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::new(name, data.train.len()), &exec, |b, &exec| {
            b.iter(|| train_with(init.clone(), ckpt.subwords.clone(), black_box(&data.train), &cfg.train, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, run);
criterion_main!(benches);
