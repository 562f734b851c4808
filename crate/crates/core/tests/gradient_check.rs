//! Input-embedding gradient against central finite differences on a trained
//! two-layer model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sourceconf_core::decode::translate;
use sourceconf_core::model::scored_targets;
use sourceconf_core::synthetic::{generate, SyntheticConfig};
use sourceconf_core::train::{train_model, TrainConfig};
use sourceconf_core::{Decoding, Execution, GradientOptions};

const EPS: f64 = 1e-3;
const REL_TOL: f64 = 1e-3;
const ABS_FLOOR: f64 = 1e-8;
const PAIRS: usize = 12;

/// Relative error, or absolute error below the floor, and whether it passes.
fn component_error(analytic: f64, numeric: f64) -> (f64, bool) {
    let diff = (analytic - numeric).abs();
    if numeric.abs() < ABS_FLOOR {
        (diff, diff <= ABS_FLOOR)
    } else {
        (diff / numeric.abs(), diff <= REL_TOL * numeric.abs())
    }
}

#[test]
fn gradient_matches_central_differences() {
    let cfg = SyntheticConfig {
        train_pairs: 600,
        test_sentences: 40,
        train: TrainConfig { vocab_size: 300, epochs: 4, batch_size: 16, warmup_steps: 20, ..Default::default() },
        ..Default::default()
    };
    let data = generate(&cfg).unwrap();
    let (ckpt, _) = train_model(&data.train, &cfg.train, Execution::Parallel).unwrap();
    assert_eq!(ckpt.model.config().encoder_layers, 2);
    assert_eq!(ckpt.model.config().d_model, 32);

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for _ in 0..PAIRS {
        let item = &data.test[rng.random_range(0..data.test.len())];
        let src = ckpt.tokenize(&item.source).unwrap();
        let cand = translate(&ckpt, &src, Decoding::Greedy).unwrap();
        let tgt = scored_targets(&cand.sentence.token_ids);
        let ids = &src.token_ids;
        let pos = rng.random_range(0..ids.len());
        let model = &ckpt.model;
        let grad = model.input_embedding_gradient(ids, &tgt, GradientOptions::default()).unwrap();
        let base = model.token_embeddings(ids);
        let d = model.config().d_model;
        for c in 0..d {
            let k = pos * d + c;
            let mut plus = base.clone();
            plus.data[k] += EPS;
            let mut minus = base.clone();
            minus.data[k] -= EPS;
            let fd = (model.objective_with_embeddings(ids, &plus, &tgt, false)
                - model.objective_with_embeddings(ids, &minus, &tgt, false))
                / (2.0 * EPS);
            let (err, ok) = component_error(grad.data[k], fd);
            worst = worst.max(err);
            assert!(ok, "{:?} position {pos} component {c}: analytic {} vs numeric {fd}", item.source, grad.data[k]);
        }
    }
    eprintln!("worst component error {worst:.3e}");
}
