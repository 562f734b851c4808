//! Teacher-forced training with Adam.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{Checkpoint, TrainingMeta};
use crate::corpus::SentencePair;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::{scored_targets, ModelConfig, Transformer, DEFAULT_MAX_LEN};
use crate::tensor::Mat;
use crate::tokenizer::{train_subwords, SubwordModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub max_len: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub clip_norm: f64,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            vocab_size: 1000,
            d_model: 32,
            n_heads: 2,
            d_ff: 64,
            encoder_layers: 2,
            decoder_layers: 2,
            max_len: DEFAULT_MAX_LEN,
            epochs: 10,
            batch_size: 32,
            learning_rate: 3e-3,
            warmup_steps: 100,
            clip_norm: 1.0,
            validation_fraction: 0.05,
            seed: 1,
        }
    }
}

impl TrainConfig {
    fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            encoder_layers: self.encoder_layers,
            decoder_layers: self.decoder_layers,
            max_len: self.max_len,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub epoch_losses: Vec<f64>,
    pub initial_validation_perplexity: f64,
    pub final_validation_perplexity: f64,
    /// Perplexity of the uniform distribution over the vocabulary, i.e. a
    /// cross-entropy of `ln(vocab_size)`.
    pub uniform_perplexity: f64,
}

pub(crate) struct Example {
    source: Vec<u32>,
    targets: Vec<u32>,
}

pub fn corpus_id(pairs: &[SentencePair]) -> String {
    let mut h = Sha256::new();
    for p in pairs {
        h.update(p.source.as_bytes());
        h.update([0]);
        h.update(p.target.as_bytes());
        h.update([1]);
    }
    hex::encode(&h.finalize()[..8])
}

/// Summed negative log-likelihood of one pair and its gradients.
fn example_gradients(model: &Transformer, ex: &Example) -> (Vec<Mat>, f64) {
    let trace = model.forward(&ex.source, &ex.targets, true);
    let mut g = trace.graph;
    let total = g.sum(trace.target_log_probs);
    let log_lik = g.value(total).data[0];
    let mut grads = g.backward(total);
    let per_param = trace
        .params
        .iter()
        .zip(model.params())
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Mat::zeros(p.rows, p.cols)))
        .collect();
    (per_param, -log_lik)
}

fn perplexity(model: &Transformer, examples: &[Example], exec: Execution) -> f64 {
    let nll: Vec<(f64, usize)> = exec.map(examples, |ex| {
        let trace = model.forward(&ex.source, &ex.targets, false);
        let lp: f64 = trace.graph.value(trace.target_log_probs).data.iter().sum();
        (-lp, ex.targets.len())
    });
    let (total, tokens) = nll.iter().fold((0.0, 0usize), |(a, b), (n, t)| (a + n, b + t));
    (total / tokens.max(1) as f64).exp()
}

/// Linear warmup, then linear decay to a tenth of the peak rate.
fn schedule(step: usize, warmup: usize, total: usize) -> f64 {
    if step < warmup {
        return (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1) as f64;
    let progress = ((step - warmup) as f64 / span).min(1.0);
    1.0 - 0.9 * progress
}

struct Adam {
    m: Vec<Mat>,
    v: Vec<Mat>,
    step: usize,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.98;
    const EPS: f64 = 1e-9;

    fn new(params: &[Mat]) -> Self {
        let zeros: Vec<Mat> = params.iter().map(|p| Mat::zeros(p.rows, p.cols)).collect();
        Self { m: zeros.clone(), v: zeros, step: 0 }
    }

    fn update(&mut self, params: &mut [Mat], grads: &[Mat], lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.step as i32);
        let bc2 = 1.0 - Self::BETA2.powi(self.step as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = Self::BETA1 * m.data[i] + (1.0 - Self::BETA1) * gi;
                v.data[i] = Self::BETA2 * v.data[i] + (1.0 - Self::BETA2) * gi * gi;
                let mh = m.data[i] / bc1;
                let vh = v.data[i] / bc2;
                p.data[i] -= lr * mh / (vh.sqrt() + Self::EPS);
            }
        }
    }
}

pub(crate) fn encode_pairs(
    subwords: &SubwordModel,
    pairs: &[SentencePair],
    max_len: usize,
) -> Result<Vec<Example>> {
    let mut out = Vec::with_capacity(pairs.len());
    for p in pairs {
        if p.source.trim().is_empty() || p.target.trim().is_empty() {
            continue;
        }
        let source = subwords.tokenize(&p.source)?.token_ids;
        let targets = scored_targets(&subwords.tokenize(&p.target)?.token_ids);
        if source.len() <= max_len && targets.len() <= max_len {
            out.push(Example { source, targets });
        }
    }
    Ok(out)
}

/// Trains a shared subword model and a transformer on `pairs`.
pub fn train_model(pairs: &[SentencePair], config: &TrainConfig, exec: Execution) -> Result<(Checkpoint, TrainReport)> {
    if pairs.is_empty() {
        return Err(Error::Validation("training corpus is empty".into()));
    }
    if config.batch_size == 0 || config.epochs == 0 {
        return Err(Error::Config("batch_size and epochs must be positive".into()));
    }
    let lines: Vec<&str> = pairs.iter().flat_map(|p| [p.source.as_str(), p.target.as_str()]).collect();
    let subwords = train_subwords(&lines, config.vocab_size)?;
    let model = Transformer::new(config.model_config(subwords.vocab_size()), config.seed)?;
    train_with(model, subwords, pairs, config, exec)
}

/// Continues training `model` under an existing subword model.
pub fn train_with(
    mut model: Transformer,
    subwords: SubwordModel,
    pairs: &[SentencePair],
    config: &TrainConfig,
    exec: Execution,
) -> Result<(Checkpoint, TrainReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut examples = encode_pairs(&subwords, pairs, model.config().max_len)?;
    if examples.is_empty() {
        return Err(Error::Validation("no usable sentence pairs in the training corpus".into()));
    }
    examples.shuffle(&mut rng);
    let n_val = if examples.len() < 2 {
        0
    } else {
        ((examples.len() as f64 * config.validation_fraction).round() as usize).clamp(1, examples.len() - 1)
    };
    let validation: Vec<Example> = examples.drain(..n_val).collect();
    let val_set = if validation.is_empty() { &examples } else { &validation };

    let initial_ppl = perplexity(&model, val_set, exec);
    let mut adam = Adam::new(model.params());
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let total_steps = config.epochs * examples.len().div_ceil(config.batch_size);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_nll = 0.0;
        let mut epoch_tokens = 0usize;
        for batch in order.chunks(config.batch_size) {
            let results = exec.map(batch, |&i| example_gradients(&model, &examples[i]));
            let tokens: usize = batch.iter().map(|&i| examples[i].targets.len()).sum();
            let mut grads: Vec<Mat> = model.params().iter().map(|p| Mat::zeros(p.rows, p.cols)).collect();
            let mut batch_nll = 0.0;
            for (example_grads, nll) in results {
                batch_nll += nll;
                for (acc, g) in grads.iter_mut().zip(&example_grads) {
                    acc.add_assign(g);
                }
            }
            if !batch_nll.is_finite() {
                return Err(Error::Numerical {
                    position: adam.step,
                    message: format!("non-finite training loss in epoch {epoch} at step {}", adam.step),
                });
            }
            // ascent direction on log-likelihood -> descent on mean NLL
            let scale = -1.0 / tokens as f64;
            let mut norm_sq = 0.0;
            for g in &mut grads {
                g.scale(scale);
                norm_sq += g.data.iter().map(|v| v * v).sum::<f64>();
            }
            let norm = norm_sq.sqrt();
            if config.clip_norm > 0.0 && norm > config.clip_norm {
                grads.iter_mut().for_each(|g| g.scale(config.clip_norm / norm));
            }
            let lr = config.learning_rate * schedule(adam.step, config.warmup_steps, total_steps);
            adam.update(model.params_mut(), &grads, lr);
            epoch_nll += batch_nll;
            epoch_tokens += tokens;
        }
        let mean = epoch_nll / epoch_tokens.max(1) as f64;
        log::info!("epoch {} mean token loss {:.4}", epoch + 1, mean);
        epoch_losses.push(mean);
    }
    let final_ppl = perplexity(&model, val_set, exec);
    let meta = TrainingMeta {
        steps: adam.step,
        epochs: config.epochs,
        seed: config.seed,
        corpus_id: corpus_id(pairs),
        train_pairs: examples.len(),
        validation_pairs: validation.len(),
        initial_validation_perplexity: initial_ppl,
        final_validation_perplexity: final_ppl,
    };
    let report = TrainReport {
        steps: adam.step,
        epoch_losses,
        initial_validation_perplexity: initial_ppl,
        final_validation_perplexity: final_ppl,
        uniform_perplexity: model.config().vocab_size as f64,
    };
    Ok((Checkpoint { model, subwords, meta }, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_corpus_is_validation_error() {
        let err = train_model(&[], &TrainConfig::default(), Execution::Sequential).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn loss_decreases_and_is_reproducible() {
        let pairs: Vec<SentencePair> = (0..40)
            .map(|i| SentencePair { source: format!("w{} w{}", i % 7, i % 5), target: format!("v{} v{}", i % 7, i % 5) })
            .collect();
        let config = TrainConfig { vocab_size: 60, epochs: 3, batch_size: 8, warmup_steps: 5, ..Default::default() };
        let (a, ra) = train_model(&pairs, &config, Execution::Parallel).unwrap();
        let (b, rb) = train_model(&pairs, &config, Execution::Sequential).unwrap();
        assert!(ra.final_validation_perplexity < ra.initial_validation_perplexity);
        assert_eq!(a.id(), b.id());
        assert_eq!(ra.epoch_losses, rb.epoch_losses);
    }
}
