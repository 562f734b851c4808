//! Pre-layer-norm encoder-decoder transformer.
//!
//! Source and target share one subword vocabulary and one embedding table.
//! The source token embeddings (table lookup, before positional encodings
//! are added) can be exposed as a gradient leaf, which is what
//! [`Transformer::input_embedding_gradient`] differentiates against.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{AttnMask, Graph, Mat, Var};
use crate::tokenizer::{BOS, EOS, PAD};

pub const DEFAULT_MAX_LEN: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
}

fn default_max_len() -> usize {
    DEFAULT_MAX_LEN
}

impl ModelConfig {
    /// Two encoder and two decoder layers, `d_model = 32`, two heads.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 32,
            n_heads: 2,
            d_ff: 64,
            encoder_layers: 2,
            decoder_layers: 2,
            max_len: DEFAULT_MAX_LEN,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size <= crate::tokenizer::NUM_SPECIAL {
            return Err(Error::Config("vocabulary holds only special tokens".into()));
        }
        if self.encoder_layers == 0 || self.decoder_layers == 0 {
            return Err(Error::Config("need at least one encoder and one decoder layer".into()));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Teacher-forced score of a target sequence (natural logs).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceScore {
    pub total_log_prob: f64,
    pub per_token_log_probs: Vec<f64>,
    pub per_token_probs: Vec<f64>,
}

impl SequenceScore {
    pub fn probability(&self) -> f64 {
        self.total_log_prob.exp()
    }
}

/// Cross-attention weights indexed `[layer, head, target_pos, source_pos]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionTensor {
    pub layers: usize,
    pub heads: usize,
    pub target_len: usize,
    pub source_len: usize,
    pub values: Vec<f64>,
}

impl AttentionTensor {
    pub fn get(&self, layer: usize, head: usize, target: usize, source: usize) -> f64 {
        self.values[((layer * self.heads + head) * self.target_len + target) * self.source_len + source]
    }

    /// Mean over layers and heads, `target_len x source_len`.
    pub fn averaged(&self) -> Mat {
        let mut out = Mat::zeros(self.target_len, self.source_len);
        let block = self.target_len * self.source_len;
        for chunk in self.values.chunks(block) {
            for (o, v) in out.data.iter_mut().zip(chunk) {
                *o += v;
            }
        }
        out.scale(1.0 / (self.layers * self.heads) as f64);
        out
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct GradientOptions {
    /// Differentiate `log P` instead of `P`.
    pub log_space: bool,
    /// Cut the encoder output out of the backward pass (sanity harness).
    pub stop_encoder: bool,
}

#[derive(Debug, Clone)]
struct AttnParams {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
}

#[derive(Debug, Clone)]
struct FfnParams {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone)]
struct Norm {
    gain: usize,
    bias: usize,
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    ln_attn: Norm,
    attn: AttnParams,
    ln_ffn: Norm,
    ffn: FfnParams,
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    ln_self: Norm,
    self_attn: AttnParams,
    ln_cross: Norm,
    cross_attn: AttnParams,
    ln_ffn: Norm,
    ffn: FfnParams,
}

#[derive(Debug, Clone)]
struct Layout {
    embed: usize,
    encoder: Vec<EncoderLayer>,
    encoder_norm: Norm,
    decoder: Vec<DecoderLayer>,
    decoder_norm: Norm,
    out_w: usize,
    out_b: usize,
}

#[derive(Clone, Copy)]
enum Init {
    Normal(f64),
    Xavier,
    Uniform(f64),
    Zeros,
    Ones,
}

#[derive(Default)]
struct LayoutBuilder {
    shapes: Vec<(String, usize, usize, Init)>,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, rows: usize, cols: usize, init: Init) -> usize {
        self.shapes.push((name, rows, cols, init));
        self.shapes.len() - 1
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Norm {
        Norm {
            gain: self.add(format!("{prefix}.gain"), 1, d, Init::Ones),
            bias: self.add(format!("{prefix}.bias"), 1, d, Init::Zeros),
        }
    }

    fn attn(&mut self, prefix: &str, d: usize) -> AttnParams {
        let mut lin = |n: &str| {
            (
                self.add(format!("{prefix}.{n}.weight"), d, d, Init::Xavier),
                self.add(format!("{prefix}.{n}.bias"), 1, d, Init::Zeros),
            )
        };
        let (wq, bq) = lin("query");
        let (wk, bk) = lin("key");
        let (wv, bv) = lin("value");
        let (wo, bo) = lin("output");
        AttnParams { wq, bq, wk, bk, wv, bv, wo, bo }
    }

    fn ffn(&mut self, prefix: &str, d: usize, d_ff: usize) -> FfnParams {
        FfnParams {
            w1: self.add(format!("{prefix}.ffn.in.weight"), d, d_ff, Init::Xavier),
            b1: self.add(format!("{prefix}.ffn.in.bias"), 1, d_ff, Init::Zeros),
            w2: self.add(format!("{prefix}.ffn.out.weight"), d_ff, d, Init::Xavier),
            b2: self.add(format!("{prefix}.ffn.out.bias"), 1, d, Init::Zeros),
        }
    }
}

fn build_layout(config: &ModelConfig) -> (Layout, Vec<(String, usize, usize, Init)>) {
    let d = config.d_model;
    let mut b = LayoutBuilder::default();
    let embed = b.add("embedding".into(), config.vocab_size, d, Init::Normal(1.0));
    let encoder = (0..config.encoder_layers)
        .map(|l| {
            let p = format!("encoder.{l}");
            EncoderLayer {
                ln_attn: b.norm(&format!("{p}.ln_attn"), d),
                attn: b.attn(&format!("{p}.attn"), d),
                ln_ffn: b.norm(&format!("{p}.ln_ffn"), d),
                ffn: b.ffn(&p, d, config.d_ff),
            }
        })
        .collect();
    let encoder_norm = b.norm("encoder.ln_final", d);
    let decoder = (0..config.decoder_layers)
        .map(|l| {
            let p = format!("decoder.{l}");
            DecoderLayer {
                ln_self: b.norm(&format!("{p}.ln_self"), d),
                self_attn: b.attn(&format!("{p}.self_attn"), d),
                ln_cross: b.norm(&format!("{p}.ln_cross"), d),
                cross_attn: b.attn(&format!("{p}.cross_attn"), d),
                ln_ffn: b.norm(&format!("{p}.ln_ffn"), d),
                ffn: b.ffn(&p, d, config.d_ff),
            }
        })
        .collect();
    let decoder_norm = b.norm("decoder.ln_final", d);
    let out_w = b.add("output.weight".into(), d, config.vocab_size, Init::Uniform(0.02));
    let out_b = b.add("output.bias".into(), 1, config.vocab_size, Init::Zeros);
    let layout = Layout { embed, encoder, encoder_norm, decoder, decoder_norm, out_w, out_b };
    (layout, b.shapes)
}

fn sample_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Sinusoidal position encodings, `len x d`.
pub fn positional_encoding(len: usize, d: usize) -> Mat {
    let mut pe = Mat::zeros(len, d);
    for pos in 0..len {
        let row = pe.row_mut(pos);
        for i in 0..d {
            let exponent = (2 * (i / 2)) as f64 / d as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            row[i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

#[derive(Debug, Clone)]
pub struct Transformer {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Mat>,
    layout: Layout,
}

/// A forward pass recorded on a tape.
pub struct Trace<'m> {
    pub graph: Graph<'m>,
    pub params: Vec<Var>,
    /// Source token embeddings (before positional encodings).
    pub source_embedding: Var,
    pub encoder_output: Var,
    /// Cross-attention weights per decoder layer, per head.
    pub cross_attention: Vec<Vec<Var>>,
    /// `m x 1` log-probabilities of the realized target tokens.
    pub target_log_probs: Var,
}

#[derive(Clone, Copy)]
enum SourceEmbedding<'a> {
    Table,
    Leaf,
    Given(&'a Mat),
}

struct TraceSpec<'a> {
    source: &'a [u32],
    decoder_input: &'a [u32],
    targets: &'a [u32],
    trainable: bool,
    source_leaf: bool,
    stop_encoder: bool,
}

impl Transformer {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, shapes) = build_layout(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::with_capacity(shapes.len());
        let mut params = Vec::with_capacity(shapes.len());
        for (name, rows, cols, init) in shapes {
            let n = rows * cols;
            let data = match init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Normal(std) => (0..n).map(|_| std * sample_normal(&mut rng)).collect(),
                Init::Uniform(limit) => (0..n).map(|_| rng.random_range(-limit..limit)).collect(),
                Init::Xavier => {
                    let limit = (6.0 / (rows + cols) as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-limit..limit)).collect()
                }
            };
            names.push(name);
            params.push(Mat::from_vec(rows, cols, data));
        }
        Ok(Self { config, names, params, layout })
    }

    /// Rebuilds a model from named tensors, checking every shape.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<(String, Mat)>) -> Result<Self> {
        config.validate()?;
        let (layout, shapes) = build_layout(&config);
        if shapes.len() != tensors.len() {
            return Err(Error::Config(format!(
                "expected {} tensors, found {}",
                shapes.len(),
                tensors.len()
            )));
        }
        let mut names = Vec::with_capacity(shapes.len());
        let mut params = Vec::with_capacity(shapes.len());
        for ((name, rows, cols, _), (tname, mat)) in shapes.into_iter().zip(tensors) {
            if name != tname || mat.shape() != (rows, cols) {
                return Err(Error::Config(format!(
                    "tensor {tname} {:?} does not match expected {name} ({rows}, {cols})",
                    mat.shape()
                )));
            }
            names.push(name);
            params.push(mat);
        }
        Ok(Self { config, names, params, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Mat] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Mat] {
        &mut self.params
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn validate_ids(&self, ids: &[u32], what: &str) -> Result<()> {
        self.validate_ids_within(ids, what, self.config.max_len)
    }

    fn validate_ids_within(&self, ids: &[u32], what: &str, limit: usize) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::Validation(format!("{what} sequence is empty")));
        }
        if let Some(pos) = ids.iter().position(|&id| id as usize >= self.config.vocab_size) {
            return Err(Error::Validation(format!(
                "{what} token id {} at position {pos} is outside the vocabulary of {}",
                ids[pos], self.config.vocab_size
            )));
        }
        if ids.len() > limit {
            return Err(Error::Validation(format!(
                "{what} has {} subwords, more than the maximum of {limit}",
                ids.len(),
            )));
        }
        Ok(())
    }

    fn attention<'m>(
        &self,
        g: &mut Graph<'m>,
        p: &[Var],
        a: &AttnParams,
        queries: Var,
        memory: Var,
        mask: &AttnMask,
    ) -> (Var, Vec<Var>) {
        let dk = self.config.head_dim();
        let q = g.matmul(queries, p[a.wq]);
        let q = g.add_row(q, p[a.bq]);
        let k = g.matmul(memory, p[a.wk]);
        let k = g.add_row(k, p[a.bk]);
        let v = g.matmul(memory, p[a.wv]);
        let v = g.add_row(v, p[a.bv]);
        let scale = 1.0 / (dk as f64).sqrt();
        let mut heads = Vec::with_capacity(self.config.n_heads);
        let mut weights = Vec::with_capacity(self.config.n_heads);
        for h in 0..self.config.n_heads {
            let (s, e) = (h * dk, (h + 1) * dk);
            let qh = g.slice_cols(q, s, e);
            let kh = g.slice_cols(k, s, e);
            let vh = g.slice_cols(v, s, e);
            let scores = g.matmul_t(qh, kh);
            let scores = g.scale(scores, scale);
            let w = g.softmax(scores, mask.clone());
            heads.push(g.matmul(w, vh));
            weights.push(w);
        }
        let joined = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads) };
        let out = g.matmul(joined, p[a.wo]);
        (g.add_row(out, p[a.bo]), weights)
    }

    fn feed_forward<'m>(&self, g: &mut Graph<'m>, p: &[Var], f: &FfnParams, x: Var) -> Var {
        let h = g.matmul(x, p[f.w1]);
        let h = g.add_row(h, p[f.b1]);
        let h = g.gelu(h);
        let o = g.matmul(h, p[f.w2]);
        g.add_row(o, p[f.b2])
    }

    fn norm<'m>(&self, g: &mut Graph<'m>, p: &[Var], n: &Norm, x: Var) -> Var {
        g.layer_norm(x, p[n.gain], p[n.bias])
    }

    fn source_mask(source: &[u32]) -> AttnMask {
        let keys: Vec<bool> = source.iter().map(|&id| id != PAD).collect();
        AttnMask { causal: false, keys: if keys.iter().all(|&k| k) { None } else { Some(keys) } }
    }

    fn bind_params<'m>(&'m self, g: &mut Graph<'m>, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|m| if trainable { g.leaf_ref(m) } else { g.constant_ref(m) })
            .collect()
    }

    fn embed<'m>(&'m self, g: &mut Graph<'m>, p: &[Var], ids: &[u32], source: SourceEmbedding) -> (Var, Var) {
        let tokens = match source {
            SourceEmbedding::Table => {
                let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
                g.gather(p[self.layout.embed], &idx)
            }
            SourceEmbedding::Leaf => g.leaf(self.token_embeddings(ids)),
            SourceEmbedding::Given(m) => g.constant(m.clone()),
        };
        let pe = g.constant(positional_encoding(ids.len(), self.config.d_model));
        (tokens, g.add(tokens, pe))
    }

    fn encode_on<'m>(
        &'m self,
        g: &mut Graph<'m>,
        p: &[Var],
        source: &[u32],
        embedding: SourceEmbedding<'_>,
    ) -> (Var, Var) {
        let mask = Self::source_mask(source);
        let (tokens, mut x) = self.embed(g, p, source, embedding);
        for layer in &self.layout.encoder {
            let h = self.norm(g, p, &layer.ln_attn, x);
            let (a, _) = self.attention(g, p, &layer.attn, h, h, &mask);
            x = g.add(x, a);
            let h = self.norm(g, p, &layer.ln_ffn, x);
            let f = self.feed_forward(g, p, &layer.ffn, h);
            x = g.add(x, f);
        }
        (tokens, self.norm(g, p, &self.layout.encoder_norm, x))
    }

    fn decode_on<'m>(
        &'m self,
        g: &mut Graph<'m>,
        p: &[Var],
        memory: Var,
        source: &[u32],
        decoder_input: &[u32],
    ) -> (Var, Vec<Vec<Var>>) {
        let src_mask = Self::source_mask(source);
        let causal = AttnMask { causal: true, keys: None };
        let (_, mut y) = self.embed(g, p, decoder_input, SourceEmbedding::Table);
        let mut cross = Vec::with_capacity(self.layout.decoder.len());
        for layer in &self.layout.decoder {
            let h = self.norm(g, p, &layer.ln_self, y);
            let (a, _) = self.attention(g, p, &layer.self_attn, h, h, &causal);
            y = g.add(y, a);
            let h = self.norm(g, p, &layer.ln_cross, y);
            let (c, w) = self.attention(g, p, &layer.cross_attn, h, memory, &src_mask);
            cross.push(w);
            y = g.add(y, c);
            let h = self.norm(g, p, &layer.ln_ffn, y);
            let f = self.feed_forward(g, p, &layer.ffn, h);
            y = g.add(y, f);
        }
        (self.norm(g, p, &self.layout.decoder_norm, y), cross)
    }

    fn trace<'m>(&'m self, spec: TraceSpec<'_>) -> Trace<'m> {
        let mut g = Graph::new();
        let p = self.bind_params(&mut g, spec.trainable);
        let embedding = if spec.source_leaf { SourceEmbedding::Leaf } else { SourceEmbedding::Table };
        let (source_embedding, mut memory) = self.encode_on(&mut g, &p, spec.source, embedding);
        if spec.stop_encoder {
            memory = g.stop_grad(memory);
        }
        let (hidden, cross_attention) = self.decode_on(&mut g, &p, memory, spec.source, spec.decoder_input);
        let logits = g.matmul(hidden, p[self.layout.out_w]);
        let logits = g.add_row(logits, p[self.layout.out_b]);
        let targets: Vec<usize> = spec.targets.iter().map(|&t| t as usize).collect();
        let target_log_probs = g.log_softmax_pick(logits, &targets);
        Trace { graph: g, params: p, source_embedding, encoder_output: memory, cross_attention, target_log_probs }
    }

    /// Teacher-forced pass over `(source, targets)` where `targets` ends with
    /// `</s>`; the decoder is fed `<s>` followed by all but the last target.
    pub fn forward(&self, source: &[u32], targets: &[u32], trainable: bool) -> Trace<'_> {
        let decoder_input = decoder_input(targets);
        self.trace(TraceSpec {
            source,
            decoder_input: &decoder_input,
            targets,
            trainable,
            source_leaf: false,
            stop_encoder: false,
        })
    }

    fn check_pair(&self, source: &[u32], targets: &[u32]) -> Result<()> {
        self.validate_ids(source, "source")?;
        // decoder output may run to twice the input limit before truncation
        self.validate_ids_within(targets, "target", 2 * self.config.max_len + 1)
    }

    pub fn sequence_score(&self, source: &[u32], targets: &[u32]) -> Result<SequenceScore> {
        self.check_pair(source, targets)?;
        let trace = self.forward(source, targets, false);
        let per_token_log_probs = trace.graph.value(trace.target_log_probs).data.clone();
        let per_token_probs = per_token_log_probs.iter().map(|lp| lp.exp()).collect();
        Ok(SequenceScore {
            total_log_prob: per_token_log_probs.iter().sum(),
            per_token_log_probs,
            per_token_probs,
        })
    }

    pub fn cross_attention(&self, source: &[u32], targets: &[u32]) -> Result<AttentionTensor> {
        self.check_pair(source, targets)?;
        let trace = self.forward(source, targets, false);
        let mut values = Vec::with_capacity(
            self.config.decoder_layers * self.config.n_heads * targets.len() * source.len(),
        );
        for layer in &trace.cross_attention {
            for &head in layer {
                values.extend_from_slice(&trace.graph.value(head).data);
            }
        }
        Ok(AttentionTensor {
            layers: self.config.decoder_layers,
            heads: self.config.n_heads,
            target_len: targets.len(),
            source_len: source.len(),
            values,
        })
    }

    /// Final encoder layer states, `n x d`.
    pub fn encoder_states(&self, source: &[u32]) -> Result<Mat> {
        self.validate_ids(source, "source")?;
        let mut g = Graph::new();
        let p = self.bind_params(&mut g, false);
        let (_, out) = self.encode_on(&mut g, &p, source, SourceEmbedding::Table);
        Ok(g.value(out).clone())
    }

    /// Gradient of `P(targets | source)` (or `log P`) with respect to each
    /// source token embedding, `n x d`.
    pub fn input_embedding_gradient(
        &self,
        source: &[u32],
        targets: &[u32],
        options: GradientOptions,
    ) -> Result<Mat> {
        self.check_pair(source, targets)?;
        let decoder_input = decoder_input(targets);
        let trace = self.trace(TraceSpec {
            source,
            decoder_input: &decoder_input,
            targets,
            trainable: false,
            source_leaf: true,
            stop_encoder: options.stop_encoder,
        });
        let mut g = trace.graph;
        let total = g.sum(trace.target_log_probs);
        let objective = if options.log_space { total } else { g.exp(total) };
        let mut grads = g.backward(objective);
        let grad = grads
            .take(trace.source_embedding)
            .unwrap_or_else(|| Mat::zeros(source.len(), self.config.d_model));
        if let Some(bad) = grad.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical {
                position: bad / self.config.d_model,
                message: "non-finite input-embedding gradient".into(),
            });
        }
        Ok(grad)
    }

    /// `P` (or `log P`) evaluated with externally supplied source token
    /// embeddings; the finite-difference side of the gradient check.
    pub fn objective_with_embeddings(
        &self,
        source: &[u32],
        source_embeddings: &Mat,
        targets: &[u32],
        log_space: bool,
    ) -> f64 {
        let mut g = Graph::new();
        let p = self.bind_params(&mut g, false);
        let (_, memory) = self.encode_on(&mut g, &p, source, SourceEmbedding::Given(source_embeddings));
        let dec_in = decoder_input(targets);
        let (hidden, _) = self.decode_on(&mut g, &p, memory, source, &dec_in);
        let logits = g.matmul(hidden, p[self.layout.out_w]);
        let logits = g.add_row(logits, p[self.layout.out_b]);
        let t: Vec<usize> = targets.iter().map(|&x| x as usize).collect();
        let lp = g.log_softmax_pick(logits, &t);
        let total: f64 = g.value(lp).data.iter().sum();
        if log_space {
            total
        } else {
            total.exp()
        }
    }

    /// Raw token embeddings for `source`, `n x d`.
    pub fn token_embeddings(&self, source: &[u32]) -> Mat {
        let table = &self.params[self.layout.embed];
        let mut m = Mat::zeros(source.len(), self.config.d_model);
        for (r, &id) in source.iter().enumerate() {
            m.row_mut(r).copy_from_slice(table.row(id as usize));
        }
        m
    }

    /// Log-probabilities over the vocabulary for the token following
    /// `prefix` (which starts with `<s>`), given precomputed encoder states.
    pub fn next_token_log_probs(&self, memory: &Mat, source: &[u32], prefix: &[u32]) -> Vec<f64> {
        let mut g = Graph::new();
        let p = self.bind_params(&mut g, false);
        let mem = g.constant_ref(memory);
        let (hidden, _) = self.decode_on(&mut g, &p, mem, source, prefix);
        let h = g.value(hidden);
        let last = h.row(h.rows - 1);
        let w = &self.params[self.layout.out_w];
        let b = &self.params[self.layout.out_b];
        let mut logits = b.data.clone();
        for (k, &hv) in last.iter().enumerate() {
            for (l, wv) in logits.iter_mut().zip(w.row(k)) {
                *l += hv * wv;
            }
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        logits.iter_mut().for_each(|l| *l -= lse);
        logits
    }
}

/// `<s>` followed by every target except the last.
pub fn decoder_input(targets: &[u32]) -> Vec<u32> {
    std::iter::once(BOS).chain(targets.iter().copied().take(targets.len().saturating_sub(1))).collect()
}

/// Target ids as scored by the model: the sentence ids, closed with `</s>`.
pub fn scored_targets(ids: &[u32]) -> Vec<u32> {
    let mut t: Vec<u32> = ids.iter().copied().filter(|&id| id != BOS).collect();
    if t.last() != Some(&EOS) {
        t.push(EOS);
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> Transformer {
        Transformer::new(ModelConfig { max_len: 16, ..ModelConfig::tiny(20) }, 7).unwrap()
    }

    #[test]
    fn head_divisibility_enforced() {
        let cfg = ModelConfig { n_heads: 3, ..ModelConfig::tiny(20) };
        assert!(matches!(Transformer::new(cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn score_identities() {
        let m = model();
        let s = m.sequence_score(&[5, 6, 7], &[8, 9, EOS]).unwrap();
        assert_eq!(s.per_token_probs.len(), 3);
        let product: f64 = s.per_token_probs.iter().product();
        assert!((s.total_log_prob.exp() - product).abs() <= 1e-9 * product.max(1e-300));
        for (p, lp) in s.per_token_probs.iter().zip(&s.per_token_log_probs) {
            assert!((p - lp.exp()).abs() < 1e-9);
        }
    }

    #[test]
    fn untrained_model_is_near_uniform() {
        let m = model();
        let s = m.sequence_score(&[5, 6, 7, 8], &[9, 10, 11, EOS]).unwrap();
        let uniform = 1.0 / 20.0;
        for p in s.per_token_probs {
            assert!(p > uniform / 10.0 && p < uniform * 10.0, "p = {p}");
        }
    }

    #[test]
    fn attention_rows_normalized() {
        let m = model();
        let att = m.cross_attention(&[5, 6, 7, 8, 9], &[10, EOS]).unwrap();
        assert_eq!((att.layers, att.heads, att.target_len, att.source_len), (2, 2, 2, 5));
        for l in 0..2 {
            for h in 0..2 {
                for j in 0..2 {
                    let s: f64 = (0..5).map(|i| att.get(l, h, j, i)).sum();
                    assert!((s - 1.0).abs() < 1e-5);
                }
            }
        }
        let single = m.cross_attention(&[5, 6, 7], &[EOS]).unwrap();
        assert_eq!(single.target_len, 1);
    }

    #[test]
    fn out_of_vocabulary_rejected() {
        let m = model();
        assert!(matches!(m.sequence_score(&[5, 99], &[EOS]), Err(Error::Validation(_))));
        assert!(matches!(m.encoder_states(&[5; 17]), Err(Error::Validation(_))));
    }

    #[test]
    fn padding_gets_zero_gradient() {
        let m = model();
        let src = [5, 6, PAD, PAD];
        let g = m.input_embedding_gradient(&src, &[7, 8, EOS], GradientOptions::default()).unwrap();
        assert!(g.row(2).iter().chain(g.row(3)).all(|&v| v == 0.0));
        assert!(g.row(0).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn stop_gradient_blocks_encoder_path() {
        let m = model();
        let opts = GradientOptions { stop_encoder: true, ..Default::default() };
        let g = m.input_embedding_gradient(&[5, 6, 7], &[8, EOS], opts).unwrap();
        assert!(g.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encoder_states_shape_and_determinism() {
        let m = model();
        let a = m.encoder_states(&[5, 6, 7]).unwrap();
        let b = m.encoder_states(&[5, 6, 7]).unwrap();
        assert_eq!(a.shape(), (3, 32));
        assert_eq!(a, b);
    }

    #[test]
    fn objective_matches_scoring() {
        let m = model();
        let src = [5, 6, 7];
        let tgt = [8, 9, EOS];
        let emb = m.token_embeddings(&src);
        let p = m.objective_with_embeddings(&src, &emb, &tgt, false);
        let s = m.sequence_score(&src, &tgt).unwrap();
        assert!((p - s.probability()).abs() <= 1e-12 * p);
    }

    #[test]
    fn gradient_matches_finite_differences_quickly() {
        let m = model();
        let src = [5, 6, 7];
        let tgt = [8, EOS];
        let opts = GradientOptions { log_space: true, ..Default::default() };
        let grad = m.input_embedding_gradient(&src, &tgt, opts).unwrap();
        let base = m.token_embeddings(&src);
        let eps = 1e-5;
        for comp in [0usize, 17, 40, 95] {
            let mut plus = base.clone();
            plus.data[comp] += eps;
            let mut minus = base.clone();
            minus.data[comp] -= eps;
            let fd = (m.objective_with_embeddings(&src, &plus, &tgt, true)
                - m.objective_with_embeddings(&src, &minus, &tgt, true))
                / (2.0 * eps);
            assert!((fd - grad.data[comp]).abs() < 1e-6, "{comp}: {fd} vs {}", grad.data[comp]);
        }
    }
}
