//! Source-side confidence estimation for neural machine translation.
//!
//! A small encoder-decoder transformer is trained from scratch; each source
//! word is scored by how sensitive the probability of the translation is to
//! its embedding, and the scores are compared against attention- and
//! alignment-projected decoder probabilities under an LLM-annotator
//! evaluation protocol. A nearest-neighbour index over encoder states
//! proposes replacements for words flagged as risky.

pub mod annotator;
pub mod attribution;
pub mod checkpoint;
pub mod corpus;
pub mod decode;
pub mod error;
pub mod evaluation;
pub mod exec;
pub mod model;
pub mod pipeline;
pub mod suggestions;
pub mod synthetic;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use checkpoint::Checkpoint;
pub use decode::{Decoding, Translation};
pub use error::{Error, Result};
pub use exec::Execution;
pub use model::{AttentionTensor, GradientOptions, ModelConfig, SequenceScore, Transformer};
pub use tokenizer::{SubwordModel, TokenizedSentence};
