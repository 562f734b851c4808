//! On-disk checkpoints: a directory holding `config.json` (format tag,
//! architecture, training metadata), `weights.bin` and `subwords.json`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Transformer};
use crate::tensor::Mat;
use crate::tokenizer::{SubwordModel, TokenizedSentence};

pub const CHECKPOINT_FORMAT: &str = "sourceconf-checkpoint/1";
const WEIGHTS_MAGIC: &[u8; 8] = b"SCWT0001";

pub const CONFIG_FILE: &str = "config.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const SUBWORDS_FILE: &str = "subwords.json";
/// Written by evaluation runs; holds the served decision threshold.
pub const CALIBRATION_FILE: &str = "calibration.json";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub steps: usize,
    pub epochs: usize,
    pub seed: u64,
    pub corpus_id: String,
    pub train_pairs: usize,
    pub validation_pairs: usize,
    pub initial_validation_perplexity: f64,
    pub final_validation_perplexity: f64,
}

#[derive(Serialize, Deserialize)]
struct ConfigFile {
    format: String,
    model: ModelConfig,
    training: TrainingMeta,
}

/// Decision threshold chosen by an evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub method: String,
    pub threshold: f64,
    pub max_f1: f64,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Transformer,
    pub subwords: SubwordModel,
    pub meta: TrainingMeta,
}

pub fn encode_weights(model: &Transformer) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + model.num_parameters() * 8);
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for (name, mat) in model.names().iter().zip(model.params()) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(mat.rows as u32).to_le_bytes());
        out.extend_from_slice(&(mat.cols as u32).to_le_bytes());
        for v in &mat.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let slice = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(slice)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }
}

pub fn decode_weights(bytes: &[u8], path: &Path) -> Result<Vec<(String, Mat)>> {
    let truncated = || Error::format(path, "truncated weights payload");
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8) != Some(WEIGHTS_MAGIC.as_slice()) {
        return Err(Error::format(path, "bad weights magic"));
    }
    let count = r.u32().ok_or_else(truncated)?;
    let mut tensors = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = r.u32().ok_or_else(truncated)? as usize;
        let name = std::str::from_utf8(r.take(len).ok_or_else(truncated)?)
            .map_err(|_| Error::format(path, "tensor name is not UTF-8"))?
            .to_string();
        let rows = r.u32().ok_or_else(truncated)? as usize;
        let cols = r.u32().ok_or_else(truncated)? as usize;
        let raw = r.take(rows * cols * 8).ok_or_else(truncated)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push((name, Mat::from_vec(rows, cols, data)));
    }
    if r.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after weights"));
    }
    Ok(tensors)
}

impl Checkpoint {
    /// Short content hash of the weights payload.
    pub fn id(&self) -> String {
        let digest = Sha256::digest(encode_weights(&self.model));
        hex::encode(&digest[..8])
    }

    pub fn tokenize(&self, text: &str) -> Result<TokenizedSentence> {
        let sentence = self.subwords.tokenize(text)?;
        self.model.validate_ids(&sentence.token_ids, "source")?;
        Ok(sentence)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let config = ConfigFile {
            format: CHECKPOINT_FORMAT.to_string(),
            model: self.model.config().clone(),
            training: self.meta.clone(),
        };
        let config_path = dir.join(CONFIG_FILE);
        let json = serde_json::to_string_pretty(&config).expect("config serializes");
        std::fs::write(&config_path, json).map_err(|e| Error::io(&config_path, e))?;
        let weights_path = dir.join(WEIGHTS_FILE);
        std::fs::write(&weights_path, encode_weights(&self.model)).map_err(|e| Error::io(&weights_path, e))?;
        self.subwords.save(&dir.join(SUBWORDS_FILE))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let config_path = dir.join(CONFIG_FILE);
        let raw = std::fs::read_to_string(&config_path).map_err(|e| Error::io(&config_path, e))?;
        let config: ConfigFile =
            serde_json::from_str(&raw).map_err(|e| Error::format(&config_path, e.to_string()))?;
        if config.format != CHECKPOINT_FORMAT {
            return Err(Error::format(&config_path, format!("unsupported format {}", config.format)));
        }
        let weights_path = dir.join(WEIGHTS_FILE);
        let bytes = std::fs::read(&weights_path).map_err(|e| Error::io(&weights_path, e))?;
        let tensors = decode_weights(&bytes, &weights_path)?;
        let model = Transformer::from_tensors(config.model, tensors)?;
        let subwords = SubwordModel::load(&dir.join(SUBWORDS_FILE))?;
        if subwords.vocab_size() != model.config().vocab_size {
            return Err(Error::Config(format!(
                "subword model has {} entries but the network expects {}",
                subwords.vocab_size(),
                model.config().vocab_size
            )));
        }
        Ok(Self { model, subwords, meta: config.training })
    }

    pub fn load_calibration(dir: &Path) -> Result<Option<Calibration>> {
        let path = dir.join(CALIBRATION_FILE);
        if !path.exists() {
            return Ok(None);
        }
        let raw = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&raw).map(Some).map_err(|e| Error::format(&path, e.to_string()))
    }

    pub fn save_calibration(dir: &Path, calibration: &Calibration) -> Result<()> {
        let path = dir.join(CALIBRATION_FILE);
        let json = serde_json::to_string_pretty(calibration).expect("calibration serializes");
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::train_subwords;

    fn checkpoint() -> Checkpoint {
        let subwords = train_subwords(&["a small corpus", "another line"], 40).unwrap();
        let model = Transformer::new(ModelConfig::tiny(subwords.vocab_size()), 3).unwrap();
        Checkpoint { model, subwords, meta: TrainingMeta { seed: 3, ..Default::default() } }
    }

    #[test]
    fn resave_is_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = checkpoint();
        ckpt.save(dir.path()).unwrap();
        let first = std::fs::read(dir.path().join(WEIGHTS_FILE)).unwrap();
        let loaded = Checkpoint::load(dir.path()).unwrap();
        let other = tempfile::tempdir().unwrap();
        loaded.save(other.path()).unwrap();
        let second = std::fs::read(other.path().join(WEIGHTS_FILE)).unwrap();
        assert_eq!(first, second);
        assert_eq!(ckpt.id(), loaded.id());
        assert_eq!(loaded.meta, ckpt.meta);
    }

    #[test]
    fn truncated_weights_rejected() {
        let dir = tempfile::tempdir().unwrap();
        checkpoint().save(dir.path()).unwrap();
        let path = dir.path().join(WEIGHTS_FILE);
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(Checkpoint::load(dir.path()), Err(Error::Format { .. })));
    }

    #[test]
    fn calibration_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        assert!(Checkpoint::load_calibration(dir.path()).unwrap().is_none());
        let cal = Calibration { method: "gradient".into(), threshold: 8.38, max_f1: 0.19 };
        Checkpoint::save_calibration(dir.path(), &cal).unwrap();
        assert_eq!(Checkpoint::load_calibration(dir.path()).unwrap(), Some(cal));
    }
}
