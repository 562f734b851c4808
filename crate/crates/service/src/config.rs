use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sourceconf_core::attribution::{Aggregation, Norm};
use sourceconf_core::checkpoint::Checkpoint;
use sourceconf_core::{Decoding, Error, Result};

pub const ENV_PREFIX: &str = "SOURCECONF_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub checkpoint: Option<PathBuf>,
    pub index: Option<PathBuf>,
    pub norm: Norm,
    pub aggregation: Aggregation,
    /// Overrides the calibrated threshold stored with the checkpoint.
    pub threshold: Option<f64>,
    pub k: usize,
    pub max_input_chars: usize,
    pub bind: SocketAddr,
    pub max_concurrent_gradients: usize,
    pub decoding: Decoding,
    pub cors_origins: Vec<String>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            index: None,
            norm: Norm::L1,
            aggregation: Aggregation::Sum,
            threshold: None,
            k: 5,
            max_input_chars: 1000,
            bind: SocketAddr::from(([127, 0, 0, 1], 8080)),
            max_concurrent_gradients: 2,
            decoding: Decoding::Greedy,
            cors_origins: Vec::new(),
        }
    }
}

fn parse_env<T: std::str::FromStr>(name: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| Error::Config(format!("{ENV_PREFIX}{name}={value:?}: {e}")))
}

impl ServiceConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
        serde_json::from_str(&raw)
            .map_err(|e| Error::Format { path: path.to_path_buf(), message: e.to_string() })
    }

    /// Applies `SOURCECONF_*` variables from `vars` on top of `self`.
    pub fn with_env<I>(mut self, vars: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        for (key, value) in vars {
            let Some(name) = key.strip_prefix(ENV_PREFIX) else { continue };
            match name {
                "CHECKPOINT" => self.checkpoint = Some(value.into()),
                "INDEX" => self.index = Some(value.into()),
                "THRESHOLD" => self.threshold = Some(parse_env(name, &value)?),
                "K" => self.k = parse_env(name, &value)?,
                "BIND" => self.bind = parse_env(name, &value)?,
                "MAX_INPUT_CHARS" => self.max_input_chars = parse_env(name, &value)?,
                "MAX_CONCURRENT_GRADIENTS" => self.max_concurrent_gradients = parse_env(name, &value)?,
                "NORM" => self.norm = parse_env(name, &value)?,
                "AGGREGATION" => self.aggregation = parse_env(name, &value)?,
                "CORS_ORIGINS" => {
                    self.cors_origins = value.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
                }
                _ => {}
            }
        }
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(t) = self.threshold {
            if t.is_nan() || t < 0.0 {
                return Err(Error::Config(format!("threshold must be >= 0, got {t}")));
            }
        }
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.max_input_chars == 0 || self.max_concurrent_gradients == 0 {
            return Err(Error::Config("max_input_chars and max_concurrent_gradients must be positive".into()));
        }
        for path in [&self.checkpoint, &self.index].into_iter().flatten() {
            if !path.exists() {
                return Err(Error::Config(format!("{} does not exist", path.display())));
            }
        }
        Ok(())
    }

    /// Threshold to serve with: explicit config, else the calibration stored
    /// next to the checkpoint, else 0.
    pub fn resolve_threshold(&self, checkpoint_dir: Option<&Path>) -> Result<(f64, &'static str)> {
        if let Some(t) = self.threshold {
            return Ok((t, "config"));
        }
        if let Some(dir) = checkpoint_dir {
            if let Some(cal) = Checkpoint::load_calibration(dir)? {
                return Ok((cal.threshold, "calibration"));
            }
        }
        log::warn!("no threshold configured and no calibration found; using 0");
        Ok((0.0, "default"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vars(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn env_overrides_file_values() {
        let file: ServiceConfig = serde_json::from_str(r#"{"k": 3, "threshold": 1.5}"#).unwrap();
        let cfg = file
            .with_env(vars(&[("SOURCECONF_K", "7"), ("SOURCECONF_BIND", "0.0.0.0:9000"), ("PATH", "/bin")]))
            .unwrap();
        assert_eq!(cfg.k, 7);
        assert_eq!(cfg.threshold, Some(1.5));
        assert_eq!(cfg.bind.port(), 9000);
        assert!(ServiceConfig::default().with_env(vars(&[("SOURCECONF_K", "many")])).is_err());
    }

    #[test]
    fn rejects_bad_values() {
        assert!(ServiceConfig { threshold: Some(-1.0), ..Default::default() }.validate().is_err());
        assert!(ServiceConfig { k: 0, ..Default::default() }.validate().is_err());
        let missing = ServiceConfig { index: Some("/nonexistent/index.bin".into()), ..Default::default() };
        assert!(missing.validate().is_err());
        assert!(serde_json::from_str::<ServiceConfig>(r#"{"treshold": 1}"#).is_err());
    }

    #[test]
    fn threshold_provenance() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ServiceConfig::default();
        assert_eq!(cfg.resolve_threshold(Some(dir.path())).unwrap(), (0.0, "default"));
        let cal = sourceconf_core::checkpoint::Calibration { method: "gradient".into(), threshold: 2.5, max_f1: 0.4 };
        Checkpoint::save_calibration(dir.path(), &cal).unwrap();
        assert_eq!(cfg.resolve_threshold(Some(dir.path())).unwrap(), (2.5, "calibration"));
        let cfg = ServiceConfig { threshold: Some(1.0), ..Default::default() };
        assert_eq!(cfg.resolve_threshold(Some(dir.path())).unwrap(), (1.0, "config"));
    }
}
