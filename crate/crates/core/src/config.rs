//! Experiment configuration: one TOML file, every field defaulted, unknown
//! keys rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::csa::CsaConfig;
use crate::encoders::ModelConfig;
use crate::error::{Error, Result};
use crate::fedloop::FedConfig;
use crate::gsd::GsdConfig;
use crate::synthdata::{DataConfig, Protocol};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Histogram bins over the cosine-distance range `[0, 2]`.
    pub margin_bins: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { margin_bins: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub protocol: Protocol,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub csa: CsaConfig,
    pub gsd: GsdConfig,
    pub fed: FedConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            protocol: Protocol::LeaveOneOut,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            csa: CsaConfig::default(),
            gsd: GsdConfig::default(),
            fed: FedConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.csa.validate()?;
        self.gsd.validate()?;
        self.fed.validate()?;
        if self.eval.margin_bins == 0 {
            return Err(Error::Config("eval.margin_bins must be positive".into()));
        }
        Ok(())
    }

    /// Parses and validates TOML text. Parse errors carry line and column.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(located(text, &e)))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}:{m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }
}

fn located(text: &str, e: &toml::de::Error) -> String {
    let msg = e.message().trim().to_string();
    match e.span() {
        Some(span) => {
            let before = &text[..span.start.min(text.len())];
            let line = before.matches('\n').count() + 1;
            let col = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
            format!("{line}:{col}: {msg}")
        }
        None => msg,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_all_defaults() {
        assert_eq!(ExperimentConfig::from_toml_str("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn defaults_roundtrip_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn reference_hyperparameters_are_defaults() {
        let c = ExperimentConfig::default();
        assert_eq!(c.csa.tokens, 4);
        assert_eq!(c.csa.lambda_c3, 0.1);
        assert_eq!(c.csa.temperature, 0.07);
        assert_eq!(c.fed.temperature, 0.07);
        assert_eq!(c.fed.momentum, 0.9);
        assert_eq!(c.fed.weight_decay, 5e-4);
        assert_eq!(c.fed.local_epochs, 1);
    }

    #[test]
    fn unknown_key_reports_line() {
        let err = ExperimentConfig::from_toml_str("seed = 1\n\n[csa]\ntokenz = 3\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("4:"), "{msg}");
        assert!(msg.contains("tokenz"), "{msg}");
    }

    #[test]
    fn semantic_errors_rejected() {
        assert!(ExperimentConfig::from_toml_str("[csa]\ntemperature = 0.0\n").is_err());
        assert!(ExperimentConfig::from_toml_str("[fed]\nbatch_instances = 1\n").is_err());
        assert!(ExperimentConfig::from_toml_str("protocol = \"III\"\n").is_ok());
    }
}
