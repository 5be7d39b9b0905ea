//! Run configuration files (TOML).
//!
//! ```toml
//! seed = 7
//! precision = 32
//!
//! [data]
//! path = "clicks.jsonl"
//! prompt_mode = "full"
//!
//! [backbone]
//! num_layers = 2
//! hidden_dim = 16
//!
//! [dsn_default]
//! ladder_dim = 8
//!
//! [dsn."Gift Cards"]
//! ladder_block = "mlp"
//!
//! [train]
//! epochs = 4
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::baseline::SharedBottomConfig;
use crate::data::SynthConfig;
use crate::dsn::DsnConfig;
use crate::error::{Error, Result};
use crate::general::GeneralConfig;
use crate::model::ModelConfig;
use crate::prompt::{PromptMode, DEFAULT_MAX_HISTORY};
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// JSONL dataset; relative paths resolve against the config file.
    pub path: Option<PathBuf>,
    pub prompt_mode: PromptMode,
    pub max_history: usize,
    /// Vocabulary size cap, reserved tokens included.
    pub max_vocab: usize,
    /// Domains configured under `[dsn.*]` that are absent from the dataset
    /// on purpose (to be added later).
    pub new_domains: Vec<String>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            path: None,
            prompt_mode: PromptMode::Full,
            max_history: DEFAULT_MAX_HISTORY,
            max_vocab: 8000,
            new_domains: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Floating-point width for training and evaluation: 32 or 64.
    pub precision: u32,
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub backbone: BackboneConfig,
    /// Domain-network settings for domains without their own section.
    pub dsn_default: DsnConfig,
    pub dsn: BTreeMap<String, DsnConfig>,
    pub general: GeneralConfig,
    pub train: TrainConfig,
    pub baseline: SharedBottomConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            precision: 32,
            data: DataConfig::default(),
            synth: SynthConfig::default(),
            backbone: BackboneConfig::default(),
            dsn_default: DsnConfig::default(),
            dsn: BTreeMap::new(),
            general: GeneralConfig::default(),
            train: TrainConfig::default(),
            baseline: SharedBottomConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; a relative `data.path` is resolved against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        if let (Some(p), Some(dir)) = (&cfg.data.path, path.parent()) {
            if p.is_relative() {
                cfg.data.path = Some(dir.join(p));
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.precision != 32 && self.precision != 64 {
            return Err(Error::Config(format!("precision must be 32 or 64, got {}", self.precision)));
        }
        for (name, d) in &self.dsn {
            if !d.domain_name.is_empty() && &d.domain_name != name {
                return Err(Error::Config(format!(
                    "section [dsn.\"{name}\"] sets domain_name `{}`",
                    d.domain_name
                )));
            }
        }
        self.train.validate()
    }

    /// Every `[dsn.*]` domain must be in `domains` or declared new.
    pub fn check_domains(&self, domains: &[String]) -> Result<()> {
        for name in self.dsn.keys() {
            if !domains.contains(name) && !self.data.new_domains.contains(name) {
                return Err(Error::Config(format!(
                    "[dsn.\"{name}\"] names a domain that is neither in the dataset nor listed in data.new_domains"
                )));
            }
        }
        Ok(())
    }

    pub fn dsn_config(&self, domain: &str) -> DsnConfig {
        let mut c = self.dsn.get(domain).cloned().unwrap_or_else(|| self.dsn_default.clone());
        c.domain_name = domain.to_string();
        c
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone.clone(),
            general: self.general.clone(),
            prompt_mode: self.data.prompt_mode,
            max_history: self.data.max_history,
        }
    }

    /// Training config with the run seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsn::LadderBlockKind;
    use crate::model::MaskMode;

    #[test]
    fn sections_parse() {
        let cfg = RunConfig::from_toml(
            r#"
            seed = 3
            [backbone]
            num_layers = 2
            [dsn_default]
            ladder_dim = 8
            [dsn."Gift Cards"]
            ladder_block = "mlp"
            [train]
            mask_mode = "strict"
            "#,
        )
        .unwrap();
        assert_eq!(cfg.backbone.num_layers, 2);
        assert_eq!(cfg.dsn_config("Toys").ladder_dim, 8);
        let g = cfg.dsn_config("Gift Cards");
        assert_eq!((g.ladder_block, g.domain_name.as_str()), (LadderBlockKind::Mlp, "Gift Cards"));
        assert_eq!(cfg.train_config().mask_mode, MaskMode::Strict);
        assert_eq!(cfg.train_config().seed, 3);
        assert!(cfg.check_domains(&["Toys".into()]).is_err());
        assert!(cfg.check_domains(&["Gift Cards".into()]).is_ok());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::from_toml("[train]\nepoch = 3\n"), Err(Error::Config(_))));
        assert!(RunConfig::from_toml("precision = 16\n").is_err());
    }
}
