//! Experiment configuration: a flat key-value file with strict parsing.
//! Unknown keys are rejected; every default is printable via `config
//! --defaults`.

use std::path::{Path, PathBuf};

use crate::energy::EnergyConfig;
use crate::error::{Error, Result};
use crate::moe::{GateSettings, MoeTuning};
use crate::numerics::{Activation, Init};
use crate::splitmodel::SplitConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Synthetic,
    Idx,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetKind,
    pub classes: usize,
    pub input_dim: usize,
    pub per_class: usize,
    pub spread: f64,
    pub idx_images: Option<PathBuf>,
    pub idx_labels: Option<PathBuf>,

    pub clients: usize,
    pub shared_percent: f64,
    pub dirichlet_beta: f64,
    pub train_fraction: f64,
    /// Smallest acceptable per-client sample count; the partition seed is
    /// re-derived deterministically until every client clears it.
    pub min_client_samples: usize,

    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub enable_fp: bool,
    pub enable_sp: bool,
    pub enable_pp: bool,
    pub pp_on_logits: bool,

    pub global_rounds: usize,
    pub local_epochs: usize,
    pub lr: f64,

    /// 0 selects the heterogeneity-dependent default: half the clients under
    /// a fully Dirichlet split, all of them when a shared fraction exists.
    pub top_k: usize,
    pub moe_lr: f64,
    pub moe_epochs: usize,
    pub gamma: f64,
    pub temperature: f64,
    pub gate_hidden: Vec<usize>,
    pub gate_activation: String,
    pub gate_init: String,

    pub workers: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetKind::Synthetic,
            classes: 10,
            input_dim: 20,
            per_class: 200,
            spread: 0.25,
            idx_images: None,
            idx_labels: None,
            clients: 8,
            shared_percent: 0.0,
            dirichlet_beta: 0.1,
            train_fraction: 0.8,
            min_client_samples: 8,
            feature_dim: 16,
            hidden_dim: 32,
            enable_fp: true,
            enable_sp: true,
            enable_pp: true,
            pp_on_logits: false,
            global_rounds: 200,
            local_epochs: 1,
            lr: 0.05,
            top_k: 0,
            moe_lr: 0.5,
            moe_epochs: 50,
            gamma: 0.2,
            temperature: 1.0,
            gate_hidden: vec![128, 256, 128],
            gate_activation: "leaky_relu".to_string(),
            gate_init: "orthogonal".to_string(),
            workers: 1,
            seed: 42,
            out_dir: PathBuf::from("out"),
        }
    }
}

fn bad_value(key: &str, value: &str) -> Error {
    Error::Config {
        message: format!("bad value for `{key}`: `{value}`"),
    }
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config {
            message: format!("cannot read {}: {e}", path.display()),
        })?;
        Self::from_str(&text)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn from_str(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                message: format!("line {}: expected `key = value`, got `{line}`", lineno + 1),
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        macro_rules! parse {
            ($t:ty) => {
                value.parse::<$t>().map_err(|_| bad_value(key, value))?
            };
        }
        match key {
            "dataset" => {
                self.dataset = match value {
                    "synthetic" => DatasetKind::Synthetic,
                    "idx" => DatasetKind::Idx,
                    _ => return Err(bad_value(key, value)),
                }
            }
            "classes" => self.classes = parse!(usize),
            "input_dim" => self.input_dim = parse!(usize),
            "per_class" => self.per_class = parse!(usize),
            "spread" => self.spread = parse!(f64),
            "idx_images" => self.idx_images = Some(PathBuf::from(value)),
            "idx_labels" => self.idx_labels = Some(PathBuf::from(value)),
            "clients" => self.clients = parse!(usize),
            "shared_percent" => self.shared_percent = parse!(f64),
            "dirichlet_beta" => self.dirichlet_beta = parse!(f64),
            "train_fraction" => self.train_fraction = parse!(f64),
            "min_client_samples" => self.min_client_samples = parse!(usize),
            "feature_dim" => self.feature_dim = parse!(usize),
            "hidden_dim" => self.hidden_dim = parse!(usize),
            "enable_fp" => self.enable_fp = parse!(bool),
            "enable_sp" => self.enable_sp = parse!(bool),
            "enable_pp" => self.enable_pp = parse!(bool),
            "pp_on_logits" => self.pp_on_logits = parse!(bool),
            "global_rounds" => self.global_rounds = parse!(usize),
            "local_epochs" => self.local_epochs = parse!(usize),
            "lr" => self.lr = parse!(f64),
            "top_k" => self.top_k = parse!(usize),
            "moe_lr" => self.moe_lr = parse!(f64),
            "moe_epochs" => self.moe_epochs = parse!(usize),
            "gamma" => self.gamma = parse!(f64),
            "temperature" => self.temperature = parse!(f64),
            "gate_hidden" => {
                self.gate_hidden = value
                    .split(',')
                    .map(|s| s.trim().parse::<usize>().map_err(|_| bad_value(key, value)))
                    .collect::<Result<_>>()?;
            }
            "gate_activation" => self.gate_activation = value.to_string(),
            "gate_init" => self.gate_init = value.to_string(),
            "workers" => self.workers = parse!(usize),
            "seed" => self.seed = parse!(u64),
            "out" => self.out_dir = PathBuf::from(value),
            _ => {
                return Err(Error::Config {
                    message: format!("unknown config key `{key}`"),
                })
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset == DatasetKind::Idx && (self.idx_images.is_none() || self.idx_labels.is_none())
        {
            return Err(Error::Config {
                message: "dataset = idx requires idx_images and idx_labels".into(),
            });
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config {
                message: format!("train_fraction must be in (0, 1), got {}", self.train_fraction),
            });
        }
        if self.lr < 0.0 || self.moe_lr < 0.0 {
            return Err(Error::Config {
                message: "learning rates must be >= 0".into(),
            });
        }
        if self.workers == 0 {
            return Err(Error::Config {
                message: "workers must be >= 1".into(),
            });
        }
        if self.top_k > self.clients {
            return Err(Error::Config {
                message: format!("top_k {} exceeds clients {}", self.top_k, self.clients),
            });
        }
        self.partition_spec().validate()?;
        self.split_config().validate()?;
        EnergyConfig::new(self.temperature, self.gamma)?;
        self.parse_gate_activation()?;
        self.parse_gate_init()?;
        if self.gate_hidden.is_empty() || self.gate_hidden.contains(&0) {
            return Err(Error::Config {
                message: "gate_hidden must be a non-empty list of positive widths".into(),
            });
        }
        Ok(())
    }

    pub fn partition_spec(&self) -> crate::datagen::PartitionSpec {
        crate::datagen::PartitionSpec {
            clients: self.clients,
            shared_percent: self.shared_percent,
            beta: self.dirichlet_beta,
            seed: self.seed,
        }
    }

    pub fn split_config(&self) -> SplitConfig {
        SplitConfig {
            input_dim: self.input_dim,
            feature_dim: self.feature_dim,
            class_count: self.classes,
            hidden_dim: self.hidden_dim,
            enable_fp: self.enable_fp,
            enable_sp: self.enable_sp,
            enable_pp: self.enable_pp,
            pp_on_logits: self.pp_on_logits,
        }
    }

    /// Resolved Top-K: explicit when set, otherwise half the clients for a
    /// fully Dirichlet split and all of them when a shared fraction exists.
    pub fn effective_top_k(&self) -> usize {
        if self.top_k > 0 {
            self.top_k
        } else if self.shared_percent == 0.0 {
            (self.clients / 2).max(1)
        } else {
            self.clients
        }
    }

    fn parse_gate_activation(&self) -> Result<Activation> {
        Ok(match self.gate_activation.as_str() {
            "leaky_relu" => Activation::LeakyRelu(0.01),
            "relu" => Activation::Relu,
            "none" => Activation::None,
            other => return Err(bad_value("gate_activation", other)),
        })
    }

    fn parse_gate_init(&self) -> Result<Init> {
        Ok(match self.gate_init.as_str() {
            "orthogonal" => Init::Orthogonal,
            "he_normal" => Init::HeNormal,
            other => return Err(bad_value("gate_init", other)),
        })
    }

    pub fn gate_settings(&self) -> GateSettings {
        GateSettings {
            hidden: self.gate_hidden.clone(),
            activation: self.parse_gate_activation().expect("validated"),
            init: self.parse_gate_init().expect("validated"),
            top_k: self.effective_top_k(),
        }
    }

    pub fn moe_tuning(&self) -> MoeTuning {
        MoeTuning {
            lr: self.moe_lr,
            epochs: self.moe_epochs,
            energy: EnergyConfig::new(self.temperature, self.gamma).expect("validated"),
        }
    }

    /// Render as a parseable config file.
    pub fn render(&self) -> String {
        let dataset = match self.dataset {
            DatasetKind::Synthetic => "synthetic",
            DatasetKind::Idx => "idx",
        };
        let hidden = self
            .gate_hidden
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let mut out = String::new();
        out.push_str("# dataset\n");
        out.push_str(&format!("dataset = {dataset}\n"));
        out.push_str(&format!("classes = {}\n", self.classes));
        out.push_str(&format!("input_dim = {}\n", self.input_dim));
        out.push_str(&format!("per_class = {}\n", self.per_class));
        out.push_str(&format!("spread = {}\n", self.spread));
        if let Some(p) = &self.idx_images {
            out.push_str(&format!("idx_images = {}\n", p.display()));
        }
        if let Some(p) = &self.idx_labels {
            out.push_str(&format!("idx_labels = {}\n", p.display()));
        }
        out.push_str("\n# partition\n");
        out.push_str(&format!("clients = {}\n", self.clients));
        out.push_str(&format!("shared_percent = {}\n", self.shared_percent));
        out.push_str(&format!("dirichlet_beta = {}\n", self.dirichlet_beta));
        out.push_str(&format!("train_fraction = {}\n", self.train_fraction));
        out.push_str(&format!("min_client_samples = {}\n", self.min_client_samples));
        out.push_str("\n# split model\n");
        out.push_str(&format!("feature_dim = {}\n", self.feature_dim));
        out.push_str(&format!("hidden_dim = {}\n", self.hidden_dim));
        out.push_str(&format!("enable_fp = {}\n", self.enable_fp));
        out.push_str(&format!("enable_sp = {}\n", self.enable_sp));
        out.push_str(&format!("enable_pp = {}\n", self.enable_pp));
        out.push_str(&format!("pp_on_logits = {}\n", self.pp_on_logits));
        out.push_str("\n# pretraining\n");
        out.push_str(&format!("global_rounds = {}\n", self.global_rounds));
        out.push_str(&format!("local_epochs = {}\n", self.local_epochs));
        out.push_str(&format!("lr = {}\n", self.lr));
        out.push_str("\n# gated fine-tuning\n");
        out.push_str(&format!("top_k = {}\n", self.top_k));
        out.push_str(&format!("moe_lr = {}\n", self.moe_lr));
        out.push_str(&format!("moe_epochs = {}\n", self.moe_epochs));
        out.push_str(&format!("gamma = {}\n", self.gamma));
        out.push_str(&format!("temperature = {}\n", self.temperature));
        out.push_str(&format!("gate_hidden = {hidden}\n"));
        out.push_str(&format!("gate_activation = {}\n", self.gate_activation));
        out.push_str(&format!("gate_init = {}\n", self.gate_init));
        out.push_str("\n# run\n");
        out.push_str(&format!("workers = {}\n", self.workers));
        out.push_str(&format!("seed = {}\n", self.seed));
        out.push_str(&format!("out = {}\n", self.out_dir.display()));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let rendered = cfg.render();
        let back = ExperimentConfig::from_str(&rendered).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_key_rejected() {
        let err = ExperimentConfig::from_str("no_such_key = 5").unwrap_err();
        assert!(err.to_string().contains("no_such_key"));
    }

    #[test]
    fn bad_values_rejected() {
        assert!(ExperimentConfig::from_str("clients = many").is_err());
        assert!(ExperimentConfig::from_str("train_fraction = 1.5").is_err());
        assert!(ExperimentConfig::from_str("gamma = 1.0").is_err());
        assert!(ExperimentConfig::from_str("gate_activation = tanh").is_err());
        assert!(ExperimentConfig::from_str("dataset = idx").is_err());
    }

    #[test]
    fn comments_and_blank_lines_ignored() {
        let cfg = ExperimentConfig::from_str("# hello\n\nclients = 4\n seed = 7 \n").unwrap();
        assert_eq!(cfg.clients, 4);
        assert_eq!(cfg.seed, 7);
    }

    #[test]
    fn top_k_auto_rule() {
        let mut cfg = ExperimentConfig::default();
        cfg.top_k = 0;
        cfg.clients = 8;
        cfg.shared_percent = 0.0;
        assert_eq!(cfg.effective_top_k(), 4);
        cfg.shared_percent = 20.0;
        assert_eq!(cfg.effective_top_k(), 8);
        cfg.top_k = 3;
        assert_eq!(cfg.effective_top_k(), 3);
    }
}
