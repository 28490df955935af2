//! Model hyperparameters and the flat `key = value` run configuration.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::training::{Ablation, LatentModeChoice, TrainPlan};

/// Speaker and listener.
pub const N_ROLES: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    /// Embedding and hidden width (kept equal).
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    /// Inner width of the position-wise feedforward blocks.
    pub d_ff: usize,
    /// Number of latent categories K.
    pub k_latent: usize,
    pub n_labels: usize,
    pub max_positions: usize,
    pub dropout: f64,
}

impl ModelConfig {
    /// Small enough to train on one CPU core in minutes.
    pub fn desk(vocab_size: usize, n_labels: usize) -> Self {
        ModelConfig {
            vocab_size,
            d_model: 64,
            n_heads: 2,
            n_layers: 2,
            d_ff: 128,
            k_latent: 8,
            n_labels,
            max_positions: 128,
            dropout: 0.0,
        }
    }

    /// Full-size model: 300-wide, 32 latent categories.
    pub fn full(vocab_size: usize, n_labels: usize) -> Self {
        ModelConfig {
            vocab_size,
            d_model: 300,
            n_heads: 2,
            n_layers: 1,
            d_ff: 50,
            k_latent: 32,
            n_labels,
            max_positions: 512,
            dropout: 0.0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("d_ff", self.d_ff),
            ("k_latent", self.k_latent),
            ("n_labels", self.n_labels),
            ("max_positions", self.max_positions),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size <= crate::data::N_SPECIAL {
            return Err(Error::Config(format!(
                "vocab_size {} leaves no room beyond the special tokens",
                self.vocab_size
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Preset {
    #[default]
    Desk,
    Full,
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "full" => Ok(Preset::Full),
            other => Err(Error::Config(format!("unknown preset {other:?} (expected desk or full)"))),
        }
    }
}

/// Every key a config file may set. Absent keys keep preset or plan defaults.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub d_model: Option<usize>,
    pub n_heads: Option<usize>,
    pub n_layers: Option<usize>,
    pub d_ff: Option<usize>,
    pub k_latent: Option<usize>,
    pub max_positions: Option<usize>,
    pub dropout: Option<f64>,
    pub min_frequency: Option<usize>,

    pub epochs: Option<usize>,
    pub patience: Option<usize>,
    pub batch_size: Option<usize>,
    pub base_lr: Option<f64>,
    pub warmup_steps: Option<u64>,
    pub kl_warmup_fraction: Option<f64>,
    pub clip_norm: Option<f64>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub gamma: Option<f64>,
    pub seed: Option<u64>,
    pub latent_mode: Option<LatentModeChoice>,
    pub gumbel_temperature: Option<f64>,
    pub gumbel_decay: Option<f64>,
    pub gumbel_floor: Option<f64>,
    pub pseudo_max_len: Option<usize>,
    pub baseline_momentum: Option<f64>,
    pub ablation: Option<Ablation>,
}

fn parse_value<T: FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("line {line}: invalid value {value:?} for {key}")))
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Parses `key = value` lines. Blank lines and `#` comments are skipped;
    /// unknown or repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {line}: expected `key = value`")))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {line}: duplicate key {key}")));
            }
            cfg.set(key, value, line)?;
        }
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        macro_rules! put {
            ($field:ident) => {
                self.$field = Some(parse_value(key, value, line)?)
            };
        }
        match key {
            "preset" => self.preset = value.parse()?,
            "d_model" => put!(d_model),
            "n_heads" => put!(n_heads),
            "n_layers" => put!(n_layers),
            "d_ff" => put!(d_ff),
            "k_latent" => put!(k_latent),
            "max_positions" => put!(max_positions),
            "dropout" => put!(dropout),
            "min_frequency" => put!(min_frequency),
            "epochs" => put!(epochs),
            "patience" => put!(patience),
            "batch_size" => put!(batch_size),
            "base_lr" => put!(base_lr),
            "warmup_steps" => put!(warmup_steps),
            "kl_warmup_fraction" => put!(kl_warmup_fraction),
            "clip_norm" => put!(clip_norm),
            "alpha" => put!(alpha),
            "beta" => put!(beta),
            "gamma" => put!(gamma),
            "seed" => put!(seed),
            "latent_mode" => self.latent_mode = Some(value.parse()?),
            "gumbel_temperature" => put!(gumbel_temperature),
            "gumbel_decay" => put!(gumbel_decay),
            "gumbel_floor" => put!(gumbel_floor),
            "pseudo_max_len" => put!(pseudo_max_len),
            "baseline_momentum" => put!(baseline_momentum),
            "ablation" => self.ablation = Some(value.parse()?),
            other => return Err(Error::Config(format!("line {line}: unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn model_config(&self, vocab_size: usize, n_labels: usize) -> Result<ModelConfig> {
        let mut c = match self.preset {
            Preset::Desk => ModelConfig::desk(vocab_size, n_labels),
            Preset::Full => ModelConfig::full(vocab_size, n_labels),
        };
        c.d_model = self.d_model.unwrap_or(c.d_model);
        c.n_heads = self.n_heads.unwrap_or(c.n_heads);
        c.n_layers = self.n_layers.unwrap_or(c.n_layers);
        c.d_ff = self.d_ff.unwrap_or(c.d_ff);
        c.k_latent = self.k_latent.unwrap_or(c.k_latent);
        c.max_positions = self.max_positions.unwrap_or(c.max_positions);
        c.dropout = self.dropout.unwrap_or(c.dropout);
        c.validate()?;
        Ok(c)
    }

    pub fn plan(&self) -> Result<TrainPlan> {
        let mut p = TrainPlan::default();
        p.epochs = self.epochs.unwrap_or(p.epochs);
        p.patience = self.patience.unwrap_or(p.patience);
        p.batch_size = self.batch_size.unwrap_or(p.batch_size);
        p.base_lr = self.base_lr.unwrap_or(p.base_lr);
        p.warmup_steps = self.warmup_steps.unwrap_or(p.warmup_steps);
        p.kl_warmup_fraction = self.kl_warmup_fraction.unwrap_or(p.kl_warmup_fraction);
        if let Some(c) = self.clip_norm {
            p.clip_norm = (c > 0.0).then_some(c);
        }
        p.alpha = self.alpha.unwrap_or(p.alpha);
        p.beta = self.beta.unwrap_or(p.beta);
        p.gamma = self.gamma.unwrap_or(p.gamma);
        p.seed = self.seed.unwrap_or(p.seed);
        p.latent_mode = self.latent_mode.unwrap_or(p.latent_mode);
        p.gumbel_temperature = self.gumbel_temperature.unwrap_or(p.gumbel_temperature);
        p.gumbel_decay = self.gumbel_decay.unwrap_or(p.gumbel_decay);
        p.gumbel_floor = self.gumbel_floor.unwrap_or(p.gumbel_floor);
        p.pseudo_max_len = self.pseudo_max_len.unwrap_or(p.pseudo_max_len);
        p.baseline_momentum = self.baseline_momentum.unwrap_or(p.baseline_momentum);
        p.ablation = self.ablation.unwrap_or(p.ablation);
        p.validate()?;
        Ok(p)
    }

    pub fn min_frequency(&self) -> usize {
        self.min_frequency.unwrap_or(1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_preset_is_valid() {
        let c = ModelConfig::desk(100, 8);
        c.validate().unwrap();
        assert_eq!(c.head_dim(), 32);
        ModelConfig::full(100, 32).validate().unwrap();
    }

    #[test]
    fn heads_must_divide_width() {
        let mut c = ModelConfig::desk(100, 8);
        c.n_heads = 3;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn parses_keys_and_comments() {
        let cfg = RunConfig::parse("# desk run\nd_model = 32\n\nseed=7  # fixed\nablation = dual-paired\n").unwrap();
        assert_eq!(cfg.d_model, Some(32));
        assert_eq!(cfg.seed, Some(7));
        let plan = cfg.plan().unwrap();
        assert_eq!(plan.seed, 7);
        assert_eq!(plan.ablation, Ablation::DualPaired);
        assert_eq!(cfg.model_config(50, 4).unwrap().d_model, 32);
    }

    #[test]
    fn rejects_unknown_and_duplicate_keys() {
        let err = RunConfig::parse("d_model = 32\nlearning_rate = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
        assert!(RunConfig::parse("seed = 1\nseed = 2").is_err());
        assert!(RunConfig::parse("seed 1").is_err());
        assert!(RunConfig::parse("seed = x").is_err());
    }
}
