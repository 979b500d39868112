//! Flat key=value run configuration shared by all commands. Unknown keys
//! are rejected so typos cannot silently fall back to defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::primitives::FusionMode;
use crate::training::TrainConfig;
use crate::type_detector::PoolingMode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub encoder_lr: f64,
    pub decoder_lr: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub hidden_dim: usize,
    pub encoder_layers: usize,
    pub encoder_heads: usize,
    pub encoder_ffn: bool,
    pub decoder_heads: usize,
    pub max_len: usize,
    pub position_dim: usize,
    pub position_clip: usize,
    pub fusion: FusionMode,
    pub pooling: PoolingMode,
    pub self_attention: bool,
    pub position_embedding: bool,
    pub role_indicator: bool,
    pub split_type_table: bool,
    pub threshold_1: f64,
    pub threshold_2: f64,
    pub threshold_3: f64,
    pub threshold_4: f64,
    pub threshold_5: f64,
    pub strict_roles: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            epochs: 20,
            batch_size: 8,
            encoder_lr: 2e-5,
            decoder_lr: 1e-4,
            warmup_fraction: 0.1,
            weight_decay: 0.01,
            dropout: 0.3,
            hidden_dim: 64,
            encoder_layers: 2,
            encoder_heads: 4,
            encoder_ffn: false,
            decoder_heads: 4,
            max_len: 128,
            position_dim: 64,
            position_clip: 50,
            fusion: FusionMode::Cln,
            pooling: PoolingMode::Adaptive,
            self_attention: true,
            position_embedding: true,
            role_indicator: true,
            split_type_table: false,
            threshold_1: 0.5,
            threshold_2: 0.5,
            threshold_3: 0.5,
            threshold_4: 0.5,
            threshold_5: 0.5,
            strict_roles: false,
        }
    }
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::Config(format!("key `{key}` expects a boolean, got `{value}`"))),
    }
}

macro_rules! parse_num {
    ($key:expr, $value:expr, $ty:ty) => {
        $value.parse::<$ty>().map_err(|_| {
            Error::Config(format!(
                "key `{}` expects a {}, got `{}`",
                $key,
                stringify!($ty),
                $value
            ))
        })?
    };
}

impl RunConfig {
    /// Apply one `key=value` assignment.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got `{assignment}`")))?;
        let (key, value) = (key.trim(), value.trim());
        match key {
            "seed" => self.seed = parse_num!(key, value, u64),
            "epochs" => self.epochs = parse_num!(key, value, usize),
            "batch_size" => self.batch_size = parse_num!(key, value, usize),
            "encoder_lr" => self.encoder_lr = parse_num!(key, value, f64),
            "decoder_lr" => self.decoder_lr = parse_num!(key, value, f64),
            "warmup_fraction" => self.warmup_fraction = parse_num!(key, value, f64),
            "weight_decay" => self.weight_decay = parse_num!(key, value, f64),
            "dropout" => self.dropout = parse_num!(key, value, f64),
            "hidden_dim" => self.hidden_dim = parse_num!(key, value, usize),
            "encoder_layers" => self.encoder_layers = parse_num!(key, value, usize),
            "encoder_heads" => self.encoder_heads = parse_num!(key, value, usize),
            "encoder_ffn" => self.encoder_ffn = parse_bool(key, value)?,
            "decoder_heads" => self.decoder_heads = parse_num!(key, value, usize),
            "max_len" => self.max_len = parse_num!(key, value, usize),
            "position_dim" => self.position_dim = parse_num!(key, value, usize),
            "position_clip" => self.position_clip = parse_num!(key, value, usize),
            "fusion" => self.fusion = FusionMode::parse(value)?,
            "pooling" => self.pooling = PoolingMode::parse(value)?,
            "self_attention" => self.self_attention = parse_bool(key, value)?,
            "position_embedding" => self.position_embedding = parse_bool(key, value)?,
            "role_indicator" => self.role_indicator = parse_bool(key, value)?,
            "split_type_table" => self.split_type_table = parse_bool(key, value)?,
            "threshold_1" => self.threshold_1 = parse_num!(key, value, f64),
            "threshold_2" => self.threshold_2 = parse_num!(key, value, f64),
            "threshold_3" => self.threshold_3 = parse_num!(key, value, f64),
            "threshold_4" => self.threshold_4 = parse_num!(key, value, f64),
            "threshold_5" => self.threshold_5 = parse_num!(key, value, f64),
            "strict_roles" => self.strict_roles = parse_bool(key, value)?,
            _ => return Err(Error::Config(format!("unknown configuration key `{key}`"))),
        }
        Ok(())
    }

    /// Load from a file of `key = value` lines; `#` starts a comment.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut config = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            config.set(line).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, t) in [
            ("threshold_1", self.threshold_1),
            ("threshold_2", self.threshold_2),
            ("threshold_3", self.threshold_3),
            ("threshold_4", self.threshold_4),
            ("threshold_5", self.threshold_5),
        ] {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {t}")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!(
                "warmup_fraction must lie in [0, 1], got {}",
                self.warmup_fraction
            )));
        }
        if self.hidden_dim == 0 || self.batch_size == 0 {
            return Err(Error::Config("hidden_dim and batch_size must be positive".into()));
        }
        if self.encoder_heads == 0 || self.hidden_dim % self.encoder_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} not divisible by encoder_heads {}",
                self.hidden_dim, self.encoder_heads
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), self)
            .map_err(|e| Error::Config(format!("cannot write config snapshot: {e}")))?;
        Ok(())
    }

    pub fn thresholds(&self) -> [f64; 5] {
        [self.threshold_1, self.threshold_2, self.threshold_3, self.threshold_4, self.threshold_5]
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                hidden_dim: self.hidden_dim,
                layers: self.encoder_layers,
                heads: self.encoder_heads,
                max_len: self.max_len,
                dropout: self.dropout,
                with_ffn: self.encoder_ffn,
                prepend_cls: matches!(self.pooling, PoolingMode::Cls),
            },
            fusion: self.fusion,
            pooling: self.pooling,
            decoder_heads: self.decoder_heads,
            with_self_attention: self.self_attention,
            with_positions: self.position_embedding,
            with_indicator: self.role_indicator,
            split_type_table: self.split_type_table,
            d_p: self.position_dim,
            l_max: self.position_clip,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            encoder_lr: self.encoder_lr,
            decoder_lr: self.decoder_lr,
            warmup_fraction: self.warmup_fraction,
            weight_decay: self.weight_decay,
            seed: self.seed,
            thresholds: self.thresholds(),
        }
    }

    pub fn snapshot(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config is serializable")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(
            &path,
            "# comment\nepochs = 5\nfusion = gate\nthreshold_1 = 0.4\nself_attention = false\n",
        )
        .unwrap();
        let config = RunConfig::load(&path).unwrap();
        assert_eq!(config.epochs, 5);
        assert_eq!(config.fusion, FusionMode::Gate);
        assert_eq!(config.threshold_1, 0.4);
        assert!(!config.self_attention);
        // Untouched keys keep defaults.
        assert_eq!(config.batch_size, 8);
    }

    #[test]
    fn unknown_key_rejected() {
        let mut config = RunConfig::default();
        assert!(config.set("epochz=5").is_err());
        assert!(config.set("no_equals").is_err());
        assert!(config.set("epochs=five").is_err());
    }

    #[test]
    fn validation_catches_bad_values() {
        let mut config = RunConfig::default();
        config.set("threshold_3=1.5").unwrap();
        assert!(config.validate().is_err());
        let mut config = RunConfig::default();
        config.set("hidden_dim=10").unwrap();
        assert!(config.validate().is_err());
    }

    #[test]
    fn model_config_reflects_ablation_switches() {
        let mut config = RunConfig::default();
        config.set("position_embedding=false").unwrap();
        config.set("role_indicator=false").unwrap();
        config.set("pooling=cls").unwrap();
        let mc = config.model_config();
        assert!(!mc.with_positions);
        assert!(!mc.with_indicator);
        assert!(mc.encoder.prepend_cls);
    }
}
