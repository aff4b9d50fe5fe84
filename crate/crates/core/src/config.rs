//! Training configuration. Every field has a built-in default; a TOML file
//! overrides any subset, and command-line flags override the file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::captioner::AttendSource;
use crate::error::{Error, Result};
use crate::nn::FusionForm;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Content loss weight inside the deblurring objective.
    pub lambda_content: f64,
    pub lambda_caption: f64,
    pub lambda_tree: f64,
    pub gp_weight: f64,
    /// Critic updates per joint update.
    pub critic_steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epochs_flat: usize,
    pub epochs_decay: usize,
    /// Stops co-training after this many joint steps.
    pub max_steps: Option<u64>,
    pub batch_size: usize,
    /// Expected side length of training images.
    pub image_size: usize,

    /// Backbone channels `c`.
    pub backbone_channels: usize,
    pub backbone_layers: usize,
    pub freeze_backbone: bool,
    /// Node channels `c'`.
    pub node_channels: usize,
    /// Channels `c''` of the generator's last block.
    pub coupling_channels: usize,
    pub generator_channels: usize,
    pub residual_blocks: usize,
    pub dropout: f64,
    pub fusion: FusionForm,
    pub critic_channels: usize,
    pub critic_layers: usize,
    pub critic_slope: f64,
    pub perceptual_width: usize,

    pub embed: usize,
    pub hidden: usize,
    pub attention: usize,
    pub attend_source: AttendSource,
    /// Longest caption, in words, used for training and decoding.
    pub caption_len: usize,
    pub caption_min_freq: usize,
    pub vocab_min_freq: usize,

    pub pretrain_steps: u64,
    pub pretrain_lr: f64,
    pub caption_steps: u64,
    pub caption_lr: f64,
    /// Epochs between co-training checkpoints; 0 disables them.
    pub checkpoint_every: usize,

    /// Parameter initialization.
    pub seed: u64,
    /// Batch order, mixing weights and dropout masks.
    pub data_seed: u64,

    pub manifest: Option<PathBuf>,
    pub vocab_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub perceptual_weights: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_content: 100.0,
            lambda_caption: 5e-3,
            lambda_tree: 10.0,
            gp_weight: 10.0,
            critic_steps: 5,
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            epochs_flat: 150,
            epochs_decay: 150,
            max_steps: None,
            batch_size: 4,
            image_size: 64,
            backbone_channels: 16,
            backbone_layers: 4,
            freeze_backbone: true,
            node_channels: 32,
            coupling_channels: 32,
            generator_channels: 16,
            residual_blocks: 9,
            dropout: 0.5,
            fusion: FusionForm::Rectified,
            critic_channels: 16,
            critic_layers: 4,
            critic_slope: 0.2,
            perceptual_width: 16,
            embed: 32,
            hidden: 256,
            attention: 32,
            attend_source: AttendSource::Probs,
            caption_len: 16,
            caption_min_freq: 1,
            vocab_min_freq: 1,
            pretrain_steps: 300,
            pretrain_lr: 1e-3,
            caption_steps: 300,
            caption_lr: 3e-3,
            checkpoint_every: 10,
            seed: 0,
            data_seed: 1,
            manifest: None,
            vocab_dir: None,
            out_dir: None,
            perceptual_weights: None,
        }
    }
}

impl TrainConfig {
    /// Small widths for 32×32 CPU runs.
    pub fn desk() -> Self {
        Self {
            image_size: 32,
            lr: 1e-3,
            epochs_flat: 10_000,
            epochs_decay: 10_000,
            node_channels: 8,
            coupling_channels: 8,
            generator_channels: 8,
            residual_blocks: 2,
            dropout: 0.0,
            critic_channels: 8,
            critic_layers: 3,
            perceptual_width: 8,
            embed: 16,
            hidden: 32,
            attention: 16,
            pretrain_lr: 1e-2,
            caption_lr: 1e-2,
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let weights = [
            ("lambda_content", self.lambda_content),
            ("lambda_caption", self.lambda_caption),
            ("lambda_tree", self.lambda_tree),
            ("gp_weight", self.gp_weight),
            ("dropout", self.dropout),
        ];
        for (name, w) in weights {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be finite and non-negative, got {w}"
                )));
            }
        }
        if self.dropout >= 1.0 {
            return Err(Error::Config("dropout must be below 1".into()));
        }
        for (name, lr) in [
            ("lr", self.lr),
            ("pretrain_lr", self.pretrain_lr),
            ("caption_lr", self.caption_lr),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {lr}")));
            }
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        let positive = [
            ("critic_steps", self.critic_steps),
            ("batch_size", self.batch_size),
            ("backbone_channels", self.backbone_channels),
            ("node_channels", self.node_channels),
            ("coupling_channels", self.coupling_channels),
            ("generator_channels", self.generator_channels),
            ("critic_channels", self.critic_channels),
            ("critic_layers", self.critic_layers),
            ("perceptual_width", self.perceptual_width),
            ("embed", self.embed),
            ("hidden", self.hidden),
            ("attention", self.attention),
            ("caption_len", self.caption_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "image_size {} is not a positive multiple of 4",
                self.image_size
            )));
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.epochs_flat + self.epochs_decay
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_the_reference_weights() {
        let c = TrainConfig::default();
        assert_eq!((c.lambda_content, c.lambda_caption, c.lambda_tree), (100.0, 5e-3, 10.0));
        assert_eq!((c.critic_steps, c.lr, c.gp_weight), (5, 1e-4, 10.0));
        assert_eq!((c.epochs_flat, c.epochs_decay), (150, 150));
        assert_eq!((c.beta1, c.beta2), (0.5, 0.999));
        c.validate().unwrap();
        TrainConfig::desk().validate().unwrap();
    }

    #[test]
    fn partial_file_overrides_only_its_keys() {
        let c = TrainConfig::from_toml("lr = 0.002\nbatch_size = 2\nout_dir = \"runs/a\"\n").unwrap();
        assert_eq!(c.lr, 0.002);
        assert_eq!(c.batch_size, 2);
        assert_eq!(c.out_dir.as_deref(), Some(Path::new("runs/a")));
        assert_eq!(c.critic_steps, 5);
    }

    #[test]
    fn toml_round_trip() {
        let mut c = TrainConfig::desk();
        c.max_steps = Some(7);
        c.manifest = Some("m.jsonl".into());
        assert_eq!(TrainConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for text in [
            "critic_steps = 0",
            "lambda_tree = -1.0",
            "image_size = 30",
            "no_such_key = 1",
            "lr = 0.0",
        ] {
            assert!(matches!(TrainConfig::from_toml(text), Err(Error::Config(_))), "{text}");
        }
    }
}
