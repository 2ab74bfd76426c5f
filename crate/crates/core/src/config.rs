//! Run configuration: one flat `key=value` file covering data, model and
//! every stage hyperparameter.
//!
//! Any key left out takes its default. The fingerprint is a digest of the
//! canonical text of all keys except `seed` and `out`, so two runs with the
//! same settings share it whatever seed they use.

use std::path::PathBuf;

use sha2::{Digest, Sha256};

use crate::autodiff::AdamConfig;
use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::eval::{ExperimentConfig, PretrainConfig};
use crate::kv::{join, KvMap};
use crate::model::{parse_blocks, BackboneConfig, ConvBlock};
use crate::ssa::{SsaConfig, ViewMode};
use crate::ssp::SspConfig;

/// Keys that do not enter the fingerprint.
const UNHASHED: [&str; 2] = ["seed", "out"];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Directory of per-user record files; `None` generates synthetic users.
    pub data_dir: Option<PathBuf>,
    pub synth: SynthConfig,
    pub stride: usize,
    pub model: BackboneConfig,
    pub pretrain: PretrainConfig,
    pub ssa: SsaConfig,
    pub ssp: SspConfig,
    pub folds: usize,
    pub ablate_groups: Vec<String>,
    pub ablate_t_values: Vec<usize>,
    pub ablate_seeds: Vec<u64>,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let (channels, classes, length, latent) = (8, 5, 64, 32);
        let mut synth = SynthConfig::new(10, classes, 40, channels, length, 0);
        synth.sample_rate_hz = 2000;
        Self {
            data_dir: None,
            synth,
            stride: 32,
            model: BackboneConfig::standard(channels, length, latent, classes),
            pretrain: PretrainConfig::default(),
            ssa: SsaConfig::default(),
            ssp: SspConfig::default(),
            folds: 10,
            ablate_groups: vec!["stages".into()],
            ablate_t_values: vec![8, 12, 17, 24],
            ablate_seeds: vec![0, 1, 2],
            seed: 0,
            out: None,
        }
    }
}

fn pair(kv: &KvMap, key: &str) -> Result<(f64, f64)> {
    match kv.get_list::<f64>(key)?.as_deref() {
        Some([lo, hi]) if lo <= hi => Ok((*lo, *hi)),
        _ => Err(Error::Config(format!("`{key}` must be `low,high` with low <= high"))),
    }
}

fn flag(kv: &KvMap, key: &str) -> Result<bool> {
    match kv.require_str(key)? {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        v => Err(Error::Config(format!("bad value `{v}` for key `{key}` (expected true or false)"))),
    }
}

fn blocks_text(blocks: &[ConvBlock]) -> String {
    let parts: Vec<String> = blocks
        .iter()
        .map(|b| format!("{}:{}:{}", b.out_channels, b.kernel_width, b.stride))
        .collect();
    parts.join(",")
}

impl RunConfig {
    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        let dir = self.data_dir.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        kv.set("data.dir", dir);
        kv.set("data.channels", self.model.channels);
        kv.set("data.classes", self.model.num_classes);
        let s = &self.synth;
        kv.set("synth.users", s.num_users);
        kv.set("synth.windows_per_class", s.windows_per_class);
        kv.set("synth.sample_rate_hz", s.sample_rate_hz);
        kv.set("synth.gain", format!("{},{}", s.gain_range.0, s.gain_range.1));
        kv.set("synth.max_rotation", s.max_rotation);
        kv.set("synth.warp", format!("{},{}", s.warp_range.0, s.warp_range.1));
        kv.set("synth.noise", format!("{},{}", s.noise_range.0, s.noise_range.1));
        kv.set("synth.drift", format!("{},{}", s.drift_range.0, s.drift_range.1));
        kv.set("window.length", self.model.window_length);
        kv.set("window.stride", self.stride);
        kv.set("model.conv_blocks", blocks_text(&self.model.conv_blocks));
        kv.set("model.latent_dim", self.model.latent_dim);
        kv.set("model.encoder_layers", self.model.encoder_layers);
        kv.set("model.encoder_heads", self.model.encoder_heads);
        kv.set("model.horizons", self.model.horizons);
        kv.set("train.batch_size", self.pretrain.batch_size);
        kv.set("adam.beta1", self.pretrain.adam.beta1);
        kv.set("adam.beta2", self.pretrain.adam.beta2);
        kv.set("adam.weight_decay", self.pretrain.adam.weight_decay);
        kv.set("adam.epsilon", self.pretrain.adam.epsilon);
        kv.set("pretrain.epochs", self.pretrain.epochs);
        kv.set("pretrain.lr", self.pretrain.lr);
        kv.set("pretrain.contrastive_weight", self.pretrain.contrastive_weight);
        kv.set("ssa.epochs", self.ssa.epochs);
        kv.set("ssa.lr", self.ssa.lr);
        kv.set("ssa.context_window", self.ssa.context_window);
        kv.set("ssa.view_mode", self.ssa.view_mode);
        kv.set("ssa.mask_fraction", self.ssa.mask_fraction);
        kv.set("ssp.epochs", self.ssp.epochs);
        kv.set("ssp.lr", self.ssp.lr);
        kv.set("ssp.ema_decay", self.ssp.ema_decay);
        kv.set("ssp.confidence_threshold", self.ssp.confidence_threshold);
        kv.set("ssp.min_per_record", self.ssp.min_per_record);
        kv.set("ssp.filtering", self.ssp.filtering);
        kv.set("eval.folds", self.folds);
        kv.set("ablate.groups", self.ablate_groups.join(","));
        kv.set("ablate.t_values", join(&self.ablate_t_values));
        kv.set("ablate.seeds", join(&self.ablate_seeds));
        kv.set("seed", self.seed);
        kv.set("out", self.out.as_ref().map(|p| p.display().to_string()).unwrap_or_default());
        kv
    }

    /// Overlays `overrides` on the defaults. Unknown keys are rejected.
    pub fn from_kv(overrides: &KvMap) -> Result<Self> {
        let mut kv = Self::default().to_kv();
        let known: Vec<String> = kv.keys().map(String::from).collect();
        for (k, v) in overrides.iter() {
            if !known.iter().any(|x| x == k) {
                return Err(Error::Config(format!("unknown config key `{k}`")));
            }
            kv.set(k, v);
        }

        let channels: usize = kv.require("data.channels")?;
        let classes: usize = kv.require("data.classes")?;
        let length: usize = kv.require("window.length")?;
        let t: usize = kv.require("ssa.context_window")?;
        let batch_size: usize = kv.require("train.batch_size")?;
        let adam = AdamConfig {
            beta1: kv.require("adam.beta1")?,
            beta2: kv.require("adam.beta2")?,
            weight_decay: kv.require("adam.weight_decay")?,
            epsilon: kv.require("adam.epsilon")?,
        };
        let model = BackboneConfig {
            channels,
            window_length: length,
            conv_blocks: parse_blocks(kv.require_str("model.conv_blocks")?)?,
            latent_dim: kv.require("model.latent_dim")?,
            encoder_layers: kv.require("model.encoder_layers")?,
            encoder_heads: kv.require("model.encoder_heads")?,
            context_window: t,
            horizons: kv.require("model.horizons")?,
            num_classes: classes,
        };
        model.validate()?;

        let mut synth = SynthConfig::new(
            kv.require("synth.users")?,
            classes,
            kv.require("synth.windows_per_class")?,
            channels,
            length,
            0,
        );
        synth.sample_rate_hz = kv.require("synth.sample_rate_hz")?;
        synth.gain_range = pair(&kv, "synth.gain")?;
        synth.max_rotation = kv.require("synth.max_rotation")?;
        synth.warp_range = pair(&kv, "synth.warp")?;
        synth.noise_range = pair(&kv, "synth.noise")?;
        synth.drift_range = pair(&kv, "synth.drift")?;

        let view_mode: ViewMode = kv.require_str("ssa.view_mode")?.parse()?;
        let path = |key: &str| -> Result<Option<PathBuf>> {
            Ok(Some(kv.require_str(key)?).filter(|s| !s.is_empty()).map(PathBuf::from))
        };
        let cfg = Self {
            data_dir: path("data.dir")?,
            synth,
            stride: kv.require("window.stride")?,
            model,
            pretrain: PretrainConfig {
                epochs: kv.require("pretrain.epochs")?,
                lr: kv.require("pretrain.lr")?,
                batch_size,
                adam,
                contrastive_weight: kv.require("pretrain.contrastive_weight")?,
                seed: 0,
            },
            ssa: SsaConfig {
                epochs: kv.require("ssa.epochs")?,
                lr: kv.require("ssa.lr")?,
                batch_size,
                context_window: t,
                view_mode,
                mask_fraction: kv.require("ssa.mask_fraction")?,
                adam,
                seed: 0,
            },
            ssp: SspConfig {
                epochs: kv.require("ssp.epochs")?,
                lr: kv.require("ssp.lr")?,
                batch_size,
                ema_decay: kv.require("ssp.ema_decay")?,
                confidence_threshold: kv.require("ssp.confidence_threshold")?,
                min_per_record: kv.require("ssp.min_per_record")?,
                filtering: flag(&kv, "ssp.filtering")?,
                adam,
                seed: 0,
            },
            folds: kv.require("eval.folds")?,
            ablate_groups: kv.get_list("ablate.groups")?.unwrap_or_default(),
            ablate_t_values: kv.get_list("ablate.t_values")?.unwrap_or_default(),
            ablate_seeds: kv.get_list("ablate.seeds")?.unwrap_or_default(),
            seed: kv.require("seed")?,
            out: path("out")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_kv(&KvMap::parse(text)?)
    }

    fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::Config("window.stride must be positive".into()));
        }
        if self.pretrain.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if self.folds < 2 {
            return Err(Error::Config("eval.folds must be at least 2".into()));
        }
        if !(0.0..=1.0).contains(&self.ssa.mask_fraction) {
            return Err(Error::Config("ssa.mask_fraction must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.ssp.ema_decay) {
            return Err(Error::Config("ssp.ema_decay must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Sorted `key=value` text of every key, defaults included.
    pub fn canonical_text(&self) -> String {
        self.to_kv().to_text()
    }

    /// First 16 hex digits of the SHA-256 of the canonical text without
    /// `seed` and `out`.
    pub fn fingerprint(&self) -> String {
        let mut kv = self.to_kv();
        for k in UNHASHED {
            kv.remove(k);
        }
        let digest = Sha256::digest(kv.to_text().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Synthetic population for `seed`.
    pub fn synth_for(&self, seed: u64) -> SynthConfig {
        SynthConfig {
            seed,
            ..self.synth.clone()
        }
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            model: self.model.clone(),
            stride: self.stride,
            folds: self.folds,
            pretrain: self.pretrain.clone(),
            ssa: self.ssa.clone(),
            ssp: self.ssp.clone(),
            fingerprint: self.fingerprint(),
        }
    }
}
