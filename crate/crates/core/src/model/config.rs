use crate::error::{Error, Result};
use crate::kv::KvMap;

pub const DEFAULT_CONTEXT_WINDOW: usize = 17;
pub const DEFAULT_HORIZONS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvBlock {
    pub out_channels: usize,
    pub kernel_width: usize,
    pub stride: usize,
}

impl ConvBlock {
    pub fn new(out_channels: usize, kernel_width: usize, stride: usize) -> Self {
        Self {
            out_channels,
            kernel_width,
            stride,
        }
    }
}

/// Shape of the recognition network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneConfig {
    pub channels: usize,
    pub window_length: usize,
    pub conv_blocks: Vec<ConvBlock>,
    pub latent_dim: usize,
    pub encoder_layers: usize,
    pub encoder_heads: usize,
    pub context_window: usize,
    pub horizons: usize,
    pub num_classes: usize,
}

impl BackboneConfig {
    /// Three ReLU conv blocks (widths 7, 5, 3; strides 2, 1, 1), a 2-layer
    /// 2-head causal encoder, T = 17 and K = 4.
    pub fn standard(channels: usize, window_length: usize, latent_dim: usize, num_classes: usize) -> Self {
        Self {
            channels,
            window_length,
            conv_blocks: vec![
                ConvBlock::new(latent_dim, 7, 2),
                ConvBlock::new(latent_dim, 5, 1),
                ConvBlock::new(latent_dim, 3, 1),
            ],
            latent_dim,
            encoder_layers: 2,
            encoder_heads: 2,
            context_window: DEFAULT_CONTEXT_WINDOW,
            horizons: DEFAULT_HORIZONS,
            num_classes,
        }
    }

    /// Length of the latent sequence after every conv block, or `None` if
    /// some kernel is wider than its input.
    pub fn latent_len(&self) -> Option<usize> {
        self.conv_blocks.iter().try_fold(self.window_length, |len, b| {
            (b.kernel_width <= len && b.stride > 0).then(|| (len - b.kernel_width) / b.stride + 1)
        })
    }

    pub fn head_dim(&self) -> usize {
        self.latent_dim / self.encoder_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("channels", self.channels),
            ("window_length", self.window_length),
            ("latent_dim", self.latent_dim),
            ("encoder_layers", self.encoder_layers),
            ("encoder_heads", self.encoder_heads),
            ("context_window", self.context_window),
            ("horizons", self.horizons),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("backbone `{name}` must be positive")));
        }
        let last = self
            .conv_blocks
            .last()
            .ok_or_else(|| Error::Config("at least one conv block is required".into()))?;
        if self.conv_blocks.iter().any(|b| b.out_channels == 0 || b.kernel_width == 0 || b.stride == 0) {
            return Err(Error::Config("conv block sizes must be positive".into()));
        }
        if last.out_channels != self.latent_dim {
            return Err(Error::Config(format!(
                "last conv block has {} outputs but latent_dim is {}",
                last.out_channels, self.latent_dim
            )));
        }
        if self.latent_dim % self.encoder_heads != 0 {
            return Err(Error::Config(format!(
                "latent_dim {} is not divisible by {} heads",
                self.latent_dim, self.encoder_heads
            )));
        }
        let lz = self.latent_len().ok_or_else(|| {
            Error::Config(format!(
                "conv stack does not fit a window of {} samples",
                self.window_length
            ))
        })?;
        if lz < self.context_window + self.horizons {
            return Err(Error::Config(format!(
                "latent length {lz} is shorter than context window T={} plus horizons K={}",
                self.context_window, self.horizons
            )));
        }
        Ok(())
    }

    pub fn write_kv(&self, kv: &mut KvMap) {
        let blocks: Vec<String> = self
            .conv_blocks
            .iter()
            .map(|b| format!("{}:{}:{}", b.out_channels, b.kernel_width, b.stride))
            .collect();
        kv.set("model.channels", self.channels);
        kv.set("model.window_length", self.window_length);
        kv.set("model.conv_blocks", blocks.join(","));
        kv.set("model.latent_dim", self.latent_dim);
        kv.set("model.encoder_layers", self.encoder_layers);
        kv.set("model.encoder_heads", self.encoder_heads);
        kv.set("model.context_window", self.context_window);
        kv.set("model.horizons", self.horizons);
        kv.set("model.num_classes", self.num_classes);
    }

    pub fn read_kv(kv: &KvMap) -> Result<Self> {
        Ok(Self {
            channels: kv.require("model.channels")?,
            window_length: kv.require("model.window_length")?,
            conv_blocks: parse_blocks(kv.require_str("model.conv_blocks")?)?,
            latent_dim: kv.require("model.latent_dim")?,
            encoder_layers: kv.require("model.encoder_layers")?,
            encoder_heads: kv.require("model.encoder_heads")?,
            context_window: kv.require("model.context_window")?,
            horizons: kv.require("model.horizons")?,
            num_classes: kv.require("model.num_classes")?,
        })
    }
}

/// Parses `out:width:stride,out:width:stride,...`.
pub fn parse_blocks(text: &str) -> Result<Vec<ConvBlock>> {
    text.split(',')
        .map(|b| {
            let parts: Vec<usize> = b
                .trim()
                .split(':')
                .map(|p| p.trim().parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Config(format!("bad conv block `{b}`")))?;
            match parts.as_slice() {
                [o, w, s] => Ok(ConvBlock::new(*o, *w, *s)),
                _ => Err(Error::Config(format!(
                    "conv block `{b}` must be out:width:stride"
                ))),
            }
        })
        .collect()
}
