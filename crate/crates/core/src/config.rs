//! Run configuration, read from and written to TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::propagation::MemoryConfig;

/// Box-branch variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    /// Per-side pinpoint maps with decoupled aggregation.
    #[default]
    Pinpoint,
    /// Decoupled pooling of features, then projection to coordinate distributions.
    PinpointImplicit,
    /// Top-left / bottom-right corner maps.
    Corner,
}

/// Feature extractor in front of the box projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LocalizerKind {
    #[default]
    Transformer,
    /// Stack of 3x3 convolutions over the propagated grid.
    Conv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Identity bank capacity (number of object slots, background excluded).
    pub capacity: usize,
    /// Embedding width shared by encoder output, ID bank and attention.
    pub channels: usize,
    /// Encoder stage widths at strides 2, 4 and 8.
    pub encoder_channels: [usize; 3],
    /// Decoder width.
    pub decoder_channels: usize,
    pub heads: usize,
    pub propagation_layers: usize,
    pub bidr_layers: usize,
    pub head_layers: usize,
    /// Side length of the per-object token grid pooled from each box.
    pub bidr_pool: usize,
    pub dual_cross_attention: bool,
    pub mask_reconstruction: bool,
    pub head: HeadKind,
    pub localizer: LocalizerKind,
    pub pixel_mean: [f32; 3],
    pub pixel_std: [f32; 3],
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            capacity: 10,
            channels: 64,
            encoder_channels: [16, 32, 48],
            decoder_channels: 32,
            heads: 8,
            propagation_layers: 3,
            bidr_layers: 3,
            head_layers: 3,
            bidr_pool: 7,
            dual_cross_attention: true,
            mask_reconstruction: true,
            head: HeadKind::Pinpoint,
            localizer: LocalizerKind::Transformer,
            pixel_mean: [0.45, 0.45, 0.45],
            pixel_std: [0.25, 0.25, 0.25],
        }
    }
}

impl ModelConfig {
    pub const STRIDE: usize = 16;

    pub fn validate(&self) -> Result<()> {
        if self.capacity == 0 || self.capacity > 254 {
            return Err(Error::Config(format!("capacity {} outside 1..=254", self.capacity)));
        }
        if self.channels % self.heads != 0 || self.channels % 4 != 0 {
            return Err(Error::Config(format!(
                "channels {} must be divisible by 4 and by heads {}",
                self.channels, self.heads
            )));
        }
        if self.bidr_pool == 0 {
            return Err(Error::Config("bidr_pool must be positive".into()));
        }
        if self.pixel_std.iter().any(|&s| s <= 0.0) {
            return Err(Error::Config("pixel_std must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub lr_power: f64,
    /// Probability of initializing a training clip from boxes instead of masks.
    pub p_box: f64,
    /// Number of synthetic training sequences; sequence `i` uses seed `sequence_seed + i`.
    pub num_sequences: usize,
    pub sequence_seed: u64,
    /// Frames predicted per clip after the reference frame.
    pub clip_frames: usize,
    /// Largest frame gap between the reference and the first predicted frame.
    pub max_ref_gap: usize,
    /// Largest frame gap between consecutive predicted frames.
    pub max_gap: usize,
    pub grad_clip: f64,
    pub checkpoint_every: usize,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr_start: 1e-3,
            lr_end: 1e-5,
            lr_power: 0.9,
            p_box: 0.3,
            num_sequences: 8,
            sequence_seed: 1000,
            clip_frames: 2,
            max_ref_gap: 3,
            max_gap: 3,
            grad_clip: 1.0,
            checkpoint_every: 0,
            log_every: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub memory: MemoryConfig,
    pub synth: SynthConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            loss: LossWeights::default(),
            memory: MemoryConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

impl Config {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.synth.validate()?;
        self.memory.validate()?;
        if self.synth.max_objects > self.model.capacity {
            return Err(Error::Config(format!(
                "synthetic sequences may hold {} objects but the ID bank holds {}",
                self.synth.max_objects, self.model.capacity
            )));
        }
        if !(0.0..=1.0).contains(&self.train.p_box) {
            return Err(Error::Config(format!("p_box {} outside [0, 1]", self.train.p_box)));
        }
        if self.train.clip_frames == 0 || self.train.max_gap == 0 || self.train.max_ref_gap == 0 {
            return Err(Error::Config("clip_frames, max_ref_gap and max_gap must be positive".into()));
        }
        Ok(())
    }
}
