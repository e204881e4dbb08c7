//! Run configuration: `key = value` sections (TOML), every key optional
//! with a documented default, unknown keys rejected.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubsampleMode {
    /// Keep the last state of each window.
    Skip,
    /// Concatenate the states of each window.
    Concat,
    /// Sum the states of each window.
    Add,
}

impl fmt::Display for SubsampleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SubsampleMode::Skip => "skip",
            SubsampleMode::Concat => "concat",
            SubsampleMode::Add => "add",
        })
    }
}

impl FromStr for SubsampleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "skip" => Ok(SubsampleMode::Skip),
            "concat" => Ok(SubsampleMode::Concat),
            "add" => Ok(SubsampleMode::Add),
            other => Err(Error::Config(format!("unknown subsample mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Stacked bidirectional LSTM layers.
    pub num_layers: usize,
    /// Hidden units per direction.
    pub hidden: usize,
    /// 1-based layer indices followed by a subsampling stage.
    pub subsample_after: BTreeSet<usize>,
    pub subsample_mode: SubsampleMode,
    pub window: usize,
    /// Dropout on the inputs of layers 2..=num_layers in training mode.
    pub dropout_rate: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 3,
            hidden: 128,
            subsample_after: BTreeSet::from([1]),
            subsample_mode: SubsampleMode::Skip,
            window: 2,
            dropout_rate: 0.2,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.hidden == 0 {
            return Err(Error::Config("encoder needs num_layers >= 1 and hidden >= 1".into()));
        }
        if self.window < 2 {
            return Err(Error::Config(format!("subsampling window {} < 2", self.window)));
        }
        if let Some(&bad) = self
            .subsample_after
            .iter()
            .find(|&&i| i == 0 || i >= self.num_layers)
        {
            return Err(Error::Config(format!(
                "subsample_after contains {bad}, allowed range is 1..={}",
                self.num_layers - 1
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    /// Overall time-resolution reduction.
    pub fn factor(&self) -> usize {
        self.window.pow(self.subsample_after.len() as u32)
    }

    /// Sequence length after every subsampling stage.
    pub fn output_len(&self, t_len: usize) -> usize {
        self.subsample_after
            .iter()
            .fold(t_len, |n, _| n.div_ceil(self.window))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    /// Label embedding dimension (rows of the embedding matrix).
    pub embed_dim: usize,
    /// Width of the joint-feature layer and of the score weight vector.
    pub d_w: usize,
    /// Segment embedding dimension (encoder projection and segment recurrence).
    pub d_h: usize,
    pub d_dur: usize,
    pub use_duration: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            d_w: 64,
            d_h: 64,
            d_dur: 8,
            use_duration: true,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.d_w == 0 || self.d_h == 0 {
            return Err(Error::Config("feature dimensions must be positive".into()));
        }
        if self.use_duration && self.d_dur == 0 {
            return Err(Error::Config("d_dur must be positive when use_duration is on".into()));
        }
        Ok(())
    }
}

/// Maximum segment duration, stated in original frames (or milliseconds)
/// and divided by the subsampling factor, rounding up.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClampConfig {
    pub frames: usize,
    /// Overrides `frames` when set: `frames = ceil(ms / frame_period_ms)`.
    pub ms: Option<f64>,
    pub frame_period_ms: f64,
}

impl Default for ClampConfig {
    fn default() -> Self {
        Self {
            frames: 30,
            ms: None,
            frame_period_ms: 10.0,
        }
    }
}

impl ClampConfig {
    pub fn validate(&self) -> Result<()> {
        if self.original_frames() == 0 {
            return Err(Error::Config("clamp must allow at least one frame".into()));
        }
        if !(self.frame_period_ms > 0.0) {
            return Err(Error::Config("frame_period_ms must be positive".into()));
        }
        Ok(())
    }

    pub fn original_frames(&self) -> usize {
        match self.ms {
            Some(ms) => (ms / self.frame_period_ms).ceil().max(0.0) as usize,
            None => self.frames,
        }
    }

    /// Clamp `L` in encoder-output frames.
    pub fn subsampled(&self, factor: usize) -> usize {
        self.original_frames().div_ceil(factor).max(1)
    }
}

/// Everything that determines parameter shapes and the forward computation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub features: FeatureConfig,
    pub clamp: ClampConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            features: FeatureConfig::default(),
            clamp: ClampConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.features.validate()?;
        self.clamp.validate()
    }

    /// Clamp in encoder-output frames.
    pub fn clamp_len(&self) -> usize {
        self.clamp.subsampled(self.encoder.factor())
    }

    /// Small setting: 3 layers of 128 units, one skip subsampling stage.
    pub fn small() -> Self {
        Self::default()
    }

    /// Large setting: 6 layers of 250 units.
    pub fn large() -> Self {
        let mut cfg = Self::default();
        cfg.encoder.num_layers = 6;
        cfg.encoder.hidden = 250;
        cfg
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "small" => Ok(Self::small()),
            "large" => Ok(Self::large()),
            other => Err(Error::Config(format!("unknown preset {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_init: f64,
    pub decay_factor: f64,
    pub max_epochs: usize,
    /// Epochs without improvement of the best validation error before decay.
    pub patience: usize,
    /// Stop once the learning rate drops below this; defaults to `lr_init / 1024`.
    pub min_lr: Option<f64>,
    pub seed: u64,
    /// Utterances per gradient step.
    pub batch: usize,
    /// Per-utterance gradient max-norm.
    pub clip_norm: f64,
    /// Parameters start uniform in `[-init_scale, init_scale]`.
    pub init_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_init: 0.1,
            decay_factor: 2.0,
            max_epochs: 30,
            patience: 1,
            min_lr: None,
            seed: 1,
            batch: 1,
            clip_norm: 5.0,
            init_scale: 0.3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_init > 0.0) {
            return Err(Error::Config("lr_init must be positive".into()));
        }
        if !(self.decay_factor > 1.0) {
            return Err(Error::Config("decay_factor must exceed 1".into()));
        }
        if self.patience == 0 || self.batch == 0 {
            return Err(Error::Config("patience and batch must be at least 1".into()));
        }
        if !(self.clip_norm > 0.0) || !(self.init_scale >= 0.0) {
            return Err(Error::Config("clip_norm must be positive, init_scale non-negative".into()));
        }
        Ok(())
    }

    pub fn min_lr(&self) -> f64 {
        self.min_lr.unwrap_or(self.lr_init / 1024.0)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        // Relative data paths resolve against the config file's directory.
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.data.train, &mut cfg.data.valid, &mut cfg.data.vocab]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
