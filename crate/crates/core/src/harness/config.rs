use std::path::Path;

use serde::{Deserialize, Serialize};

use super::sprites::SpriteDatasetSpec;
use crate::blocks::ModelConfig;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Training run description. The model keys sit at the top level next to
/// the training fields; the dataset is nested under `data`.
///
/// ```json
/// { "variant": 3, "layers": 2, "hidden": 64, "in_channels": 1,
///   "data": { "frames": 8, "height": 16, "width": 16, "num_videos": 64 },
///   "batch_size": 8, "seed": 0 }
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(flatten)]
    pub model: ModelConfig,
    pub data: SpriteDatasetSpec,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_ema")]
    pub ema_decay: f64,
    #[serde(default = "default_steps")]
    pub diffusion_steps: usize,
    /// Reverse steps used by `sample` (strided subset of `diffusion_steps`).
    #[serde(default = "default_sample_steps")]
    pub sample_steps: usize,
    #[serde(default = "yes")]
    pub flip: bool,
    /// Write a checkpoint every this many steps; 0 writes only the final one.
    #[serde(default)]
    pub checkpoint_every: u64,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default)]
    pub seed: u64,
}

fn default_batch() -> usize {
    8
}
fn default_lr() -> f64 {
    1e-4
}
fn default_ema() -> f64 {
    0.99
}
fn default_steps() -> usize {
    1000
}
fn default_sample_steps() -> usize {
    100
}
fn yes() -> bool {
    true
}

impl TrainConfig {
    pub fn new(model: ModelConfig, data: SpriteDatasetSpec) -> Self {
        Self {
            model,
            data,
            batch_size: default_batch(),
            lr: default_lr(),
            weight_decay: 0.0,
            ema_decay: default_ema(),
            diffusion_steps: default_steps(),
            sample_steps: default_sample_steps(),
            flip: true,
            checkpoint_every: 0,
            precision: Precision::default(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.data.channels != self.model.in_channels {
            return bad(format!(
                "data has {} channels but the model expects {}",
                self.data.channels, self.model.in_channels
            ));
        }
        let p = self.model.patch;
        if self.data.height % p != 0 || self.data.width % p != 0 {
            return bad(format!("frame {}x{} not divisible by patch {p}", self.data.height, self.data.width));
        }
        if let (Some(dc), Some(mc)) = (self.data.classes, self.model.num_classes) {
            if dc > mc {
                return bad(format!("data has {dc} classes, model embeds {mc}"));
            }
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.ema_decay) || self.weight_decay < 0.0 {
            return bad("lr must be positive, ema_decay in [0, 1), weight_decay nonnegative".into());
        }
        if self.diffusion_steps < 2 || self.sample_steps == 0 || self.sample_steps > self.diffusion_steps {
            return bad(format!(
                "need 2 <= diffusion_steps and 1 <= sample_steps <= diffusion_steps, got {} and {}",
                self.diffusion_steps, self.sample_steps
            ));
        }
        Ok(())
    }

    /// Whether training feeds class labels to the model.
    pub fn class_conditional(&self) -> bool {
        self.data.classes.is_some() && self.model.num_classes.is_some()
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Load {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
