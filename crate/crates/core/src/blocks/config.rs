use serde::{Deserialize, Serialize};

use crate::attention::default_heads;
use crate::error::{Error, Result};
use crate::ssm::ScanMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    MAdan,
    ConditionalTokens,
}

/// Where the residual gate sits in modulated mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GatePlacement {
    /// `α·f + Sublayer(AdaN(f))`, with `α = 1 + head output`.
    #[default]
    Identity,
    /// `f + α·Sublayer(AdaN(f))`, with `α = head output`.
    Sublayer,
}

/// One residual sublayer of a variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SublayerKind {
    SpatialAttention,
    TemporalAttention,
    /// Pointwise MLP following an attention sublayer (only with `attn_ffn`).
    Mlp,
    GlobalMamba,
    SpatialMamba,
    TemporalMamba,
}

impl SublayerKind {
    pub fn short(self) -> &'static str {
        match self {
            SublayerKind::SpatialAttention => "spatial_attn",
            SublayerKind::TemporalAttention => "temporal_attn",
            SublayerKind::Mlp => "mlp",
            SublayerKind::GlobalMamba => "global_mamba",
            SublayerKind::SpatialMamba => "spatial_mamba",
            SublayerKind::TemporalMamba => "temporal_mamba",
        }
    }

    pub fn is_mamba(self) -> bool {
        matches!(
            self,
            SublayerKind::GlobalMamba | SublayerKind::SpatialMamba | SublayerKind::TemporalMamba
        )
    }
}

fn default_d_state() -> usize {
    16
}
fn default_expand() -> usize {
    2
}
fn default_patch() -> usize {
    2
}
fn default_freq_dim() -> usize {
    256
}
fn default_conv_kernel() -> usize {
    4
}
fn default_in_channels() -> usize {
    4
}
fn default_conditioning() -> Conditioning {
    Conditioning::MAdan
}

/// Backbone hyperparameters. `layers` counts repetitions of the variant's
/// sublayer group: V1 `[global Mamba]`, V2 alternating spatial/temporal
/// Mamba (one sublayer per layer, so `layers` must be even), V3 `[spatial
/// attention, temporal attention, global Mamba]`, V4 `[temporal attention,
/// global Mamba]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: u8,
    pub layers: usize,
    pub hidden: usize,
    #[serde(default = "default_d_state")]
    pub d_state: usize,
    #[serde(default = "default_expand")]
    pub expand: usize,
    #[serde(default = "default_patch")]
    pub patch: usize,
    /// Attention heads; `hidden / 64` (at least 1) when absent.
    #[serde(default)]
    pub heads: Option<usize>,
    #[serde(default = "default_conditioning")]
    pub conditioning: Conditioning,
    #[serde(default)]
    pub num_classes: Option<usize>,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    #[serde(default)]
    pub gate: GatePlacement,
    /// Adds a 4×hidden MLP sublayer after every attention sublayer.
    #[serde(default)]
    pub attn_ffn: bool,
    #[serde(default = "default_freq_dim")]
    pub freq_dim: usize,
    #[serde(default = "default_conv_kernel")]
    pub conv_kernel: usize,
    #[serde(default)]
    pub scan_mode: ScanMode,
}

impl ModelConfig {
    pub fn new(variant: u8, layers: usize, hidden: usize) -> Self {
        Self {
            variant,
            layers,
            hidden,
            d_state: default_d_state(),
            expand: default_expand(),
            patch: default_patch(),
            heads: None,
            conditioning: default_conditioning(),
            num_classes: None,
            in_channels: default_in_channels(),
            gate: GatePlacement::default(),
            attn_ffn: false,
            freq_dim: default_freq_dim(),
            conv_kernel: default_conv_kernel(),
            scan_mode: ScanMode::default(),
        }
    }

    /// Named sizes: `S`, `B`, `L`, `XL`.
    pub fn preset(name: &str, variant: u8) -> Result<Self> {
        let (layers, hidden) = match name.to_ascii_uppercase().as_str() {
            "S" => (12, 384),
            "B" => (12, 768),
            "L" => (24, 1024),
            "XL" => (28, 1152),
            other => return Err(Error::Config(format!("unknown preset {other}"))),
        };
        Ok(Self::new(variant, layers, hidden))
    }

    pub fn heads(&self) -> usize {
        self.heads.unwrap_or_else(|| default_heads(self.hidden))
    }

    pub fn d_inner(&self) -> usize {
        self.expand * self.hidden
    }

    pub fn dt_rank(&self) -> usize {
        self.hidden.div_ceil(16)
    }

    /// Output channels per pixel: noise prediction and variance logits.
    pub fn out_channels(&self) -> usize {
        2 * self.in_channels
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(1..=4).contains(&self.variant) {
            return bad(format!("variant must be 1..=4, got {}", self.variant));
        }
        if self.layers == 0 || self.hidden == 0 || self.d_state == 0 || self.expand == 0 || self.patch == 0 {
            return bad("layers, hidden, d_state, expand and patch must be positive".into());
        }
        if self.variant == 2 && self.layers % 2 != 0 {
            return bad(format!("variant 2 alternates spatial/temporal sublayers; layers={} is odd", self.layers));
        }
        if self.hidden % 4 != 0 {
            return bad(format!("hidden={} must be divisible by 4 for the positional embedding", self.hidden));
        }
        let h = self.heads();
        if h == 0 || self.hidden % h != 0 {
            return bad(format!("{h} heads do not divide hidden={}", self.hidden));
        }
        if self.freq_dim == 0 || self.freq_dim % 2 != 0 {
            return bad(format!("freq_dim={} must be even and positive", self.freq_dim));
        }
        if self.conv_kernel == 0 || self.in_channels == 0 {
            return bad("conv_kernel and in_channels must be positive".into());
        }
        if self.num_classes == Some(0) {
            return bad("num_classes must be positive when present".into());
        }
        Ok(())
    }

    /// Sublayers in execution order.
    pub fn plan(&self) -> Result<Vec<SublayerKind>> {
        use SublayerKind::*;
        self.validate()?;
        let attn = |k: SublayerKind| {
            if self.attn_ffn {
                vec![k, Mlp]
            } else {
                vec![k]
            }
        };
        let group: Vec<SublayerKind> = match self.variant {
            1 => vec![GlobalMamba],
            2 => return Ok((0..self.layers).map(|i| if i % 2 == 0 { SpatialMamba } else { TemporalMamba }).collect()),
            3 => [attn(SpatialAttention), attn(TemporalAttention), vec![GlobalMamba]].concat(),
            _ => [attn(TemporalAttention), vec![GlobalMamba]].concat(),
        };
        Ok(std::iter::repeat_n(group, self.layers).flatten().collect())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plans() {
        let c = ModelConfig::new(3, 2, 64);
        assert_eq!(c.plan().unwrap().len(), 6);
        assert_eq!(ModelConfig::new(2, 4, 64).plan().unwrap()[1], SublayerKind::TemporalMamba);
        assert!(ModelConfig::new(2, 3, 64).plan().is_err());
        assert!(ModelConfig::new(5, 3, 64).plan().is_err());
        let mut f = ModelConfig::new(4, 1, 64);
        f.attn_ffn = true;
        assert_eq!(
            f.plan().unwrap(),
            vec![SublayerKind::TemporalAttention, SublayerKind::Mlp, SublayerKind::GlobalMamba]
        );
    }

    #[test]
    fn json_round_trip_and_defaults() {
        let mut c = ModelConfig::preset("xl", 3).unwrap();
        c.num_classes = Some(2);
        c.conditioning = Conditioning::ConditionalTokens;
        assert_eq!(ModelConfig::from_json(&c.to_json()).unwrap(), c);
        let m = ModelConfig::from_json(r#"{"variant": 1, "layers": 2, "hidden": 8}"#).unwrap();
        assert_eq!((m.d_state, m.expand, m.patch, m.heads()), (16, 2, 2, 1));
        assert_eq!(m.conditioning, Conditioning::MAdan);
        assert!(m.to_json().contains("\"m_adan\""));
        assert_eq!(ModelConfig::preset("S", 1).unwrap().dt_rank(), 24);
    }
}
