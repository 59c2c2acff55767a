//! Network configuration and domain types.

pub mod encoder;
pub mod layers;
mod net;

pub use encoder::{Encoder, ResNet50, TinyEncoder, RESNET50_SIDE_CHANNELS};
pub use layers::{GBlock, LrGroup, NamedBuffer, Param, ParamCollector};
pub use net::{MreBlock, SaliencyNet};

use crate::error::{Result, SodError};
use crate::tensor::Var;
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

/// Effective spatial extent of a dilated 3x3 kernel: 2*rate + 1.
pub fn effective_extent(rate: usize) -> usize {
    assert!(rate >= 1, "dilation rate must be >= 1");
    2 * rate + 1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    Resnet50Pretrained,
    #[default]
    Tiny,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub side_channels: [usize; 4],
    /// (H, W), both multiples of 32.
    pub input_size: (usize, usize),
    /// Parameter archive for the ResNet-50 backbone; requesting one that is
    /// missing is a config error, not a silent random init.
    pub pretrained_weights: Option<PathBuf>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            kind: EncoderKind::Tiny,
            side_channels: [16, 32, 64, 128],
            input_size: (352, 352),
            pretrained_weights: None,
        }
    }
}

impl EncoderConfig {
    pub fn resnet50() -> Self {
        EncoderConfig {
            kind: EncoderKind::Resnet50Pretrained,
            side_channels: RESNET50_SIDE_CHANNELS,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == EncoderKind::Resnet50Pretrained
            && self.side_channels != RESNET50_SIDE_CHANNELS
        {
            return Err(SodError::Config(format!(
                "resnet50 side_channels must be {RESNET50_SIDE_CHANNELS:?}, got {:?}",
                self.side_channels
            )));
        }
        if self.input_size.0 % 32 != 0 || self.input_size.1 % 32 != 0 {
            return Err(SodError::Config(format!(
                "input_size must be multiples of 32, got {:?}",
                self.input_size
            )));
        }
        if self.side_channels.iter().any(|&c| c == 0) {
            return Err(SodError::Config("side_channels must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MreConfig {
    pub unified_channels: usize,
    /// Three strictly increasing dilation rates per side output.
    pub rates_per_side: [[usize; 3]; 4],
}

impl Default for MreConfig {
    fn default() -> Self {
        MreConfig {
            unified_channels: 128,
            rates_per_side: [[1, 2, 3], [1, 2, 3], [1, 2, 3], [1, 3, 5]],
        }
    }
}

impl MreConfig {
    pub fn validate(&self) -> Result<()> {
        if self.unified_channels == 0 {
            return Err(SodError::Config("unified_channels must be positive".into()));
        }
        for rates in &self.rates_per_side {
            if rates[0] < 1 || rates[0] >= rates[1] || rates[1] >= rates[2] {
                return Err(SodError::Config(format!(
                    "dilation rates must be >= 1 and strictly increasing, got {rates:?}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub mre: MreConfig,
    /// `false` replaces each multi-receptive block with its 1x1 channel
    /// reduction only (ablation mode).
    pub use_mre: bool,
    pub fusion_channels: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            mre: MreConfig::default(),
            use_mre: true,
            fusion_channels: 128,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.mre.validate()?;
        if self.fusion_channels != self.mre.unified_channels {
            return Err(SodError::Config(format!(
                "fusion_channels ({}) must equal mre.unified_channels ({})",
                self.fusion_channels, self.mre.unified_channels
            )));
        }
        Ok(())
    }
}

/// An activation plus its downscale factor relative to the network input.
#[derive(Clone)]
pub struct FeatureMap {
    pub var: Var,
    pub stride: usize,
}

impl FeatureMap {
    pub fn assert_finite(&self) -> Result<()> {
        if self.var.data().iter().any(|v| !v.is_finite()) {
            return Err(SodError::Numeric("non-finite activation".into()));
        }
        Ok(())
    }
}

/// The four encoder side outputs, strides 4/8/16/32.
pub struct SideFeatures {
    pub sides: [FeatureMap; 4],
}

pub const SIDE_STRIDES: [usize; 4] = [4, 8, 16, 32];

/// Two single-channel logit maps at input resolution.
pub struct PredictionPair {
    pub p1_logits: FeatureMap,
    pub p2_logits: FeatureMap,
}

/// Final saliency map: mean of the two sigmoid maps, values in [0,1].
pub fn combine_predictions(pair: &PredictionPair) -> ArrayD<f64> {
    let p1 = pair.p1_logits.var.data();
    let p2 = pair.p2_logits.var.data();
    let s1 = p1.mapv(|z| 1.0 / (1.0 + (-z).exp()));
    let s2 = p2.mapv(|z| 1.0 / (1.0 + (-z).exp()));
    (s1 + s2) / 2.0
}
