use std::fmt;

use serde::{Deserialize, Serialize};

use crate::augment::MODEL_INPUT_SIZE;
use crate::error::{Error, Result};
use crate::numerics::Activation;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// Depthwise-separable blocks with residual shortcuts.
    XceptionStyle,
    /// Inverted-residual MBConv blocks with squeeze-excite.
    EfficientnetStyle,
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::XceptionStyle => "xception_style",
            Family::EfficientnetStyle => "efficientnet_style",
        })
    }
}

/// Architecture scale.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Tiny widths for tests.
    Toy,
    /// Moderate widths for desk-scale runs.
    Small,
    /// Depths and widths close to the full-size networks.
    Paper,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Preset::Toy),
            "small" => Ok(Preset::Small),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::Config(format!("unknown preset '{other}' (toy|small|paper)"))),
        }
    }
}

fn default_kernel() -> usize {
    3
}

fn default_expand() -> usize {
    1
}

/// A run of blocks at one width; only the first block is strided.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub width: usize,
    pub blocks: usize,
    pub stride: usize,
    /// Depthwise kernel size (odd).
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    /// MBConv expansion factor; ignored by the xception family.
    #[serde(default = "default_expand")]
    pub expand: usize,
}

impl StageConfig {
    const fn new(width: usize, blocks: usize, stride: usize, kernel: usize, expand: usize) -> Self {
        StageConfig { width, blocks, stride, kernel, expand }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub family: Family,
    /// Output channels of the 3x3 stem convolution.
    pub stem_width: usize,
    pub stem_stride: usize,
    pub stages: Vec<StageConfig>,
    pub activation: Activation,
    /// Squeeze-excite width as a fraction of the block input width; 0 disables it.
    #[serde(default)]
    pub se_ratio: f64,
    /// Token width after projection.
    pub embed_dim: usize,
}

impl BackboneConfig {
    pub fn preset(family: Family, preset: Preset) -> Self {
        use StageConfig as S;
        match (family, preset) {
            (Family::XceptionStyle, Preset::Toy) => BackboneConfig {
                family,
                stem_width: 16,
                stem_stride: 2,
                stages: vec![S::new(24, 1, 2, 3, 1), S::new(32, 2, 2, 3, 1), S::new(64, 1, 2, 3, 1)],
                activation: Activation::Relu,
                se_ratio: 0.0,
                embed_dim: 32,
            },
            (Family::EfficientnetStyle, Preset::Toy) => BackboneConfig {
                family,
                stem_width: 16,
                stem_stride: 2,
                stages: vec![S::new(16, 1, 2, 3, 1), S::new(24, 2, 2, 3, 2), S::new(32, 1, 2, 5, 2)],
                activation: Activation::Swish,
                se_ratio: 0.25,
                embed_dim: 32,
            },
            (Family::XceptionStyle, Preset::Small) => BackboneConfig {
                family,
                stem_width: 32,
                stem_stride: 2,
                stages: vec![S::new(64, 2, 2, 3, 1), S::new(128, 2, 2, 3, 1), S::new(256, 2, 2, 3, 1)],
                activation: Activation::Relu,
                se_ratio: 0.0,
                embed_dim: 128,
            },
            (Family::EfficientnetStyle, Preset::Small) => BackboneConfig {
                family,
                stem_width: 32,
                stem_stride: 2,
                stages: vec![S::new(24, 1, 2, 3, 1), S::new(40, 2, 2, 3, 4), S::new(80, 2, 2, 5, 4)],
                activation: Activation::Swish,
                se_ratio: 0.25,
                embed_dim: 128,
            },
            (Family::XceptionStyle, Preset::Paper) => BackboneConfig {
                family,
                stem_width: 32,
                stem_stride: 2,
                stages: vec![
                    S::new(128, 2, 2, 3, 1),
                    S::new(256, 2, 2, 3, 1),
                    S::new(728, 8, 2, 3, 1),
                    S::new(1024, 2, 2, 3, 1),
                    S::new(2048, 2, 1, 3, 1),
                ],
                activation: Activation::Relu,
                se_ratio: 0.0,
                embed_dim: 768,
            },
            (Family::EfficientnetStyle, Preset::Paper) => BackboneConfig {
                family,
                stem_width: 48,
                stem_stride: 2,
                stages: vec![
                    S::new(24, 2, 1, 3, 1),
                    S::new(32, 4, 2, 3, 6),
                    S::new(56, 4, 2, 5, 6),
                    S::new(112, 6, 2, 3, 6),
                    S::new(160, 6, 1, 5, 6),
                    S::new(272, 8, 2, 5, 6),
                    S::new(448, 2, 1, 3, 6),
                ],
                activation: Activation::Swish,
                se_ratio: 0.25,
                embed_dim: 768,
            },
        }
    }

    /// Product of all strides.
    pub fn total_stride(&self) -> usize {
        self.stem_stride * self.stages.iter().map(|s| s.stride).product::<usize>()
    }

    /// Side of the final feature grid for a square input.
    pub fn grid_side(&self, input: usize) -> usize {
        // odd kernels with padding k/2 give ceil(h / stride) per layer
        let mut h = input.div_ceil(self.stem_stride);
        for s in &self.stages {
            h = h.div_ceil(s.stride);
        }
        h
    }

    /// Tokens produced per image at the model input size.
    pub fn token_count(&self) -> usize {
        let g = self.grid_side(MODEL_INPUT_SIZE);
        g * g
    }

    /// Channels of the final feature map.
    pub fn out_channels(&self) -> usize {
        self.stages.last().map_or(self.stem_width, |s| s.width)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(format!("{} backbone: {m}", self.family)));
        if self.embed_dim == 0 || self.stem_width == 0 || self.stem_stride == 0 {
            return err("embed_dim, stem_width and stem_stride must be positive".into());
        }
        if self.stages.is_empty() {
            return err("at least one stage is required".into());
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.width == 0 || s.blocks == 0 || s.stride == 0 || s.expand == 0 {
                return err(format!("stage {i}: width, blocks, stride and expand must be positive"));
            }
            if s.kernel % 2 == 0 {
                return err(format!("stage {i}: kernel must be odd, got {}", s.kernel));
            }
        }
        if !(0.0..=1.0).contains(&self.se_ratio) {
            return err(format!("se_ratio must lie in [0, 1], got {}", self.se_ratio));
        }
        let stride = self.total_stride();
        if MODEL_INPUT_SIZE % stride != 0 {
            return err(format!("cumulative stride {stride} does not divide {MODEL_INPUT_SIZE}"));
        }
        Ok(())
    }
}
