//! The hybrid model: two backbones, early fusion and the transformer head.

mod params;

pub use params::{Forward, ParamStore};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbones::{self, BackboneConfig, Family, Preset};
use crate::error::{dim_err, Error, Result};
use crate::fusion::{self, FusionConfig};
use crate::numerics::{NormMode, Real, Tensor, Var};

pub const XCEPTION_PREFIX: &str = "xception";
pub const EFFICIENTNET_PREFIX: &str = "efficientnet";

/// Frames per inference chunk in [`HybridModel::predict`].
const PREDICT_CHUNK: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HybridModelConfig {
    pub xception: BackboneConfig,
    pub efficientnet: BackboneConfig,
    pub fusion: FusionConfig,
}

impl HybridModelConfig {
    pub fn preset(preset: Preset) -> Self {
        HybridModelConfig {
            xception: BackboneConfig::preset(Family::XceptionStyle, preset),
            efficientnet: BackboneConfig::preset(Family::EfficientnetStyle, preset),
            fusion: FusionConfig::preset(preset),
        }
    }

    /// Encoder sequence length including the class token.
    pub fn seq_len(&self) -> usize {
        1 + self.xception.token_count() + self.efficientnet.token_count()
    }

    pub fn validate(&self) -> Result<()> {
        self.xception.validate()?;
        self.efficientnet.validate()?;
        self.fusion.validate()?;
        if self.xception.family != Family::XceptionStyle || self.efficientnet.family != Family::EfficientnetStyle {
            return Err(Error::Config("model needs one xception_style and one efficientnet_style backbone".into()));
        }
        let d = self.fusion.embed_dim;
        if self.xception.embed_dim != d || self.efficientnet.embed_dim != d {
            return Err(Error::Config(format!(
                "backbone embed dims ({}, {}) must equal the fusion width {d}",
                self.xception.embed_dim, self.efficientnet.embed_dim
            )));
        }
        if self.fusion.max_len < self.seq_len() {
            return Err(Error::Config(format!(
                "fusion max_len {} is below the realized sequence length {}",
                self.fusion.max_len,
                self.seq_len()
            )));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form; identifies the architecture.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        format!("{:x}", Sha256::digest(json.as_bytes()))
    }
}

/// Full forward pass of an `[N, 3, H, W]` batch to `[N]` probabilities.
pub fn model_forward<T: Real>(fw: &mut Forward<'_, T>, x: Var, cfg: &HybridModelConfig) -> Result<Var> {
    let a = backbones::backbone_tokens(fw, x, &cfg.xception, XCEPTION_PREFIX)?;
    let b = backbones::backbone_tokens(fw, x, &cfg.efficientnet, EFFICIENTNET_PREFIX)?;
    fusion::fusion_forward(fw, a, b, &cfg.fusion)
}

/// Architecture plus its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct HybridModel<T: Real> {
    pub config: HybridModelConfig,
    pub params: ParamStore<T>,
}

impl<T: Real> HybridModel<T> {
    /// Fresh random initialization from `seed`.
    pub fn new(config: HybridModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        backbones::register(&mut params, &config.xception, XCEPTION_PREFIX, &mut rng)?;
        backbones::register(&mut params, &config.efficientnet, EFFICIENTNET_PREFIX, &mut rng)?;
        fusion::register(&mut params, &config.fusion, &mut rng)?;
        Ok(HybridModel { config, params })
    }

    pub fn forward(&self, fw: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        model_forward(fw, x, &self.config)
    }

    /// Inference-mode probabilities for `[N, 3, H, W]` inputs.
    pub fn predict(&self, inputs: &Tensor<T>) -> Result<Vec<f64>> {
        let shape = inputs.shape();
        if shape.len() != 4 {
            return Err(dim_err!("predict expects [N,3,H,W], got {shape:?}"));
        }
        let per = shape[1..].iter().product::<usize>();
        let mut out = Vec::with_capacity(shape[0]);
        for chunk in inputs.data().chunks(PREDICT_CHUNK * per.max(1)) {
            let n = chunk.len() / per;
            let mut chunk_shape = shape.to_vec();
            chunk_shape[0] = n;
            let mut fw = Forward::new(&self.params, NormMode::Infer, false);
            let x = fw.input(Tensor::new(chunk_shape, chunk.to_vec())?);
            let p = self.forward(&mut fw, x)?;
            out.extend(fw.graph.value(p).data().iter().map(|v| v.as_f64()));
        }
        Ok(out)
    }
}
