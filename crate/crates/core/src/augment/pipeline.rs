use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::affine::{affine_transform, AffineParams};
use super::cutout::{face_cutout_with, random_cutout_with, FaceCutoutPlan, RandomCutoutPlan};
use super::image::{normalize, resize_bilinear, Image, Normalization};
use crate::datapipe::FaceFrame;
use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

/// Model input resolution; every pipeline output is `[3, 224, 224]`.
pub const MODEL_INPUT_SIZE: usize = 224;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CutoutMode {
    #[default]
    None,
    FaceCutout,
    RandomCutout,
}

impl std::str::FromStr for CutoutMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(CutoutMode::None),
            "face_cutout" | "face-cutout" => Ok(CutoutMode::FaceCutout),
            "random_cutout" | "random-cutout" => Ok(CutoutMode::RandomCutout),
            other => {
                Err(Error::Config(format!("unknown augmentation mode '{other}' (none|face_cutout|random_cutout)")))
            }
        }
    }
}

/// Ranges and probabilities for the stochastic augmentations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Rotation drawn from `[-max_rotate_deg, max_rotate_deg]`.
    pub max_rotate_deg: f64,
    /// Per-axis translation drawn from `[-max_translate_frac, max_translate_frac]`.
    pub max_translate_frac: f64,
    pub scale_range: [f64; 2],
    pub p_rotate: f64,
    pub p_translate: f64,
    pub p_scale: f64,
    pub p_hflip: f64,
    pub p_cutout: f64,
    /// Pixel value (0..255 scale) written into cut-outs and affine borders.
    pub fill_value: f32,
    pub normalization: Normalization,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            max_rotate_deg: 15.0,
            max_translate_frac: 0.1,
            scale_range: [0.9, 1.1],
            p_rotate: 0.5,
            p_translate: 0.5,
            p_scale: 0.5,
            p_hflip: 0.5,
            p_cutout: 0.5,
            fill_value: 0.0,
            normalization: Normalization::default(),
        }
    }
}

impl AugmentConfig {
    /// Every augmentation switched off; only resize and normalize remain.
    pub fn disabled() -> Self {
        AugmentConfig { p_rotate: 0.0, p_translate: 0.0, p_scale: 0.0, p_hflip: 0.0, p_cutout: 0.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("p_rotate", self.p_rotate),
            ("p_translate", self.p_translate),
            ("p_scale", self.p_scale),
            ("p_hflip", self.p_hflip),
            ("p_cutout", self.p_cutout),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        let [lo, hi] = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!("scale_range must satisfy 0 < lo <= hi, got {:?}", self.scale_range)));
        }
        if !(self.max_rotate_deg >= 0.0 && self.max_translate_frac >= 0.0) {
            return Err(Error::Config("rotation and translation ranges must be non-negative".into()));
        }
        self.normalization.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CutoutPlan {
    Face(FaceCutoutPlan),
    Random(RandomCutoutPlan),
}

/// Everything that was drawn for one frame; with the input frame it fully
/// determines the output tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPlan {
    pub seed: u64,
    pub mode: CutoutMode,
    pub affine: AffineParams,
    /// `None` when the mode is `none` or the cut-out coin came up tails.
    pub cutout: Option<CutoutPlan>,
    pub fill_value: [f32; 3],
    pub output_size: [usize; 2],
}

fn draw_affine(cfg: &AugmentConfig, rng: &mut impl Rng) -> AffineParams {
    let mut p = AffineParams::default();
    if rng.random_bool(cfg.p_rotate) && cfg.max_rotate_deg > 0.0 {
        p.rotate_deg = rng.random_range(-cfg.max_rotate_deg..=cfg.max_rotate_deg);
    }
    if rng.random_bool(cfg.p_translate) && cfg.max_translate_frac > 0.0 {
        p.translate_frac_x = rng.random_range(-cfg.max_translate_frac..=cfg.max_translate_frac);
        p.translate_frac_y = rng.random_range(-cfg.max_translate_frac..=cfg.max_translate_frac);
    }
    if rng.random_bool(cfg.p_scale) {
        p.scale = rng.random_range(cfg.scale_range[0]..=cfg.scale_range[1]);
    }
    p.hflip = rng.random_bool(cfg.p_hflip);
    p
}

/// Frame to model-ready tensor: affine (each sub-transform with its own
/// probability), then the selected cut-out with probability `p_cutout`, then
/// resize to 224x224 and normalize. Pure in `(frame, mode, seed, cfg)`.
pub fn apply_pipeline<T: Real>(
    frame: &FaceFrame,
    mode: CutoutMode,
    seed: u64,
    cfg: &AugmentConfig,
) -> Result<(Tensor<T>, AugmentationPlan)> {
    cfg.validate()?;
    if mode == CutoutMode::FaceCutout && frame.landmarks.is_none() {
        return Err(Error::Data(format!(
            "frame {} of video '{}' has no landmarks but face cut-out was requested",
            frame.frame_index, frame.video_id
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = Image::from(&frame.pixels);
    let fill = cfg.fill_value;

    let affine = draw_affine(cfg, &mut rng);
    let mut landmarks = frame.landmarks.clone();
    if !affine.is_identity() {
        img = affine_transform(&img, &affine, fill)?;
        if let Some(lm) = &landmarks {
            let (w, h) = (img.width, img.height);
            landmarks = Some(lm.map(|[x, y]| {
                let (mx, my) = affine.map_point(w, h, x, y);
                [mx, my]
            })?);
        }
    }

    let cutout = if mode != CutoutMode::None && rng.random_bool(cfg.p_cutout) {
        Some(match mode {
            CutoutMode::RandomCutout => {
                let (out, plan) = random_cutout_with(&img, &mut rng, fill)?;
                img = out;
                CutoutPlan::Random(plan)
            }
            CutoutMode::FaceCutout => {
                let lm = landmarks.as_ref().expect("checked above");
                let (out, plan) = face_cutout_with(&img, lm, &mut rng, fill);
                img = out;
                CutoutPlan::Face(plan)
            }
            CutoutMode::None => unreachable!(),
        })
    } else {
        None
    };

    let img = resize_bilinear(&img, MODEL_INPUT_SIZE, MODEL_INPUT_SIZE)?;
    let tensor = normalize(&img, &cfg.normalization)?;
    let plan = AugmentationPlan {
        seed,
        mode,
        affine,
        cutout,
        fill_value: [fill; 3],
        output_size: [MODEL_INPUT_SIZE, MODEL_INPUT_SIZE],
    };
    Ok((tensor, plan))
}
