//! Face pre-processing: resize, normalization and seeded augmentations
//! (affine transforms, random square cut-outs, landmark-region cut-outs).

mod affine;
mod cutout;
pub mod geometry;
mod image;
mod landmarks;
mod pipeline;

pub use affine::{affine_transform, AffineParams};
pub use cutout::{
    apply_face_cutout, apply_random_cutout, draw_random_cutout, face_cutout, face_cutout_with, random_cutout,
    random_cutout_with, region_polygon, FaceCutoutPlan, RandomCutoutPlan, Square, CUTOUT_SIDE_RANGE,
    MIN_RANDOM_CUTOUT_SIDE,
};
pub use image::{denormalize, normalize, resize_bilinear, Image, Normalization, RgbImage};
pub use landmarks::{FaceRegion, LandmarkSet, LANDMARK_COUNT, REGION_TABLE_VERSION};
pub use pipeline::{apply_pipeline, AugmentConfig, AugmentationPlan, CutoutMode, CutoutPlan, MODEL_INPUT_SIZE};
