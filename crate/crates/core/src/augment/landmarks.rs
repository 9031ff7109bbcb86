use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LANDMARK_COUNT: usize = 81;

/// 81 facial keypoints in frame pixel coordinates.
///
/// Layout: the 68-point iBUG ordering (jaw 0-16, brows 17-26, nose 27-35,
/// eyes 36-47, mouth 48-67) followed by 13 forehead points 68-80.
/// Points may sit slightly outside the frame; masking clips them.
#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkSet {
    points: Vec<[f64; 2]>,
}

impl LandmarkSet {
    pub fn new(points: Vec<[f64; 2]>) -> Result<Self> {
        if points.len() != LANDMARK_COUNT {
            return Err(Error::Data(format!("expected {LANDMARK_COUNT} landmarks, got {}", points.len())));
        }
        if let Some(i) = points.iter().position(|p| !p[0].is_finite() || !p[1].is_finite()) {
            return Err(Error::Data(format!("landmark {i} has a non-finite coordinate")));
        }
        Ok(LandmarkSet { points })
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn map(&self, f: impl Fn([f64; 2]) -> [f64; 2]) -> Result<Self> {
        LandmarkSet::new(self.points.iter().map(|&p| f(p)).collect())
    }
}

/// Version of the [`FaceRegion`] index table; bump when any set changes.
pub const REGION_TABLE_VERSION: u32 = 1;

/// Named face part cut out by face cut-out augmentation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaceRegion {
    /// Image-left eye (the subject's right eye).
    LeftEye,
    RightEye,
    Nose,
    Mouth,
    Jaw,
    /// Brows plus the forehead arc.
    Forehead,
}

const LEFT_EYE: &[usize] = &[36, 37, 38, 39, 40, 41];
const RIGHT_EYE: &[usize] = &[42, 43, 44, 45, 46, 47];
const NOSE: &[usize] = &[27, 28, 29, 30, 31, 32, 33, 34, 35];
const MOUTH: &[usize] = &[48, 49, 50, 51, 52, 53, 54, 55, 56, 57, 58, 59];
const JAW: &[usize] = &[0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16];
const FOREHEAD: &[usize] =
    &[17, 18, 19, 20, 21, 22, 23, 24, 25, 26, 68, 69, 70, 71, 72, 73, 74, 75, 76, 77, 78, 79, 80];

impl FaceRegion {
    pub const ALL: [FaceRegion; 6] = [
        FaceRegion::LeftEye,
        FaceRegion::RightEye,
        FaceRegion::Nose,
        FaceRegion::Mouth,
        FaceRegion::Jaw,
        FaceRegion::Forehead,
    ];

    pub fn indices(self) -> &'static [usize] {
        match self {
            FaceRegion::LeftEye => LEFT_EYE,
            FaceRegion::RightEye => RIGHT_EYE,
            FaceRegion::Nose => NOSE,
            FaceRegion::Mouth => MOUTH,
            FaceRegion::Jaw => JAW,
            FaceRegion::Forehead => FOREHEAD,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FaceRegion::LeftEye => "left_eye",
            FaceRegion::RightEye => "right_eye",
            FaceRegion::Nose => "nose",
            FaceRegion::Mouth => "mouth",
            FaceRegion::Jaw => "jaw",
            FaceRegion::Forehead => "forehead",
        }
    }
}

impl fmt::Display for FaceRegion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}
