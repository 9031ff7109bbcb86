use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::geometry::{bounding_box, convex_hull, in_convex_polygon, polygon_area, Point};
use super::image::Image;
use super::landmarks::{FaceRegion, LandmarkSet};
use crate::error::{dim_err, Result};

/// Smallest image side random cut-out accepts.
pub const MIN_RANDOM_CUTOUT_SIDE: usize = 16;

/// Square side as a fraction of `min(H, W)`.
pub const CUTOUT_SIDE_RANGE: (f64, f64) = (0.2, 0.4);

/// Axis-aligned square centered on pixel `(cx, cy)`; may extend past the
/// image and is clipped when painted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Square {
    pub cx: usize,
    pub cy: usize,
    pub side: usize,
}

impl Square {
    /// Covered pixel span `[x0, x1) x [y0, y1)` before clipping.
    pub fn span(&self) -> (isize, isize, isize, isize) {
        let half = (self.side / 2) as isize;
        let (x0, y0) = (self.cx as isize - half, self.cy as isize - half);
        (x0, y0, x0 + self.side as isize, y0 + self.side as isize)
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        let (x0, y0, x1, y1) = self.span();
        let (x, y) = (x as isize, y as isize);
        x >= x0 && x < x1 && y >= y0 && y < y1
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        let (x0, y0, x1, y1) = self.span();
        x0 >= 0 && y0 >= 0 && x1 <= width as isize && y1 <= height as isize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomCutoutPlan {
    pub squares: [Square; 2],
}

impl RandomCutoutPlan {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        self.squares.iter().any(|s| s.contains(x, y))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaceCutoutPlan {
    pub region: FaceRegion,
    /// Convex hull of the region's clipped landmarks, or the corners of
    /// their bounding box when the hull is degenerate.
    pub polygon: Vec<Point>,
    pub bounding_box_fallback: bool,
}

impl FaceCutoutPlan {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        let p = [x as f64, y as f64];
        if self.bounding_box_fallback {
            bounding_box(&self.polygon)
                .is_some_and(|(x0, y0, x1, y1)| p[0] >= x0 && p[0] <= x1 && p[1] >= y0 && p[1] <= y1)
        } else {
            in_convex_polygon(&self.polygon, p)
        }
    }
}

fn paint(img: &mut Image, fill: f32, inside: impl Fn(usize, usize) -> bool) {
    for y in 0..img.height {
        for x in 0..img.width {
            if inside(x, y) {
                for c in 0..img.channels {
                    img.set(c, y, x, fill);
                }
            }
        }
    }
}

/// Draws two squares with side `~ U[0.2, 0.4] * min(H, W)` (rounded, kept
/// inside that range) and centers uniform over the image.
pub fn draw_random_cutout(width: usize, height: usize, rng: &mut impl Rng) -> Result<RandomCutoutPlan> {
    if width < MIN_RANDOM_CUTOUT_SIDE || height < MIN_RANDOM_CUTOUT_SIDE {
        return Err(dim_err!(
            "random cut-out needs at least {MIN_RANDOM_CUTOUT_SIDE}x{MIN_RANDOM_CUTOUT_SIDE}, got {width}x{height}"
        ));
    }
    let m = width.min(height) as f64;
    let lo = (CUTOUT_SIDE_RANGE.0 * m).ceil() as usize;
    let hi = (CUTOUT_SIDE_RANGE.1 * m).floor() as usize;
    let mut square = || {
        let frac = rng.random_range(CUTOUT_SIDE_RANGE.0..=CUTOUT_SIDE_RANGE.1);
        let side = ((frac * m).round() as usize).clamp(lo, hi);
        Square { cx: rng.random_range(0..width), cy: rng.random_range(0..height), side }
    };
    Ok(RandomCutoutPlan { squares: [square(), square()] })
}

pub fn apply_random_cutout(img: &Image, plan: &RandomCutoutPlan, fill: f32) -> Image {
    let mut out = img.clone();
    paint(&mut out, fill, |x, y| plan.contains(x, y));
    out
}

/// Occludes two random squares with `fill`.
pub fn random_cutout(img: &Image, seed: u64, fill: f32) -> Result<(Image, RandomCutoutPlan)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_cutout_with(img, &mut rng, fill)
}

pub fn random_cutout_with(img: &Image, rng: &mut impl Rng, fill: f32) -> Result<(Image, RandomCutoutPlan)> {
    let plan = draw_random_cutout(img.width, img.height, rng)?;
    Ok((apply_random_cutout(img, &plan, fill), plan))
}

/// Mask polygon for one region: hull of its landmarks clipped to the frame.
pub fn region_polygon(landmarks: &LandmarkSet, region: FaceRegion, width: usize, height: usize) -> FaceCutoutPlan {
    let (xmax, ymax) = ((width.max(1) - 1) as f64, (height.max(1) - 1) as f64);
    let pts: Vec<Point> = region
        .indices()
        .iter()
        .map(|&i| {
            let [x, y] = landmarks.points()[i];
            [x.clamp(0.0, xmax), y.clamp(0.0, ymax)]
        })
        .collect();
    let hull = convex_hull(&pts);
    if hull.len() >= 3 && polygon_area(&hull).abs() > 1e-9 {
        FaceCutoutPlan { region, polygon: hull, bounding_box_fallback: false }
    } else {
        let (x0, y0, x1, y1) = bounding_box(&pts).expect("regions have at least three points");
        FaceCutoutPlan { region, polygon: vec![[x0, y0], [x1, y0], [x1, y1], [x0, y1]], bounding_box_fallback: true }
    }
}

pub fn apply_face_cutout(img: &Image, plan: &FaceCutoutPlan, fill: f32) -> Image {
    let mut out = img.clone();
    paint(&mut out, fill, |x, y| plan.contains(x, y));
    out
}

/// Occludes one uniformly chosen face region.
pub fn face_cutout(img: &Image, landmarks: &LandmarkSet, seed: u64, fill: f32) -> Result<(Image, FaceCutoutPlan)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(face_cutout_with(img, landmarks, &mut rng, fill))
}

pub fn face_cutout_with(
    img: &Image,
    landmarks: &LandmarkSet,
    rng: &mut impl Rng,
    fill: f32,
) -> (Image, FaceCutoutPlan) {
    let region = FaceRegion::ALL[rng.random_range(0..FaceRegion::ALL.len())];
    let plan = region_polygon(landmarks, region, img.width, img.height);
    (apply_face_cutout(img, &plan, fill), plan)
}
