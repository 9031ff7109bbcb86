use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::codec::decode_image;
use super::manifest::{DatasetManifest, Label, Split, Subset};
use crate::augment::{LandmarkSet, RgbImage};
use crate::error::{Error, Result};

/// Smallest accepted face crop side.
pub const MIN_FRAME_SIDE: usize = 32;

/// One cropped face with its identifiers.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceFrame {
    pub pixels: RgbImage,
    pub landmarks: Option<LandmarkSet>,
    pub label: Label,
    pub video_id: String,
    pub subset: Subset,
    /// Position of the frame within its video.
    pub frame_index: usize,
}

impl FaceFrame {
    pub fn new(
        pixels: RgbImage,
        landmarks: Option<LandmarkSet>,
        label: Label,
        video_id: impl Into<String>,
        subset: Subset,
        frame_index: usize,
    ) -> Result<Self> {
        let video_id = video_id.into();
        if pixels.width < MIN_FRAME_SIDE || pixels.height < MIN_FRAME_SIDE {
            return Err(Error::Data(format!(
                "frame {frame_index} of video '{video_id}' is {}x{}; faces must be at least {MIN_FRAME_SIDE}x{MIN_FRAME_SIDE}",
                pixels.width, pixels.height
            )));
        }
        Ok(FaceFrame { pixels, landmarks, label, video_id, subset, frame_index })
    }
}

/// Reads a sidecar holding a JSON array of 81 `[x, y]` pairs.
pub fn load_landmarks(path: &Path) -> Result<LandmarkSet> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading landmarks {}", path.display()), e))?;
    parse_landmarks(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub fn parse_landmarks(text: &str) -> Result<LandmarkSet> {
    let points: Vec<[f64; 2]> = serde_json::from_str(text)
        .map_err(|e| Error::Data(format!("landmarks must be an array of [x, y] pairs: {e}")))?;
    LandmarkSet::new(points)
}

/// A frame on disk plus the identifiers needed to load it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameRef {
    pub video_id: String,
    pub subset: Subset,
    pub label: Label,
    pub frame_index: usize,
    pub path: PathBuf,
    pub landmarks: Option<PathBuf>,
}

impl FrameRef {
    pub fn load(&self) -> Result<FaceFrame> {
        let pixels = decode_image(&self.path)?;
        let landmarks = self.landmarks.as_deref().map(load_landmarks).transpose()?;
        FaceFrame::new(pixels, landmarks, self.label, self.video_id.clone(), self.subset, self.frame_index)
    }
}

/// Random access to an ordered collection of frames.
pub trait FrameSource: Sync {
    fn len(&self) -> usize;
    fn frame(&self, index: usize) -> Result<FaceFrame>;
    fn label(&self, index: usize) -> Label;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl FrameSource for [FaceFrame] {
    fn len(&self) -> usize {
        <[FaceFrame]>::len(self)
    }

    fn frame(&self, index: usize) -> Result<FaceFrame> {
        Ok(self[index].clone())
    }

    fn label(&self, index: usize) -> Label {
        self[index].label
    }
}

impl FrameSource for Vec<FaceFrame> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn frame(&self, index: usize) -> Result<FaceFrame> {
        Ok(self[index].clone())
    }

    fn label(&self, index: usize) -> Label {
        self[index].label
    }
}

impl FrameSource for [FrameRef] {
    fn len(&self) -> usize {
        <[FrameRef]>::len(self)
    }

    fn frame(&self, index: usize) -> Result<FaceFrame> {
        self[index].load()
    }

    fn label(&self, index: usize) -> Label {
        self[index].label
    }
}

impl FrameSource for Vec<FrameRef> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn frame(&self, index: usize) -> Result<FaceFrame> {
        self[index].load()
    }

    fn label(&self, index: usize) -> Label {
        self[index].label
    }
}

/// Per-video frame quotas; selection is always a prefix of the video.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingPolicy {
    /// Frames per fake video in train and val.
    pub fake_frames: usize,
    /// Frames per real video in train and val.
    pub real_frames: usize,
    /// Frames per video in test, either label.
    pub test_frames: usize,
    /// Optional cap on the total frames drawn from one split; videos are
    /// truncated in manifest order once it is reached.
    pub max_frames: Option<usize>,
}

impl Default for SamplingPolicy {
    fn default() -> Self {
        SamplingPolicy { fake_frames: 50, real_frames: 150, test_frames: 16, max_frames: None }
    }
}

impl SamplingPolicy {
    pub fn quota(&self, split: Split, label: Label) -> usize {
        match (split, label) {
            (Split::Test, _) => self.test_frames,
            (_, Label::Fake) => self.fake_frames,
            (_, Label::Real) => self.real_frames,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampledVideo {
    pub video_id: String,
    pub subset: Subset,
    pub label: Label,
    pub frames: Vec<FrameRef>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleStats {
    pub videos: usize,
    pub frames: usize,
    /// Videos with fewer frames than their quota.
    pub short_videos: usize,
    /// Videos without any frame, skipped.
    pub skipped_empty: Vec<String>,
}

/// Frames of one split, grouped by video in manifest order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampledSplit {
    pub split: Split,
    pub videos: Vec<SampledVideo>,
    pub stats: SampleStats,
}

impl SampledSplit {
    pub fn frames(&self) -> Vec<FrameRef> {
        self.videos.iter().flat_map(|v| v.frames.iter().cloned()).collect()
    }
}

/// Deterministic prefix selection of each video's frames under `policy`.
pub fn sample_frames(manifest: &DatasetManifest, split: Split, policy: &SamplingPolicy) -> Result<SampledSplit> {
    if !manifest.has_split(split) {
        return Err(Error::Data(format!("manifest has no {split} videos")));
    }
    let mut stats = SampleStats::default();
    let mut videos = Vec::new();
    let mut budget = policy.max_frames.unwrap_or(usize::MAX);
    for v in manifest.split(split) {
        if v.frames.is_empty() {
            log::warn!("video '{}' has no frames; skipped", v.video_id);
            stats.skipped_empty.push(v.video_id.clone());
            continue;
        }
        if budget == 0 {
            break;
        }
        let quota = policy.quota(split, v.label);
        if v.frames.len() < quota {
            log::warn!("video '{}' has {} frames, fewer than its quota of {quota}", v.video_id, v.frames.len());
            stats.short_videos += 1;
        }
        let take = quota.min(v.frames.len()).min(budget);
        budget -= take;
        let frames = (0..take)
            .map(|i| FrameRef {
                video_id: v.video_id.clone(),
                subset: v.subset,
                label: v.label,
                frame_index: i,
                path: v.frames[i].clone(),
                landmarks: v.landmarks.as_ref().map(|l| l[i].clone()),
            })
            .collect::<Vec<_>>();
        stats.videos += 1;
        stats.frames += frames.len();
        videos.push(SampledVideo { video_id: v.video_id.clone(), subset: v.subset, label: v.label, frames });
    }
    Ok(SampledSplit { split, videos, stats })
}
