use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Manifest schema version this build reads and writes.
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    /// Training target: 1 for fake, 0 for real.
    pub fn target(self) -> f64 {
        match self {
            Label::Real => 0.0,
            Label::Fake => 1.0,
        }
    }

    pub fn from_score(score: f64, threshold: f64) -> Label {
        if score >= threshold {
            Label::Fake
        } else {
            Label::Real
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Real => "real",
            Label::Fake => "fake",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Usage(format!("unknown split '{other}' (train|val|test)"))),
        }
    }
}

/// Source collection of a video.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Subset {
    Deepfakes,
    Face2Face,
    FaceSwap,
    NeuralTextures,
    Pristine,
    #[serde(rename = "DFDC-real")]
    DfdcReal,
    #[serde(rename = "DFDC-fake")]
    DfdcFake,
    #[serde(rename = "custom")]
    Custom,
}

impl Subset {
    pub fn name(self) -> &'static str {
        match self {
            Subset::Deepfakes => "Deepfakes",
            Subset::Face2Face => "Face2Face",
            Subset::FaceSwap => "FaceSwap",
            Subset::NeuralTextures => "NeuralTextures",
            Subset::Pristine => "Pristine",
            Subset::DfdcReal => "DFDC-real",
            Subset::DfdcFake => "DFDC-fake",
            Subset::Custom => "custom",
        }
    }
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One video entry. Paths are relative to the manifest's directory unless
/// absolute; `landmarks`, when present, pairs one sidecar with each frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoRecord {
    pub video_id: String,
    pub subset: Subset,
    pub label: Label,
    pub split: Split,
    pub frames: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub landmarks: Option<Vec<PathBuf>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    version: u32,
    videos: Vec<VideoRecord>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ManifestStats {
    pub videos: BTreeMap<Split, usize>,
    pub frames: BTreeMap<Split, usize>,
    /// Video counts per split and subset.
    pub subsets: BTreeMap<Split, BTreeMap<Subset, usize>>,
    pub empty_videos: usize,
}

/// Validated dataset manifest with paths resolved against its directory.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub videos: Vec<VideoRecord>,
    pub stats: ManifestStats,
}

impl DatasetManifest {
    /// Reads and validates a manifest file; every frame and sidecar must exist.
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::io(format!("reading manifest {}", path.display()), e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_json(&text, &root, true)
    }

    /// Parses manifest JSON; relative paths are joined onto `root`.
    pub fn from_json(text: &str, root: &Path, check_files: bool) -> Result<Self> {
        let file: ManifestFile =
            serde_json::from_str(text).map_err(|e| Error::Data(format!("manifest schema violation: {e}")))?;
        if file.version != MANIFEST_VERSION {
            return Err(Error::Data(format!(
                "manifest version {} is not supported (expected {MANIFEST_VERSION})",
                file.version
            )));
        }
        let mut videos = file.videos;
        for v in &mut videos {
            for p in v.frames.iter_mut().chain(v.landmarks.iter_mut().flatten()) {
                if p.is_relative() {
                    *p = root.join(&*p);
                }
            }
        }
        Self::from_records(root.to_path_buf(), videos, check_files)
    }

    pub fn from_records(root: PathBuf, videos: Vec<VideoRecord>, check_files: bool) -> Result<Self> {
        let mut seen: HashMap<&str, (usize, Split)> = HashMap::new();
        for (i, v) in videos.iter().enumerate() {
            let at = format!("videos[{i}] ('{}')", v.video_id);
            if v.video_id.is_empty() {
                return Err(Error::Data(format!("videos[{i}].video_id must not be empty")));
            }
            if let Some(&(j, split)) = seen.get(v.video_id.as_str()) {
                return Err(Error::Data(if split != v.split {
                    format!(
                        "video_id '{}' appears in both {split} (videos[{j}]) and {} (videos[{i}]); splits must be disjoint",
                        v.video_id, v.split
                    )
                } else {
                    format!("video_id '{}' is duplicated (videos[{j}] and videos[{i}])", v.video_id)
                }));
            }
            seen.insert(&v.video_id, (i, v.split));
            if let Some(lm) = &v.landmarks {
                if lm.len() != v.frames.len() {
                    return Err(Error::Data(format!(
                        "{at}.landmarks has {} entries but frames has {}",
                        lm.len(),
                        v.frames.len()
                    )));
                }
            }
            if check_files {
                for p in v.frames.iter().chain(v.landmarks.iter().flatten()) {
                    if !p.is_file() {
                        return Err(Error::Data(format!("{at}: missing file {}", p.display())));
                    }
                }
            }
        }
        let stats = compute_stats(&videos);
        Ok(DatasetManifest { root, videos, stats })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &VideoRecord> {
        self.videos.iter().filter(move |v| v.split == split)
    }

    pub fn has_split(&self, split: Split) -> bool {
        self.split(split).next().is_some()
    }

    /// Errors unless every frame of `split` has a landmark sidecar.
    pub fn require_landmarks(&self, split: Split) -> Result<()> {
        match self.split(split).find(|v| v.landmarks.is_none() && !v.frames.is_empty()) {
            Some(v) => Err(Error::Data(format!(
                "video '{}' ({split}) has no landmark sidecars, which face cut-out requires",
                v.video_id
            ))),
            None => Ok(()),
        }
    }

    /// Serializes records back to schema JSON with paths as stored.
    pub fn to_json(&self) -> Result<String> {
        let file = ManifestFile { version: MANIFEST_VERSION, videos: self.videos.clone() };
        serde_json::to_string_pretty(&file).map_err(|e| Error::json("serializing manifest", e))
    }
}

fn compute_stats(videos: &[VideoRecord]) -> ManifestStats {
    let mut s = ManifestStats::default();
    for v in videos {
        *s.videos.entry(v.split).or_default() += 1;
        *s.frames.entry(v.split).or_default() += v.frames.len();
        *s.subsets.entry(v.split).or_default().entry(v.subset).or_default() += 1;
        if v.frames.is_empty() {
            s.empty_videos += 1;
        }
    }
    s
}

/// Writes manifest JSON for `videos`, whose paths are stored verbatim.
pub fn write_manifest(path: &Path, videos: &[VideoRecord]) -> Result<()> {
    let file = ManifestFile { version: MANIFEST_VERSION, videos: videos.to_vec() };
    let text = serde_json::to_string_pretty(&file).map_err(|e| Error::json("serializing manifest", e))?;
    fs::write(path, text).map_err(|e| Error::io(format!("writing manifest {}", path.display()), e))
}
