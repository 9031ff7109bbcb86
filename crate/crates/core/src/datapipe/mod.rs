//! Dataset manifests, frame files, landmark sidecars, frame sampling and
//! batch assembly.

mod batches;
mod codec;
mod frames;
mod manifest;

pub use batches::{batch_order, derive_seed, make_batches, Batch, BatchMode, Batches};
pub use codec::{decode_bytes, decode_image, encode_p6, encode_png, write_image};
pub use frames::{
    load_landmarks, parse_landmarks, sample_frames, FaceFrame, FrameRef, FrameSource, SampleStats, SampledSplit,
    SampledVideo, SamplingPolicy, MIN_FRAME_SIDE,
};
pub use manifest::{
    write_manifest, DatasetManifest, Label, ManifestStats, Split, Subset, VideoRecord, MANIFEST_VERSION,
};
