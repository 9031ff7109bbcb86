//! Synthetic faces, landmark layouts and on-disk fixture corpora shared by
//! the integration suites.
#![allow(dead_code)]

pub mod oracle;
pub mod primitives;

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use deepfuse::augment::{LandmarkSet, RgbImage};
use deepfuse::datapipe::{write_image, write_manifest, FaceFrame, Label, Split, Subset, VideoRecord};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform noise in `[lo, hi]`.
pub fn noise_image(width: usize, height: usize, lo: u8, hi: u8, seed: u64) -> RgbImage {
    let mut r = rng(seed);
    let data = (0..3 * width * height).map(|_| r.random_range(lo..=hi)).collect();
    RgbImage::new(width, height, data).unwrap()
}

/// A plausible 81-point layout for a face filling a `width x height` crop.
pub fn face_landmarks(width: usize, height: usize) -> LandmarkSet {
    let (w, h) = (width as f64, height as f64);
    let (cx, cy) = (w / 2.0, h / 2.0);
    let mut pts = Vec::with_capacity(81);
    for i in 0..17 {
        let t = PI - i as f64 * PI / 16.0;
        pts.push([cx + 0.4 * w * t.cos(), cy + 0.4 * h * t.sin()]);
    }
    for i in 0..10 {
        pts.push([
            0.2 * w + i as f64 * 0.6 * w / 9.0,
            cy - 0.15 * h - if (2..8).contains(&i) { 0.02 * h } else { 0.0 },
        ]);
    }
    for i in 0..4 {
        pts.push([cx, cy - 0.1 * h + i as f64 * 0.05 * h]);
    }
    for i in 0..5 {
        pts.push([cx - 0.06 * w + i as f64 * 0.03 * w, cy + 0.1 * h]);
    }
    for ex in [cx - 0.15 * w, cx + 0.15 * w] {
        for i in 0..6 {
            let t = i as f64 * PI / 3.0;
            pts.push([ex + 0.06 * w * t.cos(), cy - 0.05 * h + 0.025 * h * t.sin()]);
        }
    }
    for i in 0..12 {
        let t = i as f64 * PI / 6.0;
        pts.push([cx + 0.12 * w * t.cos(), cy + 0.22 * h + 0.05 * h * t.sin()]);
    }
    for i in 0..8 {
        let t = i as f64 * PI / 4.0;
        pts.push([cx + 0.07 * w * t.cos(), cy + 0.22 * h + 0.02 * h * t.sin()]);
    }
    for i in 0..13 {
        let t = PI + i as f64 * PI / 12.0;
        pts.push([cx + 0.4 * w * t.cos(), cy - 0.15 * h + 0.3 * h * t.sin()]);
    }
    LandmarkSet::new(pts).unwrap()
}

pub fn noise_frame(size: usize, seed: u64, label: Label) -> FaceFrame {
    FaceFrame::new(
        noise_image(size, size, 1, 255, seed),
        Some(face_landmarks(size, size)),
        label,
        format!("v{seed}"),
        Subset::Custom,
        0,
    )
    .unwrap()
}

/// Writes `n_frames` P6 frames (plus landmark sidecars when asked) for one video.
pub fn write_video(
    root: &Path,
    video_id: &str,
    subset: Subset,
    label: Label,
    split: Split,
    n_frames: usize,
    size: usize,
    with_landmarks: bool,
) -> VideoRecord {
    let dir = root.join(video_id);
    std::fs::create_dir_all(&dir).unwrap();
    let mut frames = Vec::new();
    let mut landmarks = Vec::new();
    let lm = face_landmarks(size, size);
    let lm_json = serde_json::to_string(lm.points()).unwrap();
    for i in 0..n_frames {
        let rel = PathBuf::from(video_id).join(format!("{i:04}.ppm"));
        let seed = video_id.bytes().fold(i as u64, |a, b| a.wrapping_mul(31).wrapping_add(b as u64));
        write_image(&root.join(&rel), &noise_image(size, size, 0, 255, seed)).unwrap();
        frames.push(rel);
        if with_landmarks {
            let rel = PathBuf::from(video_id).join(format!("{i:04}.json"));
            std::fs::write(root.join(&rel), &lm_json).unwrap();
            landmarks.push(rel);
        }
    }
    VideoRecord {
        video_id: video_id.into(),
        subset,
        label,
        split,
        frames,
        landmarks: with_landmarks.then_some(landmarks),
    }
}

/// Writes a manifest for `videos` into `root` and returns its path.
pub fn write_fixture_manifest(root: &Path, videos: &[VideoRecord]) -> PathBuf {
    let path = root.join("manifest.json");
    write_manifest(&path, videos).unwrap();
    path
}

/// `n` frames alternating real/fake; fakes are brighter noise than reals,
/// so the classes are linearly separable by mean intensity.
pub fn separable_corpus(n: usize, size: usize, seed: u64) -> Vec<FaceFrame> {
    (0..n)
        .map(|i| {
            let label = if i % 2 == 0 { Label::Real } else { Label::Fake };
            let (lo, hi) = if label == Label::Fake { (150, 255) } else { (0, 105) };
            let s = seed.wrapping_mul(1000).wrapping_add(i as u64);
            FaceFrame::new(noise_image(size, size, lo, hi, s), None, label, format!("v{i}"), Subset::Custom, 0).unwrap()
        })
        .collect()
}

/// Central-difference check of `bce(model(x), y)` against the backward pass,
/// perturbing `per_tensor` sampled coordinates of every parameter tensor.
/// Batch norm runs on batch statistics. Returns the worst relative error and
/// where it occurred.
pub fn model_grad_check(
    model: &deepfuse::model::HybridModel<f64>,
    inputs: &deepfuse::numerics::Tensor<f64>,
    targets: &[f64],
    per_tensor: usize,
    seed: u64,
) -> (f64, String, usize) {
    use deepfuse::model::{Forward, ParamStore};
    use deepfuse::numerics::{gradcheck::relative_error, NormMode};

    let loss = |store: &ParamStore<f64>, grads: bool| {
        let mut fw = Forward::new(store, NormMode::Train, grads);
        let x = fw.input(inputs.clone());
        let p = deepfuse::model::model_forward(&mut fw, x, &model.config).unwrap();
        let l = fw.graph.bce(p, targets).unwrap();
        let value = fw.graph.value(l).item().unwrap();
        let g = if grads {
            fw.graph.backward(l).unwrap();
            fw.gradients()
        } else {
            Vec::new()
        };
        (value, g)
    };
    let (_, analytic) = loss(&model.params, true);
    let names: Vec<String> = model.params.names().map(str::to_string).collect();
    let mut r = rng(seed);
    let h = 1e-5;
    let (mut worst, mut at, mut checked) = (0.0f64, String::new(), 0);
    for (name, grad) in names.iter().zip(&analytic) {
        let n = grad.numel();
        let coords = rand::seq::index::sample(&mut r, n, per_tensor.min(n)).into_vec();
        for i in coords {
            let mut store = model.params.clone();
            let orig = store.get(name).unwrap().data()[i];
            store.get_mut(name).unwrap().data_mut()[i] = orig + h;
            let plus = loss(&store, false).0;
            store.get_mut(name).unwrap().data_mut()[i] = orig - h;
            let minus = loss(&store, false).0;
            let err = relative_error(grad.data()[i], (plus - minus) / (2.0 * h));
            checked += 1;
            if err > worst || at.is_empty() {
                worst = worst.max(err);
                at = format!("{name}[{i}]");
            }
        }
    }
    (worst, at, checked)
}
