//! C ABI for the deepfuse detector.
//!
//! Every function returns a [`DfStatus`]. On failure a message describing
//! the error is kept per thread and can be read with [`df_last_error`].
//! Models are opaque [`DfModel`] handles released with [`df_model_free`].
//! Panics never cross the boundary; they surface as `DF_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use deepfuse::augment::{
    apply_pipeline, AugmentConfig, CutoutMode, LandmarkSet, RgbImage, LANDMARK_COUNT, MODEL_INPUT_SIZE,
};
use deepfuse::backbones::Preset;
use deepfuse::datapipe::{decode_image, make_batches, BatchMode, FaceFrame, Label, Subset};
use deepfuse::error::CheckpointError;
use deepfuse::evaluate::aggregate_video;
use deepfuse::model::{HybridModel, HybridModelConfig};
use deepfuse::numerics::Tensor;
use deepfuse::training::{load_checkpoint, save_checkpoint};
use deepfuse::Error;

/// Result of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DfStatus {
    Ok = 0,
    /// A required pointer was null.
    NullArgument = 1,
    /// An argument was out of range or malformed.
    InvalidArgument = 2,
    /// A file could not be read or written.
    Io = 3,
    /// Invalid configuration, or a checkpoint for another architecture.
    Config = 4,
    /// Undecodable image, bad landmarks or inconsistent shapes.
    Data = 5,
    /// Corrupt or unsupported checkpoint file.
    Checkpoint = 6,
    /// An internal panic was caught.
    Panic = 7,
}

/// Cut-out mode for [`df_augment`].
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DfCutoutMode {
    None = 0,
    Face = 1,
    Random = 2,
}

/// Opaque model handle.
pub struct DfModel {
    model: HybridModel<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("nul bytes removed"));
}

fn status_of(e: &Error) -> DfStatus {
    match e {
        Error::Io { .. } | Error::Checkpoint(CheckpointError::NotFound(_)) => DfStatus::Io,
        Error::Config(_) | Error::Json { .. } | Error::Checkpoint(CheckpointError::ConfigMismatch { .. }) => {
            DfStatus::Config
        }
        Error::Checkpoint(_) => DfStatus::Checkpoint,
        Error::Usage(_) => DfStatus::InvalidArgument,
        _ => DfStatus::Data,
    }
}

/// Runs `f`, recording the error message and mapping panics.
fn guard(f: impl FnOnce() -> Result<(), (DfStatus, String)>) -> DfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            DfStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            DfStatus::Panic
        }
    }
}

fn lib(e: Error) -> (DfStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (DfStatus, String) {
    (DfStatus::NullArgument, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> (DfStatus, String) {
    (DfStatus::InvalidArgument, msg.into())
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, (DfStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("{what} is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn model_ref<'a>(m: *const DfModel) -> Result<&'a DfModel, (DfStatus, String)> {
    m.as_ref().ok_or_else(|| null("model"))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn df_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Side of the square model input.
#[no_mangle]
pub extern "C" fn df_input_size() -> usize {
    MODEL_INPUT_SIZE
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn df_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn df_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Freshly initialized model of a named preset (`toy`, `small`, `paper`).
///
/// # Safety
/// `preset` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn df_model_new(preset: *const c_char, seed: u64, out: *mut *mut DfModel) -> DfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        if preset.is_null() {
            return Err(null("preset"));
        }
        let name = CStr::from_ptr(preset).to_str().map_err(|_| invalid("preset is not valid UTF-8"))?;
        let preset: Preset = name.parse().map_err(lib)?;
        let model = HybridModel::new(HybridModelConfig::preset(preset), seed).map_err(lib)?;
        *out = Box::into_raw(Box::new(DfModel { model }));
        Ok(())
    })
}

/// Loads a checkpoint written by `deepfuse train` or [`df_model_save`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn df_model_load(path: *const c_char, out: *mut *mut DfModel) -> DfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = path_arg(path, "path")?;
        let ckpt = load_checkpoint::<f32>(&path, None).map_err(lib)?;
        *out = Box::into_raw(Box::new(DfModel { model: ckpt.model }));
        Ok(())
    })
}

/// Writes the model's parameters to `path`.
///
/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn df_model_save(model: *const DfModel, path: *const c_char) -> DfStatus {
    guard(|| {
        let m = model_ref(model)?;
        let path = path_arg(path, "path")?;
        save_checkpoint(&path, &m.model, None).map_err(lib)
    })
}

/// Releases a model handle. Null is ignored.
///
/// # Safety
/// `model` must come from [`df_model_new`] or [`df_model_load`] and not
/// have been freed already.
#[no_mangle]
pub unsafe extern "C" fn df_model_free(model: *mut DfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Total number of learnable scalars.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn df_model_param_count(model: *const DfModel, out: *mut usize) -> DfStatus {
    guard(|| {
        let m = model_ref(model)?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = m.model.params.numel();
        Ok(())
    })
}

/// Architecture as a JSON string; release it with [`df_string_free`].
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn df_model_config_json(model: *const DfModel, out: *mut *mut c_char) -> DfStatus {
    guard(|| {
        let m = model_ref(model)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let json = serde_json::to_string(&m.model.config).map_err(|e| (DfStatus::Data, e.to_string()))?;
        *out = CString::new(json).expect("json has no NUL").into_raw();
        Ok(())
    })
}

/// Fake probabilities for `n` preprocessed inputs laid out as
/// `[n, 3, 224, 224]` floats (the output of [`df_augment`]).
///
/// # Safety
/// `inputs` must hold `n * 3 * 224 * 224` floats and `out` room for `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn df_model_predict(
    model: *const DfModel,
    inputs: *const f32,
    n: usize,
    out: *mut f64,
) -> DfStatus {
    guard(|| {
        let m = model_ref(model)?;
        if inputs.is_null() || out.is_null() {
            return Err(null("inputs or out"));
        }
        if n == 0 {
            return Err(invalid("n must be at least 1"));
        }
        let per = 3 * MODEL_INPUT_SIZE * MODEL_INPUT_SIZE;
        let data = std::slice::from_raw_parts(inputs, n * per).to_vec();
        let t = Tensor::new(vec![n, 3, MODEL_INPUT_SIZE, MODEL_INPUT_SIZE], data).map_err(lib)?;
        let probs = m.model.predict(&t).map_err(lib)?;
        std::slice::from_raw_parts_mut(out, n).copy_from_slice(&probs);
        Ok(())
    })
}

/// Video score: decodes `n` frame files (PPM or PNG), scores each without
/// augmentation and averages the probabilities.
///
/// # Safety
/// `paths` must hold `n` NUL-terminated strings and `out_score` be valid.
#[no_mangle]
pub unsafe extern "C" fn df_model_score_video(
    model: *const DfModel,
    paths: *const *const c_char,
    n: usize,
    out_score: *mut f64,
) -> DfStatus {
    guard(|| {
        let m = model_ref(model)?;
        if paths.is_null() || out_score.is_null() {
            return Err(null("paths or out_score"));
        }
        if n == 0 {
            return Err(invalid("n must be at least 1"));
        }
        let mut frames = Vec::with_capacity(n);
        for (i, &p) in std::slice::from_raw_parts(paths, n).iter().enumerate() {
            let path = path_arg(p, "frame path")?;
            let pixels = decode_image(&path).map_err(lib)?;
            frames.push(FaceFrame::new(pixels, None, Label::Real, "ffi", Subset::Custom, i).map_err(lib)?);
        }
        let mut batches =
            make_batches(frames.as_slice(), 16, 0, 0, BatchMode::Eval, &AugmentConfig::disabled()).map_err(lib)?;
        let mut probs = Vec::with_capacity(n);
        while let Some(b) = batches.next_batch::<f32>() {
            probs.extend(m.model.predict(&b.map_err(lib)?.inputs).map_err(lib)?);
        }
        *out_score = aggregate_video(&probs).map_err(lib)?;
        Ok(())
    })
}

/// Arithmetic mean of `n` frame probabilities.
///
/// # Safety
/// `probs` must hold `n` doubles and `out` be valid.
#[no_mangle]
pub unsafe extern "C" fn df_aggregate(probs: *const f64, n: usize, out: *mut f64) -> DfStatus {
    guard(|| {
        if probs.is_null() || out.is_null() {
            return Err(null("probs or out"));
        }
        *out = aggregate_video(std::slice::from_raw_parts(probs, n)).map_err(lib)?;
        Ok(())
    })
}

/// Runs the augmentation pipeline with default ranges on an interleaved
/// 8-bit RGB image and writes the normalized `[3, 224, 224]` tensor.
/// `landmarks` is null or 81 `(x, y)` pairs and is required by face cut-out.
///
/// # Safety
/// `rgb` must hold `width * height * 3` bytes, `landmarks` (if not null)
/// 162 doubles, and `out` room for `3 * 224 * 224` floats.
#[no_mangle]
pub unsafe extern "C" fn df_augment(
    rgb: *const u8,
    width: usize,
    height: usize,
    landmarks: *const f64,
    mode: u32,
    seed: u64,
    out: *mut f32,
) -> DfStatus {
    guard(|| {
        if rgb.is_null() || out.is_null() {
            return Err(null("rgb or out"));
        }
        let mode = match mode {
            m if m == DfCutoutMode::None as u32 => CutoutMode::None,
            m if m == DfCutoutMode::Face as u32 => CutoutMode::FaceCutout,
            m if m == DfCutoutMode::Random as u32 => CutoutMode::RandomCutout,
            other => return Err(invalid(format!("unknown cut-out mode {other}"))),
        };
        let len = width.checked_mul(height).and_then(|p| p.checked_mul(3)).ok_or_else(|| invalid("image too large"))?;
        let pixels = RgbImage::from_interleaved(width, height, std::slice::from_raw_parts(rgb, len)).map_err(lib)?;
        let lm = if landmarks.is_null() {
            None
        } else {
            let flat = std::slice::from_raw_parts(landmarks, 2 * LANDMARK_COUNT);
            Some(LandmarkSet::new(flat.chunks_exact(2).map(|c| [c[0], c[1]]).collect()).map_err(lib)?)
        };
        let frame = FaceFrame::new(pixels, lm, Label::Real, "ffi", Subset::Custom, 0).map_err(lib)?;
        let (t, _) = apply_pipeline::<f32>(&frame, mode, seed, &AugmentConfig::default()).map_err(lib)?;
        std::slice::from_raw_parts_mut(out, t.numel()).copy_from_slice(t.data());
        Ok(())
    })
}
