//! C ABI over `embref`: synthetic scene generation, box metrics and
//! checkpoint inference.
//!
//! Every fallible call returns an [`EmbrefStatus`]; on failure the message
//! is available from [`embref_last_error`] on the same thread. Handles are
//! opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use candle_core::Device;
use embref::evalmetrics::{evaluate, iou, BBox};
use embref::fixtures::{generate_scene, GeneratorConfig, SceneSample, Vocabulary};
use embref::model::{batch_inputs, prepare_sample, GroundingModel};
use embref::runner::checkpoint::load_checkpoint;
use embref::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbrefStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Shape = 5,
    NonFinite = 6,
    BufferTooSmall = 7,
    Panic = 8,
    Internal = 9,
}

/// Axis-aligned box in pixels.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmbrefBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

/// Top-1 detection: grid cell, anchor index, box and objectness.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmbrefDetection {
    pub bbox: EmbrefBox,
    pub confidence: f64,
    pub row: u32,
    pub col: u32,
    pub anchor: u32,
}

/// A generated scene and the vocabulary its tokens index.
pub struct EmbrefScene {
    sample: SceneSample,
    vocabulary: Vocabulary,
}

/// A model restored from a training checkpoint.
pub struct EmbrefModel {
    model: GroundingModel,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> EmbrefStatus {
    match e {
        Error::Io { .. } | Error::MissingSample { .. } => EmbrefStatus::Io,
        Error::Format(_)
        | Error::Checksum { .. }
        | Error::Checkpoint(_)
        | Error::Json(_)
        | Error::Safetensors(_)
        | Error::Vocabulary { .. } => EmbrefStatus::Format,
        Error::Shape { .. } => EmbrefStatus::Shape,
        Error::NonFinite { .. } => EmbrefStatus::NonFinite,
        Error::Config(_)
        | Error::Range { .. }
        | Error::UnknownToken { .. }
        | Error::EmptyTokens
        | Error::UnknownSample(_) => EmbrefStatus::InvalidArgument,
        _ => EmbrefStatus::Internal,
    }
}

/// Runs `f`, recording any error or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), (EmbrefStatus, String)>) -> EmbrefStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            EmbrefStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("panic inside embref");
            EmbrefStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (EmbrefStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (EmbrefStatus, String) {
    (EmbrefStatus::NullPointer, format!("{what} is null"))
}

fn to_box(b: &BBox) -> EmbrefBox {
    EmbrefBox {
        x_min: b.x_min,
        y_min: b.y_min,
        x_max: b.x_max,
        y_max: b.y_max,
    }
}

fn from_box(b: &EmbrefBox) -> BBox {
    BBox::new(b.x_min, b.y_min, b.x_max, b.y_max)
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn embref_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Generates the scene for `seed` at `image_size` x `image_size` pixels.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn embref_scene_generate(seed: u64, image_size: u32, out: *mut *mut EmbrefScene) -> EmbrefStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = GeneratorConfig::default().with_image_size(image_size as usize);
        cfg.validate().map_err(lib_err)?;
        let sample = generate_scene(seed, &cfg).map_err(lib_err)?;
        let scene = Box::new(EmbrefScene {
            sample,
            vocabulary: cfg.vocabulary,
        });
        *out = Box::into_raw(scene);
        Ok(())
    })
}

/// # Safety
/// `scene` must come from [`embref_scene_generate`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn embref_scene_free(scene: *mut EmbrefScene) {
    if !scene.is_null() {
        drop(Box::from_raw(scene));
    }
}

/// # Safety
/// `scene` must be a live handle; `height` and `width` must be writable.
#[no_mangle]
pub unsafe extern "C" fn embref_scene_size(scene: *const EmbrefScene, height: *mut u32, width: *mut u32) -> EmbrefStatus {
    guard(|| {
        let s = scene.as_ref().ok_or_else(|| null("scene"))?;
        if height.is_null() || width.is_null() {
            return Err(null("height/width"));
        }
        *height = s.sample.height() as u32;
        *width = s.sample.width() as u32;
        Ok(())
    })
}

/// Copies the RGB image (row-major `H x W x 3`, values in `[0, 1]`) into
/// `buf`, which must hold `len >= H * W * 3` floats.
///
/// # Safety
/// `scene` must be a live handle and `buf` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn embref_scene_copy_image(scene: *const EmbrefScene, buf: *mut f32, len: usize) -> EmbrefStatus {
    guard(|| {
        let s = scene.as_ref().ok_or_else(|| null("scene"))?;
        if buf.is_null() {
            return Err(null("buf"));
        }
        let image = s.sample.image.as_standard_layout();
        let data = image.as_slice().expect("standard layout");
        if len < data.len() {
            return Err((
                EmbrefStatus::BufferTooSmall,
                format!("image needs {} floats, buffer holds {len}", data.len()),
            ));
        }
        ptr::copy_nonoverlapping(data.as_ptr(), buf, data.len());
        Ok(())
    })
}

/// Number of phrase tokens.
///
/// # Safety
/// `scene` must be a live handle and `count` writable.
#[no_mangle]
pub unsafe extern "C" fn embref_scene_token_count(scene: *const EmbrefScene, count: *mut usize) -> EmbrefStatus {
    guard(|| {
        let s = scene.as_ref().ok_or_else(|| null("scene"))?;
        if count.is_null() {
            return Err(null("count"));
        }
        *count = s.sample.tokens.len();
        Ok(())
    })
}

/// # Safety
/// `scene` must be a live handle and `buf` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn embref_scene_copy_tokens(scene: *const EmbrefScene, buf: *mut u32, len: usize) -> EmbrefStatus {
    guard(|| {
        let s = scene.as_ref().ok_or_else(|| null("scene"))?;
        if buf.is_null() {
            return Err(null("buf"));
        }
        let t = &s.sample.tokens;
        if len < t.len() {
            return Err((
                EmbrefStatus::BufferTooSmall,
                format!("phrase has {} tokens, buffer holds {len}", t.len()),
            ));
        }
        ptr::copy_nonoverlapping(t.as_ptr(), buf, t.len());
        Ok(())
    })
}

/// Writes the phrase as a NUL-terminated string. `needed` (if not null)
/// receives the required size including the terminator, also on
/// `BufferTooSmall`.
///
/// # Safety
/// `scene` must be a live handle and `buf` valid for `cap` writes.
#[no_mangle]
pub unsafe extern "C" fn embref_scene_phrase(
    scene: *const EmbrefScene,
    buf: *mut c_char,
    cap: usize,
    needed: *mut usize,
) -> EmbrefStatus {
    guard(|| {
        let s = scene.as_ref().ok_or_else(|| null("scene"))?;
        let text = s.vocabulary.decode(&s.sample.tokens);
        let n = text.len() + 1;
        if !needed.is_null() {
            *needed = n;
        }
        if buf.is_null() || cap < n {
            return Err((EmbrefStatus::BufferTooSmall, format!("phrase needs {n} bytes")));
        }
        ptr::copy_nonoverlapping(text.as_ptr().cast::<c_char>(), buf, text.len());
        *buf.add(text.len()) = 0;
        Ok(())
    })
}

/// # Safety
/// `scene` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn embref_scene_gt_box(scene: *const EmbrefScene, out: *mut EmbrefBox) -> EmbrefStatus {
    guard(|| {
        let s = scene.as_ref().ok_or_else(|| null("scene"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = to_box(&s.sample.gt_box);
        Ok(())
    })
}

/// Intersection over union; 0 when the union is empty.
#[no_mangle]
pub extern "C" fn embref_iou(a: EmbrefBox, b: EmbrefBox) -> f64 {
    iou(&from_box(&a), &from_box(&b))
}

/// Percentage of pairs whose IoU is strictly greater than `threshold`.
///
/// # Safety
/// `predictions` and `ground_truths` must each point to `n` boxes.
#[no_mangle]
pub unsafe extern "C" fn embref_prec_at(
    predictions: *const EmbrefBox,
    ground_truths: *const EmbrefBox,
    n: usize,
    threshold: f64,
    out: *mut f64,
) -> EmbrefStatus {
    guard(|| {
        if predictions.is_null() || ground_truths.is_null() || out.is_null() {
            return Err(null("predictions/ground_truths/out"));
        }
        if n == 0 || !(0.0..=1.0).contains(&threshold) {
            return Err((
                EmbrefStatus::InvalidArgument,
                format!("need n > 0 and threshold in [0, 1], got n = {n}, threshold = {threshold}"),
            ));
        }
        let preds = std::slice::from_raw_parts(predictions, n);
        let gts = std::slice::from_raw_parts(ground_truths, n);
        let ids: Vec<String> = (0..n).map(|i| i.to_string()).collect();
        let pred_map: BTreeMap<String, BBox> = ids.iter().cloned().zip(preds.iter().map(from_box)).collect();
        let gt_list: Vec<(String, BBox)> = ids.into_iter().zip(gts.iter().map(from_box)).collect();
        let report = evaluate(&pred_map, &gt_list, &[threshold]);
        *out = report.rows[0].all;
        Ok(())
    })
}

/// Loads a checkpoint written by `embref train`.
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn embref_model_load(path: *const c_char, out: *mut *mut EmbrefModel) -> EmbrefStatus {
    guard(|| {
        if path.is_null() || out.is_null() {
            return Err(null("path/out"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| (EmbrefStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
        let state = load_checkpoint(Path::new(path)).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(EmbrefModel { model: state.model }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`embref_model_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn embref_model_free(model: *mut EmbrefModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input resolution the model expects.
///
/// # Safety
/// `model` must be a live handle and `image_size` writable.
#[no_mangle]
pub unsafe extern "C" fn embref_model_image_size(model: *const EmbrefModel, image_size: *mut u32) -> EmbrefStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if image_size.is_null() {
            return Err(null("image_size"));
        }
        *image_size = m.model.config.image_size as u32;
        Ok(())
    })
}

/// Top-1 detection for a scene. The scene must match the model's image size
/// and vocabulary.
///
/// # Safety
/// `model` and `scene` must be live handles and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn embref_model_predict(
    model: *const EmbrefModel,
    scene: *const EmbrefScene,
    out: *mut EmbrefDetection,
) -> EmbrefStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.model;
        let s = scene.as_ref().ok_or_else(|| null("scene"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        if s.vocabulary.len() != m.config.vocab_size {
            return Err((
                EmbrefStatus::InvalidArgument,
                format!(
                    "scene vocabulary has {} words, model expects {}",
                    s.vocabulary.len(),
                    m.config.vocab_size
                ),
            ));
        }
        let prepared = prepare_sample(&s.sample, &m.config).map_err(lib_err)?;
        let inputs = batch_inputs(&[&prepared], &m.config, m.dtype(), &Device::Cpu).map_err(lib_err)?;
        let d = m.predict(&inputs).map_err(lib_err)?.remove(0);
        *out = EmbrefDetection {
            bbox: to_box(&d.bbox),
            confidence: d.confidence,
            row: d.row as u32,
            col: d.col as u32,
            anchor: d.anchor as u32,
        };
        Ok(())
    })
}
