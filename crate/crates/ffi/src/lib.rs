//! C ABI over the `mltr` inference and metrics API.
//!
//! Every function returns an [`MltrStatus`]; on failure a message is
//! available from [`mltr_last_error`] until the next call on the same
//! thread. Models are opaque [`MltrModel`] handles released with
//! [`mltr_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use mltr::checkpoint::Checkpoint;
use mltr::config::RunConfig;
use mltr::data::pnm::ImageBuffer;
use mltr::data::preprocess;
use mltr::metrics::{ConfusionMatrix, Metrics};
use mltr::model::Mltr;
use mltr::{train, Error, Tensor};

/// Result code of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MltrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Mismatch = 5,
    Corrupt = 6,
    Shape = 7,
    Panic = 8,
}

/// A loaded model together with its run configuration.
pub struct MltrModel {
    config: RunConfig,
    model: Mltr<f32>,
}

/// Evaluation metrics of a confusion matrix.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MltrMetrics {
    pub accuracy: f64,
    pub f1_macro: f64,
    pub qw_kappa: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let msg = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> MltrStatus {
    match e {
        Error::Config(_) | Error::Index(_) | Error::Contract(_) => MltrStatus::InvalidArgument,
        Error::Io(_) | Error::Dataset(_) => MltrStatus::Io,
        Error::Format { .. } | Error::Json(_) => MltrStatus::Format,
        Error::Mismatch(_) => MltrStatus::Mismatch,
        Error::Corrupt(_) => MltrStatus::Corrupt,
        Error::Shape(_) | Error::Capacity { .. } => MltrStatus::Shape,
    }
}

/// Runs `f`, recording any error or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), (MltrStatus, String)>) -> MltrStatus {
    set_error("");
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MltrStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            MltrStatus::Panic
        }
    }
}

fn lift(e: Error) -> (MltrStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (MltrStatus, String) {
    (MltrStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: String) -> (MltrStatus, String) {
    (MltrStatus::InvalidArgument, msg)
}

fn model_ref<'a>(model: *const MltrModel) -> Result<&'a MltrModel, (MltrStatus, String)> {
    // SAFETY: non-null handles come from `mltr_model_load` and are valid
    // until `mltr_model_free`.
    unsafe { model.as_ref() }.ok_or_else(|| null("model"))
}

fn write_logits(logits: &[f32], out: *mut f32, out_len: usize) -> Result<(), (MltrStatus, String)> {
    if out.is_null() {
        return Err(null("logits"));
    }
    if out_len < logits.len() {
        return Err(invalid(format!("logits buffer holds {out_len} values, need {}", logits.len())));
    }
    // SAFETY: the caller guarantees `out` points to `out_len` writable floats.
    unsafe { std::ptr::copy_nonoverlapping(logits.as_ptr(), out, logits.len()) };
    Ok(())
}

/// Message of the last failed call on this thread; empty after success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn mltr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mltr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint file written by `mltr train`.
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mltr_model_load(path: *const c_char, out: *mut *mut MltrModel) -> MltrStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = unsafe { CStr::from_ptr(path) }.to_str().map_err(|_| invalid("path is not UTF-8".into()))?;
        let ck = Checkpoint::read(Path::new(path)).map_err(lift)?;
        let (config, model) = train::from_checkpoint(&ck).map_err(lift)?;
        unsafe { *out = Box::into_raw(Box::new(MltrModel { config, model })) };
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`mltr_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mltr_model_free(model: *mut MltrModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Model input shape and number of classes.
///
/// # Safety
/// `model` must be a live handle; each output pointer may be null.
#[no_mangle]
pub unsafe extern "C" fn mltr_model_info(
    model: *const MltrModel,
    channels: *mut usize,
    height: *mut usize,
    width: *mut usize,
    n_classes: *mut usize,
) -> MltrStatus {
    guard(|| {
        let cfg = &model_ref(model)?.config.model;
        for (ptr, v) in
            [(channels, cfg.channels), (height, cfg.image_height), (width, cfg.image_width), (n_classes, cfg.n_classes)]
        {
            if let Some(p) = unsafe { ptr.as_mut() } {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Logits for one preprocessed image given as `C×H×W` floats in `[0, 1]`.
///
/// # Safety
/// `pixels` must hold `pixels_len` floats and `logits` `logits_len`
/// writable floats.
#[no_mangle]
pub unsafe extern "C" fn mltr_model_predict(
    model: *const MltrModel,
    pixels: *const f32,
    pixels_len: usize,
    logits: *mut f32,
    logits_len: usize,
) -> MltrStatus {
    guard(|| {
        let m = model_ref(model)?;
        if pixels.is_null() {
            return Err(null("pixels"));
        }
        let cfg = &m.config.model;
        let shape = vec![cfg.channels, cfg.image_height, cfg.image_width];
        let want: usize = shape.iter().product();
        if pixels_len != want {
            return Err(invalid(format!("expected {want} pixels ({shape:?}), got {pixels_len}")));
        }
        let data = unsafe { std::slice::from_raw_parts(pixels, pixels_len) }.to_vec();
        let x = Tensor::new(shape, data).map_err(lift)?;
        write_logits(&m.model.predict(&x).map_err(lift)?, logits, logits_len)
    })
}

/// Logits for one raw 8-bit image (interleaved, 1 or 3 channels), applying
/// the model's preprocessing first.
///
/// # Safety
/// `pixels` must hold `width·height·channels` bytes and `logits`
/// `logits_len` writable floats.
#[no_mangle]
pub unsafe extern "C" fn mltr_model_predict_u8(
    model: *const MltrModel,
    pixels: *const u8,
    width: usize,
    height: usize,
    channels: usize,
    logits: *mut f32,
    logits_len: usize,
) -> MltrStatus {
    guard(|| {
        let m = model_ref(model)?;
        if pixels.is_null() {
            return Err(null("pixels"));
        }
        if width == 0 || height == 0 {
            return Err(invalid(format!("empty {width}x{height} image")));
        }
        let len = width.checked_mul(height).and_then(|n| n.checked_mul(channels));
        let len = len.ok_or_else(|| invalid("image size overflows".into()))?;
        let data = unsafe { std::slice::from_raw_parts(pixels, len) }.to_vec();
        let img = ImageBuffer::new(width, height, channels, data).map_err(lift)?;
        let cfg = &m.config;
        let x = preprocess::preprocess(&img, cfg.model.image_width, cfg.model.image_height, &cfg.data.preprocess)
            .map_err(lift)?;
        write_logits(&m.model.predict(&x).map_err(lift)?, logits, logits_len)
    })
}

/// Accuracy, macro F1 and quadratic weighted kappa of a `k×k` confusion
/// matrix stored row-major with rows indexing the true class.
///
/// # Safety
/// `counts` must hold `k·k` values and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mltr_metrics(counts: *const u64, k: usize, out: *mut MltrMetrics) -> MltrStatus {
    guard(|| {
        if counts.is_null() {
            return Err(null("counts"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let n = k.checked_mul(k).ok_or_else(|| invalid("k overflows".into()))?;
        let flat = unsafe { std::slice::from_raw_parts(counts, n) };
        let cm = ConfusionMatrix::from_counts(flat.chunks(k.max(1)).map(<[u64]>::to_vec).collect()).map_err(lift)?;
        let m = Metrics::from_confusion(&cm).map_err(lift)?;
        unsafe { *out = MltrMetrics { accuracy: m.accuracy, f1_macro: m.f1_macro, qw_kappa: m.qw_kappa } };
        Ok(())
    })
}
