//! C ABI over the `soc-cnn` model: load a saved model, query its window
//! length, run inference on a window, save it again.
//!
//! Models are opaque handles owned by the caller and released with
//! [`soc_cnn_model_free`]. Every fallible call returns a [`SocCnnStatus`];
//! on failure [`soc_cnn_last_error`] describes what went wrong on the
//! calling thread. The header is `include/soc_cnn.h`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use soc_cnn::data::CHANNELS;
use soc_cnn::{CnnModel, Error};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SocCnnStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidPath = 2,
    Io = 3,
    ModelFormat = 4,
    ShapeMismatch = 5,
    InvalidArgument = 6,
    Panic = 7,
}

/// A loaded model. Only ever handled through a pointer.
pub struct SocCnnModel {
    inner: CnnModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> SocCnnStatus {
    match err {
        Error::Io(_) => SocCnnStatus::Io,
        Error::ModelFormat(_) | Error::SpecMismatch(_) | Error::InvalidSpec(_) => SocCnnStatus::ModelFormat,
        Error::ShapeMismatch(_) | Error::WindowTooSmall { .. } => SocCnnStatus::ShapeMismatch,
        _ => SocCnnStatus::InvalidArgument,
    }
}

fn fail(status: SocCnnStatus, msg: impl Into<String>) -> SocCnnStatus {
    set_last_error(msg.into());
    status
}

fn guard(f: impl FnOnce() -> SocCnnStatus) -> SocCnnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(SocCnnStatus::Panic, "internal panic"),
    }
}

unsafe fn path_arg(path: *const c_char) -> Result<PathBuf, SocCnnStatus> {
    if path.is_null() {
        return Err(fail(SocCnnStatus::NullPointer, "path is null"));
    }
    CStr::from_ptr(path)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| fail(SocCnnStatus::InvalidPath, "path is not valid UTF-8"))
}

/// Message for the last failed call on this thread, or null if none.
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn soc_cnn_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Number of features per time step (voltage, current, temperature).
#[no_mangle]
pub extern "C" fn soc_cnn_channels() -> usize {
    CHANNELS
}

/// Loads a model file into `*out`. `*out` is left untouched on failure.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn soc_cnn_model_load(path: *const c_char, out: *mut *mut SocCnnModel) -> SocCnnStatus {
    guard(|| {
        if out.is_null() {
            return fail(SocCnnStatus::NullPointer, "out is null");
        }
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match CnnModel::load(&path) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(SocCnnModel { inner }));
                SocCnnStatus::Ok
            }
            Err(e) => fail(status_of(&e), format!("{}: {e}", path.display())),
        }
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`soc_cnn_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn soc_cnn_model_free(model: *mut SocCnnModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Window length (time steps) the model expects.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn soc_cnn_model_window_len(model: *const SocCnnModel, out: *mut usize) -> SocCnnStatus {
    if model.is_null() || out.is_null() {
        return fail(SocCnnStatus::NullPointer, "model or out is null");
    }
    *out = (*model).inner.spec.t_w;
    SocCnnStatus::Ok
}

unsafe fn predict_impl(model: *const SocCnnModel, window: *const f64, len: usize, out: *mut f64, normalize: bool) -> SocCnnStatus {
    guard(|| {
        if model.is_null() || window.is_null() || out.is_null() {
            return fail(SocCnnStatus::NullPointer, "model, window or out is null");
        }
        let model = &(*model).inner;
        let expected = model.spec.t_w * CHANNELS;
        if len != expected {
            return fail(
                SocCnnStatus::ShapeMismatch,
                format!("window has {len} values, model expects {expected} ({} x {CHANNELS})", model.spec.t_w),
            );
        }
        let raw = std::slice::from_raw_parts(window, len);
        let features: Vec<f64> = if normalize {
            raw.chunks_exact(CHANNELS)
                .flat_map(|row| model.norm_stats.normalize([row[0], row[1], row[2]]))
                .collect()
        } else {
            raw.to_vec()
        };
        match model.predict_features(&features) {
            Ok(soc) => {
                *out = soc;
                SocCnnStatus::Ok
            }
            Err(e) => fail(status_of(&e), e.to_string()),
        }
    })
}

/// Estimates SoC (fraction, not percent) from a raw window of
/// `window_len` rows of (voltage V, current A, temperature °C), row-major,
/// oldest first. The model's stored normalization is applied.
///
/// # Safety
/// `window` must point to `len` readable doubles and `out` be valid.
#[no_mangle]
pub unsafe extern "C" fn soc_cnn_model_predict(model: *const SocCnnModel, window: *const f64, len: usize, out: *mut f64) -> SocCnnStatus {
    predict_impl(model, window, len, out, true)
}

/// As [`soc_cnn_model_predict`] for a window that is already normalized.
///
/// # Safety
/// Same as [`soc_cnn_model_predict`].
#[no_mangle]
pub unsafe extern "C" fn soc_cnn_model_predict_normalized(model: *const SocCnnModel, window: *const f64, len: usize, out: *mut f64) -> SocCnnStatus {
    predict_impl(model, window, len, out, false)
}

/// Writes the model to `path` (atomically).
///
/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn soc_cnn_model_save(model: *const SocCnnModel, path: *const c_char) -> SocCnnStatus {
    guard(|| {
        if model.is_null() {
            return fail(SocCnnStatus::NullPointer, "model is null");
        }
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match (*model).inner.save(&path) {
            Ok(()) => SocCnnStatus::Ok,
            Err(e) => fail(status_of(&e), format!("{}: {e}", path.display())),
        }
    })
}
