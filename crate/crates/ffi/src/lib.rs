//! C ABI over `attnflow`: load a checkpoint, score images or raw embeddings,
//! compute AUROC.
//!
//! Every fallible call returns an [`AfStatus`]; on failure the message is
//! available from [`af_last_error_message`] on the same thread. Models are
//! opaque [`AfModel`] handles released with [`af_model_free`]. No call
//! panics across the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use attnflow::checkpoint::{Checkpoint, LoadOptions};
use attnflow::trainer::Seeds;
use attnflow::Error;
use ndarray::ArrayView2;

/// Result of a call. Error classes match the CLI exit codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AfStatus {
    Ok = 0,
    /// Null pointer, non-UTF-8 path or wrong buffer length.
    InvalidArgument = 1,
    /// Configuration, schema, version or digest problem.
    Config = 2,
    Numerical = 3,
    Io = 4,
    /// A Rust panic was caught at the boundary.
    Internal = 5,
}

/// Loaded checkpoint.
pub struct AfModel {
    checkpoint: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> AfStatus {
    match e.exit_code() {
        2 => AfStatus::Config,
        3 => AfStatus::Numerical,
        _ => AfStatus::Io,
    }
}

struct Fail(AfStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn invalid(msg: &str) -> Fail {
    Fail(AfStatus::InvalidArgument, msg.to_string())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> AfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            AfStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(&format!("internal error: {msg}"));
            AfStatus::Internal
        }
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(invalid("path is null"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| invalid("path is not valid UTF-8"))
}

unsafe fn model_arg<'a>(m: *const AfModel) -> Result<&'a AfModel, Fail> {
    m.as_ref().ok_or_else(|| invalid("model handle is null"))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(invalid(&format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn af_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread; empty after a success.
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn af_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a checkpoint into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn af_model_load(path: *const c_char, allow_digest_mismatch: bool, out: *mut *mut AfModel) -> AfStatus {
    guard(|| {
        if out.is_null() {
            return Err(invalid("out is null"));
        }
        *out = std::ptr::null_mut();
        let path = path_arg(path)?;
        let checkpoint = Checkpoint::load_with(&path, LoadOptions { allow_digest_mismatch })?;
        *out = Box::into_raw(Box::new(AfModel { checkpoint }));
        Ok(())
    })
}

/// Releases a handle from [`af_model_load`]; null is ignored.
///
/// # Safety
/// `model` must come from [`af_model_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn af_model_free(model: *mut AfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Length of the embedding accepted by [`af_model_score_embedding`]; 0 for null.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn af_model_embedding_dim(model: *const AfModel) -> usize {
    model.as_ref().map(|m| m.checkpoint.model.flow.dim()).unwrap_or(0)
}

/// Anomaly score of the image at `path` (higher is more anomalous).
/// `n_transforms == 0` uses the count stored in the checkpoint; rotations come
/// from the checkpoint's seed, so scores match the CLI.
///
/// # Safety
/// `model` must be a live handle, `path` NUL-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn af_model_score_image(
    model: *const AfModel,
    path: *const c_char,
    n_transforms: usize,
    out: *mut f64,
) -> AfStatus {
    guard(|| {
        let m = model_arg(model)?;
        let path = path_arg(path)?;
        if out.is_null() {
            return Err(invalid("out is null"));
        }
        let cfg = &m.checkpoint.config.train;
        let n = if n_transforms == 0 { cfg.n_test_transforms } else { n_transforms };
        let pixels = attnflow::imageops::decode(&path)?;
        *out = m.checkpoint.model.score_pixels(&pixels, n, Seeds::new(cfg.seed).score)?;
        Ok(())
    })
}

/// Negative log-likelihood of one embedding of length [`af_model_embedding_dim`].
///
/// # Safety
/// `embedding` must point to `len` doubles and `out` be valid.
#[no_mangle]
pub unsafe extern "C" fn af_model_score_embedding(
    model: *const AfModel,
    embedding: *const f64,
    len: usize,
    out: *mut f64,
) -> AfStatus {
    guard(|| {
        let m = model_arg(model)?;
        if out.is_null() {
            return Err(invalid("out is null"));
        }
        let flow = &m.checkpoint.model.flow;
        if len != flow.dim() {
            return Err(invalid(&format!("embedding has {len} values, model expects {}", flow.dim())));
        }
        let y = slice_arg(embedding, len, "embedding")?;
        let row = ArrayView2::from_shape((1, len), y).expect("1 x len");
        *out = -flow.log_likelihood_batch(row)?[0];
        Ok(())
    })
}

/// AUROC with anomalous as the positive class; ties count one half.
///
/// # Safety
/// Each pointer must reference the stated number of doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn af_auroc(
    flawless: *const f64,
    n_flawless: usize,
    anomalous: *const f64,
    n_anomalous: usize,
    out: *mut f64,
) -> AfStatus {
    guard(|| {
        if out.is_null() {
            return Err(invalid("out is null"));
        }
        let f = slice_arg(flawless, n_flawless, "flawless")?;
        let a = slice_arg(anomalous, n_anomalous, "anomalous")?;
        *out = attnflow::eval::auroc(f, a)?;
        Ok(())
    })
}
