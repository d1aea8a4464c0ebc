//! C ABI over the classifier: open a checkpoint, score bytes or files,
//! fetch the last error message. Handles are opaque; every call returns a
//! status code. See the generated `include/malconv.h`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::path::Path;

use malconv::data::TokenSource;
use malconv::models::{LowmemOpts, Mode, Model};
use malconv::Error;

/// Status codes returned by every API call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum McStatus {
    McOk = 0,
    /// Invalid argument (null pointer, bad UTF-8 path, closed handle).
    McErrInvalidArg = 1,
    /// File could not be read.
    McErrIo = 2,
    /// Checkpoint malformed, corrupt, or of an unsupported version.
    McErrFormat = 3,
    /// A non-finite value was produced.
    McErrNumeric = 4,
}

/// Opaque model handle.
pub struct McModel {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_for(e: &Error) -> McStatus {
    match e {
        Error::Io { .. } => McStatus::McErrIo,
        Error::Integrity(_) | Error::UnsupportedVersion(_) | Error::Json(_) => {
            McStatus::McErrFormat
        }
        Error::NonFinite(_) => McStatus::McErrNumeric,
        _ => McStatus::McErrInvalidArg,
    }
}

fn fail(e: Error) -> McStatus {
    let code = status_for(&e);
    set_error(e.to_string());
    code
}

fn invalid(msg: &str) -> McStatus {
    set_error(msg);
    McStatus::McErrInvalidArg
}

/// # Safety
/// `ptr` must be a valid NUL-terminated string or null.
unsafe fn path_arg<'a>(ptr: *const c_char) -> Result<&'a Path, McStatus> {
    if ptr.is_null() {
        return Err(invalid("null path"));
    }
    match unsafe { CStr::from_ptr(ptr) }.to_str() {
        Ok(s) => Ok(Path::new(s)),
        Err(_) => Err(invalid("path is not valid UTF-8")),
    }
}

/// Load a checkpoint file into a new model handle.
///
/// # Safety
/// `path` must be a valid NUL-terminated string; `out` must be a valid
/// pointer to receive the handle.
#[no_mangle]
pub unsafe extern "C" fn mc_model_open(path: *const c_char, out: *mut *mut McModel) -> McStatus {
    if out.is_null() {
        return invalid("null output pointer");
    }
    let path = match unsafe { path_arg(path) } {
        Ok(p) => p,
        Err(s) => return s,
    };
    match malconv::checkpoint::load(path) {
        Ok((model, _)) => {
            unsafe { *out = Box::into_raw(Box::new(McModel { model })) };
            McStatus::McOk
        }
        Err(e) => fail(e),
    }
}

/// Release a handle returned by `mc_model_open`. Null is a no-op.
///
/// # Safety
/// `model` must be a handle from `mc_model_open` not yet closed.
#[no_mangle]
pub unsafe extern "C" fn mc_model_close(model: *mut McModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

fn predict(handle: &McModel, src: &TokenSource, score: &mut f32) -> McStatus {
    match handle
        .model
        .predict(src, Mode::Lowmem, &LowmemOpts::default())
    {
        Ok(logit) => {
            *score = logit;
            McStatus::McOk
        }
        Err(e) => fail(e),
    }
}

/// Score a byte buffer; writes the logit to `score`.
///
/// # Safety
/// `data` must point to `len` readable bytes; `score` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mc_predict_bytes(
    model: *const McModel,
    data: *const u8,
    len: usize,
    score: *mut f32,
) -> McStatus {
    if model.is_null() || score.is_null() || (data.is_null() && len > 0) {
        return invalid("null argument");
    }
    let handle = unsafe { &*model };
    let bytes = unsafe { std::slice::from_raw_parts(data, len) };
    let src = TokenSource::from_bytes(bytes, handle.model.min_token_len());
    predict(handle, &src, unsafe { &mut *score })
}

/// Score a file without loading it into memory; writes the logit to
/// `score`.
///
/// # Safety
/// `path` must be a valid NUL-terminated string; `score` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mc_predict_file(
    model: *const McModel,
    path: *const c_char,
    score: *mut f32,
) -> McStatus {
    if model.is_null() || score.is_null() {
        return invalid("null argument");
    }
    let handle = unsafe { &*model };
    let path = match unsafe { path_arg(path) } {
        Ok(p) => p,
        Err(s) => return s,
    };
    let src = match TokenSource::open(path, handle.model.min_token_len()) {
        Ok(s) => s,
        Err(e) => return fail(e),
    };
    predict(handle, &src, unsafe { &mut *score })
}

/// Copy the calling thread's last error message (NUL-terminated,
/// truncated to `buf_len`). Returns the full message length in bytes,
/// excluding the terminator.
///
/// # Safety
/// `buf` must point to `buf_len` writable bytes, or be null with
/// `buf_len == 0`.
#[no_mangle]
pub unsafe extern "C" fn mc_last_error_message(buf: *mut c_char, buf_len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && buf_len > 0 {
            let n = msg.len().min(buf_len - 1);
            unsafe {
                std::ptr::copy_nonoverlapping(msg.as_ptr(), buf as *mut u8, n);
                *buf.add(n) = 0;
            }
        }
        msg.len()
    })
}
