//! C ABI for the grounder crate: opaque model handles, status codes, and a
//! thread-local last-error message. The header is generated by cbindgen at
//! build time (see `build.rs`, output `include/grounder.h`).

use grounder::checkpoint;
use grounder::config::{validate_config, ModelConfig};
use grounder::model::Model;
use grounder::trainer::{param_budget, AdamW};
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;

/// Opaque handle to a model plus its optimizer state.
pub struct GrounderModel {
    model: Model,
    opt: AdamW,
}

/// Status codes returned by every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GrounderStatus {
    Ok = 0,
    /// Null pointer or malformed argument.
    InvalidArgument = 1,
    /// Config parse/validation failure.
    Config = 2,
    /// Checkpoint or filesystem failure.
    Io = 3,
    /// Forward-pass failure.
    Runtime = 4,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn fail(status: GrounderStatus, message: impl Into<String>) -> GrounderStatus {
    let msg = CString::new(message.into()).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
    status
}

/// Message for the most recent failure on this thread. Valid until the next
/// failing call; never null.
#[no_mangle]
pub extern "C" fn grounder_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

unsafe fn str_arg<'a>(ptr: *const c_char) -> Result<&'a str, GrounderStatus> {
    if ptr.is_null() {
        return Err(GrounderStatus::InvalidArgument);
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| GrounderStatus::InvalidArgument)
}

fn emit(model: Model, out: *mut *mut GrounderModel) -> GrounderStatus {
    if out.is_null() {
        return fail(GrounderStatus::InvalidArgument, "out handle is null");
    }
    let opt = AdamW::new(&model.store);
    let handle = Box::new(GrounderModel { model, opt });
    unsafe { *out = Box::into_raw(handle) };
    GrounderStatus::Ok
}

/// Build a model from a config JSON string and an init seed.
///
/// # Safety
/// `config_json` must be a valid NUL-terminated string and `out` a valid
/// pointer; the returned handle must be released with [`grounder_model_free`].
#[no_mangle]
pub unsafe extern "C" fn grounder_model_new(
    config_json: *const c_char,
    seed: u64,
    out: *mut *mut GrounderModel,
) -> GrounderStatus {
    let text = match str_arg(config_json) {
        Ok(t) => t,
        Err(s) => return fail(s, "config_json is null or not UTF-8"),
    };
    let raw: serde_json::Value = match serde_json::from_str(text) {
        Ok(v) => v,
        Err(e) => return fail(GrounderStatus::Config, format!("config json: {e}")),
    };
    let cfg = match validate_config(&raw) {
        Ok(c) => c,
        Err(e) => return fail(GrounderStatus::Config, e.to_string()),
    };
    emit(Model::new(cfg, seed), out)
}

/// Build the small demonstration profile.
///
/// # Safety
/// `out` must be a valid pointer; release the handle with
/// [`grounder_model_free`].
#[no_mangle]
pub unsafe extern "C" fn grounder_model_new_toy(
    seed: u64,
    out: *mut *mut GrounderModel,
) -> GrounderStatus {
    emit(Model::new(ModelConfig::toy(), seed), out)
}

/// Load a model and optimizer from a checkpoint file.
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn grounder_model_load(
    path: *const c_char,
    out: *mut *mut GrounderModel,
) -> GrounderStatus {
    let path = match str_arg(path) {
        Ok(p) => p,
        Err(s) => return fail(s, "path is null or not UTF-8"),
    };
    match checkpoint::load(Path::new(path)) {
        Ok((model, opt)) => {
            if out.is_null() {
                return fail(GrounderStatus::InvalidArgument, "out handle is null");
            }
            *out = Box::into_raw(Box::new(GrounderModel { model, opt }));
            GrounderStatus::Ok
        }
        Err(e) => fail(GrounderStatus::Io, e.to_string()),
    }
}

/// Save the handle's model and optimizer state to a checkpoint file.
///
/// # Safety
/// `handle` must come from this library; `path` must be a valid
/// NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn grounder_model_save(
    handle: *const GrounderModel,
    path: *const c_char,
) -> GrounderStatus {
    let Some(h) = handle.as_ref() else {
        return fail(GrounderStatus::InvalidArgument, "handle is null");
    };
    let path = match str_arg(path) {
        Ok(p) => p,
        Err(s) => return fail(s, "path is null or not UTF-8"),
    };
    match checkpoint::save(Path::new(path), &h.model, &h.opt) {
        Ok(()) => GrounderStatus::Ok,
        Err(e) => fail(GrounderStatus::Io, e.to_string()),
    }
}

/// Release a handle. Null is a no-op.
///
/// # Safety
/// `handle` must be null or come from this library, and must not be used
/// afterwards.
#[no_mangle]
pub unsafe extern "C" fn grounder_model_free(handle: *mut GrounderModel) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Run one forward pass. `image` is row-major RGB f64 of length
/// `image_size * image_size * 3`; `words` are token ids padded to the
/// configured text length. Writes (cx, cy, w, h) in [0, 1] to `out_box`.
///
/// # Safety
/// All pointers must be valid for the stated lengths; `out_box` must have
/// room for 4 doubles.
#[no_mangle]
pub unsafe extern "C" fn grounder_predict(
    handle: *const GrounderModel,
    image: *const f64,
    image_len: usize,
    words: *const u32,
    words_len: usize,
    out_box: *mut f64,
) -> GrounderStatus {
    let Some(h) = handle.as_ref() else {
        return fail(GrounderStatus::InvalidArgument, "handle is null");
    };
    if image.is_null() || words.is_null() || out_box.is_null() {
        return fail(GrounderStatus::InvalidArgument, "null buffer argument");
    }
    let image = std::slice::from_raw_parts(image, image_len);
    let words = std::slice::from_raw_parts(words, words_len);
    match h.model.forward(image, words) {
        Ok(fwd) => {
            let b = fwd.predicted_box();
            let out = std::slice::from_raw_parts_mut(out_box, 4);
            out.copy_from_slice(&[b.cx, b.cy, b.w, b.h]);
            GrounderStatus::Ok
        }
        Err(e) => fail(GrounderStatus::Runtime, e.to_string()),
    }
}

/// Tunable share of all parameters, in [0, 1].
///
/// # Safety
/// `handle` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn grounder_tunable_fraction(
    handle: *const GrounderModel,
    out: *mut f64,
) -> GrounderStatus {
    let Some(h) = handle.as_ref() else {
        return fail(GrounderStatus::InvalidArgument, "handle is null");
    };
    if out.is_null() {
        return fail(GrounderStatus::InvalidArgument, "out is null");
    }
    *out = param_budget(&h.model.store).tunable_fraction;
    GrounderStatus::Ok
}
