//! C ABI over `bnn-core`.
//!
//! Models live behind an opaque `BnnModel` pointer. Every function returns a
//! `BnnStatus`; on failure a message for the calling thread is available from
//! `bnn_last_error_message` until the next call on that thread. Panics are
//! caught at the boundary and reported as `BNN_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use bnn_core::model_io::{decode, encode, load_model, save_model, Model};
use bnn_core::packed::PackedModel;
use bnn_core::BnnError;

/// Result of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnnStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Config = 5,
    Data = 6,
    Internal = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

/// A loaded model. Opaque to C.
pub struct BnnModel {
    model: Model,
    // inference always runs on the packed form
    packed: PackedModel,
}

impl BnnModel {
    fn new(model: Model) -> Box<Self> {
        let packed = model.to_packed();
        Box::new(BnnModel { model, packed })
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &BnnError) -> BnnStatus {
    match e {
        BnnError::Config(_) => BnnStatus::Config,
        BnnError::Data(_) => BnnStatus::Data,
        BnnError::Format { .. } => BnnStatus::Format,
        BnnError::Precondition(_) => BnnStatus::InvalidArgument,
        BnnError::NonFinite { .. } | BnnError::Internal(_) => BnnStatus::Internal,
        BnnError::Io(_) => BnnStatus::Io,
    }
}

struct Fail(BnnStatus, String);

impl From<BnnError> for Fail {
    fn from(e: BnnError) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(BnnStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, converting errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> BnnStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => BnnStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            BnnStatus::Panic
        }
    }
}

unsafe fn path_arg<'a>(path: *const c_char) -> Result<&'a str, Fail> {
    if path.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(path)
        .to_str()
        .map_err(|_| Fail(BnnStatus::InvalidArgument, "path is not valid UTF-8".into()))
}

unsafe fn model_arg<'a>(model: *const BnnModel) -> Result<&'a BnnModel, Fail> {
    model.as_ref().ok_or_else(|| null("model"))
}

unsafe fn store(out: *mut *mut BnnModel, model: Model) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(BnnModel::new(model));
    Ok(())
}

/// Loads a model file into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn bnn_model_load(path: *const c_char, out: *mut *mut BnnModel) -> BnnStatus {
    guard(|| {
        if !out.is_null() {
            *out = ptr::null_mut();
        }
        let path = path_arg(path)?;
        store(out, load_model(path)?)
    })
}

/// Decodes a model from `len` bytes at `data` into `*out`.
///
/// # Safety
/// `data` must point to `len` readable bytes and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bnn_model_load_bytes(data: *const u8, len: usize, out: *mut *mut BnnModel) -> BnnStatus {
    guard(|| {
        if !out.is_null() {
            *out = ptr::null_mut();
        }
        if data.is_null() {
            return Err(null("data"));
        }
        store(out, decode(slice::from_raw_parts(data, len))?)
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn bnn_model_free(model: *mut BnnModel) {
    if !model.is_null() {
        let _ = catch_unwind(AssertUnwindSafe(|| drop(Box::from_raw(model))));
    }
}

/// Writes the model to `path`; with `packed` nonzero binary-weight layers
/// are stored one bit per weight.
///
/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn bnn_model_save(model: *const BnnModel, path: *const c_char, packed: bool) -> BnnStatus {
    guard(|| {
        let m = model_arg(model)?;
        let path = path_arg(path)?;
        if packed {
            save_model(&Model::Packed(m.packed.clone()), path)?;
        } else {
            save_model(&m.model, path)?;
        }
        Ok(())
    })
}

/// Serialized size of the model in bytes, written to `*len`.
///
/// # Safety
/// `model` must be a live handle and `len` writable.
#[no_mangle]
pub unsafe extern "C" fn bnn_model_encoded_len(model: *const BnnModel, packed: bool, len: *mut usize) -> BnnStatus {
    guard(|| {
        let m = model_arg(model)?;
        if len.is_null() {
            return Err(null("len"));
        }
        *len = encoded(m, packed)?.len();
        Ok(())
    })
}

fn encoded(m: &BnnModel, packed: bool) -> Result<Vec<u8>, Fail> {
    Ok(if packed {
        encode(&Model::Packed(m.packed.clone()))?
    } else {
        encode(&m.model)?
    })
}

/// Serializes the model into `buf` of `cap` bytes.
///
/// # Safety
/// `model` must be a live handle and `buf` must have `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn bnn_model_encode(model: *const BnnModel, packed: bool, buf: *mut u8, cap: usize) -> BnnStatus {
    guard(|| {
        let m = model_arg(model)?;
        if buf.is_null() {
            return Err(null("buf"));
        }
        let bytes = encoded(m, packed)?;
        if bytes.len() > cap {
            return Err(Fail(
                BnnStatus::BufferTooSmall,
                format!("need {} bytes, buffer has {cap}", bytes.len()),
            ));
        }
        ptr::copy_nonoverlapping(bytes.as_ptr(), buf, bytes.len());
        Ok(())
    })
}

/// Creates a packed copy of `model` in `*out`.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bnn_model_pack(model: *const BnnModel, out: *mut *mut BnnModel) -> BnnStatus {
    guard(|| {
        let m = model_arg(model)?;
        store(out, Model::Packed(m.packed.clone()))
    })
}

/// Input width, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bnn_model_input_dim(model: *const BnnModel) -> usize {
    model.as_ref().map_or(0, |m| m.packed.input_dim())
}

/// Number of classes, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bnn_model_output_dim(model: *const BnnModel) -> usize {
    model.as_ref().map_or(0, |m| m.packed.output_dim())
}

/// Number of layers, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bnn_model_layer_count(model: *const BnnModel) -> usize {
    model.as_ref().map_or(0, |m| m.packed.layers().len())
}

/// Whether the handle holds a packed model (as loaded, not derived).
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bnn_model_is_packed(model: *const BnnModel) -> bool {
    model.as_ref().is_some_and(|m| matches!(m.model, Model::Packed(_)))
}

/// Class posteriors for `x` (`x_len` features) into `out` (`out_len` floats).
///
/// # Safety
/// `model` must be a live handle, `x` must have `x_len` readable floats and
/// `out` `out_len` writable floats.
#[no_mangle]
pub unsafe extern "C" fn bnn_model_infer(
    model: *const BnnModel,
    x: *const f32,
    x_len: usize,
    out: *mut f32,
    out_len: usize,
) -> BnnStatus {
    guard(|| {
        let m = model_arg(model)?;
        if x.is_null() {
            return Err(null("x"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        if out_len < m.packed.output_dim() {
            return Err(Fail(
                BnnStatus::BufferTooSmall,
                format!("need {} outputs, buffer has {out_len}", m.packed.output_dim()),
            ));
        }
        let probs = m.packed.infer(slice::from_raw_parts(x, x_len))?;
        ptr::copy_nonoverlapping(probs.as_ptr(), out, probs.len());
        Ok(())
    })
}

/// Most likely class for `x` into `*class_out`.
///
/// # Safety
/// `model` must be a live handle, `x` must have `x_len` readable floats and
/// `class_out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bnn_model_predict(
    model: *const BnnModel,
    x: *const f32,
    x_len: usize,
    class_out: *mut usize,
) -> BnnStatus {
    guard(|| {
        let m = model_arg(model)?;
        if x.is_null() {
            return Err(null("x"));
        }
        if class_out.is_null() {
            return Err(null("class_out"));
        }
        *class_out = m.packed.predict_class(slice::from_raw_parts(x, x_len))?;
        Ok(())
    })
}

/// Message for the last failed call on this thread, or null. The pointer
/// stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn bnn_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Static name of a status code.
#[no_mangle]
pub extern "C" fn bnn_status_string(status: BnnStatus) -> *const c_char {
    let s: &'static CStr = match status {
        BnnStatus::Ok => c"ok",
        BnnStatus::NullPointer => c"null pointer",
        BnnStatus::InvalidArgument => c"invalid argument",
        BnnStatus::Io => c"I/O error",
        BnnStatus::Format => c"format error",
        BnnStatus::Config => c"configuration error",
        BnnStatus::Data => c"data error",
        BnnStatus::Internal => c"internal error",
        BnnStatus::BufferTooSmall => c"buffer too small",
        BnnStatus::Panic => c"panic",
    };
    s.as_ptr()
}
