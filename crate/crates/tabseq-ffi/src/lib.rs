//! C ABI for the table-sequence encoder library: opaque model handles,
//! status codes, and JSON-in/JSON-out calls so other languages can bind
//! without touching Rust types.
//!
//! Strings returned through `char**` out-parameters are owned by this
//! library and must be released with `tsq_string_free`. Errors set a
//! thread-local message readable via `tsq_last_error`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use tabseq::error::Error;
use tabseq::model::{Model, SentenceFeatures};
use tabseq::table::Schedule;
use tabseq::train::load_checkpoint;

/// Opaque handle to a loaded model.
pub struct TsqModel {
    inner: Model,
}

/// Call outcome. Anything but `Ok` leaves a message in `tsq_last_error`.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq)]
pub enum TsqStatus {
    Ok = 0,
    /// A pointer argument was null or a string was not valid UTF-8/JSON.
    InvalidArgument = 1,
    /// The file could not be read.
    IoError = 2,
    /// The file or payload was readable but malformed.
    FormatError = 3,
    /// Any other failure, including caught panics.
    InternalError = 4,
}

/// Table-encoder execution schedule for inference.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq)]
pub enum TsqSchedule {
    Naive = 0,
    Wavefront = 1,
}

impl From<TsqSchedule> for Schedule {
    fn from(s: TsqSchedule) -> Schedule {
        match s {
            TsqSchedule::Naive => Schedule::Naive,
            TsqSchedule::Wavefront => Schedule::Wavefront,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let sanitized = msg.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_of(err: &Error) -> TsqStatus {
    match err {
        Error::Io(_) => TsqStatus::IoError,
        Error::Format(_) | Error::Corruption(_) | Error::Version(_) | Error::Json(_) => {
            TsqStatus::FormatError
        }
        Error::Input(_) | Error::Config(_) | Error::Alignment(_) => TsqStatus::InvalidArgument,
        _ => TsqStatus::InternalError,
    }
}

/// Last error message for the current thread; empty when no error occurred.
/// The pointer stays valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn tsq_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn tsq_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

unsafe fn cstr_arg<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, TsqStatus> {
    if ptr.is_null() {
        set_error(&format!("{} is null", what));
        return Err(TsqStatus::InvalidArgument);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error(&format!("{} is not valid UTF-8", what));
        TsqStatus::InvalidArgument
    })
}

fn guard(f: impl FnOnce() -> TsqStatus) -> TsqStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => {
            set_error("internal panic");
            TsqStatus::InternalError
        }
    }
}

/// Load a checkpoint file into a model handle. On success `*out_model`
/// owns the model; release it with `tsq_model_free`.
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out_model` a valid
/// pointer.
#[no_mangle]
pub unsafe extern "C" fn tsq_model_load(
    path: *const c_char,
    out_model: *mut *mut TsqModel,
) -> TsqStatus {
    guard(|| {
        if out_model.is_null() {
            set_error("out_model is null");
            return TsqStatus::InvalidArgument;
        }
        let path = match cstr_arg(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match load_checkpoint(Path::new(path)) {
            Ok(model) => {
                *out_model = Box::into_raw(Box::new(TsqModel { inner: model }));
                TsqStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Release a model handle. Null is a no-op.
///
/// # Safety
/// `model` must be a pointer returned by `tsq_model_load`, at most once.
#[no_mangle]
pub unsafe extern "C" fn tsq_model_free(model: *mut TsqModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Release a string returned by this library. Null is a no-op.
///
/// # Safety
/// `s` must be a pointer produced by this library, at most once.
#[no_mangle]
pub unsafe extern "C" fn tsq_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

fn parse_tokens(json: &str) -> Result<Vec<String>, TsqStatus> {
    let tokens: Vec<String> = serde_json::from_str(json).map_err(|e| {
        set_error(&format!("tokens_json must be a JSON array of strings: {}", e));
        TsqStatus::InvalidArgument
    })?;
    if tokens.is_empty() {
        set_error("tokens_json is empty");
        return Err(TsqStatus::InvalidArgument);
    }
    Ok(tokens)
}

fn emit(out_json: *mut *mut c_char, value: serde_json::Value) -> TsqStatus {
    let text = value.to_string().replace('\0', " ");
    match CString::new(text) {
        Ok(c) => {
            unsafe { *out_json = c.into_raw() };
            TsqStatus::Ok
        }
        Err(_) => {
            set_error("output contained an interior NUL");
            TsqStatus::InternalError
        }
    }
}

fn spans_json(model: &Model, spans: &[tabseq::codec::EntitySpan]) -> Vec<serde_json::Value> {
    spans
        .iter()
        .map(|e| {
            serde_json::json!({
                "start": e.start,
                "end": e.end,
                "type": model.tag_vocab.entity_types[e.etype],
            })
        })
        .collect()
}

fn relations_json(
    model: &Model,
    spans: &[tabseq::codec::EntitySpan],
    relations: &[tabseq::codec::Relation],
) -> Vec<serde_json::Value> {
    relations
        .iter()
        .map(|r| {
            serde_json::json!({
                "head": spans.iter().position(|e| *e == r.head),
                "tail": spans.iter().position(|e| *e == r.tail),
                "type": model.tag_vocab.relation_types[r.rtype],
            })
        })
        .collect()
}

unsafe fn predict_args<'a>(
    model: *const TsqModel,
    tokens_json: *const c_char,
    out_json: *mut *mut c_char,
) -> Result<(&'a TsqModel, Vec<String>), TsqStatus> {
    if out_json.is_null() {
        set_error("out_json is null");
        return Err(TsqStatus::InvalidArgument);
    }
    if model.is_null() {
        set_error("model is null");
        return Err(TsqStatus::InvalidArgument);
    }
    let json = cstr_arg(tokens_json, "tokens_json")?;
    let tokens = parse_tokens(json)?;
    Ok((&*model, tokens))
}

/// Decode entities and relations for one sentence.
///
/// `tokens_json` is a JSON array of token strings. On success `*out_json`
/// holds `{"entities": [...], "relations": [...]}`.
///
/// # Safety
/// All pointers must be valid; `out_json` receives an owned string.
#[no_mangle]
pub unsafe extern "C" fn tsq_predict_json(
    model: *const TsqModel,
    tokens_json: *const c_char,
    schedule: TsqSchedule,
    out_json: *mut *mut c_char,
) -> TsqStatus {
    guard(|| {
        let (model, tokens) = match predict_args(model, tokens_json, out_json) {
            Ok(v) => v,
            Err(s) => return s,
        };
        match model.inner.predict(&tokens, SentenceFeatures::default(), schedule.into()) {
            Ok((entities, relations)) => emit(
                out_json,
                serde_json::json!({
                    "entities": spans_json(&model.inner, &entities),
                    "relations": relations_json(&model.inner, &entities, &relations),
                }),
            ),
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Apply the trained prediction heads to every encoder layer.
///
/// On success `*out_json` holds
/// `{"layers": [{"layer": 1, "entities": [...], "relations": [...]}, ...]}`.
///
/// # Safety
/// All pointers must be valid; `out_json` receives an owned string.
#[no_mangle]
pub unsafe extern "C" fn tsq_probe_json(
    model: *const TsqModel,
    tokens_json: *const c_char,
    schedule: TsqSchedule,
    out_json: *mut *mut c_char,
) -> TsqStatus {
    guard(|| {
        let (model, tokens) = match predict_args(model, tokens_json, out_json) {
            Ok(v) => v,
            Err(s) => return s,
        };
        match model.inner.probe(&tokens, SentenceFeatures::default(), schedule.into()) {
            Ok(layers) => {
                let docs: Vec<serde_json::Value> = layers
                    .iter()
                    .enumerate()
                    .map(|(l, (ents, rels))| {
                        serde_json::json!({
                            "layer": l + 1,
                            "entities": spans_json(&model.inner, ents),
                            "relations": relations_json(&model.inner, ents, rels),
                        })
                    })
                    .collect();
                emit(out_json, serde_json::json!({ "layers": docs }))
            }
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Export per-layer, per-head attention weight matrices.
///
/// On success `*out_json` holds `{"layers": [{"heads": [[[...]]]}, ...]}`;
/// each head is a row-major N×N matrix whose rows sum to one.
///
/// # Safety
/// All pointers must be valid; `out_json` receives an owned string.
#[no_mangle]
pub unsafe extern "C" fn tsq_export_attention_json(
    model: *const TsqModel,
    tokens_json: *const c_char,
    schedule: TsqSchedule,
    out_json: *mut *mut c_char,
) -> TsqStatus {
    guard(|| {
        let (model, tokens) = match predict_args(model, tokens_json, out_json) {
            Ok(v) => v,
            Err(s) => return s,
        };
        match model.inner.export_attention(&tokens, SentenceFeatures::default(), schedule.into())
        {
            Ok(export) => {
                let layers: Vec<serde_json::Value> = export
                    .layers
                    .iter()
                    .map(|l| serde_json::json!({ "heads": l.heads }))
                    .collect();
                emit(out_json, serde_json::json!({ "layers": layers }))
            }
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ptr;

    #[test]
    fn version_is_nul_terminated_static() {
        let v = tsq_version();
        let s = unsafe { CStr::from_ptr(v) }.to_str().unwrap();
        assert_eq!(s, env!("CARGO_PKG_VERSION"));
    }

    #[test]
    fn null_arguments_are_invalid() {
        let mut out: *mut TsqModel = ptr::null_mut();
        let status = unsafe { tsq_model_load(ptr::null(), &mut out) };
        assert!(status == TsqStatus::InvalidArgument);
        let msg = unsafe { CStr::from_ptr(tsq_last_error()) }.to_str().unwrap();
        assert!(!msg.is_empty());
    }

    #[test]
    fn missing_file_is_io_error() {
        let path = CString::new("/nonexistent/model.ckpt").unwrap();
        let mut out: *mut TsqModel = ptr::null_mut();
        let status = unsafe { tsq_model_load(path.as_ptr(), &mut out) };
        assert!(status == TsqStatus::IoError);
        assert!(out.is_null());
    }
}
