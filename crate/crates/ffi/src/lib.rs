//! C ABI over the batcher.
//!
//! Callers create an opaque [`TbBatcher`] from an optional TOML config and an
//! optional model directory, then pass batching requests as JSON:
//!
//! ```text
//! {"info": {"context": {"kind": "Workspace", "id": "w1"}, "flags": [["--jobs", "4"]], "priority": "high"},
//!  "targets": [{"label": "//a/b:c"}, ...]}
//! ```
//!
//! and receive a JSON array of batches:
//!
//! ```text
//! [{"executor_types": "x86", "reason": "MAX_MEMORY", "targets": ["//a/b:c", ...]}, ...]
//! ```
//!
//! Every function returns a [`TbStatus`]. On failure, [`tb_last_error`]
//! describes the most recent error on the calling thread. Strings returned
//! through out-pointers must be released with [`tb_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use serde::{Deserialize, Serialize};
use target_batcher::config::Config;
use target_batcher::estimator::ModelSet;
use target_batcher::model::{BatchSizeReason, RequestInfo, Target};
use target_batcher::service::{BatchPlanner, EstimatorPlanner};

/// Result codes. Zero is success.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TbStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidConfig = 3,
    ModelLoad = 4,
    InvalidRequest = 5,
    Internal = 6,
}

/// Opaque batcher handle.
pub struct TbBatcher {
    config: Config,
    planner: EstimatorPlanner,
    has_models: bool,
}

#[derive(Deserialize)]
struct BatchRequest {
    info: RequestInfo,
    targets: Vec<Target>,
}

#[derive(Serialize)]
struct BatchOut {
    executor_types: String,
    reason: BatchSizeReason,
    targets: Vec<String>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn fail(status: TbStatus, msg: impl Into<String>) -> TbStatus {
    set_error(msg);
    status
}

/// Runs `f`, turning a panic into `Internal`.
fn guarded(f: impl FnOnce() -> TbStatus) -> TbStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(TbStatus::Internal, "internal panic"),
    }
}

/// Null means "not given".
unsafe fn opt_str<'a>(p: *const c_char) -> Result<Option<&'a str>, TbStatus> {
    if p.is_null() {
        return Ok(None);
    }
    CStr::from_ptr(p)
        .to_str()
        .map(Some)
        .map_err(|_| fail(TbStatus::InvalidUtf8, "argument is not valid UTF-8"))
}

/// Creates a batcher. `config_toml` and `models_dir` may be null. With no
/// models, every batch falls back to the configured default size.
///
/// # Safety
/// String arguments must be null or NUL-terminated. `out` must be a valid
/// pointer; on success it receives a handle to release with
/// [`tb_batcher_free`].
#[no_mangle]
pub unsafe extern "C" fn tb_batcher_new(
    config_toml: *const c_char,
    models_dir: *const c_char,
    out: *mut *mut TbBatcher,
) -> TbStatus {
    guarded(|| {
        if out.is_null() {
            return fail(TbStatus::NullPointer, "out is null");
        }
        *out = ptr::null_mut();
        let (toml, dir) = match (opt_str(config_toml), opt_str(models_dir)) {
            (Ok(t), Ok(d)) => (t, d),
            (Err(s), _) | (_, Err(s)) => return s,
        };
        let config = match toml.map_or_else(|| Ok(Config::default()), Config::from_toml) {
            Ok(c) => c,
            Err(e) => return fail(TbStatus::InvalidConfig, e.to_string()),
        };
        let models = match dir.map(|d| ModelSet::load(Path::new(d))).transpose() {
            Ok(m) => m,
            Err(e) => return fail(TbStatus::ModelLoad, e.to_string()),
        };
        let planner = EstimatorPlanner::from_models(config.batching.clone(), models.as_ref());
        let handle = TbBatcher { config, planner, has_models: models.is_some() };
        *out = Box::into_raw(Box::new(handle));
        TbStatus::Ok
    })
}

/// Releases a batcher. Null is ignored.
///
/// # Safety
/// `handle` must be null or come from [`tb_batcher_new`], and must not be
/// used afterwards.
#[no_mangle]
pub unsafe extern "C" fn tb_batcher_free(handle: *mut TbBatcher) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Whether the batcher was created with trained models.
///
/// # Safety
/// `handle` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tb_batcher_has_models(handle: *const TbBatcher) -> bool {
    handle.as_ref().is_some_and(|h| h.has_models)
}

/// Groups and batches one request. On success `*out_json` holds a
/// JSON array of batches, to release with [`tb_string_free`].
///
/// # Safety
/// `handle` must be a live handle, `request_json` NUL-terminated, and
/// `out_json` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tb_batch_targets_json(
    handle: *const TbBatcher,
    request_json: *const c_char,
    out_json: *mut *mut c_char,
) -> TbStatus {
    guarded(|| {
        if out_json.is_null() {
            return fail(TbStatus::NullPointer, "out_json is null");
        }
        *out_json = ptr::null_mut();
        let Some(h) = handle.as_ref() else {
            return fail(TbStatus::NullPointer, "handle is null");
        };
        let text = match opt_str(request_json) {
            Ok(Some(t)) => t,
            Ok(None) => return fail(TbStatus::NullPointer, "request_json is null"),
            Err(s) => return s,
        };
        let req: BatchRequest = match serde_json::from_str(text) {
            Ok(r) => r,
            Err(e) => return fail(TbStatus::InvalidRequest, format!("bad request: {e}")),
        };
        if let Err(e) = req.info.flags.validate() {
            return fail(TbStatus::InvalidRequest, e.to_string());
        }
        if let Some(e) = req.targets.iter().find_map(|t| t.validate().err()) {
            return fail(TbStatus::InvalidRequest, e.to_string());
        }
        let mut out = Vec::new();
        for (types, group) in h.config.executors.group_and_sort(&req.targets) {
            for b in h.planner.plan(&group, &req.info) {
                out.push(BatchOut {
                    executor_types: types.to_string(),
                    reason: b.reason,
                    targets: b.targets.into_iter().map(|t| t.label).collect(),
                });
            }
        }
        let json = match serde_json::to_string(&out) {
            Ok(j) => j,
            Err(e) => return fail(TbStatus::Internal, e.to_string()),
        };
        match CString::new(json) {
            Ok(c) => {
                *out_json = c.into_raw();
                TbStatus::Ok
            }
            Err(e) => fail(TbStatus::Internal, e.to_string()),
        }
    })
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must be null or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tb_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// The last error on this thread, or null. Valid until the next call into
/// this library on the same thread; do not free.
#[no_mangle]
pub extern "C" fn tb_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn tb_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
