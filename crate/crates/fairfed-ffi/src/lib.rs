//! C ABI for the federated fairness simulator.
//!
//! Conventions:
//! - Every fallible entry point returns a [`FairfedStatus`]; `FAIRFED_STATUS_OK`
//!   is zero. On failure, a message for the calling thread is available
//!   through [`fairfed_last_error_message`].
//! - Configuration goes in as JSON (the same schema the CLI accepts); results
//!   come back as JSON. Returned `char*` strings are owned by the caller and
//!   must be released with [`fairfed_string_free`].
//! - Run handles are opaque. Release them with [`fairfed_run_free`]. Views
//!   borrowed from a handle (the model coefficients) are valid until the
//!   handle is freed.
//! - Null pointers are rejected, never dereferenced. Panics are caught at the
//!   boundary and reported as `FAIRFED_STATUS_PANICKED`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use fairfed_core::harness::{run_once, sweep, RunConfig, RunRecord, SweepSpec};
use fairfed_core::report::ReportRow;

/// Result of a C API call. Zero is success; everything else is an error whose
/// message is readable via `fairfed_last_error_message`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FairfedStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// An input string was not valid UTF-8.
    InvalidUtf8 = 2,
    /// The configuration JSON failed to parse or validate.
    InvalidConfig = 3,
    /// The experiment itself failed (degenerate data, infeasible split, ...).
    RunFailed = 4,
    /// A panic was caught at the ABI boundary; state may be inconsistent.
    Panicked = 5,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: &str) {
    let sanitized = message.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = Some(CString::new(sanitized).expect("nul bytes removed"));
    });
}

fn clear_error() {
    LAST_ERROR.with(|slot| slot.borrow_mut().take());
}

/// A finished experiment: headline record, per-round reports, final model.
pub struct FairfedRun {
    record: RunRecord,
    rows: Vec<ReportRow>,
    theta: Vec<f64>,
}

/// Runs `body` with panics converted to `Panicked`; `body` reports its own
/// errors through `set_error` and its status code.
fn guarded(body: impl FnOnce() -> FairfedStatus) -> FairfedStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic at the ABI boundary".to_string());
            set_error(&msg);
            FairfedStatus::Panicked
        }
    }
}

/// Parses a required C string argument into UTF-8, reporting failures.
///
/// # Safety
/// `input` must be null or point to a nul-terminated string.
unsafe fn read_str<'a>(input: *const c_char, what: &str) -> Result<&'a str, FairfedStatus> {
    if input.is_null() {
        set_error(&format!("{what} must not be null"));
        return Err(FairfedStatus::NullArgument);
    }
    CStr::from_ptr(input).to_str().map_err(|e| {
        set_error(&format!("{what} is not valid UTF-8: {e}"));
        FairfedStatus::InvalidUtf8
    })
}

fn into_owned_c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " "))
        .expect("nul bytes removed")
        .into_raw()
}

/// Library version as a static string; do not free.
#[no_mangle]
pub extern "C" fn fairfed_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Returns the calling thread's most recent error message, or null if the
/// last call succeeded. The caller owns the string: release it with
/// `fairfed_string_free`.
#[no_mangle]
pub extern "C" fn fairfed_last_error_message() -> *mut c_char {
    LAST_ERROR.with(|slot| match &*slot.borrow() {
        Some(msg) => msg.clone().into_raw(),
        None => ptr::null_mut(),
    })
}

/// Releases a string returned by this library. Null is a no-op.
///
/// # Safety
/// `s` must be a pointer previously returned by this library and not yet
/// freed.
#[no_mangle]
pub unsafe extern "C" fn fairfed_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parses `config_json` (one experiment configuration), executes the full
/// federated run, and writes an owned handle to `out_run`.
///
/// # Safety
/// `config_json` must be null or nul-terminated; `out_run` must point to
/// writable memory for one pointer.
#[no_mangle]
pub unsafe extern "C" fn fairfed_run_new(
    config_json: *const c_char,
    out_run: *mut *mut FairfedRun,
) -> FairfedStatus {
    guarded(|| {
        clear_error();
        if out_run.is_null() {
            set_error("out_run must not be null");
            return FairfedStatus::NullArgument;
        }
        let text = match read_str(config_json, "config_json") {
            Ok(t) => t,
            Err(status) => return status,
        };
        let cfg: RunConfig = match serde_json::from_str(text) {
            Ok(cfg) => cfg,
            Err(e) => {
                set_error(&format!("config JSON: {e}"));
                return FairfedStatus::InvalidConfig;
            }
        };
        if let Err(e) = cfg.validate() {
            set_error(&e.to_string());
            return FairfedStatus::InvalidConfig;
        }
        match run_once(&cfg) {
            Ok(output) => {
                let theta = output.result.final_theta.to_flat();
                let handle = Box::new(FairfedRun {
                    record: output.record,
                    rows: output.result.rows,
                    theta,
                });
                *out_run = Box::into_raw(handle);
                FairfedStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                FairfedStatus::RunFailed
            }
        }
    })
}

/// Writes the run's headline record (accuracy, fairness metrics, fallback
/// counts) to `out_json` as an owned JSON string.
///
/// # Safety
/// `run` must be a live handle from `fairfed_run_new`; `out_json` must point
/// to writable memory for one pointer.
#[no_mangle]
pub unsafe extern "C" fn fairfed_run_record_json(
    run: *const FairfedRun,
    out_json: *mut *mut c_char,
) -> FairfedStatus {
    guarded(|| {
        clear_error();
        if run.is_null() || out_json.is_null() {
            set_error("run and out_json must not be null");
            return FairfedStatus::NullArgument;
        }
        let record = &(*run).record;
        *out_json = into_owned_c_string(
            serde_json::to_string(record).expect("record serializes"),
        );
        FairfedStatus::Ok
    })
}

/// Writes the full per-round report (metrics, per-client rows, exchanged
/// sums, model) to `out_json` as an owned JSON array string.
///
/// # Safety
/// Same contract as `fairfed_run_record_json`.
#[no_mangle]
pub unsafe extern "C" fn fairfed_run_report_json(
    run: *const FairfedRun,
    out_json: *mut *mut c_char,
) -> FairfedStatus {
    guarded(|| {
        clear_error();
        if run.is_null() || out_json.is_null() {
            set_error("run and out_json must not be null");
            return FairfedStatus::NullArgument;
        }
        let rows = &(*run).rows;
        *out_json = into_owned_c_string(serde_json::to_string(rows).expect("rows serialize"));
        FairfedStatus::Ok
    })
}

/// Exposes the final model as a borrowed view: feature weights followed by
/// the bias. The pointer stays valid until `fairfed_run_free`.
///
/// # Safety
/// `run` must be a live handle; `out_ptr` and `out_len` must point to
/// writable memory.
#[no_mangle]
pub unsafe extern "C" fn fairfed_run_theta(
    run: *const FairfedRun,
    out_ptr: *mut *const f64,
    out_len: *mut usize,
) -> FairfedStatus {
    guarded(|| {
        clear_error();
        if run.is_null() || out_ptr.is_null() || out_len.is_null() {
            set_error("run, out_ptr, and out_len must not be null");
            return FairfedStatus::NullArgument;
        }
        let theta = &(*run).theta;
        *out_ptr = theta.as_ptr();
        *out_len = theta.len();
        FairfedStatus::Ok
    })
}

/// Releases a run handle. Null is a no-op.
///
/// # Safety
/// `run` must be a handle from `fairfed_run_new`, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fairfed_run_free(run: *mut FairfedRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Parses `spec_json` (a sweep specification: base config plus method, alpha,
/// beta, eta, learning-rate, and seed axes), runs the whole grid, and writes
/// the per-cell summaries to `out_json` as an owned JSON array. Fails with
/// `RunFailed` if any grid cell fails.
///
/// # Safety
/// `spec_json` must be null or nul-terminated; `out_json` must point to
/// writable memory for one pointer.
#[no_mangle]
pub unsafe extern "C" fn fairfed_sweep_json(
    spec_json: *const c_char,
    out_json: *mut *mut c_char,
) -> FairfedStatus {
    guarded(|| {
        clear_error();
        if out_json.is_null() {
            set_error("out_json must not be null");
            return FairfedStatus::NullArgument;
        }
        let text = match read_str(spec_json, "spec_json") {
            Ok(t) => t,
            Err(status) => return status,
        };
        let spec: SweepSpec = match serde_json::from_str(text) {
            Ok(spec) => spec,
            Err(e) => {
                set_error(&format!("sweep spec JSON: {e}"));
                return FairfedStatus::InvalidConfig;
            }
        };
        if let Err(e) = spec.validate() {
            set_error(&e.to_string());
            return FairfedStatus::InvalidConfig;
        }
        match sweep(&spec, None, false) {
            Ok(result) if result.failures.is_empty() => {
                *out_json = into_owned_c_string(
                    serde_json::to_string(&result.cells).expect("cells serialize"),
                );
                FairfedStatus::Ok
            }
            Ok(result) => {
                set_error(&format!("{} cells failed: {}", result.failures.len(),
                    result.failures.join("; ")));
                FairfedStatus::RunFailed
            }
            Err(e) => {
                set_error(&e.to_string());
                FairfedStatus::RunFailed
            }
        }
    })
}
