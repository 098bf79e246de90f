//! Exercises the C ABI exactly as a foreign caller would: strings in,
//! status codes and owned strings out, opaque handles freed explicitly.

use std::ffi::{c_char, CStr, CString};
use std::ptr;

use fairfed_ffi::{
    fairfed_last_error_message, fairfed_run_free, fairfed_run_new, fairfed_run_record_json,
    fairfed_run_report_json, fairfed_run_theta, fairfed_string_free, fairfed_sweep_json,
    fairfed_version, FairfedRun, FairfedStatus,
};

/// Drains the thread's last error into an owned Rust string.
fn take_error() -> String {
    let ptr = fairfed_last_error_message();
    assert!(!ptr.is_null(), "expected an error message");
    let msg = unsafe { CStr::from_ptr(ptr) }.to_str().unwrap().to_string();
    unsafe { fairfed_string_free(ptr) };
    msg
}

fn take_string(ptr: *mut c_char) -> String {
    assert!(!ptr.is_null());
    let s = unsafe { CStr::from_ptr(ptr) }.to_str().unwrap().to_string();
    unsafe { fairfed_string_free(ptr) };
    s
}

const RUN_CONFIG: &str = r#"{
    "rows": 600,
    "k": 3,
    "method": "fairfed-rw",
    "rounds": 2,
    "train": {"learning_rate": 0.05, "epochs": 1, "batch_size": 32},
    "seed": 4
}"#;

#[test]
fn version_is_a_semver_string() {
    let v = unsafe { CStr::from_ptr(fairfed_version()) }.to_str().unwrap();
    assert_eq!(v.split('.').count(), 3, "version {v:?}");
}

#[test]
fn run_handle_roundtrip() {
    let config = CString::new(RUN_CONFIG).unwrap();
    let mut run: *mut FairfedRun = ptr::null_mut();
    let status = unsafe { fairfed_run_new(config.as_ptr(), &mut run) };
    assert_eq!(status, FairfedStatus::Ok);
    assert!(!run.is_null());

    let mut json: *mut c_char = ptr::null_mut();
    assert_eq!(
        unsafe { fairfed_run_record_json(run, &mut json) },
        FairfedStatus::Ok
    );
    let record: serde_json::Value = serde_json::from_str(&take_string(json)).unwrap();
    assert_eq!(record["method"], "fairfed-rw");
    assert_eq!(record["rounds"], 2);
    assert!(record["acc"].as_f64().unwrap() > 0.0);

    let mut json: *mut c_char = ptr::null_mut();
    assert_eq!(
        unsafe { fairfed_run_report_json(run, &mut json) },
        FairfedStatus::Ok
    );
    let rows: serde_json::Value = serde_json::from_str(&take_string(json)).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 2);

    let mut theta: *const f64 = ptr::null();
    let mut len: usize = 0;
    assert_eq!(
        unsafe { fairfed_run_theta(run, &mut theta, &mut len) },
        FairfedStatus::Ok
    );
    assert!(len > 1, "weights plus bias");
    let view = unsafe { std::slice::from_raw_parts(theta, len) };
    assert!(view.iter().all(|x| x.is_finite()));
    // The borrowed view matches the serialized report's final model.
    let last_theta = rows.as_array().unwrap()[1]["theta"].as_array().unwrap();
    assert_eq!(last_theta.len(), len);
    for (a, b) in last_theta.iter().zip(view) {
        assert_eq!(a.as_f64().unwrap(), *b);
    }

    unsafe { fairfed_run_free(run) };
}

#[test]
fn null_and_invalid_arguments_are_rejected() {
    let mut run: *mut FairfedRun = ptr::null_mut();
    assert_eq!(
        unsafe { fairfed_run_new(ptr::null(), &mut run) },
        FairfedStatus::NullArgument
    );
    assert!(take_error().contains("null"));

    let bad_utf8: [c_char; 3] = [-1i8 as c_char, -2i8 as c_char, 0];
    assert_eq!(
        unsafe { fairfed_run_new(bad_utf8.as_ptr(), &mut run) },
        FairfedStatus::InvalidUtf8
    );
    assert!(take_error().contains("UTF-8"));

    let not_json = CString::new("not json").unwrap();
    assert_eq!(
        unsafe { fairfed_run_new(not_json.as_ptr(), &mut run) },
        FairfedStatus::InvalidConfig
    );
    assert!(!take_error().is_empty());

    // Structurally valid JSON, semantically invalid config.
    let zero_clients = CString::new(r#"{"k": 0}"#).unwrap();
    assert_eq!(
        unsafe { fairfed_run_new(zero_clients.as_ptr(), &mut run) },
        FairfedStatus::InvalidConfig
    );
    assert!(take_error().contains("k"));
    assert!(run.is_null(), "handle untouched on failure");

    // Freeing nulls is a no-op, not a crash.
    unsafe {
        fairfed_run_free(ptr::null_mut());
        fairfed_string_free(ptr::null_mut());
    }
}

#[test]
fn error_message_clears_on_success() {
    let mut run: *mut FairfedRun = ptr::null_mut();
    assert_eq!(
        unsafe { fairfed_run_new(ptr::null(), &mut run) },
        FairfedStatus::NullArgument
    );
    let _ = take_error();

    let config = CString::new(RUN_CONFIG).unwrap();
    assert_eq!(
        unsafe { fairfed_run_new(config.as_ptr(), &mut run) },
        FairfedStatus::Ok
    );
    assert!(fairfed_last_error_message().is_null());
    unsafe { fairfed_run_free(run) };
}

#[test]
fn sweep_returns_cell_summaries() {
    let spec = CString::new(
        r#"{
            "base": {
                "rows": 600,
                "k": 3,
                "rounds": 2,
                "train": {"learning_rate": 0.05, "epochs": 1, "batch_size": 32}
            },
            "methods": ["fedavg", "fairfed-rw"],
            "alphas": [0.5],
            "learning_rates": [0.05],
            "seeds": [0, 1]
        }"#,
    )
    .unwrap();
    let mut json: *mut c_char = ptr::null_mut();
    let status = unsafe { fairfed_sweep_json(spec.as_ptr(), &mut json) };
    assert_eq!(status, FairfedStatus::Ok);
    let cells: serde_json::Value = serde_json::from_str(&take_string(json)).unwrap();
    let cells = cells.as_array().unwrap();
    assert_eq!(cells.len(), 2);
    assert_eq!(cells[0]["method"], "fedavg");
    assert_eq!(cells[1]["method"], "fairfed-rw");
    assert_eq!(cells[0]["n_seeds"], 2);

    let bad_spec = CString::new(r#"{"methods": []}"#).unwrap();
    assert_eq!(
        unsafe { fairfed_sweep_json(bad_spec.as_ptr(), &mut json) },
        FairfedStatus::InvalidConfig
    );
    assert!(!take_error().is_empty());
}
