use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use gym_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(gym_last_error_message()) }.to_string_lossy().into_owned()
}

fn sql_manifest() -> CString {
    let path = gym_core::suites::bundled_manifests()
        .into_iter()
        .find(|p| p.to_string_lossy().contains("sql"))
        .expect("bundled sql suite");
    CString::new(path.to_str().unwrap()).unwrap()
}

#[test]
fn probability_and_null_out() {
    let mut r = 0.0;
    assert_eq!(unsafe { gym_verifier_probability(2.0, 2.0, &mut r) }, GymStatus::Ok);
    assert_eq!(r, 0.5);
    assert_eq!(last_error(), "");
    assert_eq!(unsafe { gym_verifier_probability(3f64.ln(), 0.0, &mut r) }, GymStatus::Ok);
    assert!((r - 0.75).abs() < 1e-12);
    assert_eq!(unsafe { gym_verifier_probability(1.0, 0.0, ptr::null_mut()) }, GymStatus::NullPointer);
    assert!(last_error().contains("out"));
    assert_eq!(unsafe { gym_verifier_probability(f64::NAN, 0.0, &mut r) }, GymStatus::InvalidArgument);
}

#[test]
fn strings_cross_the_boundary() {
    let mut n = 0usize;
    let s = CString::new("select count(*) from orders").unwrap();
    assert_eq!(unsafe { gym_estimate_tokens(s.as_ptr(), &mut n) }, GymStatus::Ok);
    assert_eq!(n, gym_core::model::estimate_tokens("select count(*) from orders"));
    assert_eq!(unsafe { gym_estimate_tokens(ptr::null(), &mut n) }, GymStatus::NullPointer);

    let bad = [0xffu8, 0xfe, 0];
    assert_eq!(unsafe { gym_estimate_tokens(bad.as_ptr().cast(), &mut n) }, GymStatus::InvalidUtf8);

    let mut ok = false;
    let a = CString::new(" Paris ").unwrap();
    let g = CString::new("paris").unwrap();
    assert_eq!(unsafe { gym_verify_exact(a.as_ptr(), g.as_ptr(), true, &mut ok) }, GymStatus::Ok);
    assert!(ok);
    assert_eq!(unsafe { gym_verify_exact(a.as_ptr(), g.as_ptr(), false, &mut ok) }, GymStatus::Ok);
    assert!(!ok);
}

#[test]
fn metrics_over_flat_arrays() {
    // 2 tasks x 3 rollouts, row-major
    let succ = [0u8, 1, 0, 0, 0, 1];
    let scores = [0.9, 0.1, 0.2, 0.3, 0.2, 0.8];
    let mut v = 0.0;
    for (k, want) in [(1, 0.0), (2, 0.5), (3, 1.0)] {
        assert_eq!(unsafe { gym_pass_at_k(succ.as_ptr(), 2, 3, k, &mut v) }, GymStatus::Ok);
        assert_eq!(v, want, "pass@{k}");
    }
    for (k, want) in [(1, 0.0), (2, 0.0), (3, 0.5)] {
        assert_eq!(unsafe { gym_best_at_k(succ.as_ptr(), scores.as_ptr(), 2, 3, k, &mut v) }, GymStatus::Ok);
        assert_eq!(v, want, "best@{k}");
    }
    assert_eq!(unsafe { gym_pass_at_k(succ.as_ptr(), 2, 3, 4, &mut v) }, GymStatus::InvalidArgument);
    assert!(!last_error().is_empty());
    assert_eq!(unsafe { gym_pass_at_k(succ.as_ptr(), 0, 3, 1, &mut v) }, GymStatus::InvalidArgument);
    assert_eq!(unsafe { gym_best_at_k(succ.as_ptr(), ptr::null(), 2, 3, 1, &mut v) }, GymStatus::NullPointer);
}

#[test]
fn suite_handle_lifecycle() {
    let path = sql_manifest();
    let mut suite: *mut GymSuite = ptr::null_mut();
    assert_eq!(unsafe { gym_suite_load(path.as_ptr(), &mut suite) }, GymStatus::Ok);
    assert!(!suite.is_null());

    let mut n = 0usize;
    assert_eq!(unsafe { gym_suite_task_count(suite, &mut n) }, GymStatus::Ok);
    assert!(n > 0);
    let id = unsafe { CStr::from_ptr(gym_suite_id(suite)) }.to_str().unwrap().to_string();
    assert!(!id.is_empty());

    let root = tempfile::tempdir().unwrap();
    let root_c = CString::new(root.path().to_str().unwrap()).unwrap();
    let mut sr = -1.0;
    let gold = CString::new("gold").unwrap();
    assert_eq!(unsafe { gym_suite_eval(suite, gold.as_ptr(), 0, root_c.as_ptr(), &mut sr) }, GymStatus::Ok);
    assert_eq!(sr, 1.0);
    let silent = CString::new("silent").unwrap();
    assert_eq!(unsafe { gym_suite_eval(suite, silent.as_ptr(), 2, root_c.as_ptr(), &mut sr) }, GymStatus::Ok);
    assert_eq!(sr, 0.0);
    let nope = CString::new("nope").unwrap();
    assert_eq!(unsafe { gym_suite_eval(suite, nope.as_ptr(), 0, root_c.as_ptr(), &mut sr) }, GymStatus::InvalidArgument);
    assert!(last_error().contains("nope"));

    unsafe { gym_suite_free(suite) };
    unsafe { gym_suite_free(ptr::null_mut()) };
    assert!(unsafe { gym_suite_id(ptr::null()) }.is_null());
    assert_eq!(unsafe { gym_suite_task_count(ptr::null(), &mut n) }, GymStatus::NullPointer);
}

#[test]
fn missing_manifest_is_not_found() {
    let p = CString::new("/nonexistent/manifest.json").unwrap();
    let mut suite: *mut GymSuite = ptr::null_mut();
    assert_eq!(unsafe { gym_suite_load(p.as_ptr(), &mut suite) }, GymStatus::NotFound);
    assert!(suite.is_null());
    assert!(last_error().contains("/nonexistent"));
}

#[test]
fn header_declares_the_api() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/gym.h");
    let text = std::fs::read_to_string(&header).expect("header generated by build script");
    for sym in [
        "GYM_STATUS_OK",
        "GYM_STATUS_PANIC",
        "typedef struct GymSuite GymSuite",
        "gym_last_error_message",
        "gym_verifier_probability",
        "gym_estimate_tokens",
        "gym_verify_exact",
        "gym_pass_at_k",
        "gym_best_at_k",
        "gym_suite_load",
        "gym_suite_free",
        "gym_suite_id",
        "gym_suite_task_count",
        "gym_suite_eval",
    ] {
        assert!(text.contains(sym), "header lacks {sym}");
    }
    if Command::new("cc").arg("--version").output().is_ok() {
        let out = Command::new("cc").args(["-fsyntax-only", "-x", "c"]).arg(&header).output().unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
}
