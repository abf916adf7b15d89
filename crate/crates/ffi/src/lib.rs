//! C ABI over gym-core.
//!
//! Every function returns a [`GymStatus`]; results come back through out
//! pointers. On failure, [`gym_last_error_message`] describes the error for
//! the calling thread. Handles are opaque and must be released with their
//! matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use gym_core::metrics::{best_at_k_rate, pass_at_k, success_rate, OutcomeMatrix};
use gym_core::model::{estimate_tokens, GroundTruth};
use gym_core::policy::PolicyConfig;
use gym_core::session::{run_episode, EpisodeOptions};
use gym_core::suites::{load_suite, verify_exact, Suite};
use gym_core::verifier::probability;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GymStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    NotFound = 4,
    Runtime = 5,
    Panic = 6,
}

/// A loaded suite.
pub struct GymSuite {
    suite: Suite,
    id: CString,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

type Fallible = Result<(), (GymStatus, String)>;

fn guard(f: impl FnOnce() -> Fallible) -> GymStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            GymStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            GymStatus::Panic
        }
    }
}

fn null(what: &str) -> (GymStatus, String) {
    (GymStatus::NullPointer, format!("{what} is null"))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, (GymStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| (GymStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn write<T>(out: *mut T, value: T, what: &str) -> Fallible {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

/// Message for the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn gym_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Verifier success probability from a YES/NO logit pair.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn gym_verifier_probability(l_yes: f64, l_no: f64, out: *mut f64) -> GymStatus {
    guard(|| {
        if l_yes.is_nan() || l_no.is_nan() {
            return Err((GymStatus::InvalidArgument, "logits must not be NaN".into()));
        }
        write(out, probability(l_yes, l_no), "out")
    })
}

/// Token estimate for a NUL-terminated UTF-8 string.
///
/// # Safety
/// `text_ptr` must be a NUL-terminated string; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn gym_estimate_tokens(text_ptr: *const c_char, out: *mut usize) -> GymStatus {
    guard(|| write(out, estimate_tokens(text(text_ptr, "text")?), "out"))
}

/// Exact-match check of an answer against a gold value.
///
/// # Safety
/// Both strings must be NUL-terminated; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn gym_verify_exact(
    answer: *const c_char,
    gold: *const c_char,
    case_insensitive: bool,
    out: *mut bool,
) -> GymStatus {
    guard(|| {
        let gt = GroundTruth::ValueExact { value: text(gold, "gold")?.to_string() };
        let v = verify_exact(text(answer, "answer")?, &gt, case_insensitive);
        write(out, v.success, "out")
    })
}

unsafe fn grid(successes: *const u8, scores: *const f64, n_tasks: usize, n_rollouts: usize) -> Result<OutcomeMatrix, (GymStatus, String)> {
    if successes.is_null() {
        return Err(null("successes"));
    }
    if n_tasks == 0 || n_rollouts == 0 {
        return Err((GymStatus::InvalidArgument, "matrix must have at least one task and one rollout".into()));
    }
    let len = n_tasks.checked_mul(n_rollouts).ok_or((GymStatus::InvalidArgument, "matrix too large".into()))?;
    let s = std::slice::from_raw_parts(successes, len);
    let r = if scores.is_null() { None } else { Some(std::slice::from_raw_parts(scores, len)) };
    let rows: Vec<Vec<(bool, f64)>> = (0..n_tasks)
        .map(|t| (0..n_rollouts).map(|i| (s[t * n_rollouts + i] != 0, r.map_or(0.0, |r| r[t * n_rollouts + i]))).collect())
        .collect();
    Ok(if r.is_some() {
        OutcomeMatrix::from_scored(&rows)
    } else {
        OutcomeMatrix::from_successes(&rows.iter().map(|row| row.iter().map(|c| c.0).collect()).collect::<Vec<_>>())
    })
}

/// Pass@K over a row-major `n_tasks` x `n_rollouts` matrix of 0/1 successes.
///
/// # Safety
/// `successes` must point to `n_tasks * n_rollouts` bytes; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn gym_pass_at_k(
    successes: *const u8,
    n_tasks: usize,
    n_rollouts: usize,
    k: usize,
    out: *mut f64,
) -> GymStatus {
    guard(|| {
        let m = grid(successes, ptr::null(), n_tasks, n_rollouts)?;
        let v = pass_at_k(&m, k).map_err(|e| (GymStatus::InvalidArgument, e.to_string()))?;
        write(out, v, "out")
    })
}

/// Best@K with verifier scores laid out like `successes`.
///
/// # Safety
/// `successes` and `scores` must each hold `n_tasks * n_rollouts` elements;
/// `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn gym_best_at_k(
    successes: *const u8,
    scores: *const f64,
    n_tasks: usize,
    n_rollouts: usize,
    k: usize,
    out: *mut f64,
) -> GymStatus {
    guard(|| {
        if scores.is_null() {
            return Err(null("scores"));
        }
        let m = grid(successes, scores, n_tasks, n_rollouts)?;
        let v = best_at_k_rate(&m, k).map_err(|e| (GymStatus::InvalidArgument, e.to_string()))?;
        write(out, v, "out")
    })
}

/// Loads a suite manifest into a new handle.
///
/// # Safety
/// `path` must be NUL-terminated; `out` valid for writes. Release the handle
/// with `gym_suite_free`.
#[no_mangle]
pub unsafe extern "C" fn gym_suite_load(path: *const c_char, out: *mut *mut GymSuite) -> GymStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = PathBuf::from(text(path, "path")?);
        if !path.is_file() {
            return Err((GymStatus::NotFound, format!("suite manifest not found: {}", path.display())));
        }
        let suite = load_suite(&path).map_err(|e| (GymStatus::InvalidArgument, e.to_string()))?;
        let id = CString::new(suite.id()).map_err(|_| (GymStatus::InvalidArgument, "suite id contains NUL".into()))?;
        out.write(Box::into_raw(Box::new(GymSuite { suite, id })));
        Ok(())
    })
}

/// # Safety
/// `suite` must come from `gym_suite_load` (or be null) and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn gym_suite_free(suite: *mut GymSuite) {
    if !suite.is_null() {
        drop(Box::from_raw(suite));
    }
}

/// Suite id, owned by the handle.
///
/// # Safety
/// `suite` must be a live handle; returns null when it is null.
#[no_mangle]
pub unsafe extern "C" fn gym_suite_id(suite: *const GymSuite) -> *const c_char {
    suite.as_ref().map_or(ptr::null(), |s| s.id.as_ptr())
}

/// # Safety
/// `suite` must be a live handle; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn gym_suite_task_count(suite: *const GymSuite, out: *mut usize) -> GymStatus {
    guard(|| {
        let s = suite.as_ref().ok_or_else(|| null("suite"))?;
        write(out, s.suite.tasks.len(), "out")
    })
}

/// Runs one greedy episode per task with a built-in policy (gold, looping,
/// crashing, silent, debug) and writes the success rate. `max_turns` of 0
/// keeps the default budget. `sandbox_root` may be null.
///
/// # Safety
/// `suite` must be a live handle; strings NUL-terminated; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn gym_suite_eval(
    suite: *const GymSuite,
    policy: *const c_char,
    max_turns: u32,
    sandbox_root: *const c_char,
    out: *mut f64,
) -> GymStatus {
    guard(|| {
        let s = &suite.as_ref().ok_or_else(|| null("suite"))?.suite;
        let name = text(policy, "policy")?;
        let policy = PolicyConfig::from_name(name)
            .ok_or_else(|| (GymStatus::InvalidArgument, format!("unknown policy {name:?}")))?
            .build(1)
            .map_err(|e| (GymStatus::InvalidArgument, e.to_string()))?;
        let mut opts = EpisodeOptions::default();
        if !sandbox_root.is_null() {
            opts.sandbox_root = PathBuf::from(text(sandbox_root, "sandbox_root")?);
        }
        opts.budget = s.descriptor.limits.apply(&opts.budget);
        if max_turns > 0 {
            opts.budget.max_turns = max_turns;
        }
        let mut results = Vec::with_capacity(s.tasks.len());
        for task in &s.tasks {
            let t = run_episode(policy.as_ref(), s, task, &opts).map_err(|e| (GymStatus::Runtime, e.to_string()))?;
            results.push(t.verdict.success);
        }
        let sr = success_rate(&results).map_err(|e| (GymStatus::InvalidArgument, e.to_string()))?;
        write(out, sr, "out")
    })
}
