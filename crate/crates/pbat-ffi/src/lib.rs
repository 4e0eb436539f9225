//! C bindings for model inference.
//!
//! Everything works on an opaque [`PbatModel`] handle obtained from
//! [`pbat_model_load`]. Fallible entry points return a [`PbatStatus`]; on
//! any non-OK status [`pbat_last_error`] yields a message for the calling
//! thread. Handles are immutable after load, so one model may be shared
//! across threads as long as `pbat_model_free` happens after all other
//! calls have finished.
//!
//! The C header is generated into `include/pbat.h` at build time.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use pbat_core::checkpoint;
use pbat_core::data::MultiBehaviorSequence;
use pbat_core::eval::{export_behavior_matrix, score_next};
use pbat_core::params::ModelParams;
use pbat_core::PbatError;

/// Status code returned by every fallible entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PbatStatus {
    /// Success.
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// An id, length, or value argument was out of range.
    InvalidArgument = 2,
    /// The checkpoint file could not be read.
    Io = 3,
    /// The checkpoint file was read but its contents are malformed.
    Format = 4,
    /// Unexpected internal failure; details via `pbat_last_error`.
    Internal = 5,
}

/// Opaque handle to a loaded model.
pub struct PbatModel {
    params: ModelParams,
}

/// Model dimensions, filled by [`pbat_model_dims`].
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct PbatDims {
    /// Item vocabulary size; valid item ids are `0..num_items`.
    pub num_items: u32,
    /// User count; valid user ids are `0..num_users`.
    pub num_users: u32,
    /// Behavior count; valid behavior ids are `0..num_behaviors`.
    pub num_behaviors: u32,
    /// Maximum history window the encoder reads.
    pub max_seq_len: u32,
    /// Embedding width (informational).
    pub embed_dim: u32,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let safe = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = safe);
}

fn status_of(err: &PbatError) -> PbatStatus {
    match err {
        PbatError::InvalidParameter { .. } => PbatStatus::InvalidArgument,
        PbatError::Io(_) => PbatStatus::Io,
        PbatError::Format(_) | PbatError::Parse { .. } | PbatError::ShapeMismatch { .. } => {
            PbatStatus::Format
        }
        _ => PbatStatus::Internal,
    }
}

fn fail(err: &PbatError) -> PbatStatus {
    set_error(&err.to_string());
    status_of(err)
}

/// Runs the body with a panic guard so unwinds never cross the C boundary.
fn guarded<F: FnOnce() -> PbatStatus>(f: F) -> PbatStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => {
            set_error("internal panic");
            PbatStatus::Internal
        }
    }
}

macro_rules! require_non_null {
    ($($p:expr),+ $(,)?) => {
        $(
            if $p.is_null() {
                set_error(concat!("null pointer argument `", stringify!($p), "`"));
                return PbatStatus::NullPointer;
            }
        )+
    };
}

/// Loads a model checkpoint written by `pbat train` and stores a fresh
/// handle in `*out`. Release with [`pbat_model_free`].
#[no_mangle]
pub extern "C" fn pbat_model_load(path: *const c_char, out: *mut *mut PbatModel) -> PbatStatus {
    guarded(|| {
        require_non_null!(path, out);
        let path = match unsafe { CStr::from_ptr(path) }.to_str() {
            Ok(s) => s,
            Err(_) => {
                set_error("checkpoint path is not valid UTF-8");
                return PbatStatus::InvalidArgument;
            }
        };
        match checkpoint::load(Path::new(path)) {
            Ok(params) => {
                unsafe { *out = Box::into_raw(Box::new(PbatModel { params })) };
                PbatStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Releases a handle returned by [`pbat_model_load`]. Null is a no-op.
#[no_mangle]
pub extern "C" fn pbat_model_free(model: *mut PbatModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Reports the loaded model's dimensions.
#[no_mangle]
pub extern "C" fn pbat_model_dims(model: *const PbatModel, out: *mut PbatDims) -> PbatStatus {
    guarded(|| {
        require_non_null!(model, out);
        let hp = &unsafe { &*model }.params.hp;
        unsafe {
            *out = PbatDims {
                num_items: hp.num_items,
                num_users: hp.num_users,
                num_behaviors: hp.num_behaviors,
                max_seq_len: hp.seq_len as u32,
                embed_dim: hp.embed_dim as u32,
            };
        }
        PbatStatus::Ok
    })
}

/// Scores candidate items for a user's next interaction.
///
/// `items` and `behaviors` hold the user's history oldest-first, both of
/// length `history_len`; only the most recent `max_seq_len − 1` events
/// influence the result. `next_behavior` is the behavior the prediction is
/// for. On success `out_scores` (length `n_candidates`) receives one score
/// per candidate, aligned with `candidates`; higher means a closer match.
#[no_mangle]
pub extern "C" fn pbat_score_next(
    model: *const PbatModel,
    user: u32,
    items: *const u32,
    behaviors: *const u32,
    history_len: usize,
    next_behavior: u32,
    candidates: *const u32,
    n_candidates: usize,
    out_scores: *mut f64,
) -> PbatStatus {
    guarded(|| {
        require_non_null!(model, items, behaviors, candidates, out_scores);
        let params = &unsafe { &*model }.params;
        let train = MultiBehaviorSequence {
            user,
            items: unsafe { std::slice::from_raw_parts(items, history_len) }.to_vec(),
            behaviors: unsafe { std::slice::from_raw_parts(behaviors, history_len) }.to_vec(),
            valid_len: history_len,
        };
        let cand = unsafe { std::slice::from_raw_parts(candidates, n_candidates) };
        match score_next(params, &train, next_behavior, cand) {
            Ok(scores) => {
                unsafe {
                    std::ptr::copy_nonoverlapping(scores.as_ptr(), out_scores, scores.len())
                };
                PbatStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Writes the global behavior-relation strength matrix into `out`,
/// row-major `num_behaviors × num_behaviors`.
#[no_mangle]
pub extern "C" fn pbat_behavior_matrix(model: *const PbatModel, out: *mut f64) -> PbatStatus {
    behavior_matrix_impl(model, None, out)
}

/// Writes the behavior matrix personalized to `user`: relation strength
/// scaled by the distance between that user's behavior patterns, zero on
/// the diagonal. Same layout as [`pbat_behavior_matrix`].
#[no_mangle]
pub extern "C" fn pbat_behavior_matrix_user(
    model: *const PbatModel,
    user: u32,
    out: *mut f64,
) -> PbatStatus {
    behavior_matrix_impl(model, Some(user), out)
}

fn behavior_matrix_impl(
    model: *const PbatModel,
    user: Option<u32>,
    out: *mut f64,
) -> PbatStatus {
    guarded(|| {
        require_non_null!(model, out);
        let params = &unsafe { &*model }.params;
        match export_behavior_matrix(params, user) {
            Ok(rows) => {
                let nb = params.hp.num_behaviors as usize;
                for (i, row) in rows.iter().enumerate() {
                    unsafe {
                        std::ptr::copy_nonoverlapping(row.as_ptr(), out.add(i * nb), nb)
                    };
                }
                PbatStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Copies the calling thread's last error message into `buf` as a
/// NUL-terminated string, truncating to `cap − 1` bytes. Returns the full
/// message length in bytes (excluding the terminator); 0 means no error
/// has been recorded. `buf` may be null when `cap` is 0.
#[no_mangle]
pub extern "C" fn pbat_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap - 1);
            unsafe {
                std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf as *mut u8, n);
                *buf.add(n) = 0;
            }
        }
        bytes.len()
    })
}
