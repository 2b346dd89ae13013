//! C interface to the centripetal-SGD pruning library.
//!
//! Models are opaque handles created by [`csgd_model_load`] and released
//! with [`csgd_model_free`]. Every fallible call returns a [`CsgdStatus`];
//! on failure a human-readable message is kept per thread and can be read
//! with [`csgd_last_error_message`] until the next failing call on the
//! same thread.
//!
//! Pointer contract: `const char *` arguments must be NUL-terminated
//! UTF-8 and stay valid for the duration of the call only. Out-pointers
//! are written only when the call returns [`CsgdStatus::Ok`] (the
//! measured-difference out-pointer of the equivalence checks is also
//! written on a gate failure, so callers can report how far apart the
//! models were).

#![deny(unsafe_op_in_unsafe_fn)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;

use csgd::checkpoint::{load_checkpoint, save_checkpoint};
use csgd::clustering::assign_for_model;
use csgd::config::parse_config_str;
use csgd::model::Model;
use csgd::pipelines::{EQUIV_TOLERANCE, VERIFY_SAMPLES};
use csgd::tensor::Tensor;
use csgd::trim::{snap_clusters, trim_network, verify_equivalence};

/// Opaque handle to a loaded model.
pub struct CsgdModel {
    model: Model,
    seed: u64,
    producer: String,
}

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CsgdStatus {
    /// The call succeeded.
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// An argument, configuration, or model structure was rejected.
    InvalidInput = 2,
    /// A file could not be read, written, or decoded.
    Io = 3,
    /// A trimmed model changed the network function beyond the lossless
    /// tolerance, or two checkpoints were not equivalent.
    EquivalenceGate = 4,
    /// An unexpected internal failure.
    Internal = 5,
}

/// Shape and cost summary of a model.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CsgdModelInfo {
    /// Input height, width, and channel count.
    pub input_h: usize,
    pub input_w: usize,
    pub input_c: usize,
    /// Number of output classes.
    pub classes: usize,
    /// Number of convolution layers.
    pub conv_layers: usize,
    /// Multiply-accumulate count of one forward pass.
    pub flops: u64,
    /// Parameter count.
    pub params: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(message: impl std::fmt::Display) {
    let text = message.to_string().replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(text).unwrap_or_default();
    });
}

fn fail(status: CsgdStatus, message: impl std::fmt::Display) -> CsgdStatus {
    set_last_error(message);
    status
}

fn status_of(error: &csgd::Error) -> CsgdStatus {
    use csgd::Error::*;
    match error {
        Io(_) | Json(_) | Checkpoint(_) | Dataset(_) => CsgdStatus::Io,
        EquivalenceGate { .. } => CsgdStatus::EquivalenceGate,
        ShapeMismatch { .. } | InvalidArgument(_) | InvalidSpec(_) | InvalidConfig(_)
        | ConstraintViolation(_) => CsgdStatus::InvalidInput,
        NotOnTape(_) | NonFinite(_) => CsgdStatus::Internal,
    }
}

fn report(error: csgd::Error) -> CsgdStatus {
    fail(status_of(&error), error)
}

/// Runs a body, converting panics into [`CsgdStatus::Internal`] instead of
/// unwinding across the C boundary.
fn catching(body: impl FnOnce() -> CsgdStatus) -> CsgdStatus {
    match panic::catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(payload) => {
            let text = if let Some(s) = payload.downcast_ref::<&str>() {
                (*s).to_string()
            } else if let Some(s) = payload.downcast_ref::<String>() {
                s.clone()
            } else {
                "unknown panic".to_string()
            };
            fail(CsgdStatus::Internal, format!("internal panic: {text}"))
        }
    }
}

/// Borrows a NUL-terminated UTF-8 string argument.
///
/// # Safety
/// `ptr` must be null or point to a NUL-terminated string.
unsafe fn text_arg<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, CsgdStatus> {
    if ptr.is_null() {
        return Err(fail(CsgdStatus::NullArgument, format!("{what} is null")));
    }
    unsafe { CStr::from_ptr(ptr) }
        .to_str()
        .map_err(|_| fail(CsgdStatus::InvalidInput, format!("{what} is not valid UTF-8")))
}

unsafe fn model_arg<'a>(ptr: *const CsgdModel, what: &str) -> Result<&'a CsgdModel, CsgdStatus> {
    unsafe { ptr.as_ref() }
        .ok_or_else(|| fail(CsgdStatus::NullArgument, format!("{what} is null")))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn csgd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message describing the last failure on the calling thread, or an empty
/// string if none occurred. The pointer stays valid until the next failing
/// call on this thread.
#[no_mangle]
pub extern "C" fn csgd_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Loads a checkpoint from `path` into a new handle written to `out`.
/// The caller owns the handle and must release it with `csgd_model_free`.
///
/// # Safety
/// `path` must be null or a NUL-terminated string; `out` must be null or
/// writable.
#[no_mangle]
pub unsafe extern "C" fn csgd_model_load(
    path: *const c_char,
    out: *mut *mut CsgdModel,
) -> CsgdStatus {
    catching(|| {
        if out.is_null() {
            return fail(CsgdStatus::NullArgument, "out is null");
        }
        let path = match unsafe { text_arg(path, "path") } {
            Ok(p) => p,
            Err(status) => return status,
        };
        match load_checkpoint(Path::new(path)) {
            Ok((model, meta)) => {
                let handle = Box::new(CsgdModel {
                    model,
                    seed: meta.seed,
                    producer: meta.producer,
                });
                unsafe { out.write(Box::into_raw(handle)) };
                CsgdStatus::Ok
            }
            Err(e) => report(e),
        }
    })
}

/// Saves the model to `path` as a checkpoint, preserving the seed and
/// producer recorded when the handle was created.
///
/// # Safety
/// `model` must be null or a live handle from this library; `path` must be
/// null or a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn csgd_model_save(
    model: *const CsgdModel,
    path: *const c_char,
) -> CsgdStatus {
    catching(|| {
        let handle = match unsafe { model_arg(model, "model") } {
            Ok(h) => h,
            Err(status) => return status,
        };
        let path = match unsafe { text_arg(path, "path") } {
            Ok(p) => p,
            Err(status) => return status,
        };
        match save_checkpoint(Path::new(path), &handle.model, handle.seed, &handle.producer) {
            Ok(()) => CsgdStatus::Ok,
            Err(e) => report(e),
        }
    })
}

/// Releases a handle. Passing null is a no-op.
///
/// # Safety
/// `model` must be null or a live handle from this library, and must not
/// be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn csgd_model_free(model: *mut CsgdModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Writes the model's input shape, class count, and cost into `out`.
///
/// # Safety
/// `model` must be null or a live handle from this library; `out` must be
/// null or writable.
#[no_mangle]
pub unsafe extern "C" fn csgd_model_info(
    model: *const CsgdModel,
    out: *mut CsgdModelInfo,
) -> CsgdStatus {
    catching(|| {
        let handle = match unsafe { model_arg(model, "model") } {
            Ok(h) => h,
            Err(status) => return status,
        };
        if out.is_null() {
            return fail(CsgdStatus::NullArgument, "out is null");
        }
        let spec = &handle.model.spec;
        let cost = match spec.cost() {
            Ok(c) => c,
            Err(e) => return report(e),
        };
        let [h, w, c] = spec.input;
        let info = CsgdModelInfo {
            input_h: h,
            input_w: w,
            input_c: c,
            classes: spec.classes,
            conv_layers: spec.conv_widths().len(),
            flops: cost.flops,
            params: cost.params,
        };
        unsafe { out.write(info) };
        CsgdStatus::Ok
    })
}

/// Runs one image through the network. `pixels` must hold exactly
/// `input_h × input_w × input_c` values in row-major HWC order, and
/// `logits` must have room for `classes` values.
///
/// # Safety
/// `model` must be null or a live handle from this library; `pixels` and
/// `logits` must be null or valid for `pixel_count` reads and
/// `logit_count` writes respectively.
#[no_mangle]
pub unsafe extern "C" fn csgd_model_predict(
    model: *const CsgdModel,
    pixels: *const f32,
    pixel_count: usize,
    logits: *mut f32,
    logit_count: usize,
) -> CsgdStatus {
    catching(|| {
        let handle = match unsafe { model_arg(model, "model") } {
            Ok(h) => h,
            Err(status) => return status,
        };
        if pixels.is_null() || logits.is_null() {
            return fail(CsgdStatus::NullArgument, "pixels or logits is null");
        }
        let [h, w, c] = handle.model.spec.input;
        if pixel_count != h * w * c {
            return fail(
                CsgdStatus::InvalidInput,
                format!("expected {} pixels ({h}×{w}×{c}), got {pixel_count}", h * w * c),
            );
        }
        let classes = handle.model.spec.classes;
        if logit_count != classes {
            return fail(
                CsgdStatus::InvalidInput,
                format!("expected room for {classes} logits, got {logit_count}"),
            );
        }
        let data = unsafe { std::slice::from_raw_parts(pixels, pixel_count) }.to_vec();
        let input = match Tensor::new([1, h, w, c], data) {
            Ok(t) => t,
            Err(e) => return report(e),
        };
        match handle.model.forward_eval(&input) {
            Ok(output) => {
                let row = &output.data()[..classes];
                unsafe { std::ptr::copy_nonoverlapping(row.as_ptr(), logits, classes) };
                CsgdStatus::Ok
            }
            Err(e) => report(e),
        }
    })
}

/// Clusters, snaps, and trims the model, writing a new handle to `out`.
///
/// `config_toml` is an experiment configuration document; its `[csgd]`
/// section supplies the cluster scheme, remaining-filter ratio or explicit
/// targets, exclusions, and the snap tolerance. The model must already
/// have near-identical filters within each cluster (train it with the
/// centripetal optimizer first): if any cluster deviates beyond the snap
/// tolerance the call fails with `InvalidInput`, and if the trimmed model
/// changes any logit by more than the lossless tolerance it fails with
/// `EquivalenceGate`. On success (and on a gate failure) the largest
/// observed logit difference is written to `max_logit_diff` when that
/// pointer is non-null.
///
/// # Safety
/// `model` must be null or a live handle from this library; `config_toml`
/// must be null or a NUL-terminated string; `out` must be null or
/// writable; `max_logit_diff` may be null or must be writable.
#[no_mangle]
pub unsafe extern "C" fn csgd_model_trim(
    model: *const CsgdModel,
    config_toml: *const c_char,
    seed: u64,
    out: *mut *mut CsgdModel,
    max_logit_diff: *mut f32,
) -> CsgdStatus {
    catching(|| {
        let handle = match unsafe { model_arg(model, "model") } {
            Ok(h) => h,
            Err(status) => return status,
        };
        let config = match unsafe { text_arg(config_toml, "config_toml") } {
            Ok(c) => c,
            Err(status) => return status,
        };
        if out.is_null() {
            return fail(CsgdStatus::NullArgument, "out is null");
        }

        let cfg = match parse_config_str(config) {
            Ok(cfg) => cfg,
            Err(e) => return report(e),
        };
        let result = (|| -> csgd::Result<(Model, f32)> {
            let targets = cfg.resolve_targets(&handle.model.spec)?;
            let assignment = assign_for_model(&handle.model, cfg.csgd.scheme, &targets, seed)?;
            let (snapped, deviation) =
                snap_clusters(&handle.model, &assignment, cfg.csgd.snap_tolerance)?;
            if deviation > cfg.csgd.snap_tolerance {
                return Err(csgd::Error::InvalidArgument(format!(
                    "clustered filters deviate by {deviation:e}, beyond the snap tolerance \
                     {:e}; run centripetal training first",
                    cfg.csgd.snap_tolerance
                )));
            }
            let trimmed = trim_network(&snapped, &assignment)?;
            let diff = verify_equivalence(&snapped, &trimmed, VERIFY_SAMPLES, seed)?;
            Ok((trimmed, diff))
        })();

        match result {
            Ok((trimmed, diff)) => {
                if !max_logit_diff.is_null() {
                    unsafe { max_logit_diff.write(diff) };
                }
                if diff > EQUIV_TOLERANCE {
                    return report(csgd::Error::EquivalenceGate {
                        max_diff: diff,
                        tolerance: EQUIV_TOLERANCE,
                    });
                }
                let new_handle = Box::new(CsgdModel {
                    model: trimmed,
                    seed,
                    producer: "trim".to_string(),
                });
                unsafe { out.write(Box::into_raw(new_handle)) };
                CsgdStatus::Ok
            }
            Err(e) => report(e),
        }
    })
}

/// Measures the largest absolute logit difference between two models on
/// `samples` random inputs (0 means the default sample count) and writes
/// it to `max_logit_diff`. Returns `EquivalenceGate` when the difference
/// exceeds the lossless tolerance; the measured value is still written.
///
/// # Safety
/// `first` and `second` must be null or live handles from this library;
/// `max_logit_diff` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn csgd_verify_equivalence(
    first: *const CsgdModel,
    second: *const CsgdModel,
    samples: usize,
    seed: u64,
    max_logit_diff: *mut f32,
) -> CsgdStatus {
    catching(|| {
        let a = match unsafe { model_arg(first, "first") } {
            Ok(h) => h,
            Err(status) => return status,
        };
        let b = match unsafe { model_arg(second, "second") } {
            Ok(h) => h,
            Err(status) => return status,
        };
        if max_logit_diff.is_null() {
            return fail(CsgdStatus::NullArgument, "max_logit_diff is null");
        }
        let n = if samples == 0 { VERIFY_SAMPLES } else { samples };
        match verify_equivalence(&a.model, &b.model, n, seed) {
            Ok(diff) => {
                unsafe { max_logit_diff.write(diff) };
                if diff > EQUIV_TOLERANCE {
                    report(csgd::Error::EquivalenceGate {
                        max_diff: diff,
                        tolerance: EQUIV_TOLERANCE,
                    })
                } else {
                    CsgdStatus::Ok
                }
            }
            Err(e) => report(e),
        }
    })
}
