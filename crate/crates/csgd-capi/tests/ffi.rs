//! Exercises the C entry points from Rust: status codes, last-error
//! messages, handle lifecycle, and agreement with the underlying library.

use std::collections::BTreeMap;
use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use csgd::checkpoint::{load_checkpoint, save_checkpoint};
use csgd::clustering::{assign_for_model, ClusterScheme};
use csgd::graph::toy_vgg;
use csgd::model::{build_model, Model};
use csgd::tensor::Tensor;
use csgd::trim::snap_clusters;
use csgd_capi::{
    csgd_last_error_message, csgd_model_free, csgd_model_info, csgd_model_load, csgd_model_predict,
    csgd_model_save, csgd_model_trim, csgd_verify_equivalence, csgd_version, CsgdModel,
    CsgdModelInfo, CsgdStatus,
};

const TRIM_CONFIG: &str = r#"
[model]
arch = "toy_vgg"
input = [1, 1, 2]
classes = 3
stages = [[4]]

[dataset]
kind = "blobs"

[csgd]
ratio = "1/2"
"#;

const EMPTY_INFO: CsgdModelInfo = CsgdModelInfo {
    input_h: 0,
    input_w: 0,
    input_c: 0,
    classes: 0,
    conv_layers: 0,
    flops: 0,
    params: 0,
};

fn last_error() -> String {
    unsafe { CStr::from_ptr(csgd_last_error_message()) }
        .to_str()
        .unwrap()
        .to_string()
}

fn tiny_model(seed: u64) -> Model {
    let spec = toy_vgg([1, 1, 2], 3, &[vec![4]]);
    build_model(&spec, seed).unwrap()
}

/// A model whose clustered filters are already identical, so a trim is
/// exactly lossless.
fn snapped_model(seed: u64) -> Model {
    let model = tiny_model(seed);
    let targets = BTreeMap::from([("s0c0".to_string(), 2)]);
    let assignment = assign_for_model(&model, ClusterScheme::KMeans, &targets, seed).unwrap();
    snap_clusters(&model, &assignment, f32::MAX).unwrap().0
}

fn save_to(dir: &Path, name: &str, model: &Model, seed: u64) -> CString {
    let path = dir.join(name);
    save_checkpoint(&path, model, seed, "ffi-test").unwrap();
    CString::new(path.to_str().unwrap()).unwrap()
}

fn load(path: &CString) -> *mut CsgdModel {
    let mut handle: *mut CsgdModel = ptr::null_mut();
    let status = unsafe { csgd_model_load(path.as_ptr(), &mut handle) };
    assert_eq!(status, CsgdStatus::Ok, "load failed: {}", last_error());
    assert!(!handle.is_null());
    handle
}

fn free(handle: *mut CsgdModel) {
    unsafe { csgd_model_free(handle) };
}

fn info_of(handle: *const CsgdModel) -> CsgdModelInfo {
    let mut info = EMPTY_INFO;
    assert_eq!(
        unsafe { csgd_model_info(handle, &mut info) },
        CsgdStatus::Ok
    );
    info
}

#[test]
fn version_is_a_static_string() {
    let version = unsafe { CStr::from_ptr(csgd_version()) }.to_str().unwrap();
    assert_eq!(version, env!("CARGO_PKG_VERSION"));
}

#[test]
fn null_arguments_are_rejected() {
    let mut handle: *mut CsgdModel = ptr::null_mut();
    assert_eq!(
        unsafe { csgd_model_load(ptr::null(), &mut handle) },
        CsgdStatus::NullArgument
    );
    let path = CString::new("x.ckpt").unwrap();
    assert_eq!(
        unsafe { csgd_model_load(path.as_ptr(), ptr::null_mut()) },
        CsgdStatus::NullArgument
    );
    assert_eq!(
        unsafe { csgd_model_info(ptr::null(), ptr::null_mut()) },
        CsgdStatus::NullArgument
    );
    assert!(!last_error().is_empty());
    // Freeing null must be a harmless no-op.
    free(ptr::null_mut());
}

#[test]
fn missing_checkpoint_reports_io_with_message() {
    let path = CString::new("/nonexistent/model.ckpt").unwrap();
    let mut handle: *mut CsgdModel = ptr::null_mut();
    assert_eq!(
        unsafe { csgd_model_load(path.as_ptr(), &mut handle) },
        CsgdStatus::Io
    );
    assert!(handle.is_null());
    assert!(!last_error().is_empty(), "no error message recorded");
}

#[test]
fn info_and_predict_match_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let model = tiny_model(11);
    let path = save_to(dir.path(), "m.ckpt", &model, 11);
    let handle = load(&path);

    let info = info_of(handle);
    let cost = model.spec.cost().unwrap();
    assert_eq!(
        (info.input_h, info.input_w, info.input_c, info.classes),
        (1, 1, 2, 3)
    );
    assert_eq!(info.conv_layers, 1);
    assert_eq!((info.flops, info.params), (cost.flops, cost.params));

    let pixels = [0.25f32, -0.5];
    let mut logits = [0.0f32; 3];
    assert_eq!(
        unsafe { csgd_model_predict(handle, pixels.as_ptr(), 2, logits.as_mut_ptr(), 3) },
        CsgdStatus::Ok
    );
    let input = Tensor::new([1, 1, 1, 2], pixels.to_vec()).unwrap();
    let expected = model.forward_eval(&input).unwrap();
    assert_eq!(&logits[..], expected.data());

    // Wrong buffer sizes are rejected before touching memory.
    assert_eq!(
        unsafe { csgd_model_predict(handle, pixels.as_ptr(), 3, logits.as_mut_ptr(), 3) },
        CsgdStatus::InvalidInput
    );
    assert!(last_error().contains("pixels"));
    assert_eq!(
        unsafe { csgd_model_predict(handle, pixels.as_ptr(), 2, logits.as_mut_ptr(), 2) },
        CsgdStatus::InvalidInput
    );

    free(handle);
}

#[test]
fn trim_preserves_logits_and_reduces_cost() {
    let dir = tempfile::tempdir().unwrap();
    let snapped = snapped_model(12);
    let path = save_to(dir.path(), "snapped.ckpt", &snapped, 12);
    let handle = load(&path);

    let config = CString::new(TRIM_CONFIG).unwrap();
    let mut trimmed: *mut CsgdModel = ptr::null_mut();
    let mut diff = -1.0f32;
    let status =
        unsafe { csgd_model_trim(handle, config.as_ptr(), 12, &mut trimmed, &mut diff) };
    assert_eq!(status, CsgdStatus::Ok, "trim failed: {}", last_error());
    assert!((0.0..=1e-4).contains(&diff), "diff {diff} out of range");

    let before = info_of(handle);
    let after = info_of(trimmed);
    assert!(after.flops < before.flops, "{} !< {}", after.flops, before.flops);
    assert!(after.params < before.params);

    // The trimmed handle saves and reloads as a normal checkpoint.
    let out_path = dir.path().join("trimmed.ckpt");
    let out_c = CString::new(out_path.to_str().unwrap()).unwrap();
    assert_eq!(
        unsafe { csgd_model_save(trimmed, out_c.as_ptr()) },
        CsgdStatus::Ok
    );
    let (_, meta) = load_checkpoint(&out_path).unwrap();
    assert_eq!(meta.producer, "trim");
    assert_eq!(meta.seed, 12);

    free(trimmed);
    free(handle);
}

#[test]
fn trim_rejects_unconverged_filters() {
    let dir = tempfile::tempdir().unwrap();
    // Freshly initialized filters are nowhere near identical, so the snap
    // gate must refuse to quietly change the model.
    let model = tiny_model(13);
    let path = save_to(dir.path(), "raw.ckpt", &model, 13);
    let handle = load(&path);

    let config = CString::new(TRIM_CONFIG).unwrap();
    let mut trimmed: *mut CsgdModel = ptr::null_mut();
    let status =
        unsafe { csgd_model_trim(handle, config.as_ptr(), 13, &mut trimmed, ptr::null_mut()) };
    assert_eq!(status, CsgdStatus::InvalidInput);
    assert!(trimmed.is_null());
    assert!(
        last_error().contains("snap tolerance"),
        "unexpected message: {}",
        last_error()
    );

    free(handle);
}

#[test]
fn trim_rejects_malformed_config() {
    let dir = tempfile::tempdir().unwrap();
    let snapped = snapped_model(14);
    let path = save_to(dir.path(), "snapped.ckpt", &snapped, 14);
    let handle = load(&path);

    let config = CString::new("not toml [").unwrap();
    let mut trimmed: *mut CsgdModel = ptr::null_mut();
    let status =
        unsafe { csgd_model_trim(handle, config.as_ptr(), 14, &mut trimmed, ptr::null_mut()) };
    assert_eq!(status, CsgdStatus::InvalidInput);
    assert!(!last_error().is_empty());

    free(handle);
}

#[test]
fn equivalence_check_gates_different_models() {
    let dir = tempfile::tempdir().unwrap();
    let a = load(&save_to(dir.path(), "a.ckpt", &tiny_model(1), 1));
    let b = load(&save_to(dir.path(), "b.ckpt", &tiny_model(2), 2));

    let mut diff = -1.0f32;
    assert_eq!(
        unsafe { csgd_verify_equivalence(a, a, 16, 0, &mut diff) },
        CsgdStatus::Ok
    );
    assert_eq!(diff, 0.0);

    assert_eq!(
        unsafe { csgd_verify_equivalence(a, b, 16, 0, &mut diff) },
        CsgdStatus::EquivalenceGate
    );
    assert!(diff > 1e-4, "independently trained models differ by {diff}");
    assert!(last_error().contains("equivalence gate"));

    free(a);
    free(b);
}
