use std::ffi::{CStr, CString};
use std::ptr;

use multirater::network::{Model, NetworkConfig, Variant};
use multirater::{checkpoint, metrics};
use multirater_ffi::*;

fn last_error() -> String {
    let p = mr_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_string()
}

fn cstr(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn saved_model(dir: &std::path::Path, variant: Variant) -> CString {
    let cfg = NetworkConfig {
        depth: 2,
        base_channels: 4,
        num_branches: 3,
        ..Default::default()
    };
    let path = dir.join("model.ckpt");
    checkpoint::save(&Model::build(variant, &cfg, 1).unwrap(), &path).unwrap();
    cstr(path.to_str().unwrap())
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(mr_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn load_predict_free() {
    let dir = tempfile::tempdir().unwrap();
    let path = saved_model(dir.path(), Variant::Omba);
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { mr_model_load(path.as_ptr(), &mut model) }, MrStatus::Ok);
    let mut branches = 0;
    assert_eq!(unsafe { mr_model_num_branches(model, &mut branches) }, MrStatus::Ok);
    assert_eq!(branches, 3);

    let image: Vec<f32> = (0..256).map(|i| (i % 7) as f32 / 7.0 - 0.5).collect();
    let mut fused = vec![0f32; 256];
    let mut written = 0;
    let st = unsafe {
        mr_model_predict(model, image.as_ptr(), 16, 16, 4, 9, fused.as_mut_ptr(), ptr::null_mut(), 0, &mut written)
    };
    assert_eq!(st, MrStatus::Ok);
    assert_eq!(written, 12);

    let mut samples = vec![0u8; 256 * 11];
    let st = unsafe {
        mr_model_predict(model, image.as_ptr(), 16, 16, 4, 9, fused.as_mut_ptr(), samples.as_mut_ptr(), samples.len(), &mut written)
    };
    assert_eq!(st, MrStatus::InvalidArgument);
    assert!(last_error().contains("need 3072"));

    samples.resize(256 * 12, 0);
    let mut again = vec![0f32; 256];
    let st = unsafe {
        mr_model_predict(model, image.as_ptr(), 16, 16, 4, 9, again.as_mut_ptr(), samples.as_mut_ptr(), samples.len(), &mut written)
    };
    assert_eq!(st, MrStatus::Ok);
    assert_eq!(fused, again);
    assert!(samples.iter().all(|&v| v <= 1));
    assert!(fused.iter().all(|&p| (0.0..=1.0).contains(&p)));

    let st = unsafe {
        mr_model_predict(model, image.as_ptr(), 15, 16, 4, 9, fused.as_mut_ptr(), ptr::null_mut(), 0, &mut written)
    };
    assert_eq!(st, MrStatus::ShapeMismatch);
    unsafe { mr_model_free(model) };
    unsafe { mr_model_free(ptr::null_mut()) };
}

#[test]
fn load_errors_map_to_codes() {
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { mr_model_load(ptr::null(), &mut model) }, MrStatus::NullPointer);
    assert!(last_error().contains("path"));
    let missing = cstr("/nonexistent/model.ckpt");
    assert_eq!(unsafe { mr_model_load(missing.as_ptr(), &mut model) }, MrStatus::Io);
    assert!(model.is_null());
    assert!(last_error().contains("/nonexistent/model.ckpt"));

    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let junk = cstr(junk.to_str().unwrap());
    assert_eq!(unsafe { mr_model_load(junk.as_ptr(), &mut model) }, MrStatus::Parse);
}

#[test]
fn metrics_match_the_library() {
    let a: Vec<u8> = vec![1, 1, 0, 0, 1, 0, 0, 0, 0];
    let b: Vec<u8> = vec![1, 0, 0, 0, 1, 1, 0, 0, 0];
    let both: Vec<u8> = a.iter().chain(&b).copied().collect();
    let set = |m: &[u8]| {
        metrics::SampleSet::new(m.chunks(9).map(|c| multirater::Grid::from_vec(3, 3, c.to_vec()).unwrap()).collect()).unwrap()
    };

    let mut d = 0.0;
    assert_eq!(unsafe { mr_mask_distance(a.as_ptr(), b.as_ptr(), 3, 3, &mut d) }, MrStatus::Ok);
    assert!((d - 0.5).abs() < 1e-12);

    let mut map = vec![0f64; 9];
    assert_eq!(unsafe { mr_probability_map(both.as_ptr(), 2, 3, 3, map.as_mut_ptr()) }, MrStatus::Ok);
    assert_eq!(map, vec![1.0, 0.5, 0.0, 0.0, 1.0, 0.5, 0.0, 0.0, 0.0]);

    let mut q = 0.0;
    assert_eq!(unsafe { mr_q_score(map.as_ptr(), map.as_ptr(), 3, 3, 3, &mut q) }, MrStatus::Ok);
    assert_eq!(q, 1.0);
    assert_eq!(unsafe { mr_q_score(map.as_ptr(), map.as_ptr(), 3, 3, 0, &mut q) }, MrStatus::InvalidArgument);

    let mut g = 0.0;
    assert_eq!(unsafe { mr_ged(both.as_ptr(), 2, a.as_ptr(), 1, 3, 3, &mut g) }, MrStatus::Ok);
    assert_eq!(g, metrics::ged(&set(&both), &set(&a)).unwrap());

    let mut div = 0.0;
    assert_eq!(unsafe { mr_diversity(both.as_ptr(), 2, 3, 3, &mut div) }, MrStatus::Ok);
    assert_eq!(div, metrics::diversity(&set(&both)));

    let mut s = 0.0;
    assert_eq!(unsafe { mr_similarity(a.as_ptr(), 1, both.as_ptr(), 2, 3, 3, &mut s) }, MrStatus::Ok);
    assert_eq!(s, metrics::similarity(&set(&a), &set(&both)).unwrap());
}

#[test]
fn metric_arguments_are_validated() {
    let bad = [2u8; 4];
    let mut out = 0.0;
    assert_eq!(unsafe { mr_diversity(bad.as_ptr(), 1, 2, 2, &mut out) }, MrStatus::InvalidArgument);
    assert_eq!(unsafe { mr_diversity(bad.as_ptr(), 0, 2, 2, &mut out) }, MrStatus::EmptySet);
    assert_eq!(unsafe { mr_diversity(ptr::null(), 1, 2, 2, &mut out) }, MrStatus::NullPointer);
    assert_eq!(unsafe { mr_diversity(bad.as_ptr(), 1, 0, 2, &mut out) }, MrStatus::InvalidArgument);
    let map = [1.5f64; 4];
    assert_eq!(unsafe { mr_q_score(map.as_ptr(), map.as_ptr(), 2, 2, 2, &mut out) }, MrStatus::InvalidArgument);
}

#[test]
fn generates_a_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let d = cstr(dir.path().to_str().unwrap());
    let cfg = cstr(r#"{"num_cases": 3, "image_size": 32, "seed": 4}"#);
    assert_eq!(unsafe { mr_generate_dataset(cfg.as_ptr(), d.as_ptr()) }, MrStatus::Ok);
    let ds = multirater::data::Dataset::load(&dir.path().join("manifest.json")).unwrap();
    assert_eq!(ds.len(), 3);
    let bad = cstr("{not json");
    assert_eq!(unsafe { mr_generate_dataset(bad.as_ptr(), d.as_ptr()) }, MrStatus::Parse);
}

#[test]
fn header_declares_every_entry_point() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/multirater.h")).unwrap();
    for name in [
        "mr_version",
        "mr_last_error_message",
        "mr_model_load",
        "mr_model_free",
        "mr_model_num_branches",
        "mr_model_predict",
        "mr_probability_map",
        "mr_q_score",
        "mr_ged",
        "mr_diversity",
        "mr_similarity",
        "mr_mask_distance",
        "mr_generate_dataset",
    ] {
        assert!(header.contains(&format!("{name}(")), "{name}");
    }
    assert!(header.contains("typedef struct MrModel MrModel;"));
    assert!(header.contains("MR_STATUS_SHAPE_MISMATCH = 3"));
}
