//! C ABI over the multirater library.
//!
//! Every function returns an [`MrStatus`]. On failure the message for the
//! calling thread is available from [`mr_last_error_message`]. Models are
//! opaque handles created by [`mr_model_load`] and released with
//! [`mr_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use multirater::data::{self, GenConfig};
use multirater::metrics::{self, ProbabilityMap, SampleSet};
use multirater::{checkpoint, training, Error, Grid, Mask, Model};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    Io = 4,
    Parse = 5,
    EmptySet = 6,
    Internal = 7,
}

/// Opaque model handle.
pub struct MrModel {
    inner: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(err: &Error) -> MrStatus {
    match err {
        Error::Shape(_) => MrStatus::ShapeMismatch,
        Error::EmptySet(_) => MrStatus::EmptySet,
        Error::Io { .. } => MrStatus::Io,
        Error::Parse { .. } | Error::Checkpoint(_) => MrStatus::Parse,
        Error::NonFiniteLoss { .. } | Error::Generation(_) => MrStatus::Internal,
        _ => MrStatus::InvalidArgument,
    }
}

struct Fail(MrStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn fail<T>(status: MrStatus, msg: impl Into<String>) -> Result<T, Fail> {
    Err(Fail(status, msg.into()))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            MrStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside multirater");
            MrStatus::Internal
        }
    }
}

fn non_null<T>(p: *const T, name: &str) -> Result<(), Fail> {
    if p.is_null() {
        return fail(MrStatus::NullPointer, format!("`{name}` is null"));
    }
    Ok(())
}

fn area(height: usize, width: usize) -> Result<usize, Fail> {
    match height.checked_mul(width) {
        Some(n) if n > 0 => Ok(n),
        _ => fail(MrStatus::InvalidArgument, format!("invalid size {height}x{width}")),
    }
}

unsafe fn c_str<'a>(p: *const c_char, name: &str) -> Result<&'a str, Fail> {
    non_null(p, name)?;
    CStr::from_ptr(p)
        .to_str()
        .or_else(|_| fail(MrStatus::InvalidArgument, format!("`{name}` is not valid UTF-8")))
}

unsafe fn read_masks(p: *const u8, count: usize, height: usize, width: usize, name: &str) -> Result<SampleSet, Fail> {
    non_null(p, name)?;
    let n = area(height, width)?;
    let total = n
        .checked_mul(count)
        .ok_or_else(|| Fail(MrStatus::InvalidArgument, format!("`{name}` is too large")))?;
    let flat = std::slice::from_raw_parts(p, total);
    let masks = flat
        .chunks(n)
        .map(|c| Mask::from_vec(height, width, c.to_vec()))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SampleSet::new(masks)?)
}

unsafe fn read_map(p: *const f64, height: usize, width: usize, name: &str) -> Result<ProbabilityMap, Fail> {
    non_null(p, name)?;
    let n = area(height, width)?;
    let data = std::slice::from_raw_parts(p, n).to_vec();
    Ok(ProbabilityMap::new(Grid::from_vec(height, width, data)?)?)
}

unsafe fn write_out(out: *mut f64, value: f64) -> Result<(), Fail> {
    non_null(out, "out")?;
    *out = value;
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn mr_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Loads a checkpoint file into a new handle written to `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn mr_model_load(path: *const c_char, out: *mut *mut MrModel) -> MrStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let path = c_str(path, "path")?;
        let inner = checkpoint::load(Path::new(path))?;
        *out = Box::into_raw(Box::new(MrModel { inner }));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must come from [`mr_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mr_model_free(model: *mut MrModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of decoder branches (one per rater).
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mr_model_num_branches(model: *const MrModel, out: *mut usize) -> MrStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(out, "out")?;
        *out = (*model).inner.decoder_count();
        Ok(())
    })
}

/// Runs Monte Carlo prediction on one `height * width` image.
///
/// `fused_out` receives the fused probability map (`height * width` floats).
/// `samples_out` receives the thresholded per-draw masks, branch-major, and
/// must hold `capacity` bytes. The number of masks is written to
/// `*written`; deterministic models produce one mask per branch. When
/// `samples_out` is null only the count is reported.
///
/// # Safety
/// Buffers must be valid for the sizes described above.
#[no_mangle]
pub unsafe extern "C" fn mr_model_predict(
    model: *const MrModel,
    image: *const f32,
    height: usize,
    width: usize,
    n_mc: usize,
    seed: u64,
    fused_out: *mut f32,
    samples_out: *mut u8,
    capacity: usize,
    written: *mut usize,
) -> MrStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(image, "image")?;
        non_null(fused_out, "fused_out")?;
        non_null(written, "written")?;
        if n_mc == 0 {
            return fail(MrStatus::InvalidArgument, "n_mc must be at least 1");
        }
        let n = area(height, width)?;
        let img = Grid::from_vec(height, width, std::slice::from_raw_parts(image, n).to_vec())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pred = training::mc_predict(&(*model).inner, &img, n_mc, &mut rng)?;
        *written = pred.mc_samples.len();
        std::slice::from_raw_parts_mut(fused_out, n).copy_from_slice(&pred.fused.data);
        if samples_out.is_null() {
            return Ok(());
        }
        let need = n * pred.mc_samples.len();
        if capacity < need {
            return fail(MrStatus::InvalidArgument, format!("samples_out holds {capacity} bytes, need {need}"));
        }
        let out = std::slice::from_raw_parts_mut(samples_out, need);
        for (dst, m) in out.chunks_mut(n).zip(&pred.mc_samples) {
            dst.copy_from_slice(&m.data);
        }
        Ok(())
    })
}

/// Per-pixel fraction of `count` masks marking foreground.
///
/// # Safety
/// `masks` holds `count * height * width` bytes in {0, 1}; `out` holds
/// `height * width` doubles.
#[no_mangle]
pub unsafe extern "C" fn mr_probability_map(
    masks: *const u8,
    count: usize,
    height: usize,
    width: usize,
    out: *mut f64,
) -> MrStatus {
    guard(|| {
        let set = read_masks(masks, count, height, width, "masks")?;
        non_null(out, "out")?;
        let map = metrics::probability_map(&set);
        std::slice::from_raw_parts_mut(out, map.values.data.len()).copy_from_slice(&map.values.data);
        Ok(())
    })
}

/// Q-score between two probability maps. `levels == 0` is rejected.
///
/// # Safety
/// `pred` and `gt` hold `height * width` doubles in [0, 1].
#[no_mangle]
pub unsafe extern "C" fn mr_q_score(
    pred: *const f64,
    gt: *const f64,
    height: usize,
    width: usize,
    levels: usize,
    out: *mut f64,
) -> MrStatus {
    guard(|| {
        if levels == 0 {
            return fail(MrStatus::InvalidArgument, "levels must be at least 1");
        }
        let p = read_map(pred, height, width, "pred")?;
        let g = read_map(gt, height, width, "gt")?;
        write_out(out, metrics::q_score(&p, &g, levels)?)
    })
}

/// Generalized energy distance between two mask sets.
///
/// # Safety
/// `pred` holds `n_pred` masks and `gt` holds `n_gt` masks of
/// `height * width` bytes each.
#[no_mangle]
pub unsafe extern "C" fn mr_ged(
    pred: *const u8,
    n_pred: usize,
    gt: *const u8,
    n_gt: usize,
    height: usize,
    width: usize,
    out: *mut f64,
) -> MrStatus {
    guard(|| {
        let p = read_masks(pred, n_pred, height, width, "pred")?;
        let g = read_masks(gt, n_gt, height, width, "gt")?;
        write_out(out, metrics::ged(&p, &g)?)
    })
}

/// Mean pairwise distance within one mask set.
///
/// # Safety
/// `masks` holds `count` masks of `height * width` bytes each.
#[no_mangle]
pub unsafe extern "C" fn mr_diversity(
    masks: *const u8,
    count: usize,
    height: usize,
    width: usize,
    out: *mut f64,
) -> MrStatus {
    guard(|| {
        let set = read_masks(masks, count, height, width, "masks")?;
        write_out(out, metrics::diversity(&set))
    })
}

/// Best-match similarity of predicted masks to rater masks.
///
/// # Safety
/// As for [`mr_ged`].
#[no_mangle]
pub unsafe extern "C" fn mr_similarity(
    pred: *const u8,
    n_pred: usize,
    gt: *const u8,
    n_gt: usize,
    height: usize,
    width: usize,
    out: *mut f64,
) -> MrStatus {
    guard(|| {
        let p = read_masks(pred, n_pred, height, width, "pred")?;
        let g = read_masks(gt, n_gt, height, width, "gt")?;
        write_out(out, metrics::similarity(&p, &g)?)
    })
}

/// `1 - IoU` of two masks.
///
/// # Safety
/// `a` and `b` hold `height * width` bytes in {0, 1}.
#[no_mangle]
pub unsafe extern "C" fn mr_mask_distance(
    a: *const u8,
    b: *const u8,
    height: usize,
    width: usize,
    out: *mut f64,
) -> MrStatus {
    guard(|| {
        let a = read_masks(a, 1, height, width, "a")?;
        let b = read_masks(b, 1, height, width, "b")?;
        write_out(out, metrics::mask_distance(&a.masks()[0], &b.masks()[0])?)
    })
}

/// Writes a synthetic multi-rater dataset to `dir`. `config_json` is a JSON
/// object of generator settings; null or `"{}"` uses the defaults.
///
/// # Safety
/// Both strings, when non-null, must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn mr_generate_dataset(config_json: *const c_char, dir: *const c_char) -> MrStatus {
    guard(|| {
        let dir = c_str(dir, "dir")?;
        let cfg: GenConfig = if config_json.is_null() {
            GenConfig::default()
        } else {
            serde_json::from_str(c_str(config_json, "config_json")?)
                .or_else(|e| fail(MrStatus::Parse, format!("generator config: {e}")))?
        };
        data::generate_dataset(&cfg, Path::new(dir))?;
        Ok(())
    })
}
