//! C ABI over `eds_core`.
//!
//! Every fallible function returns an [`EdsStatus`]; on failure the message is
//! kept per thread and readable through `eds_last_error_message`. Objects are
//! opaque handles created by `*_new`/`*_load`/`*_fit` functions and released
//! with the matching `*_free`. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use eds_core::cluster::{kmeans_best_of, ClusterModel, KMeansParams};
use eds_core::embed::{self, Embedding, EmbeddingSet};
use eds_core::manifest::{DatasetManifest, ScenarioAxis};
use eds_core::raster::{Mask, Raster};
use eds_core::sampler::{self, SampledSubset};
use eds_core::segmodel::{self, PixelFeatures, SegModel};
use eds_core::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Parse = 4,
    InvalidArgument = 5,
    /// Bad magic, unsupported version or truncated binary file.
    Format = 6,
    DimensionMismatch = 7,
    KOutOfRange = 8,
    PoolTooSmall = 9,
    UnknownId = 10,
    DuplicateId = 11,
    EmptyInput = 12,
    Panic = 13,
}

/// Scenario axis selector for `eds_manifest_kl`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdsAxis {
    Weather = 0,
    Time = 1,
    RoadType = 2,
}

pub struct EdsManifest(DatasetManifest);
pub struct EdsEmbeddings(EmbeddingSet);
pub struct EdsClusterModel(ClusterModel);
pub struct EdsSegModel(SegModel);
pub struct EdsSubset {
    ids: Vec<CString>,
    inner: SampledSubset,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> EdsStatus {
    match e {
        Error::Io { .. } | Error::Image { .. } => EdsStatus::Io,
        Error::Parse { .. } | Error::InvalidEnum { .. } | Error::InvalidRecord { .. } => EdsStatus::Parse,
        Error::MagicMismatch { .. } | Error::UnsupportedVersion(_) | Error::Truncated(_) => EdsStatus::Format,
        Error::DimensionMismatch { .. } | Error::ShapeMismatch(_) => EdsStatus::DimensionMismatch,
        Error::KOutOfRange { .. } => EdsStatus::KOutOfRange,
        Error::PoolTooSmall { .. } => EdsStatus::PoolTooSmall,
        Error::UnknownId(_) => EdsStatus::UnknownId,
        Error::DuplicateId(_) => EdsStatus::DuplicateId,
        Error::EmptyDataset | Error::EmptyCrop(_) => EdsStatus::EmptyInput,
        _ => EdsStatus::InvalidArgument,
    }
}

struct Failure(EdsStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), format!("{}: {e}", e.kind()))
    }
}

fn null(what: &str) -> Failure {
    Failure(EdsStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, records any error or panic and converts it to a status.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> EdsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            EdsStatus::Ok
        }
        Ok(Err(Failure(status, message))) => {
            set_last_error(message);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {msg}"));
            EdsStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    Ok(PathBuf::from(str_arg(p, "path")?))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(EdsStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn write_out<T>(out: *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    out.write(value);
    Ok(())
}

unsafe fn free_box<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn eds_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn eds_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads and validates a dataset manifest.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn eds_manifest_load(path: *const c_char, out: *mut *mut EdsManifest) -> EdsStatus {
    guard(|| {
        let m = DatasetManifest::load(&path_arg(path)?)?;
        write_out(out, Box::into_raw(Box::new(EdsManifest(m))))
    })
}

/// Number of records, or 0 for a null handle.
///
/// # Safety
/// `m` must be null or a live manifest handle.
#[no_mangle]
pub unsafe extern "C" fn eds_manifest_len(m: *const EdsManifest) -> usize {
    m.as_ref().map_or(0, |m| m.0.len())
}

/// KL divergence to uniform of the scenario density along `axis`, over the
/// subset's ids, or over the whole manifest when `subset` is null.
///
/// # Safety
/// `m` must be a live manifest handle, `subset` null or a live subset handle,
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn eds_manifest_kl(
    m: *const EdsManifest,
    subset: *const EdsSubset,
    axis: EdsAxis,
    out: *mut f64,
) -> EdsStatus {
    guard(|| {
        let m = &handle(m, "manifest")?.0;
        let ids: Vec<String> = match subset.as_ref() {
            Some(s) => s.inner.ids.clone(),
            None => m.records().iter().map(|r| r.id.clone()).collect(),
        };
        let axis = match axis {
            EdsAxis::Weather => ScenarioAxis::Weather,
            EdsAxis::Time => ScenarioAxis::Time,
            EdsAxis::RoadType => ScenarioAxis::RoadType,
        };
        let density = sampler::density_estimate(&ids, m, axis)?;
        write_out(out, sampler::kl_to_uniform(&density))
    })
}

/// # Safety
/// `m` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn eds_manifest_free(m: *mut EdsManifest) {
    free_box(m);
}

/// Builds an embedding set from `count` row-major vectors of `dim` floats and
/// `count` NUL-terminated ids.
///
/// # Safety
/// `values` must hold `count * dim` floats and `ids` `count` string pointers.
#[no_mangle]
pub unsafe extern "C" fn eds_embeddings_new(
    count: usize,
    dim: usize,
    values: *const f32,
    ids: *const *const c_char,
    out: *mut *mut EdsEmbeddings,
) -> EdsStatus {
    guard(|| {
        let total = count
            .checked_mul(dim)
            .ok_or_else(|| Failure(EdsStatus::InvalidArgument, "count * dim overflows".into()))?;
        let values = slice(values, total, "values")?;
        let ids = slice(ids, count, "ids")?;
        let entries = ids
            .iter()
            .enumerate()
            .map(|(i, &id)| {
                Ok(Embedding {
                    id: str_arg(id, "id")?.to_string(),
                    values: values[i * dim..(i + 1) * dim].to_vec(),
                })
            })
            .collect::<Result<Vec<_>, Failure>>()?;
        let set = EmbeddingSet::new(dim, entries)?;
        write_out(out, Box::into_raw(Box::new(EdsEmbeddings(set))))
    })
}

/// Reads an EDSE file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn eds_embeddings_read(path: *const c_char, out: *mut *mut EdsEmbeddings) -> EdsStatus {
    guard(|| {
        let set = embed::read_embeddings(&path_arg(path)?)?;
        write_out(out, Box::into_raw(Box::new(EdsEmbeddings(set))))
    })
}

/// Writes an EDSE file.
///
/// # Safety
/// `set` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn eds_embeddings_write(set: *const EdsEmbeddings, path: *const c_char) -> EdsStatus {
    guard(|| Ok(embed::write_embeddings(&handle(set, "embeddings")?.0, &path_arg(path)?)?))
}

/// # Safety
/// `set` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn eds_embeddings_len(set: *const EdsEmbeddings) -> usize {
    set.as_ref().map_or(0, |s| s.0.len())
}

/// # Safety
/// `set` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn eds_embeddings_dim(set: *const EdsEmbeddings) -> usize {
    set.as_ref().map_or(0, |s| s.0.dim())
}

/// # Safety
/// `set` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn eds_embeddings_free(set: *mut EdsEmbeddings) {
    free_box(set);
}

/// k-means++ with Lloyd iterations; the best of `restarts` runs is kept.
///
/// # Safety
/// `set` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn eds_cluster_fit(
    set: *const EdsEmbeddings,
    k: usize,
    max_iter: usize,
    tol: f64,
    seed: u64,
    restarts: usize,
    out: *mut *mut EdsClusterModel,
) -> EdsStatus {
    guard(|| {
        if restarts == 0 {
            return Err(Failure(EdsStatus::InvalidArgument, "restarts must be at least 1".into()));
        }
        let params = KMeansParams { k, max_iter, tol, seed };
        let model = kmeans_best_of(&handle(set, "embeddings")?.0, params, restarts)?;
        write_out(out, Box::into_raw(Box::new(EdsClusterModel(model))))
    })
}

/// Index of the nearest centroid of a `dim`-float vector.
///
/// # Safety
/// `model` must be a live handle, `values` must hold `dim` floats.
#[no_mangle]
pub unsafe extern "C" fn eds_cluster_assign(
    model: *const EdsClusterModel,
    values: *const f32,
    dim: usize,
    out: *mut usize,
) -> EdsStatus {
    guard(|| {
        let c = handle(model, "cluster model")?.0.assign(slice(values, dim, "values")?)?;
        write_out(out, c)
    })
}

/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn eds_cluster_k(model: *const EdsClusterModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.k())
}

/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn eds_cluster_inertia(model: *const EdsClusterModel) -> f64 {
    model.as_ref().map_or(f64::NAN, |m| m.0.inertia())
}

/// Writes an EDSC file.
///
/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn eds_cluster_save(model: *const EdsClusterModel, path: *const c_char) -> EdsStatus {
    guard(|| Ok(handle(model, "cluster model")?.0.save(&path_arg(path)?)?))
}

/// Reads an EDSC file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn eds_cluster_load(path: *const c_char, out: *mut *mut EdsClusterModel) -> EdsStatus {
    guard(|| {
        let model = ClusterModel::load(&path_arg(path)?)?;
        write_out(out, Box::into_raw(Box::new(EdsClusterModel(model))))
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn eds_cluster_free(model: *mut EdsClusterModel) {
    free_box(model);
}

fn subset_handle(inner: SampledSubset) -> Result<*mut EdsSubset, Failure> {
    let ids = inner
        .ids
        .iter()
        .map(|id| CString::new(id.as_str()).map_err(|_| Failure(EdsStatus::InvalidArgument, "id contains NUL".into())))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Box::into_raw(Box::new(EdsSubset { ids, inner })))
}

/// Uniform per-cluster sample: `min(n, |C_i|)` ids per cluster plus refill up
/// to `n * k` ids.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn eds_sample(
    model: *const EdsClusterModel,
    n: usize,
    seed: u64,
    out: *mut *mut EdsSubset,
) -> EdsStatus {
    guard(|| {
        let s = sampler::eds_sample(&handle(model, "cluster model")?.0, n, seed)?;
        write_out(out, subset_handle(s)?)
    })
}

/// EDS sample truncated to exactly `min(budget, pool)` ids.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn eds_sample_budget(
    model: *const EdsClusterModel,
    budget: usize,
    seed: u64,
    out: *mut *mut EdsSubset,
) -> EdsStatus {
    guard(|| {
        let s = sampler::eds_sample_budget(&handle(model, "cluster model")?.0, budget, seed)?;
        write_out(out, subset_handle(s)?)
    })
}

/// # Safety
/// `s` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn eds_subset_len(s: *const EdsSubset) -> usize {
    s.as_ref().map_or(0, |s| s.ids.len())
}

/// The `i`-th sampled id, owned by the subset; null when out of range.
///
/// # Safety
/// `s` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn eds_subset_id(s: *const EdsSubset, i: usize) -> *const c_char {
    s.as_ref()
        .and_then(|s| s.ids.get(i))
        .map_or(ptr::null(), |c| c.as_ptr())
}

/// # Safety
/// `s` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn eds_subset_free(s: *mut EdsSubset) {
    free_box(s);
}

/// KL divergence (natural log) of a probability vector to the uniform
/// distribution over the same support.
///
/// # Safety
/// `probs` must hold `len` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn eds_kl_to_uniform(probs: *const f64, len: usize, out: *mut f64) -> EdsStatus {
    guard(|| {
        let p = slice(probs, len, "probs")?;
        if p.is_empty() {
            return Err(Failure(EdsStatus::EmptyInput, "empty probability vector".into()));
        }
        write_out(out, sampler::kl_to_uniform_probs(p))
    })
}

/// `base_lr * (1 - iter / total_iters)^power`.
#[no_mangle]
pub extern "C" fn eds_poly_lr(iter: usize, total_iters: usize, base_lr: f64, power: f64) -> f64 {
    segmodel::poly_lr(iter, total_iters, base_lr, power)
}

/// Reads an EDSM model file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn eds_model_load(path: *const c_char, out: *mut *mut EdsSegModel) -> EdsStatus {
    guard(|| {
        let model = SegModel::load(&path_arg(path)?)?;
        write_out(out, Box::into_raw(Box::new(EdsSegModel(model))))
    })
}

/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn eds_model_num_classes(model: *const EdsSegModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.num_classes())
}

/// Per-pixel argmax class of an interleaved RGB image into `out_mask`
/// (`height * width` bytes).
///
/// # Safety
/// `rgb` must hold `3 * height * width` bytes and `out_mask` `height * width`.
#[no_mangle]
pub unsafe extern "C" fn eds_model_predict(
    model: *const EdsSegModel,
    rgb: *const u8,
    height: usize,
    width: usize,
    out_mask: *mut u8,
) -> EdsStatus {
    guard(|| {
        let model = &handle(model, "model")?.0;
        let pixels = height
            .checked_mul(width)
            .ok_or_else(|| Failure(EdsStatus::InvalidArgument, "image size overflows".into()))?;
        let image = Raster::new(height, width, slice(rgb, 3 * pixels, "rgb")?.to_vec())?;
        let mask = segmodel::pseudo_label(model, &PixelFeatures::from_raster(&image))?;
        if out_mask.is_null() {
            return Err(null("out_mask"));
        }
        std::slice::from_raw_parts_mut(out_mask, pixels).copy_from_slice(mask.classes());
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn eds_model_free(model: *mut EdsSegModel) {
    free_box(model);
}

/// Mean IoU of a predicted mask against ground truth (`len` bytes each,
/// classes below `classes`). Classes absent from both are skipped; the result
/// is 0 when no class is present.
///
/// # Safety
/// `pred` and `gt` must hold `len` bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn eds_miou(
    pred: *const u8,
    gt: *const u8,
    len: usize,
    classes: usize,
    out: *mut f64,
) -> EdsStatus {
    guard(|| {
        if len == 0 {
            return Err(Failure(EdsStatus::EmptyInput, "empty masks".into()));
        }
        let p = Mask::new(1, len, slice(pred, len, "pred")?.to_vec())?;
        let g = Mask::new(1, len, slice(gt, len, "gt")?.to_vec())?;
        let cm = segmodel::confusion(&p, &g, classes)?;
        write_out(out, segmodel::iou_report(&cm).miou)
    })
}
