//! C ABI over `ovmlr-core`.
//!
//! Handles are opaque pointers owned by the caller and released with the
//! matching `*_free`. Every fallible call returns an [`OvmlrStatus`]; the
//! message of the last failure on the calling thread is available through
//! [`ovmlr_last_error`]. Panics are caught at the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use ovmlr_core::metrics::{evaluate_table, EvalMode};
use ovmlr_core::pipeline::eval::{eval_table, evaluate_images};
use ovmlr_core::pipeline::{Checkpoint, Dataset, Model, PatchBag, Split};
use ovmlr_core::{Error, Tensor};

/// Result codes. The first four match the command-line exit codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OvmlrStatus {
    Ok = 0,
    /// Invalid configuration, shape or contract violation.
    Invalid = 1,
    /// File missing, unreadable or malformed.
    Io = 2,
    /// Network failure talking to a language-model endpoint.
    Transport = 3,
    /// A required pointer argument was null.
    NullArgument = 4,
    /// Unknown image id or class index.
    Lookup = 5,
    /// A string argument was not valid UTF-8.
    Utf8 = 6,
    /// The output buffer is too small.
    BufferTooSmall = 7,
    /// Internal panic; the handle involved should be freed.
    Panic = 8,
}

/// Loaded model (checkpoint) handle.
pub struct OvmlrModel {
    model: Model,
}

/// Loaded dataset handle.
pub struct OvmlrDataset {
    data: Dataset,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(e: &Error) -> OvmlrStatus {
    match e {
        Error::Lookup(_) => OvmlrStatus::Lookup,
        _ => match e.exit_code() {
            2 => OvmlrStatus::Io,
            3 => OvmlrStatus::Transport,
            _ => OvmlrStatus::Invalid,
        },
    }
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (OvmlrStatus, String)>) -> OvmlrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => OvmlrStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".to_string());
            set_error(format!("internal panic: {msg}"));
            OvmlrStatus::Panic
        }
    }
}

fn core(e: Error) -> (OvmlrStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(name: &str) -> (OvmlrStatus, String) {
    (OvmlrStatus::NullArgument, format!("{name} is null"))
}

unsafe fn path_arg(p: *const c_char, name: &str) -> Result<PathBuf, (OvmlrStatus, String)> {
    if p.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| (OvmlrStatus::Utf8, format!("{name} is not valid UTF-8")))
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length without the NUL.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn ovmlr_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ovmlr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint and rebuilds its model.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ovmlr_model_load(path: *const c_char, out: *mut *mut OvmlrModel) -> OvmlrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = path_arg(path, "path")?;
        let model = Checkpoint::load(&path).and_then(|c| c.model()).map_err(core)?;
        *out = Box::into_raw(Box::new(OvmlrModel { model }));
        Ok(())
    })
}

/// Releases a model handle; null is ignored.
///
/// # Safety
/// `model` must come from [`ovmlr_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ovmlr_model_free(model: *mut OvmlrModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Vocabulary size; 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ovmlr_model_num_classes(model: *const OvmlrModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.num_classes())
}

/// Expected raw patch grid: patches per image and values per patch.
///
/// # Safety
/// `model` must be a live handle; the outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn ovmlr_model_input_shape(
    model: *const OvmlrModel,
    num_patches: *mut usize,
    patch_dim: *mut usize,
) -> OvmlrStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if num_patches.is_null() || patch_dim.is_null() {
            return Err(null("output"));
        }
        *num_patches = m.model.cfg.backbone.num_patches();
        *patch_dim = m.model.cfg.backbone.d_in;
        Ok(())
    })
}

/// Copies class `index`'s name into `buf` (NUL-terminated). Fails with
/// `BufferTooSmall` when `len` cannot hold it; `*needed` always receives
/// the length including the NUL.
///
/// # Safety
/// `model` must be a live handle, `buf` must hold `len` bytes, `needed` may be null.
#[no_mangle]
pub unsafe extern "C" fn ovmlr_model_class_name(
    model: *const OvmlrModel,
    index: usize,
    buf: *mut c_char,
    len: usize,
    needed: *mut usize,
) -> OvmlrStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let name = m
            .model
            .vocab
            .names
            .get(index)
            .ok_or_else(|| (OvmlrStatus::Lookup, format!("no class {index}")))?;
        if !needed.is_null() {
            *needed = name.len() + 1;
        }
        if buf.is_null() {
            return Err(null("buf"));
        }
        if len < name.len() + 1 {
            return Err((OvmlrStatus::BufferTooSmall, format!("class name needs {} bytes", name.len() + 1)));
        }
        ptr::copy_nonoverlapping(name.as_ptr(), buf.cast::<u8>(), name.len());
        *buf.add(name.len()) = 0;
        Ok(())
    })
}

unsafe fn image_bag(m: &Model, patches: *const f64, num_patches: usize, patch_dim: usize) -> Result<PatchBag, (OvmlrStatus, String)> {
    if patches.is_null() {
        return Err(null("patches"));
    }
    let b = &m.cfg.backbone;
    if num_patches != b.num_patches() || patch_dim != b.d_in {
        return Err((
            OvmlrStatus::Invalid,
            format!(
                "patches are {num_patches}×{patch_dim}, model expects {}×{}",
                b.num_patches(),
                b.d_in
            ),
        ));
    }
    let data = std::slice::from_raw_parts(patches, num_patches * patch_dim).to_vec();
    Ok(PatchBag {
        id: 0,
        split: Split::Test,
        patches: Tensor::new(vec![num_patches, patch_dim], data).map_err(core)?,
        labels: vec![false; m.num_classes()],
        planted: Default::default(),
    })
}

/// Scores one image: `patches` is row-major `num_patches × patch_dim`;
/// writes one score per class into `scores` (length `num_classes`).
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn ovmlr_model_predict(
    model: *const OvmlrModel,
    patches: *const f64,
    num_patches: usize,
    patch_dim: usize,
    scores: *mut f64,
    num_classes: usize,
) -> OvmlrStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.model;
        if scores.is_null() {
            return Err(null("scores"));
        }
        if num_classes != m.num_classes() {
            return Err((OvmlrStatus::BufferTooSmall, format!("scores must hold {} values", m.num_classes())));
        }
        let bag = image_bag(m, patches, num_patches, patch_dim)?;
        let e = m.prepare(&bag).and_then(|p| m.evaluate_image(&p, false)).map_err(core)?;
        ptr::copy_nonoverlapping(e.yhat.as_ptr(), scores, num_classes);
        Ok(())
    })
}

/// Patch-level scores of one class for one image, row-major over the grid
/// (`out` has `num_patches` entries).
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn ovmlr_model_patch_scores(
    model: *const OvmlrModel,
    patches: *const f64,
    num_patches: usize,
    patch_dim: usize,
    class: usize,
    out: *mut f64,
) -> OvmlrStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.model;
        if out.is_null() {
            return Err(null("out"));
        }
        if class >= m.num_classes() {
            return Err((OvmlrStatus::Lookup, format!("no class {class}")));
        }
        let bag = image_bag(m, patches, num_patches, patch_dim)?;
        let e = m.prepare(&bag).and_then(|p| m.evaluate_image(&p, false)).map_err(core)?;
        let col = e.s_tilde.column(class);
        ptr::copy_nonoverlapping(col.as_ptr(), out, col.len());
        Ok(())
    })
}

/// Loads a JSON-lines dataset.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ovmlr_dataset_load(path: *const c_char, out: *mut *mut OvmlrDataset) -> OvmlrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = path_arg(path, "path")?;
        let data = Dataset::load(&path).map_err(core)?;
        *out = Box::into_raw(Box::new(OvmlrDataset { data }));
        Ok(())
    })
}

/// Releases a dataset handle; null is ignored.
///
/// # Safety
/// `data` must come from [`ovmlr_dataset_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ovmlr_dataset_free(data: *mut OvmlrDataset) {
    if !data.is_null() {
        drop(Box::from_raw(data));
    }
}

/// Number of images; 0 for a null handle.
///
/// # Safety
/// `data` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ovmlr_dataset_len(data: *const OvmlrDataset) -> usize {
    data.as_ref().map_or(0, |d| d.data.bags.len())
}

/// Evaluation modes for [`ovmlr_evaluate`].
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OvmlrMode {
    /// Unseen classes only.
    Zsl = 0,
    /// Seen and unseen classes.
    Gzsl = 1,
}

/// Summary metrics of one evaluation.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct OvmlrReport {
    pub map: f64,
    pub k: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub images: usize,
}

/// Evaluates the model on the dataset's test split at top-`k`.
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ovmlr_evaluate(
    model: *const OvmlrModel,
    data: *const OvmlrDataset,
    mode: OvmlrMode,
    k: usize,
    out: *mut OvmlrReport,
) -> OvmlrStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.model;
        let d = &data.as_ref().ok_or_else(|| null("data"))?.data;
        if out.is_null() {
            return Err(null("out"));
        }
        let test = d.split(Split::Test);
        if test.is_empty() {
            return Err((OvmlrStatus::Invalid, "dataset has no test images".into()));
        }
        let mode = match mode {
            OvmlrMode::Zsl => EvalMode::Zsl,
            OvmlrMode::Gzsl => EvalMode::Gzsl,
        };
        let evals = evaluate_images(m, &test, false).map_err(core)?;
        let table = eval_table(&evals, &test).map_err(core)?;
        let r = evaluate_table(&table, mode, &m.vocab.seen_mask, &[k]).map_err(core)?;
        *out = OvmlrReport {
            map: r.map,
            k,
            precision: r.precision[0],
            recall: r.recall[0],
            f1: r.f1[0],
            images: test.len(),
        };
        Ok(())
    })
}
