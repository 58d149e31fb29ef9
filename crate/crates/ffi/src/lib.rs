//! C ABI for critsel.
//!
//! Every fallible function returns a [`CritselStatus`]. On failure the
//! message is kept per thread and can be read with
//! [`critsel_last_error_message`]. Handles are opaque and must be released
//! with the matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use critsel::datamodel::{
    load_annotations, load_captions, load_detections, Dataset, DetectionSet, LoadOptions,
};
use critsel::geometry;
use critsel::importance::{self, ImportanceSet, ObjectGraph, WeightMatrix};
use critsel::metrics::{self, EvalConfig, Metrics};
use critsel::semantics::ConceptMap;
use critsel::{BBox, Error};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CritselStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Parse = 4,
    Validation = 5,
    Contract = 6,
    NoCategories = 7,
    NoEvaluableImages = 8,
    Numeric = 9,
    InvalidBox = 10,
    Panic = 11,
}

impl From<&Error> for CritselStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Io { .. } => CritselStatus::Io,
            Error::Parse { .. } => CritselStatus::Parse,
            Error::Validation { .. } => CritselStatus::Validation,
            Error::Contract(_) => CritselStatus::Contract,
            Error::NoCategories => CritselStatus::NoCategories,
            Error::NoEvaluableImages => CritselStatus::NoEvaluableImages,
            Error::Numeric(_) => CritselStatus::Numeric,
        }
    }
}

/// Axis-aligned box in COCO order.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CritselBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

/// Summary metrics. Undefined values are NaN.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CritselMetrics {
    pub map: f64,
    pub map50: f64,
    pub map75: f64,
    pub mar1: f64,
    pub mar10: f64,
    pub mar100: f64,
    pub mar1_50: f64,
    pub f1: f64,
    pub precision_50: f64,
    pub images_evaluated: usize,
    pub gt_annotations: usize,
    pub detections: usize,
}

pub struct CritselDataset(Dataset);
pub struct CritselConceptMap(ConceptMap);
pub struct CritselImportance(ImportanceSet);
pub struct CritselDetections(DetectionSet);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

type FfiResult<T> = Result<T, (CritselStatus, String)>;

fn fail<T>(status: CritselStatus, msg: impl Into<String>) -> FfiResult<T> {
    Err((status, msg.into()))
}

fn lib<T>(r: critsel::Result<T>) -> FfiResult<T> {
    r.map_err(|e| (CritselStatus::from(&e), e.to_string()))
}

/// Runs `f`, records any error, and turns panics into a status.
fn guard(f: impl FnOnce() -> FfiResult<()>) -> CritselStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            CritselStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            CritselStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, name: &str) -> FfiResult<PathBuf> {
    if p.is_null() {
        return fail(CritselStatus::NullArgument, format!("{name} is null"));
    }
    match CStr::from_ptr(p).to_str() {
        Ok(s) => Ok(PathBuf::from(s)),
        Err(_) => fail(
            CritselStatus::InvalidUtf8,
            format!("{name} is not valid UTF-8"),
        ),
    }
}

unsafe fn ref_arg<'a, T>(p: *const T, name: &str) -> FfiResult<&'a T> {
    p.as_ref()
        .ok_or_else(|| (CritselStatus::NullArgument, format!("{name} is null")))
}

unsafe fn write_out<T>(out: *mut T, value: T, name: &str) -> FfiResult<()> {
    if out.is_null() {
        return fail(CritselStatus::NullArgument, format!("{name} is null"));
    }
    out.write(value);
    Ok(())
}

fn to_bbox(b: &CritselBox) -> FfiResult<BBox> {
    BBox::new(b.x, b.y, b.w, b.h).map_err(|e| (CritselStatus::InvalidBox, e.to_string()))
}

fn nan(v: Option<f64>) -> f64 {
    v.unwrap_or(f64::NAN)
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn critsel_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn critsel_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn critsel_dataset_load(
    path: *const c_char,
    strict: bool,
    out: *mut *mut CritselDataset,
) -> CritselStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        let ds = lib(load_annotations(path, LoadOptions { strict }))?;
        write_out(out, Box::into_raw(Box::new(CritselDataset(ds))), "out")
    })
}

/// # Safety
/// `ds` must be null or a handle from [`critsel_dataset_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn critsel_dataset_free(ds: *mut CritselDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// # Safety
/// `ds` must be a live dataset handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn critsel_dataset_annotation_count(
    ds: *const CritselDataset,
    out: *mut usize,
) -> CritselStatus {
    guard(|| {
        let ds = ref_arg(ds, "ds")?;
        write_out(out, ds.0.annotations().len(), "out")
    })
}

/// # Safety
/// `ds` must be a live dataset handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn critsel_dataset_image_count(
    ds: *const CritselDataset,
    out: *mut usize,
) -> CritselStatus {
    guard(|| {
        let ds = ref_arg(ds, "ds")?;
        write_out(out, ds.0.images().len(), "out")
    })
}

/// Builds a concept map from the dataset's category names, adding the
/// synonyms in `path` when it is not null.
///
/// # Safety
/// `path` must be null or NUL-terminated, `ds` a live handle, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn critsel_concept_map_load(
    path: *const c_char,
    ds: *const CritselDataset,
    out: *mut *mut CritselConceptMap,
) -> CritselStatus {
    guard(|| {
        let ds = ref_arg(ds, "ds")?;
        let cmap = if path.is_null() {
            lib(ConceptMap::from_vocabulary(ds.0.vocabulary()))?
        } else {
            lib(ConceptMap::load(path_arg(path, "path")?, ds.0.vocabulary()))?
        };
        write_out(out, Box::into_raw(Box::new(CritselConceptMap(cmap))), "out")
    })
}

/// # Safety
/// `cmap` must be null or a live concept map handle.
#[no_mangle]
pub unsafe extern "C" fn critsel_concept_map_free(cmap: *mut CritselConceptMap) {
    if !cmap.is_null() {
        drop(Box::from_raw(cmap));
    }
}

/// Scores every image of `ds` with the captions in `captions_path`.
///
/// # Safety
/// Handles must be live, `captions_path` NUL-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn critsel_score(
    ds: *const CritselDataset,
    captions_path: *const c_char,
    cmap: *const CritselConceptMap,
    heat_time: f64,
    out: *mut *mut CritselImportance,
) -> CritselStatus {
    guard(|| {
        let ds = ref_arg(ds, "ds")?;
        let cmap = ref_arg(cmap, "cmap")?;
        let captions = lib(load_captions(path_arg(captions_path, "captions_path")?))?;
        let records = lib(importance::score_dataset(
            &ds.0, &captions, &cmap.0, heat_time,
        ))?;
        write_out(
            out,
            Box::into_raw(Box::new(CritselImportance(records))),
            "out",
        )
    })
}

/// # Safety
/// `path` must be NUL-terminated and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn critsel_importance_load(
    path: *const c_char,
    out: *mut *mut CritselImportance,
) -> CritselStatus {
    guard(|| {
        let records = lib(ImportanceSet::load(path_arg(path, "path")?))?;
        write_out(
            out,
            Box::into_raw(Box::new(CritselImportance(records))),
            "out",
        )
    })
}

/// # Safety
/// `imp` must be a live handle and `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn critsel_importance_write(
    imp: *const CritselImportance,
    path: *const c_char,
) -> CritselStatus {
    guard(|| {
        let imp = ref_arg(imp, "imp")?;
        lib(imp.0.write(path_arg(path, "path")?))
    })
}

/// Number of annotations with propagated importance above `threshold`.
///
/// # Safety
/// `imp` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn critsel_importance_select_count(
    imp: *const CritselImportance,
    threshold: f64,
    out: *mut usize,
) -> CritselStatus {
    guard(|| {
        let imp = ref_arg(imp, "imp")?;
        lib(importance::validate_threshold(threshold))?;
        write_out(out, imp.0.select_all(threshold).len(), "out")
    })
}

/// # Safety
/// `imp` must be null or a live importance handle.
#[no_mangle]
pub unsafe extern "C" fn critsel_importance_free(imp: *mut CritselImportance) {
    if !imp.is_null() {
        drop(Box::from_raw(imp));
    }
}

/// # Safety
/// `path` must be NUL-terminated, `ds` a live handle, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn critsel_detections_load(
    path: *const c_char,
    ds: *const CritselDataset,
    strict: bool,
    out: *mut *mut CritselDetections,
) -> CritselStatus {
    guard(|| {
        let ds = ref_arg(ds, "ds")?;
        let dets = lib(load_detections(
            path_arg(path, "path")?,
            ds.0.vocabulary(),
            LoadOptions { strict },
        ))?;
        write_out(out, Box::into_raw(Box::new(CritselDetections(dets))), "out")
    })
}

/// # Safety
/// `dets` must be null or a live detections handle.
#[no_mangle]
pub unsafe extern "C" fn critsel_detections_free(dets: *mut CritselDetections) {
    if !dets.is_null() {
        drop(Box::from_raw(dets));
    }
}

/// Evaluates with the default protocol. With `imp` null every annotation
/// counts; otherwise only those with importance above `threshold`.
///
/// # Safety
/// `dets` and `ds` must be live handles, `imp` null or live, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn critsel_evaluate(
    dets: *const CritselDetections,
    ds: *const CritselDataset,
    imp: *const CritselImportance,
    threshold: f64,
    out: *mut CritselMetrics,
) -> CritselStatus {
    guard(|| {
        let dets = ref_arg(dets, "dets")?;
        let ds = ref_arg(ds, "ds")?;
        let cfg = EvalConfig::default();
        let report = match imp.as_ref() {
            None => lib(metrics::evaluate(&dets.0, &ds.0, &cfg))?,
            Some(imp) => lib(metrics::evaluate_filtered(
                &dets.0, &ds.0, &imp.0, threshold, &cfg,
            ))?,
        };
        let Metrics {
            map,
            map50,
            map75,
            mar1,
            mar10,
            mar100,
            mar1_50,
            f1,
        } = report.metrics;
        let t = &report.totals;
        write_out(
            out,
            CritselMetrics {
                map: nan(map),
                map50: nan(map50),
                map75: nan(map75),
                mar1: nan(mar1),
                mar10: nan(mar10),
                mar100: nan(mar100),
                mar1_50: nan(mar1_50),
                f1: nan(f1),
                precision_50: nan(t.precision_50),
                images_evaluated: t.images_evaluated,
                gt_annotations: t.gt_annotations,
                detections: t.detections,
            },
            "out",
        )
    })
}

/// # Safety
/// `a`, `b` must point to boxes and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn critsel_iou(
    a: *const CritselBox,
    b: *const CritselBox,
    out: *mut f64,
) -> CritselStatus {
    guard(|| {
        let a = to_bbox(ref_arg(a, "a")?)?;
        let b = to_bbox(ref_arg(b, "b")?)?;
        write_out(out, geometry::iou(&a, &b), "out")
    })
}

/// # Safety
/// `a`, `b` must point to boxes and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn critsel_min_distance(
    a: *const CritselBox,
    b: *const CritselBox,
    out: *mut f64,
) -> CritselStatus {
    guard(|| {
        let a = to_bbox(ref_arg(a, "a")?)?;
        let b = to_bbox(ref_arg(b, "b")?)?;
        write_out(out, geometry::min_distance(&a, &b), "out")
    })
}

/// Heat kernel of the graph with row-major `n x n` weights, written
/// row-major to `out`.
///
/// # Safety
/// `weights` must hold `n * n` readable values and `out` `n * n` writable ones.
#[no_mangle]
pub unsafe extern "C" fn critsel_heat_kernel(
    weights: *const f64,
    n: usize,
    t: f64,
    out: *mut f64,
) -> CritselStatus {
    guard(|| {
        if n > 0 && (weights.is_null() || out.is_null()) {
            return fail(CritselStatus::NullArgument, "weights or out is null");
        }
        let len = n
            .checked_mul(n)
            .ok_or((CritselStatus::Contract, "n is too large".to_string()))?;
        let w: &[f64] = if n == 0 {
            &[]
        } else {
            std::slice::from_raw_parts(weights, len)
        };
        let graph = lib(ObjectGraph::from_weights(WeightMatrix::from_row_slice(
            n, n, w,
        )))?;
        let hk = lib(importance::heat_kernel(&graph, t))?;
        if n > 0 {
            let dst = std::slice::from_raw_parts_mut(out, len);
            for i in 0..n {
                for j in 0..n {
                    dst[i * n + j] = hk.matrix()[(i, j)];
                }
            }
        }
        Ok(())
    })
}
