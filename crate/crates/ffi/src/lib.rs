//! C ABI over the voxelstrip library.
//!
//! Objects are opaque handles created by `vs_*_new`/`vs_*_read`/`vs_*_load`
//! and released with the matching `vs_*_free`. Every fallible call returns a
//! [`VsStatus`]; on failure [`vs_last_error_message`] describes the cause
//! for the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use voxelstrip::metrics;
use voxelstrip::predictor::{extract_brain, Ensemble, PredictOptions};
use voxelstrip::resample::ZScoreMode;
use voxelstrip::volume::{read_nifti, write_mask, write_nifti, DataType};
use voxelstrip::{BrainMask, Error, Grid, Volume};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Model = 5,
    Shape = 6,
    EmptyMask = 7,
    Internal = 8,
}

/// Opaque scalar image.
pub struct VsVolume(Volume);

/// Opaque binary mask.
pub struct VsMask(BrainMask);

/// Opaque set of 1 to 5 trained networks.
pub struct VsEnsemble(Ensemble);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn describe(e: &dyn std::error::Error) -> String {
    let mut s = e.to_string();
    let mut cur = e.source();
    while let Some(c) = cur {
        s.push_str(": ");
        s.push_str(&c.to_string());
        cur = c.source();
    }
    s
}

fn status_of(e: &Error) -> VsStatus {
    match e {
        Error::Io(_) | Error::IoAt { .. } => VsStatus::Io,
        Error::MalformedHeader(_)
        | Error::UnsupportedDatatype(_)
        | Error::Dimension(_)
        | Error::DegenerateAffine(_)
        | Error::Parse(_) => VsStatus::Format,
        Error::BadMagic(_)
        | Error::VersionUnsupported(_)
        | Error::ShapeHeaderMismatch(_)
        | Error::EmptyEnsemble
        | Error::Config(_) => VsStatus::Model,
        Error::ShapeMismatch(_) | Error::GridMismatch(_) => VsStatus::Shape,
        Error::EmptyMask => VsStatus::EmptyMask,
        Error::ZeroVariance | Error::EmptyInput => VsStatus::InvalidArgument,
        _ => VsStatus::Internal,
    }
}

struct Fail(VsStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), describe(&e))
    }
}

fn null(what: &str) -> Fail {
    Fail(VsStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, converting errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> VsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => VsStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".to_string());
            VsStatus::Internal
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(VsStatus::InvalidArgument, format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn out_arg<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn borrow<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn vs_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn vs_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Reads a `.nii` or `.nii.gz` image.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn vs_volume_read(path: *const c_char, out: *mut *mut VsVolume) -> VsStatus {
    guard(|| {
        let p = path_arg(path, "path")?;
        out_arg(out, VsVolume(read_nifti(&p)?))
    })
}

/// Builds an axis-aligned volume from x-fastest `data` of
/// `dims[0] * dims[1] * dims[2]` values.
///
/// # Safety
/// `dims` and `spacing` must point to 3 values, `data` to the full voxel
/// count, and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vs_volume_new(
    dims: *const usize,
    spacing: *const f64,
    data: *const f32,
    out: *mut *mut VsVolume,
) -> VsStatus {
    guard(|| {
        if dims.is_null() || spacing.is_null() || data.is_null() {
            return Err(null("dims, spacing or data"));
        }
        let d = [*dims, *dims.add(1), *dims.add(2)];
        let s = [*spacing, *spacing.add(1), *spacing.add(2)];
        let n = d
            .iter()
            .try_fold(1usize, |a, &b| a.checked_mul(b))
            .ok_or_else(|| Fail(VsStatus::InvalidArgument, "voxel count overflows".to_string()))?;
        let grid = Grid::with_spacing(d, s)?;
        let values = std::slice::from_raw_parts(data, n).to_vec();
        let mut vol = Volume::new(grid, values)?;
        vol.dtype = DataType::Float32;
        out_arg(out, VsVolume(vol))
    })
}

/// Writes a volume as float32 NIfTI, gzip-compressed when `compress` is
/// non-zero.
///
/// # Safety
/// `vol` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn vs_volume_write(vol: *const VsVolume, path: *const c_char, compress: i32) -> VsStatus {
    guard(|| {
        let v = borrow(vol, "vol")?;
        let p = path_arg(path, "path")?;
        Ok(write_nifti(&v.0, &p, compress != 0)?)
    })
}

/// Copies the grid size into `dims[0..3]`.
///
/// # Safety
/// `vol` must be a live handle and `dims` must hold 3 values.
#[no_mangle]
pub unsafe extern "C" fn vs_volume_dims(vol: *const VsVolume, dims: *mut usize) -> VsStatus {
    guard(|| {
        let v = borrow(vol, "vol")?;
        if dims.is_null() {
            return Err(null("dims"));
        }
        ptr::copy_nonoverlapping(v.0.dims().as_ptr(), dims, 3);
        Ok(())
    })
}

/// Borrowed pointer to the x-fastest intensities, or null for a null
/// handle. Valid until the handle is freed.
///
/// # Safety
/// `vol` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn vs_volume_data(vol: *const VsVolume) -> *const f32 {
    vol.as_ref().map_or(ptr::null(), |v| v.0.data.as_ptr())
}

/// # Safety
/// `vol` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn vs_volume_free(vol: *mut VsVolume) {
    if !vol.is_null() {
        drop(Box::from_raw(vol));
    }
}

/// Reads a mask; any non-zero voxel is foreground.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn vs_mask_read(path: *const c_char, out: *mut *mut VsMask) -> VsStatus {
    guard(|| {
        let p = path_arg(path, "path")?;
        out_arg(out, VsMask(metrics::load_mask(&p)?))
    })
}

/// Writes a mask as uint8 NIfTI.
///
/// # Safety
/// `mask` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn vs_mask_write(mask: *const VsMask, path: *const c_char, compress: i32) -> VsStatus {
    guard(|| {
        let m = borrow(mask, "mask")?;
        let p = path_arg(path, "path")?;
        Ok(write_mask(&m.0, &p, compress != 0)?)
    })
}

/// # Safety
/// `mask` must be a live handle and `dims` must hold 3 values.
#[no_mangle]
pub unsafe extern "C" fn vs_mask_dims(mask: *const VsMask, dims: *mut usize) -> VsStatus {
    guard(|| {
        let m = borrow(mask, "mask")?;
        if dims.is_null() {
            return Err(null("dims"));
        }
        ptr::copy_nonoverlapping(m.0.grid.dims.as_ptr(), dims, 3);
        Ok(())
    })
}

/// Borrowed pointer to the x-fastest 0/1 voxels, or null for a null handle.
///
/// # Safety
/// `mask` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn vs_mask_data(mask: *const VsMask) -> *const u8 {
    mask.as_ref().map_or(ptr::null(), |m| m.0.data.as_ptr())
}

/// Foreground voxel count, 0 for a null handle.
///
/// # Safety
/// `mask` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn vs_mask_count(mask: *const VsMask) -> usize {
    mask.as_ref().map_or(0, |m| m.0.count())
}

/// # Safety
/// `mask` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn vs_mask_free(mask: *mut VsMask) {
    if !mask.is_null() {
        drop(Box::from_raw(mask));
    }
}

/// Loads `n` weight files (each with its `.cfg` sidecar) as one ensemble.
///
/// # Safety
/// `paths` must point to `n` NUL-terminated strings and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn vs_ensemble_load(
    paths: *const *const c_char,
    n: usize,
    out: *mut *mut VsEnsemble,
) -> VsStatus {
    guard(|| {
        if paths.is_null() {
            return Err(null("paths"));
        }
        let list = (0..n)
            .map(|i| path_arg(*paths.add(i), "model path"))
            .collect::<Result<Vec<_>, _>>()?;
        out_arg(out, VsEnsemble(Ensemble::load(&list)?))
    })
}

/// Member count, 0 for a null handle.
///
/// # Safety
/// `ens` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn vs_ensemble_len(ens: *const VsEnsemble) -> usize {
    ens.as_ref().map_or(0, |e| e.0.len())
}

/// # Safety
/// `ens` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn vs_ensemble_free(ens: *mut VsEnsemble) {
    if !ens.is_null() {
        drop(Box::from_raw(ens));
    }
}

/// Full extraction pipeline on a native-space image. `tta` enables mirror
/// averaging; `nonzero_zscore` restricts normalisation statistics to
/// non-zero voxels. `prob` may be null; otherwise it receives the brain
/// probability map.
///
/// # Safety
/// `ens` and `vol` must be live handles; `mask` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vs_extract(
    ens: *const VsEnsemble,
    vol: *const VsVolume,
    tta: i32,
    nonzero_zscore: i32,
    mask: *mut *mut VsMask,
    prob: *mut *mut VsVolume,
) -> VsStatus {
    guard(|| {
        let e = borrow(ens, "ens")?;
        let v = borrow(vol, "vol")?;
        if mask.is_null() {
            return Err(null("mask"));
        }
        let opts = PredictOptions {
            tta: tta != 0,
            zscore: if nonzero_zscore != 0 {
                ZScoreMode::Nonzero
            } else {
                ZScoreMode::AllVoxels
            },
            keep_probability: !prob.is_null(),
        };
        let out = extract_brain(&v.0, &e.0, &opts)?;
        if let Some(p) = out.probability {
            out_arg(prob, VsVolume(p))?;
        }
        out_arg(mask, VsMask(out.mask))
    })
}

/// DICE coefficient in percent.
///
/// # Safety
/// `reference` and `prediction` must be live handles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn vs_dice(reference: *const VsMask, prediction: *const VsMask, out: *mut f64) -> VsStatus {
    guard(|| {
        let (a, b) = (borrow(reference, "reference")?, borrow(prediction, "prediction")?);
        if out.is_null() {
            return Err(null("out"));
        }
        *out = metrics::dice(&a.0, &b.0)?;
        Ok(())
    })
}

/// Symmetric 95th-percentile surface distance in millimetres;
/// `VS_STATUS_EMPTY_MASK` when either mask is empty.
///
/// # Safety
/// `reference` and `prediction` must be live handles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn vs_hd95(reference: *const VsMask, prediction: *const VsMask, out: *mut f64) -> VsStatus {
    guard(|| {
        let (a, b) = (borrow(reference, "reference")?, borrow(prediction, "prediction")?);
        if out.is_null() {
            return Err(null("out"));
        }
        *out = metrics::hd95(&a.0, &b.0, a.0.grid.spacing)?;
        Ok(())
    })
}
