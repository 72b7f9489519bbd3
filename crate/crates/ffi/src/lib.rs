//! C interface to `sne-core`.
//!
//! Clouds and models are opaque heap handles created by `sne_*_new` /
//! `sne_*_load` and released with the matching `*_free`. Every fallible call
//! returns an [`SneStatus`]; on failure the message is kept per thread and can
//! be copied out with [`sne_last_error_message`]. Panics never cross the
//! boundary. Vectors are passed as packed `x, y, z` triples of `double`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use sne_core::evaluation::{estimate_normals, rmse, Estimator};
use sne_core::geometry::{load_point_cloud, PointCloud, Vec3};
use sne_core::model::ModelWeights;
use sne_core::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SneStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    Io = 3,
    Parse = 4,
    Numerical = 5,
    Checkpoint = 6,
    Panic = 7,
}

/// Normal estimation method for [`sne_estimate_normals`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SneMethod {
    Pca = 0,
    Jet = 1,
    Model = 2,
}

/// Opaque point cloud.
pub struct SneCloud(PointCloud);

/// Opaque trained model.
pub struct SneModel(ModelWeights);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(err: &Error) -> SneStatus {
    match err {
        Error::Io { .. } => SneStatus::Io,
        Error::Parse { .. } => SneStatus::Parse,
        Error::Checkpoint(_) => SneStatus::Checkpoint,
        e if e.is_numerical() => SneStatus::Numerical,
        _ => SneStatus::InvalidInput,
    }
}

struct Fail(SneStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(SneStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, converting errors and panics into a status plus a stored message.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SneStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            SneStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            SneStatus::Panic
        }
    }
}

unsafe fn vectors(ptr: *const f64, count: usize, what: &str) -> Result<Vec<Vec3>, Fail> {
    if ptr.is_null() {
        return Err(null(what));
    }
    let flat = std::slice::from_raw_parts(ptr, count * 3);
    Ok(flat.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect())
}

unsafe fn path(ptr: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    if ptr.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| Fail(SneStatus::InvalidInput, format!("{what} is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sne_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (truncated,
/// always NUL-terminated when `len > 0`). Returns the full message length in
/// bytes, excluding the terminator. Empty after a successful call.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn sne_last_error_message(buf: *mut c_char, len: usize) -> usize {
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

/// Builds a cloud from `count` points and optional unit normals (may be null).
///
/// # Safety
/// `points` (and `normals`, if non-null) must hold `3 * count` doubles;
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sne_cloud_new(
    points: *const f64,
    normals: *const f64,
    count: usize,
    out: *mut *mut SneCloud,
) -> SneStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let pts = vectors(points, count, "points")?;
        let nrm = if normals.is_null() { None } else { Some(vectors(normals, count, "normals")?) };
        let cloud = PointCloud::new("ffi", pts, nrm)?;
        *out = Box::into_raw(Box::new(SneCloud(cloud)));
        Ok(())
    })
}

/// Loads an `.xyz` file, with ground-truth normals from `normals_path` if
/// it is non-null.
///
/// # Safety
/// Paths must be null or NUL-terminated; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sne_cloud_load(
    xyz_path: *const c_char,
    normals_path: *const c_char,
    out: *mut *mut SneCloud,
) -> SneStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let xyz = path(xyz_path, "xyz_path")?;
        let normals = if normals_path.is_null() { None } else { Some(path(normals_path, "normals_path")?) };
        let cloud = load_point_cloud(&xyz, normals.as_deref())?;
        *out = Box::into_raw(Box::new(SneCloud(cloud)));
        Ok(())
    })
}

/// Number of points, or 0 for a null handle.
///
/// # Safety
/// `cloud` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sne_cloud_len(cloud: *const SneCloud) -> usize {
    cloud.as_ref().map_or(0, |c| c.0.len())
}

/// Copies the cloud's ground-truth normals into `out` (`3 * len` doubles).
///
/// # Safety
/// `cloud` must be a live handle; `out` must hold `3 * len` doubles.
#[no_mangle]
pub unsafe extern "C" fn sne_cloud_normals(cloud: *const SneCloud, out: *mut f64) -> SneStatus {
    guard(|| {
        let cloud = cloud.as_ref().ok_or_else(|| null("cloud"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let normals = cloud
            .0
            .normals()
            .ok_or_else(|| Fail(SneStatus::InvalidInput, "cloud has no normals".into()))?;
        write_vectors(normals, out);
        Ok(())
    })
}

/// Releases a cloud. Null is ignored.
///
/// # Safety
/// `cloud` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sne_cloud_free(cloud: *mut SneCloud) {
    if !cloud.is_null() {
        drop(Box::from_raw(cloud));
    }
}

/// Loads a checkpoint and its configuration sidecar.
///
/// # Safety
/// `checkpoint_path` must be NUL-terminated; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sne_model_load(checkpoint_path: *const c_char, out: *mut *mut SneModel) -> SneStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let (model, _) = ModelWeights::load(&path(checkpoint_path, "checkpoint_path")?)?;
        *out = Box::into_raw(Box::new(SneModel(model)));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sne_model_free(model: *mut SneModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

unsafe fn write_vectors(vs: &[Vec3], out: *mut f64) {
    let dst = std::slice::from_raw_parts_mut(out, vs.len() * 3);
    for (d, v) in dst.chunks_exact_mut(3).zip(vs) {
        d.copy_from_slice(v.as_slice());
    }
}

/// Estimates a normal at every point with `k`-point patches. `jet_order` is
/// used only by [`SneMethod::Jet`], `model` only by [`SneMethod::Model`]
/// (null otherwise is fine).
///
/// # Safety
/// `cloud` must be a live handle, `model` null or live, and `out` must hold
/// `3 * len` doubles.
#[no_mangle]
pub unsafe extern "C" fn sne_estimate_normals(
    cloud: *const SneCloud,
    method: SneMethod,
    jet_order: usize,
    model: *const SneModel,
    k: usize,
    out: *mut f64,
) -> SneStatus {
    guard(|| {
        let cloud = cloud.as_ref().ok_or_else(|| null("cloud"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let estimator = match method {
            SneMethod::Pca => Estimator::Pca,
            SneMethod::Jet => Estimator::Jet { order: jet_order },
            SneMethod::Model => Estimator::Model(&model.as_ref().ok_or_else(|| null("model"))?.0),
        };
        let queries: Vec<usize> = (0..cloud.0.len()).collect();
        let normals = estimate_normals(&cloud.0, &estimator, k, &queries)?;
        write_vectors(&normals, out);
        Ok(())
    })
}

/// Unoriented angular RMSE in degrees between `count` predicted and
/// ground-truth normals.
///
/// # Safety
/// Both arrays must hold `3 * count` doubles; `out_degrees` must be valid.
#[no_mangle]
pub unsafe extern "C" fn sne_rmse_degrees(
    predicted: *const f64,
    ground_truth: *const f64,
    count: usize,
    out_degrees: *mut f64,
) -> SneStatus {
    guard(|| {
        if out_degrees.is_null() {
            return Err(null("out_degrees"));
        }
        let p = vectors(predicted, count, "predicted")?;
        let g = vectors(ground_truth, count, "ground_truth")?;
        *out_degrees = rmse(&p, &g)?;
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn status_mapping() {
        assert_eq!(status_of(&Error::Numerical("x".into())), SneStatus::Numerical);
        assert_eq!(status_of(&Error::Degenerate("x".into())), SneStatus::Numerical);
        assert_eq!(status_of(&Error::Checkpoint("x".into())), SneStatus::Checkpoint);
        assert_eq!(status_of(&Error::InvalidInput("x".into())), SneStatus::InvalidInput);
    }

    #[test]
    fn panics_become_status() {
        let s = guard(|| panic!("boom"));
        assert_eq!(s, SneStatus::Panic);
        let mut buf = [0 as c_char; 64];
        let n = unsafe { sne_last_error_message(buf.as_mut_ptr(), buf.len()) };
        let msg = unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap();
        assert_eq!(msg, "panic: boom");
        assert_eq!(n, msg.len());
    }
}
