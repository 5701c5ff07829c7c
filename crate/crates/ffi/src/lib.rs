//! C ABI over the segmentation engine.
//!
//! Models and sessions are opaque handles created and freed through this
//! API. Every fallible call returns a [`BifsegStatus`]; on failure the
//! message is available from [`bifseg_last_error`] on the same thread until
//! the next failing call. Panics are caught at the boundary and reported as
//! [`BifsegStatus::Panic`].
//!
//! Images are row-major `f32` intensities in `[0, 1]`. Masks are row-major
//! bytes, 1 for foreground. Scribble points are `(x, y)` pairs in crop
//! coordinates, relative to the box's top-left corner.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::sync::Arc;

use bifseg::grid::{BoundingBox, Grid2D, ScribbleSet};
use bifseg::nn::{load_model, SegmenterModel};
use bifseg::pipeline::{init_segment, RefineConfig, Session, SessionConfig};
use bifseg::service::apply_overrides;
use bifseg::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BifsegStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    ScribbleConflict = 4,
    Numeric = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

/// A trained model; may be shared by any number of sessions.
pub struct BifsegModel(Arc<SegmenterModel>);

/// One interactive segmentation. Not safe to use from two threads at once.
pub struct BifsegSession(Session);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn status_of(err: &Error) -> BifsegStatus {
    match err {
        Error::ScribbleConflict(_) => BifsegStatus::ScribbleConflict,
        Error::Io(_) | Error::Image(_) => BifsegStatus::Io,
        e if e.is_numeric() => BifsegStatus::Numeric,
        _ => BifsegStatus::InvalidArgument,
    }
}

struct Fail(BifsegStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> BifsegStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => BifsegStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            BifsegStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(BifsegStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail(BifsegStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn points(xy: *const u32, count: usize, what: &str) -> Result<Vec<(usize, usize)>, Fail> {
    let flat = slice_arg(xy, count.checked_mul(2).ok_or_else(|| Fail(BifsegStatus::InvalidArgument, "too many points".into()))?, what)?;
    Ok(flat.chunks_exact(2).map(|p| (p[0] as usize, p[1] as usize)).collect())
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next failing call on this thread.
#[no_mangle]
pub extern "C" fn bifseg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn bifseg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a model file written by `bifseg train`.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn bifseg_model_load(path: *const c_char, out: *mut *mut BifsegModel) -> BifsegStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = str_arg(path, "path")?;
        let model = load_model(Path::new(path))?;
        *out = Box::into_raw(Box::new(BifsegModel(Arc::new(model))));
        Ok(())
    })
}

/// Frees a model. Sessions created from it stay valid.
///
/// # Safety
/// `model` must come from [`bifseg_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn bifseg_model_free(model: *mut BifsegModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Segments the object inside the inclusive box `(x0, y0)`-`(x1, y1)` of a
/// `width x height` image. `target_min` is the working resolution's shorter
/// side; 0 selects the default.
///
/// # Safety
/// `pixels` must hold `width * height` values; `model` and `out` must be valid.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn bifseg_session_create(
    model: *const BifsegModel,
    pixels: *const f32,
    width: usize,
    height: usize,
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
    target_min: usize,
    out: *mut *mut BifsegSession,
) -> BifsegStatus {
    guard(|| {
        if model.is_null() {
            return Err(null("model"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let n = width.checked_mul(height).ok_or_else(|| Fail(BifsegStatus::InvalidArgument, "image too large".into()))?;
        let data = slice_arg(pixels, n, "pixels")?.to_vec();
        let image = Grid2D::new(width, height, 1, data)?;
        let bbox = BoundingBox::new(x0, y0, x1, y1)?;
        let mut cfg = SessionConfig::default();
        if target_min > 0 {
            cfg.target_min = target_min;
        }
        let session = init_segment((*model).0.clone(), &image, bbox, &cfg)?;
        *out = Box::into_raw(Box::new(BifsegSession(session)));
        Ok(())
    })
}

/// Runs one refinement round with `fg_count` foreground and `bg_count`
/// background points (`x, y` pairs). No points gives unsupervised refinement.
/// `config_json` may be null or a JSON object overriding refinement settings.
/// On error the session is unchanged.
///
/// # Safety
/// Point arrays must hold `2 * count` values; `session` must be valid.
#[no_mangle]
pub unsafe extern "C" fn bifseg_session_refine(
    session: *mut BifsegSession,
    fg_xy: *const u32,
    fg_count: usize,
    bg_xy: *const u32,
    bg_count: usize,
    config_json: *const c_char,
) -> BifsegStatus {
    guard(|| {
        let s = session.as_mut().ok_or_else(|| null("session"))?;
        let cfg = if config_json.is_null() {
            RefineConfig::default()
        } else {
            let text = str_arg(config_json, "config_json")?;
            let value: serde_json::Value = serde_json::from_str(text).map_err(Error::from)?;
            apply_overrides(&RefineConfig::default(), Some(&value))?
        };
        let (w, h) = s.0.crop_size();
        let set = ScribbleSet::from_points(w, h, &points(fg_xy, fg_count, "fg_xy")?, &points(bg_xy, bg_count, "bg_xy")?)?;
        s.0.refine(&set, &cfg)?;
        Ok(())
    })
}

/// Writes the image size.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn bifseg_session_image_size(session: *const BifsegSession, width: *mut usize, height: *mut usize) -> BifsegStatus {
    guard(|| {
        let s = session.as_ref().ok_or_else(|| null("session"))?;
        if width.is_null() || height.is_null() {
            return Err(null("size output"));
        }
        (*width, *height) = s.0.image_size();
        Ok(())
    })
}

/// Writes the box size, the frame scribble points are given in.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn bifseg_session_crop_size(session: *const BifsegSession, width: *mut usize, height: *mut usize) -> BifsegStatus {
    guard(|| {
        let s = session.as_ref().ok_or_else(|| null("session"))?;
        if width.is_null() || height.is_null() {
            return Err(null("size output"));
        }
        (*width, *height) = s.0.crop_size();
        Ok(())
    })
}

/// Copies the current full-image mask into `out`, which must hold
/// `width * height` bytes of the image.
///
/// # Safety
/// `out` must point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn bifseg_session_mask(session: *const BifsegSession, out: *mut u8, len: usize) -> BifsegStatus {
    guard(|| {
        let s = session.as_ref().ok_or_else(|| null("session"))?;
        let mask = s.0.final_labels();
        let labels = mask.labels();
        if len < labels.len() {
            return Err(Fail(BifsegStatus::BufferTooSmall, format!("mask needs {} bytes, got {len}", labels.len())));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        std::slice::from_raw_parts_mut(out, labels.len()).copy_from_slice(labels);
        Ok(())
    })
}

/// Rounds run so far, the initial segmentation included.
///
/// # Safety
/// `session` must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn bifseg_session_rounds(session: *const BifsegSession) -> usize {
    session.as_ref().map_or(0, |s| s.0.history().len())
}

/// Session diagnostics as a JSON string; free with [`bifseg_string_free`].
/// Returns null on failure.
///
/// # Safety
/// `session` must be valid.
#[no_mangle]
pub unsafe extern "C" fn bifseg_session_diagnostics(session: *const BifsegSession) -> *mut c_char {
    let mut result = ptr::null_mut();
    guard(|| {
        let s = session.as_ref().ok_or_else(|| null("session"))?;
        let text = s.0.diagnostics_json().to_string();
        result = CString::new(text).map_err(|e| Fail(BifsegStatus::InvalidArgument, e.to_string()))?.into_raw();
        Ok(())
    });
    result
}

/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn bifseg_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// # Safety
/// `session` must come from [`bifseg_session_create`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn bifseg_session_free(session: *mut BifsegSession) {
    if !session.is_null() {
        drop(Box::from_raw(session));
    }
}
