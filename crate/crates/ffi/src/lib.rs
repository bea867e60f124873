//! C ABI over a trained generator checkpoint.
//!
//! Every function returns a [`Seg2eyeStatus`]. On failure a message is kept
//! per thread and can be read with [`seg2eye_last_error`]. Images are 8-bit
//! row-major buffers; masks hold class indices.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use seg2eye::losses::challenge_metric_u8;
use seg2eye::train::{Checkpoint, GanModels};
use seg2eye::{Error, GrayImage, SegMask, StyleCode};

/// Result codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Seg2eyeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Checkpoint = 4,
    Shape = 5,
    Panic = 6,
}

/// Opaque generator handle.
pub struct Seg2eyeGenerator {
    models: GanModels,
    resolution: usize,
    style_dim: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let msg = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

struct Failure(Seg2eyeStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } | Error::Image { .. } | Error::Json { .. } => Seg2eyeStatus::Io,
            Error::Checkpoint(_) => Seg2eyeStatus::Checkpoint,
            Error::Shape(_) => Seg2eyeStatus::Shape,
            _ => Seg2eyeStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(Seg2eyeStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> Seg2eyeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            Seg2eyeStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            Seg2eyeStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn handle<'a>(h: *const Seg2eyeGenerator) -> Result<&'a Seg2eyeGenerator, Failure> {
    h.as_ref().ok_or_else(|| null("generator"))
}

impl Seg2eyeGenerator {
    fn check_size(&self, height: usize, width: usize) -> Result<(), Failure> {
        if height != self.resolution || width != self.resolution {
            return Err(Failure(
                Seg2eyeStatus::Shape,
                format!("expected {0}x{0} inputs, got {height}x{width}", self.resolution),
            ));
        }
        Ok(())
    }
}

/// Message of the last failure on this thread, empty after a success. The
/// pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn seg2eye_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Load a generator checkpoint. On success `*out` owns a handle that must be
/// released with `seg2eye_generator_free`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn seg2eye_generator_load(path: *const c_char, out: *mut *mut Seg2eyeGenerator) -> Seg2eyeStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Failure(Seg2eyeStatus::InvalidArgument, "path is not UTF-8".into()))?;
        let ck = Checkpoint::load(Path::new(path))?;
        let models = GanModels::from_checkpoint(&ck)?;
        let g = Seg2eyeGenerator { resolution: ck.model.resolution, style_dim: ck.model.style_dim, models };
        *out = Box::into_raw(Box::new(g));
        Ok(())
    })
}

/// Release a handle. Null is ignored.
///
/// # Safety
/// `generator` must come from `seg2eye_generator_load` and not be used again.
#[no_mangle]
pub unsafe extern "C" fn seg2eye_generator_free(generator: *mut Seg2eyeGenerator) {
    if !generator.is_null() {
        drop(Box::from_raw(generator));
    }
}

/// Image side length the generator works at.
///
/// # Safety
/// `generator` must be a live handle or null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn seg2eye_generator_resolution(generator: *const Seg2eyeGenerator) -> usize {
    generator.as_ref().map_or(0, |g| g.resolution)
}

/// Length of a style code.
///
/// # Safety
/// `generator` must be a live handle or null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn seg2eye_generator_style_dim(generator: *const Seg2eyeGenerator) -> usize {
    generator.as_ref().map_or(0, |g| g.style_dim)
}

/// Aggregated style code of `count` images stored back to back in `pixels`.
///
/// # Safety
/// `pixels` must hold `count * height * width` bytes and `code` `code_len` floats.
#[no_mangle]
pub unsafe extern "C" fn seg2eye_encode_style(
    generator: *const Seg2eyeGenerator,
    pixels: *const u8,
    count: usize,
    height: usize,
    width: usize,
    code: *mut f32,
    code_len: usize,
) -> Seg2eyeStatus {
    guard(|| {
        let g = handle(generator)?;
        g.check_size(height, width)?;
        if count == 0 {
            return Err(Failure(Seg2eyeStatus::InvalidArgument, "at least one style image is required".into()));
        }
        if code_len != g.style_dim {
            return Err(Failure(Seg2eyeStatus::Shape, format!("code buffer holds {code_len}, style code has {}", g.style_dim)));
        }
        if code.is_null() {
            return Err(null("code"));
        }
        let pixels = slice(pixels, count * height * width, "pixels")?;
        let images = pixels
            .chunks(height * width)
            .map(|p| GrayImage::from_u8(height, width, p))
            .collect::<Result<Vec<_>, _>>()?;
        let s = g.models.style_code(&images.iter().collect::<Vec<_>>())?;
        std::slice::from_raw_parts_mut(code, code_len).copy_from_slice(s.values());
        Ok(())
    })
}

/// Generate an image for `mask` and a style code, writing `height * width`
/// bytes to `out_pixels`.
///
/// # Safety
/// `mask` must hold `height * width` bytes, `code` `code_len` floats and
/// `out_pixels` `height * width` bytes.
#[no_mangle]
pub unsafe extern "C" fn seg2eye_generate(
    generator: *const Seg2eyeGenerator,
    mask: *const u8,
    height: usize,
    width: usize,
    code: *const f32,
    code_len: usize,
    out_pixels: *mut u8,
) -> Seg2eyeStatus {
    guard(|| {
        let g = handle(generator)?;
        g.check_size(height, width)?;
        if code_len != g.style_dim {
            return Err(Failure(Seg2eyeStatus::Shape, format!("code has {code_len} values, expected {}", g.style_dim)));
        }
        if out_pixels.is_null() {
            return Err(null("out_pixels"));
        }
        let mask = SegMask::new(height, width, slice(mask, height * width, "mask")?.to_vec())?;
        let code = StyleCode(slice(code, code_len, "code")?.to_vec());
        let img = g.models.generator.generate(&mask, &code)?;
        std::slice::from_raw_parts_mut(out_pixels, height * width).copy_from_slice(&img.to_u8());
        Ok(())
    })
}

/// Challenge metric of two 8-bit images: `sqrt(sum of squared differences) / (height * width)`.
///
/// # Safety
/// `a` and `b` must hold `height * width` bytes and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn seg2eye_challenge_metric(
    a: *const u8,
    b: *const u8,
    height: usize,
    width: usize,
    out: *mut f64,
) -> Seg2eyeStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if height == 0 || width == 0 {
            return Err(Failure(Seg2eyeStatus::InvalidArgument, "images must not be empty".into()));
        }
        let a = slice(a, height * width, "a")?;
        let b = slice(b, height * width, "b")?;
        *out = challenge_metric_u8(a, b, height, width);
        Ok(())
    })
}
