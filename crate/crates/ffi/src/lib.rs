//! C ABI over `flmm-core`.
//!
//! Every function returns an [`FlmmStatus`]. On failure the message is
//! available from [`flmm_last_error`] on the same thread until the next call.
//! Strings handed out by this library must be released with
//! [`flmm_string_free`]; pipelines with [`flmm_pipeline_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use flmm_core::datasets::rle_encode;
use flmm_core::decoder::BinaryMask;
use flmm_core::heads::{Heads, HeadsConfig};
use flmm_core::host::{ToyLmm, ToyLmmConfig};
use flmm_core::image::ImageArray;
use flmm_core::metrics::ciou;
use flmm_core::pipeline::Pipeline;
use flmm_core::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlmmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Contract = 3,
    Format = 4,
    Io = 5,
    EmptyMask = 6,
    BufferTooSmall = 7,
    Internal = 8,
}

/// A toy host model with its grounding heads.
pub struct FlmmPipeline {
    host: ToyLmm,
    heads: Heads,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> FlmmStatus {
    match e {
        Error::InvalidArgument(_) | Error::SequenceTooLong { .. } | Error::Precondition { .. } => FlmmStatus::InvalidArgument,
        Error::Contract(_) => FlmmStatus::Contract,
        Error::Format(_) | Error::Parse { .. } | Error::Image(_) => FlmmStatus::Format,
        Error::Io { .. } => FlmmStatus::Io,
        Error::EmptyMask => FlmmStatus::EmptyMask,
        Error::NonFiniteLoss { .. } => FlmmStatus::Internal,
    }
}

struct Fail(FlmmStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> FlmmStatus {
    set_error("");
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FlmmStatus::Ok,
        Ok(Err(Fail(s, m))) => {
            set_error(&m);
            s
        }
        Err(_) => {
            set_error("internal panic");
            FlmmStatus::Internal
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(FlmmStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(FlmmStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn image_arg(rgb8: *const u8, height: usize, width: usize) -> Result<ImageArray, Fail> {
    if rgb8.is_null() {
        return Err(null("image"));
    }
    let n = height
        .checked_mul(width)
        .and_then(|v| v.checked_mul(3))
        .ok_or_else(|| Fail(FlmmStatus::InvalidArgument, "image too large".into()))?;
    Ok(ImageArray::from_rgb8(height, width, std::slice::from_raw_parts(rgb8, n))?)
}

unsafe fn mask_arg(p: *const u8, height: usize, width: usize) -> Result<BinaryMask, Fail> {
    if p.is_null() {
        return Err(null("mask"));
    }
    let s = std::slice::from_raw_parts(p, height * width);
    Ok(BinaryMask::new(height, width, s.iter().map(|&v| v != 0).collect()))
}

unsafe fn put_string(out: *mut *mut c_char, s: String) -> Result<(), Fail> {
    let c = CString::new(s).map_err(|_| Fail(FlmmStatus::Internal, "string contains NUL".into()))?;
    *out = c.into_raw();
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn flmm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or an empty string.
/// Valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn flmm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads heads from a checkpoint file.
///
/// # Safety
/// `ckpt_path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn flmm_pipeline_open(ckpt_path: *const c_char, out: *mut *mut FlmmPipeline) -> FlmmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let heads = Heads::load(Path::new(str_arg(ckpt_path, "ckpt_path")?))?;
        let host = ToyLmm::new(heads.cfg.host.clone())?;
        *out = Box::into_raw(Box::new(FlmmPipeline { host, heads }));
        Ok(())
    })
}

/// Fresh, untrained desk-size heads over the default toy host.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn flmm_pipeline_new_untrained(seed: u64, out: *mut *mut FlmmPipeline) -> FlmmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = ToyLmmConfig::default();
        let heads = Heads::new(HeadsConfig::desk(cfg.clone(), seed)?)?;
        *out = Box::into_raw(Box::new(FlmmPipeline {
            host: ToyLmm::new(cfg)?,
            heads,
        }));
        Ok(())
    })
}

/// # Safety
/// `p` must come from this library and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn flmm_pipeline_free(p: *mut FlmmPipeline) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Segments `expression` in a row-major RGB8 image, writing `height · width`
/// bytes (0 or 1) to `mask_out`.
///
/// # Safety
/// `rgb8` must hold `3 · height · width` bytes, `mask_out` at least `mask_len`.
#[no_mangle]
pub unsafe extern "C" fn flmm_refer_segment(
    p: *const FlmmPipeline,
    rgb8: *const u8,
    height: usize,
    width: usize,
    expression: *const c_char,
    mask_out: *mut u8,
    mask_len: usize,
) -> FlmmStatus {
    guard(|| {
        let p = p.as_ref().ok_or_else(|| null("pipeline"))?;
        let img = image_arg(rgb8, height, width)?;
        let expr = str_arg(expression, "expression")?;
        if mask_out.is_null() {
            return Err(null("mask_out"));
        }
        if mask_len < height * width {
            return Err(Fail(
                FlmmStatus::BufferTooSmall,
                format!("mask buffer holds {mask_len} bytes, {} needed", height * width),
            ));
        }
        let g = Pipeline::new(&p.host, &p.heads).refer_segment(&img, expr, None)?;
        let out = std::slice::from_raw_parts_mut(mask_out, height * width);
        for (o, &b) in out.iter_mut().zip(&g.mask.data) {
            *o = b as u8;
        }
        Ok(())
    })
}

/// Grounds a conversation and returns the JSON record (dataset schema plus
/// `scores`). `answer` may be null to generate one.
///
/// # Safety
/// Pointers as in [`flmm_refer_segment`]; `json_out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn flmm_ground_json(
    p: *const FlmmPipeline,
    rgb8: *const u8,
    height: usize,
    width: usize,
    user_text: *const c_char,
    answer: *const c_char,
    json_out: *mut *mut c_char,
) -> FlmmStatus {
    guard(|| {
        let p = p.as_ref().ok_or_else(|| null("pipeline"))?;
        let img = image_arg(rgb8, height, width)?;
        let user = str_arg(user_text, "user_text")?;
        let answer = if answer.is_null() { None } else { Some(str_arg(answer, "answer")?) };
        if json_out.is_null() {
            return Err(null("json_out"));
        }
        let g = Pipeline::new(&p.host, &p.heads).ground_conversation(&img, user, answer, None)?;
        let json = g.to_json("ffi", flmm_core::datasets::ImageRef::inline(&img));
        put_string(json_out, json.to_string())
    })
}

/// Column-major RLE of a row-major 0/1 mask, as JSON `{"size": [h, w], "counts": [...]}`.
///
/// # Safety
/// `mask` must hold `height · width` bytes; `json_out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn flmm_rle_encode(mask: *const u8, height: usize, width: usize, json_out: *mut *mut c_char) -> FlmmStatus {
    guard(|| {
        let m = mask_arg(mask, height, width)?;
        if json_out.is_null() {
            return Err(null("json_out"));
        }
        let json = serde_json::to_string(&rle_encode(&m)).map_err(|e| Fail(FlmmStatus::Internal, e.to_string()))?;
        put_string(json_out, json)
    })
}

/// Cumulative IoU over `count` mask pairs stored back to back.
///
/// # Safety
/// `preds` and `gts` must each hold `count · height · width` bytes.
#[no_mangle]
pub unsafe extern "C" fn flmm_ciou(
    preds: *const u8,
    gts: *const u8,
    count: usize,
    height: usize,
    width: usize,
    out: *mut f64,
) -> FlmmStatus {
    guard(|| {
        if out.is_null() || preds.is_null() || gts.is_null() {
            return Err(null("preds, gts or out"));
        }
        let n = height * width;
        let mut pm = Vec::with_capacity(count);
        let mut gm = Vec::with_capacity(count);
        for i in 0..count {
            pm.push(mask_arg(preds.wrapping_add(i * n), height, width)?);
            gm.push(mask_arg(gts.wrapping_add(i * n), height, width)?);
        }
        let pairs: Vec<_> = pm.iter().zip(&gm).collect();
        *out = ciou(&pairs)?;
        Ok(())
    })
}

/// # Safety
/// `s` must come from this library and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn flmm_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
