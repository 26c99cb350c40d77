//! C ABI for flowvip.
//!
//! Every fallible function returns an [`FvipStatus`]. On failure a
//! human-readable message is kept per thread and can be read with
//! [`fvip_last_error`]. Arrays are dense, row-major `f64` in channels-last
//! order: videos are `[frames, height, width, 3]`, masks are
//! `[frames, height, width]` with 1 marking a hole, flows are
//! `[frames - 1, height, width, 2]` as `(dx, dy)` pairs.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use flowvip::cli::RunConfig;
use flowvip::flowcomp::BidirectionalFlows;
use flowvip::metrics;
use flowvip::model::{load_generator, sliding_window_inference, Checkpoint, Generator};
use flowvip::{Error, Tensor};

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FvipStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Config = 4,
    Data = 5,
    Checkpoint = 6,
    Io = 7,
    NonFinite = 8,
    Internal = 9,
    Panic = 10,
}

/// A generator restored from a training checkpoint.
pub struct FvipModel {
    gen: Generator,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

struct Failure(FvipStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::ShapeMismatch { .. } | Error::InvalidShape { .. } => FvipStatus::Shape,
            Error::InvalidArgument(_) => FvipStatus::InvalidArgument,
            Error::NonFinite(_) => FvipStatus::NonFinite,
            Error::Config(_) => FvipStatus::Config,
            Error::Data(_) => FvipStatus::Data,
            Error::Checkpoint(_) => FvipStatus::Checkpoint,
            Error::Io { .. } => FvipStatus::Io,
            _ => FvipStatus::Internal,
        };
        Failure(status, e.to_string())
    }
}

fn set_last_error(msg: &str) {
    let text = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = text);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> FvipStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FvipStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_last_error(&format!("panic: {msg}"));
            FvipStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(FvipStatus::NullPointer, format!("{what} is null"))
}

fn product(dims: &[usize]) -> Result<usize, Failure> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Failure(FvipStatus::InvalidArgument, format!("dimensions {dims:?} overflow")))
}

/// Copy `len` values from `ptr` into a tensor of `shape`.
///
/// # Safety
/// `ptr` must be null or valid for `product(shape)` reads.
unsafe fn read_tensor(ptr: *const f64, shape: &[usize], what: &str) -> Result<Tensor, Failure> {
    if ptr.is_null() {
        return Err(null(what));
    }
    let n = product(shape)?;
    let data = std::slice::from_raw_parts(ptr, n).to_vec();
    Ok(Tensor::new(shape, data)?)
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fvip_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the most recent failure on the calling thread, or an empty
/// string. The pointer stays valid until the next failing call on the
/// same thread.
#[no_mangle]
pub extern "C" fn fvip_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Load a generator from a checkpoint written by `flowvip train`. The
/// model configuration is read from the configuration stored in the file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fvip_model_load(path: *const c_char, out: *mut *mut FvipModel) -> FvipStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        *out = std::ptr::null_mut();
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Failure(FvipStatus::InvalidArgument, "path is not UTF-8".into()))?;
        let ck = Checkpoint::load(Path::new(path))?;
        let cfg = RunConfig::resolve(Some(&ck.echo), &[])?;
        let gen = load_generator(&cfg.model, &ck)?;
        *out = Box::into_raw(Box::new(FvipModel { gen }));
        Ok(())
    })
}

/// Release a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`fvip_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fvip_model_free(model: *mut FvipModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Inpaint a whole video with the sliding-window schedule. Unmasked pixels
/// of `out` equal the input exactly.
///
/// # Safety
/// `frames` and `out` must hold `t*h*w*3` values, `masks` `t*h*w` values.
#[no_mangle]
pub unsafe extern "C" fn fvip_model_inpaint(
    model: *const FvipModel,
    frames: *const f64,
    masks: *const f64,
    t: usize,
    h: usize,
    w: usize,
    out: *mut f64,
) -> FvipStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let video = read_tensor(frames, &[t, h, w, 3], "frames")?;
        let masks = read_tensor(masks, &[t, h, w, 1], "masks")?;
        let result = sliding_window_inference(&model.gen, &video, &masks)?;
        std::slice::from_raw_parts_mut(out, result.data().len()).copy_from_slice(result.data());
        Ok(())
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Mean per-frame PSNR of two `[t, h, w, c]` videos in [0, 1].
///
/// # Safety
/// `a` and `b` must hold `t*h*w*c` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn fvip_psnr(
    a: *const f64,
    b: *const f64,
    t: usize,
    h: usize,
    w: usize,
    c: usize,
    out: *mut f64,
) -> FvipStatus {
    guard(|| {
        let shape = [t, h, w, c];
        let p = metrics::psnr(&read_tensor(a, &shape, "a")?, &read_tensor(b, &shape, "b")?)?;
        *out.as_mut().ok_or_else(|| null("out"))? = mean(&p);
        Ok(())
    })
}

/// Mean per-frame SSIM of two `[t, h, w, c]` videos; frames must be at
/// least 11x11.
///
/// # Safety
/// `a` and `b` must hold `t*h*w*c` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn fvip_ssim(
    a: *const f64,
    b: *const f64,
    t: usize,
    h: usize,
    w: usize,
    c: usize,
    out: *mut f64,
) -> FvipStatus {
    guard(|| {
        let shape = [t, h, w, c];
        let s = metrics::ssim(&read_tensor(a, &shape, "a")?, &read_tensor(b, &shape, "b")?)?;
        *out.as_mut().ok_or_else(|| null("out"))? = mean(&s);
        Ok(())
    })
}

/// Flow-warping error of a `[t, h, w, c]` video against full-resolution
/// forward and backward flows.
///
/// # Safety
/// `video` must hold `t*h*w*c` values, each flow `(t-1)*h*w*2` values;
/// `out` must be valid.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn fvip_warp_error(
    video: *const f64,
    t: usize,
    h: usize,
    w: usize,
    c: usize,
    forward: *const f64,
    backward: *const f64,
    occlusion_threshold: f64,
    out: *mut f64,
) -> FvipStatus {
    guard(|| {
        if t == 0 {
            return Err(Failure(FvipStatus::InvalidArgument, "video has no frames".into()));
        }
        let video = read_tensor(video, &[t, h, w, c], "video")?;
        let flow_shape = [t - 1, h, w, 2];
        let flows = BidirectionalFlows {
            forward: read_tensor(forward, &flow_shape, "forward")?,
            backward: read_tensor(backward, &flow_shape, "backward")?,
        };
        *out.as_mut().ok_or_else(|| null("out"))? = metrics::warp_error(&video, &flows, occlusion_threshold)?;
        Ok(())
    })
}
