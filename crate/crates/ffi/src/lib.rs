//! C ABI for encoding and decoding videos with a trained checkpoint.
//!
//! Handles are opaque and owned by the caller once returned; release them
//! with the matching `*_free`. Every fallible call returns a [`DvaStatus`]
//! and, on failure, stores a message readable with [`dva_last_error`] on the
//! calling thread. Frames cross the boundary as `N x 3 x H x W` f32 in
//! `[-1, 1]`, row-major.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use candle_core::{DType, Device, Tensor};
use dva_core::error::DvaError;
use dva_core::nets::Model;
use dva_core::pipeline::{self, SwapKind, VideoLatentBundle};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DvaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Shape = 4,
    Step = 5,
    NonFinite = 6,
    Unavailable = 7,
    Parse = 8,
    Io = 9,
    Tensor = 10,
    BufferSize = 11,
    Panic = 12,
}

/// Which factor [`dva_swap`] takes from the second video.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DvaSwapKind {
    Identity = 0,
    Motion = 1,
    Background = 2,
}

/// A loaded checkpoint.
pub struct DvaModel {
    model: Model,
}

/// The latents of one encoded video.
pub struct DvaBundle {
    bundle: VideoLatentBundle,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

struct Failure(DvaStatus, String);

impl From<DvaError> for Failure {
    fn from(e: DvaError) -> Self {
        let status = match &e {
            DvaError::Config(_) => DvaStatus::Config,
            DvaError::Shape(_) => DvaStatus::Shape,
            DvaError::Step(_) => DvaStatus::Step,
            DvaError::NonFinite(_) => DvaStatus::NonFinite,
            DvaError::Unavailable(_) => DvaStatus::Unavailable,
            DvaError::Parse { .. } => DvaStatus::Parse,
            DvaError::Io { .. } => DvaStatus::Io,
            DvaError::Tensor(_) => DvaStatus::Tensor,
        };
        Failure(status, e.to_string())
    }
}

impl From<candle_core::Error> for Failure {
    fn from(e: candle_core::Error) -> Self {
        Failure(DvaStatus::Tensor, e.to_string())
    }
}

fn fail(status: DvaStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DvaStatus {
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<&str>()
            .map(|s| s.to_string())
            .or_else(|| p.downcast_ref::<String>().cloned())
            .unwrap_or_else(|| "panic".into());
        Err(Failure(DvaStatus::Panic, msg))
    });
    match outcome {
        Ok(()) => {
            LAST_ERROR.with(|e| e.borrow_mut().clear());
            DvaStatus::Ok
        }
        Err(Failure(status, msg)) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = msg);
            status
        }
    }
}

unsafe fn as_ref<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| fail(DvaStatus::NullPointer, format!("{name} is null")))
}

unsafe fn path_arg(p: *const c_char, name: &str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(fail(DvaStatus::NullPointer, format!("{name} is null")));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(DvaStatus::InvalidArgument, format!("{name} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn write_out<T>(out: *mut T, value: T, name: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(fail(DvaStatus::NullPointer, format!("{name} is null")));
    }
    out.write(value);
    Ok(())
}

fn frame_len(model: &Model, n: usize) -> usize {
    let s = model.config().image_size;
    n * 3 * s * s
}

unsafe fn copy_frames(frames: &Tensor, out: *mut f32, len: usize) -> Result<(), Failure> {
    if out.is_null() {
        return Err(fail(DvaStatus::NullPointer, "out is null"));
    }
    let data = frames
        .to_dtype(DType::F32)?
        .flatten_all()?
        .to_vec1::<f32>()?;
    if data.len() != len {
        return Err(fail(
            DvaStatus::BufferSize,
            format!("output holds {len} floats, decode produced {}", data.len()),
        ));
    }
    std::ptr::copy_nonoverlapping(data.as_ptr(), out, len);
    Ok(())
}

/// Copies the last error of this thread, NUL-terminated and truncated to
/// `capacity`, into `buf`. Returns the byte length needed for the full
/// message including the terminator; `buf` may be null to query it.
///
/// # Safety
/// `buf` must be null or valid for `capacity` bytes.
#[no_mangle]
pub unsafe extern "C" fn dva_last_error(buf: *mut c_char, capacity: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && capacity > 0 {
            let n = bytes.len().min(capacity - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        bytes.len() + 1
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dva_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Loads a checkpoint written by `dva train`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn dva_model_load(path: *const c_char, out: *mut *mut DvaModel) -> DvaStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        let (model, _) = Model::load(&path)?;
        write_out(out, Box::into_raw(Box::new(DvaModel { model })), "out")
    })
}

/// # Safety
/// `model` must be null or a handle from [`dva_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dva_model_free(model: *mut DvaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Side length of the square frames the model works on.
///
/// # Safety
/// `model` must be a live handle; `out` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn dva_model_image_size(
    model: *const DvaModel,
    out: *mut usize,
) -> DvaStatus {
    guard(|| {
        let m = as_ref(model, "model")?;
        write_out(out, m.model.config().image_size, "out")
    })
}

/// Encodes `num_frames` frames with `steps` deterministic inversion steps.
///
/// # Safety
/// `frames` must hold `num_frames * 3 * size * size` floats; `out` must be
/// valid for a write.
#[no_mangle]
pub unsafe extern "C" fn dva_encode(
    model: *const DvaModel,
    frames: *const f32,
    num_frames: usize,
    steps: usize,
    out: *mut *mut DvaBundle,
) -> DvaStatus {
    guard(|| {
        let m = &as_ref(model, "model")?.model;
        if frames.is_null() {
            return Err(fail(DvaStatus::NullPointer, "frames is null"));
        }
        if num_frames == 0 {
            return Err(fail(DvaStatus::InvalidArgument, "num_frames is zero"));
        }
        let size = m.config().image_size;
        let data = std::slice::from_raw_parts(frames, frame_len(m, num_frames));
        let t = Tensor::from_slice(data, (num_frames, 3, size, size), &Device::Cpu)?;
        let bundle = pipeline::encode_video(m, &t, steps)?;
        write_out(out, Box::into_raw(Box::new(DvaBundle { bundle })), "out")
    })
}

/// # Safety
/// `bundle` must be null or a live bundle handle.
#[no_mangle]
pub unsafe extern "C" fn dva_bundle_free(bundle: *mut DvaBundle) {
    if !bundle.is_null() {
        drop(Box::from_raw(bundle));
    }
}

/// # Safety
/// `bundle` must be a live handle; `out` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn dva_bundle_num_frames(
    bundle: *const DvaBundle,
    out: *mut usize,
) -> DvaStatus {
    guard(|| {
        let n = as_ref(bundle, "bundle")?.bundle.num_frames()?;
        write_out(out, n, "out")
    })
}

/// Writes the bundle into directory `dir`.
///
/// # Safety
/// `bundle` must be a live handle; `dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn dva_bundle_write(
    bundle: *const DvaBundle,
    dir: *const c_char,
) -> DvaStatus {
    guard(|| {
        let b = as_ref(bundle, "bundle")?;
        b.bundle.write(&path_arg(dir, "dir")?)?;
        Ok(())
    })
}

/// Reads a bundle written by [`dva_bundle_write`] or `dva encode`.
///
/// # Safety
/// `dir` must be a NUL-terminated string; `out` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn dva_bundle_read(
    dir: *const c_char,
    out: *mut *mut DvaBundle,
) -> DvaStatus {
    guard(|| {
        let bundle = VideoLatentBundle::read(&path_arg(dir, "dir")?)?;
        write_out(out, Box::into_raw(Box::new(DvaBundle { bundle })), "out")
    })
}

/// Decodes the bundle into `out`, which must hold exactly
/// `num_frames * 3 * size * size` floats.
///
/// # Safety
/// Handles must be live; `out` valid for `len` floats.
#[no_mangle]
pub unsafe extern "C" fn dva_decode(
    model: *const DvaModel,
    bundle: *const DvaBundle,
    out: *mut f32,
    len: usize,
) -> DvaStatus {
    guard(|| {
        let m = &as_ref(model, "model")?.model;
        let b = &as_ref(bundle, "bundle")?.bundle;
        copy_frames(&pipeline::decode_video(m, b, None)?, out, len)
    })
}

/// Decodes with fresh noise maps drawn from `seed` in place of the encoded ones.
///
/// # Safety
/// As [`dva_decode`].
#[no_mangle]
pub unsafe extern "C" fn dva_decode_random_noise(
    model: *const DvaModel,
    bundle: *const DvaBundle,
    seed: u64,
    out: *mut f32,
    len: usize,
) -> DvaStatus {
    guard(|| {
        let m = &as_ref(model, "model")?.model;
        let b = &as_ref(bundle, "bundle")?.bundle;
        copy_frames(&pipeline::decode_with_random_noise(m, b, seed)?, out, len)
    })
}

/// Decodes video `a` with one factor taken from video `b`. The output has
/// the frame count of `a` (identity swap) or of either (motion and
/// background swaps require equal counts).
///
/// # Safety
/// As [`dva_decode`].
#[no_mangle]
pub unsafe extern "C" fn dva_swap(
    model: *const DvaModel,
    a: *const DvaBundle,
    b: *const DvaBundle,
    which: DvaSwapKind,
    out: *mut f32,
    len: usize,
) -> DvaStatus {
    guard(|| {
        let m = &as_ref(model, "model")?.model;
        let a = &as_ref(a, "a")?.bundle;
        let b = &as_ref(b, "b")?.bundle;
        let kind = match which {
            DvaSwapKind::Identity => SwapKind::Identity,
            DvaSwapKind::Motion => SwapKind::Motion,
            DvaSwapKind::Background => SwapKind::Background,
        };
        copy_frames(&pipeline::swap_features(m, a, b, kind)?, out, len)
    })
}
