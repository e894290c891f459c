//! C ABI over `sfa-core`.
//!
//! Models are opaque `SfaModel` handles owned by the caller and released
//! with `sfa_model_free`. Every fallible call returns an `SfaStatus`; on
//! failure `sfa_last_error` describes the most recent error on the calling
//! thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use sfa_core::checkpoint::{surgery_from_checkpoint, Checkpoint, CheckpointMeta, HeadPolicy};
use sfa_core::data::center_pixels;
use sfa_core::model::cost::estimate_cost;
use sfa_core::model::{init_store, FEModel, FEModelConfig, Mode};
use sfa_core::tensor::{Graph, Tensor};
use sfa_core::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SfaStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Shape = 5,
    Surgery = 6,
    Panic = 7,
    Internal = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SfaMode {
    Baseline = 0,
    Sfa = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SfaHeadPolicy {
    Copy = 0,
    Reinit = 1,
}

/// Per-step training cost of one configuration.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct SfaCost {
    pub fwd_flops: u64,
    pub bwd_flops: u64,
    pub activation_bytes: u64,
    pub param_bytes: u64,
    pub optimizer_bytes: u64,
    pub gradient_bytes: u64,
    pub training_bytes: u64,
}

/// Opaque model handle: an architecture plus its parameters.
pub struct SfaModel {
    ckpt: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn status_of(e: &Error) -> SfaStatus {
    match e {
        Error::Io { .. } => SfaStatus::Io,
        Error::BadMagic(_)
        | Error::UnsupportedVersion(_)
        | Error::Truncated(_)
        | Error::LengthMismatch { .. }
        | Error::UnknownGroup(_)
        | Error::BadMeta(_) => SfaStatus::Format,
        Error::ShapeMismatch { .. } | Error::InvalidShape { .. } | Error::FrameMismatch(_) => SfaStatus::Shape,
        Error::Surgery(_) | Error::MissingGroup(_) | Error::MissingParam(_) => SfaStatus::Surgery,
        Error::Config(_) => SfaStatus::InvalidArgument,
        _ => SfaStatus::Internal,
    }
}

enum Fail {
    Status(SfaStatus, String),
    Core(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

fn null(what: &str) -> Fail {
    Fail::Status(SfaStatus::NullArgument, format!("`{what}` is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SfaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            SfaStatus::Ok
        }
        Ok(Err(Fail::Status(s, msg))) => {
            set_error(msg);
            s
        }
        Ok(Err(Fail::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic");
            SfaStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Status(SfaStatus::InvalidArgument, format!("`{what}` is not UTF-8")))
}

unsafe fn model_arg<'a>(p: *const SfaModel) -> Result<&'a SfaModel, Fail> {
    p.as_ref().ok_or_else(|| null("model"))
}

unsafe fn emit(out: *mut *mut SfaModel, ckpt: Checkpoint) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(SfaModel { ckpt }));
    Ok(())
}

fn mode_of(m: SfaMode) -> Mode {
    match m {
        SfaMode::Baseline => Mode::Baseline,
        SfaMode::Sfa => Mode::Sfa,
    }
}

/// Message for the last failed call on this thread, or null. The pointer
/// stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn sfa_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Freshly initialized model from a named preset (`desk`, `B`, `L`, `H`,
/// `g`) at `frames` frames.
///
/// # Safety
/// `preset` must be a valid C string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sfa_model_new(
    preset: *const c_char,
    mode: SfaMode,
    frames: usize,
    seed: u64,
    out: *mut *mut SfaModel,
) -> SfaStatus {
    guard(|| {
        let cfg = FEModelConfig::preset(str_arg(preset, "preset")?)?.with_frames(frames);
        cfg.validate()?;
        let store = init_store::<f32>(&cfg, mode_of(mode), seed)?;
        emit(out, Checkpoint::from_store(&store, CheckpointMeta::new(cfg, "init", 0.0, seed)))
    })
}

/// Load an SFAV1 checkpoint file.
///
/// # Safety
/// `path` must be a valid C string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sfa_model_load(path: *const c_char, out: *mut *mut SfaModel) -> SfaStatus {
    guard(|| emit(out, Checkpoint::read_file(str_arg(path, "path")?)?))
}

/// Decode an SFAV1 checkpoint held in memory.
///
/// # Safety
/// `bytes` must point to `len` readable bytes and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sfa_model_load_bytes(
    bytes: *const u8,
    len: usize,
    out: *mut *mut SfaModel,
) -> SfaStatus {
    guard(|| {
        if bytes.is_null() {
            return Err(null("bytes"));
        }
        emit(out, Checkpoint::from_bytes(std::slice::from_raw_parts(bytes, len))?)
    })
}

/// Write the model as an SFAV1 checkpoint file.
///
/// # Safety
/// `model` must be a live handle and `path` a valid C string.
#[no_mangle]
pub unsafe extern "C" fn sfa_model_save(model: *const SfaModel, path: *const c_char) -> SfaStatus {
    guard(|| Ok(model_arg(model)?.ckpt.write_file(str_arg(path, "path")?)?))
}

/// Release a handle. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sfa_model_free(model: *mut SfaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Clip length, class count and parameter count of a model.
///
/// # Safety
/// `model` must be a live handle; each out pointer may be null.
#[no_mangle]
pub unsafe extern "C" fn sfa_model_shape(
    model: *const SfaModel,
    frames: *mut usize,
    classes: *mut usize,
    params: *mut usize,
) -> SfaStatus {
    guard(|| {
        let m = model_arg(model)?;
        let cfg = &m.ckpt.meta.config;
        for (p, v) in [(frames, cfg.num_frames), (classes, cfg.num_classes), (params, m.ckpt.store.numel())] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Stage-2 model from a Stage-1 model: spatial stage copied, temporal
/// positions resampled to `frames`, identity adapter added.
///
/// # Safety
/// `stage1` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sfa_model_surgery(
    stage1: *const SfaModel,
    frames: usize,
    head: SfaHeadPolicy,
    seed: u64,
    out: *mut *mut SfaModel,
) -> SfaStatus {
    guard(|| {
        let src = &model_arg(stage1)?.ckpt;
        let target = src.meta.config.clone().with_frames(frames);
        let policy = match head {
            SfaHeadPolicy::Copy => HeadPolicy::Copy,
            SfaHeadPolicy::Reinit => HeadPolicy::Reinit,
        };
        let store = surgery_from_checkpoint::<f32>(src, &target, policy, seed)?;
        let meta = CheckpointMeta::new(target, "surgery", 0.0, src.meta.dataset_seed);
        emit(out, Checkpoint::from_store(&store, meta))
    })
}

/// Logits for `batch` clips.
///
/// `video` holds `batch * frames * image_size * image_size * channels`
/// pixel values in `[0, 1]`, laid out `[batch, frames, height, width,
/// channels]`. `logits` receives `batch * classes` values.
///
/// # Safety
/// `model` must be a live handle, `video` must point to `video_len`
/// floats and `logits` to `logits_len` writable floats.
#[no_mangle]
pub unsafe extern "C" fn sfa_model_forward(
    model: *const SfaModel,
    mode: SfaMode,
    video: *const f32,
    video_len: usize,
    batch: usize,
    logits: *mut f32,
    logits_len: usize,
) -> SfaStatus {
    guard(|| {
        let m = model_arg(model)?;
        if video.is_null() {
            return Err(null("video"));
        }
        if logits.is_null() {
            return Err(null("logits"));
        }
        let cfg = &m.ckpt.meta.config;
        let shape = [batch, cfg.num_frames, cfg.image_size, cfg.image_size, cfg.channels];
        let want: usize = shape.iter().product();
        if video_len != want || logits_len != batch * cfg.num_classes {
            return Err(Fail::Status(
                SfaStatus::Shape,
                format!(
                    "expected {want} pixels and {} logits, got {video_len} and {logits_len}",
                    batch * cfg.num_classes
                ),
            ));
        }
        let x = Tensor::new(&shape, std::slice::from_raw_parts(video, video_len).to_vec())?;
        let model = FEModel::new(cfg, &m.ckpt.store);
        let y = model.forward(&Graph::inference(), &center_pixels(&x), mode_of(mode))?;
        std::slice::from_raw_parts_mut(logits, logits_len).copy_from_slice(y.data());
        Ok(())
    })
}

/// Training cost of one step of a named preset at `frames` frames.
///
/// # Safety
/// `preset` must be a valid C string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sfa_cost_estimate(
    preset: *const c_char,
    mode: SfaMode,
    frames: usize,
    local_batch: usize,
    bytes_per_value: usize,
    out: *mut SfaCost,
) -> SfaStatus {
    guard(|| {
        let cfg = FEModelConfig::preset(str_arg(preset, "preset")?)?;
        if out.is_null() {
            return Err(null("out"));
        }
        if frames == 0 || local_batch == 0 || bytes_per_value == 0 {
            return Err(Fail::Status(
                SfaStatus::InvalidArgument,
                "frames, local_batch and bytes_per_value must be positive".into(),
            ));
        }
        let c = estimate_cost(&cfg, mode_of(mode), frames, local_batch, bytes_per_value);
        *out = SfaCost {
            fwd_flops: c.fwd_flops,
            bwd_flops: c.bwd_flops,
            activation_bytes: c.activation_bytes,
            param_bytes: c.param_bytes,
            optimizer_bytes: c.optimizer_bytes,
            gradient_bytes: c.gradient_bytes,
            training_bytes: c.training_bytes(),
        };
        Ok(())
    })
}
