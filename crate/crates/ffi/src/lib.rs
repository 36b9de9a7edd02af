//! C ABI over `tdnn_forge` models.
//!
//! Models are opaque handles. Every fallible call returns a
//! [`TdnnForgeStatus`]; on failure a message is stored per thread and can be
//! read with [`tdnn_forge_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use tdnn_forge::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use tdnn_forge::config::{preset, ArchitectureConfig, Scale};
use tdnn_forge::numerics::Tensor;
use tdnn_forge::tdnn::{build_tdnn, tdnn_forward, TdnnModel};
use tdnn_forge::training::TrainState;
use tdnn_forge::Error;

/// Result of a fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TdnnForgeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Dimension = 4,
    Numeric = 5,
    Io = 6,
    Format = 7,
    Panic = 8,
}

/// Opaque model handle.
pub struct TdnnForgeModel {
    config: ArchitectureConfig,
    model: TdnnModel,
    state: TrainState,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn clear_last_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

struct Failure(TdnnForgeStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Dimension(_) | Error::Geometry(_) => TdnnForgeStatus::Dimension,
            Error::Numeric(_) => TdnnForgeStatus::Numeric,
            Error::Usage(_) | Error::Input(_) => TdnnForgeStatus::InvalidArgument,
            Error::Spec(_) | Error::Config(_) => TdnnForgeStatus::Config,
            Error::Format { .. } => TdnnForgeStatus::Format,
            Error::Io(_) => TdnnForgeStatus::Io,
        };
        Failure(code, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(TdnnForgeStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(TdnnForgeStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> TdnnForgeStatus {
    clear_last_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => TdnnForgeStatus::Ok,
        Ok(Err(Failure(code, msg))) => {
            set_last_error(msg);
            code
        }
        Err(_) => {
            set_last_error("internal panic");
            TdnnForgeStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("{what} is not UTF-8")))
}

fn parse_scale(s: &str) -> Result<Option<Scale>, Failure> {
    match s {
        "" => Ok(None),
        "tiny" => Ok(Some(Scale::Tiny)),
        "desk" => Ok(Some(Scale::Desk)),
        "paper" => Ok(Some(Scale::Paper)),
        _ => Err(invalid(format!("unknown scale '{s}' (tiny, desk, paper)"))),
    }
}

fn build(config: ArchitectureConfig, seed: u64) -> Result<Box<TdnnForgeModel>, Failure> {
    config.validate()?;
    let model = build_tdnn(&config.tdnn_spec(), seed)?;
    let state = TrainState::new(&config.training);
    Ok(Box::new(TdnnForgeModel { config, model, state }))
}

unsafe fn emit(out: *mut *mut TdnnForgeModel, m: Box<TdnnForgeModel>) {
    *out = Box::into_raw(m);
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call on the same thread.
#[no_mangle]
pub extern "C" fn tdnn_forge_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Builds a preset model. `scale` is "tiny", "desk", "paper" or null/"" for
/// the preset as published.
///
/// # Safety
/// `name` and `scale` must be null or NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tdnn_forge_model_from_preset(
    name: *const c_char,
    scale: *const c_char,
    seed: u64,
    out: *mut *mut TdnnForgeModel,
) -> TdnnForgeStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let name = str_arg(name, "name")?;
        let scale = if scale.is_null() { None } else { parse_scale(str_arg(scale, "scale")?)? };
        let p = preset(name).ok_or_else(|| invalid(format!("unknown preset '{name}'")))?;
        let config = match scale {
            Some(s) => p.config.scaled(s),
            None => p.config,
        };
        emit(out, build(config, seed)?);
        Ok(())
    })
}

/// Builds a model from an architecture config in JSON.
///
/// # Safety
/// `json` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tdnn_forge_model_from_json(
    json: *const c_char,
    seed: u64,
    out: *mut *mut TdnnForgeModel,
) -> TdnnForgeStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let config = ArchitectureConfig::from_json(str_arg(json, "json")?)?;
        emit(out, build(config, seed)?);
        Ok(())
    })
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tdnn_forge_model_load(path: *const c_char, out: *mut *mut TdnnForgeModel) -> TdnnForgeStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let ck = load_checkpoint(Path::new(str_arg(path, "path")?))?;
        let model = ck.model()?;
        emit(out, Box::new(TdnnForgeModel { config: ck.config, model, state: ck.state }));
        Ok(())
    })
}

/// Writes the model as a checkpoint file.
///
/// # Safety
/// `model` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn tdnn_forge_model_save(model: *const TdnnForgeModel, path: *const c_char) -> TdnnForgeStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let path = str_arg(path, "path")?;
        save_checkpoint(Path::new(path), &Checkpoint::capture(&m.config, &m.model, &m.state))?;
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn tdnn_forge_model_free(model: *mut TdnnForgeModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Stored scalar count; 0 for null.
///
/// # Safety
/// `model` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn tdnn_forge_model_param_count(model: *const TdnnForgeModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.param_count())
}

/// FC layers on the longest path, output layer included; 0 for null.
///
/// # Safety
/// `model` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn tdnn_forge_model_depth(model: *const TdnnForgeModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.layer_depth())
}

/// Output classes; 0 for null.
///
/// # Safety
/// `model` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn tdnn_forge_model_out_dim(model: *const TdnnForgeModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.spec().out_dim)
}

/// Feature dimension per frame; 0 for null.
///
/// # Safety
/// `model` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn tdnn_forge_model_feat_dim(model: *const TdnnForgeModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.spec().window.feat_dim)
}

/// Logits for every frame of a `[n_frames, feat_dim]` row-major sequence,
/// with edge padding at the ends. Writes `n_frames * out_dim` values.
///
/// # Safety
/// `frames` must hold `n_frames * feat_dim` values and `logits` must have
/// room for `logits_len` values.
#[no_mangle]
pub unsafe extern "C" fn tdnn_forge_model_forward(
    model: *const TdnnForgeModel,
    frames: *const f64,
    n_frames: usize,
    feat_dim: usize,
    logits: *mut f64,
    logits_len: usize,
) -> TdnnForgeStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if frames.is_null() {
            return Err(null("frames"));
        }
        if logits.is_null() {
            return Err(null("logits"));
        }
        let spec = m.model.spec();
        if feat_dim != spec.window.feat_dim {
            return Err(Failure(
                TdnnForgeStatus::Dimension,
                format!("feat_dim {feat_dim} does not match the model's {}", spec.window.feat_dim),
            ));
        }
        let n_in = n_frames.checked_mul(feat_dim).ok_or_else(|| invalid("frame buffer size overflows"))?;
        let need = n_frames.checked_mul(spec.out_dim).ok_or_else(|| invalid("logit buffer size overflows"))?;
        if logits_len < need {
            return Err(Failure(TdnnForgeStatus::Dimension, format!("logits holds {logits_len} values, need {need}")));
        }
        let input = std::slice::from_raw_parts(frames, n_in).to_vec();
        let seq = Tensor::new(vec![n_frames, feat_dim], input)?;
        let (out, _) = tdnn_forward(&m.model, &spec.window.windows(&seq)?)?;
        std::slice::from_raw_parts_mut(logits, need).copy_from_slice(out.data());
        Ok(())
    })
}
