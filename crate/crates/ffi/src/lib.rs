//! C interface to `ipn-core`.
//!
//! Datasets and models are opaque heap handles released with their
//! `*_free` function. Every fallible call returns an [`IpnStatus`]; on
//! failure, [`ipn_last_error_message`] describes the error for the calling
//! thread. Panics are caught at the boundary and reported as
//! `IPN_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use ipn_core::evaluation::{evaluate, harmonic, per_class_accuracy, Protocol};
use ipn_core::training::{fit, AblationVariant, Hyperparams, Model};
use ipn_core::{generate_synthetic, load_checkpoint, load_dataset, save_checkpoint, save_dataset};
use ipn_core::{Checkpoint, Dataset, Error, SyntheticSpec};

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IpnStatus {
    Ok = 0,
    /// Null pointer, bad UTF-8, or a value outside its domain.
    InvalidArgument = 1,
    Config = 2,
    Data = 3,
    Numeric = 4,
    Io = 5,
    Panic = 6,
}

/// Unseen classes only.
pub const IPN_PROTOCOL_ZSL: u32 = 0;
/// Seen and unseen classes.
pub const IPN_PROTOCOL_GZSL: u32 = 1;

/// Headline metrics of one evaluation. `acc_seen` and `harmonic` are only
/// meaningful when `has_seen` is true.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct IpnEvalSummary {
    pub acc_seen: f64,
    pub acc_unseen: f64,
    pub harmonic: f64,
    pub has_seen: bool,
}

pub struct IpnDataset(Dataset);

pub struct IpnModel {
    model: Model,
    epoch: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(err: &Error) -> IpnStatus {
    match err {
        Error::Config(_) | Error::Manifest(_) | Error::Json(_) => IpnStatus::Config,
        Error::Load(_) | Error::Sampling(_) | Error::Csv(_) => IpnStatus::Data,
        Error::Numeric(_) | Error::Degenerate(_) => IpnStatus::Numeric,
        Error::Io { .. } => IpnStatus::Io,
        Error::Dimension(_) | Error::Contract(_) => IpnStatus::InvalidArgument,
    }
}

enum Failure {
    Arg(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> IpnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => IpnStatus::Ok,
        Ok(Err(Failure::Arg(m))) => {
            set_error(&m);
            IpnStatus::InvalidArgument
        }
        Ok(Err(Failure::Core(e))) => {
            set_error(&e.to_string());
            status_of(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(&format!("panic: {msg}"));
            IpnStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::Arg(format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Arg(format!("{name} is not valid UTF-8")))
}

/// Optional string: null or empty means "use defaults".
unsafe fn opt_str_arg<'a>(p: *const c_char, name: &str) -> Result<Option<&'a str>, Failure> {
    if p.is_null() {
        return Ok(None);
    }
    let s = str_arg(p, name)?;
    Ok(if s.trim().is_empty() { None } else { Some(s) })
}

fn out_arg<T>(p: *mut T, name: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure::Arg(format!("{name} is null")))
    } else {
        Ok(())
    }
}

unsafe fn ref_arg<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| Failure::Arg(format!("{name} is null")))
}

fn protocol_arg(p: u32) -> Result<Protocol, Failure> {
    match p {
        IPN_PROTOCOL_ZSL => Ok(Protocol::Zsl),
        IPN_PROTOCOL_GZSL => Ok(Protocol::Gzsl),
        other => Err(Failure::Arg(format!("unknown protocol {other}"))),
    }
}

fn json_arg<T: serde::de::DeserializeOwned + Default>(s: Option<&str>) -> Result<T, Failure> {
    match s {
        None => Ok(T::default()),
        Some(s) => serde_json::from_str(s).map_err(|e| Failure::Core(Error::Config(e.to_string()))),
    }
}

/// Message of the last failed call on this thread; empty if none. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ipn_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ipn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a dataset directory.
///
/// # Safety
/// `dir` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ipn_dataset_load(dir: *const c_char, out: *mut *mut IpnDataset) -> IpnStatus {
    guard(|| {
        out_arg(out, "out")?;
        let dir = PathBuf::from(str_arg(dir, "dir")?);
        let ds = load_dataset(dir)?;
        *out = Box::into_raw(Box::new(IpnDataset(ds)));
        Ok(())
    })
}

/// Generates a synthetic dataset from a JSON spec; null or empty selects
/// the default spec.
///
/// # Safety
/// `spec_json` must be null or NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ipn_dataset_generate(spec_json: *const c_char, out: *mut *mut IpnDataset) -> IpnStatus {
    guard(|| {
        out_arg(out, "out")?;
        let spec: SyntheticSpec = json_arg(opt_str_arg(spec_json, "spec_json")?)?;
        let ds = generate_synthetic(&spec)?;
        *out = Box::into_raw(Box::new(IpnDataset(ds)));
        Ok(())
    })
}

/// # Safety
/// `ds` must come from this library; `dir` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn ipn_dataset_save(ds: *const IpnDataset, dir: *const c_char) -> IpnStatus {
    guard(|| {
        let ds = ref_arg(ds, "ds")?;
        save_dataset(&ds.0, str_arg(dir, "dir")?)?;
        Ok(())
    })
}

/// Number of classes, or 0 for a null handle.
///
/// # Safety
/// `ds` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn ipn_dataset_num_classes(ds: *const IpnDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.0.n_classes())
}

/// # Safety
/// `ds` must be null or come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ipn_dataset_free(ds: *mut IpnDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Trains a model. `hyperparams_json` may be null or empty for defaults
/// and may omit fields; `variant` may be null for the full model.
///
/// # Safety
/// `ds` must come from this library; strings must be null or
/// NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ipn_model_train(
    ds: *const IpnDataset,
    hyperparams_json: *const c_char,
    variant: *const c_char,
    out: *mut *mut IpnModel,
) -> IpnStatus {
    guard(|| {
        out_arg(out, "out")?;
        let ds = ref_arg(ds, "ds")?;
        let hp: Hyperparams = json_arg(opt_str_arg(hyperparams_json, "hyperparams_json")?)?;
        let variant: AblationVariant = match opt_str_arg(variant, "variant")? {
            Some(v) => v.parse()?,
            None => AblationVariant::Full,
        };
        let outcome = fit(&ds.0, &hp, variant, &mut |_, _| Ok(()))?;
        *out = Box::into_raw(Box::new(IpnModel {
            epoch: outcome.log.len(),
            model: outcome.model,
        }));
        Ok(())
    })
}

/// Loads a checkpoint directory.
///
/// # Safety
/// `dir` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ipn_model_load(dir: *const c_char, out: *mut *mut IpnModel) -> IpnStatus {
    guard(|| {
        out_arg(out, "out")?;
        let ck = load_checkpoint(str_arg(dir, "dir")?)?;
        *out = Box::into_raw(Box::new(IpnModel {
            model: ck.model,
            epoch: ck.epoch,
        }));
        Ok(())
    })
}

/// Writes a checkpoint directory (without optimiser state).
///
/// # Safety
/// `model` must come from this library; `dir` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn ipn_model_save(model: *const IpnModel, dir: *const c_char) -> IpnStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let ck = Checkpoint {
            model: m.model.clone(),
            epoch: m.epoch,
            optimizer: None,
        };
        save_checkpoint(&ck, str_arg(dir, "dir")?)?;
        Ok(())
    })
}

/// # Safety
/// `model` must be null or come from this library and not be used
/// afterwards.
#[no_mangle]
pub unsafe extern "C" fn ipn_model_free(model: *mut IpnModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Evaluates under `IPN_PROTOCOL_ZSL` or `IPN_PROTOCOL_GZSL`.
///
/// # Safety
/// Handles must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ipn_evaluate(
    model: *const IpnModel,
    ds: *const IpnDataset,
    protocol: u32,
    out: *mut IpnEvalSummary,
) -> IpnStatus {
    guard(|| {
        out_arg(out, "out")?;
        let m = ref_arg(model, "model")?;
        let ds = ref_arg(ds, "ds")?;
        let protocol = protocol_arg(protocol)?;
        ipn_core::checkpoint::check_compatible(&m.model, &ds.0)?;
        let r = evaluate(&m.model, &ds.0, protocol)?;
        *out = IpnEvalSummary {
            acc_seen: r.acc_seen.unwrap_or(0.0),
            acc_unseen: r.acc_unseen,
            harmonic: r.harmonic.unwrap_or(0.0),
            has_seen: r.acc_seen.is_some(),
        };
        Ok(())
    })
}

/// Full evaluation report as a JSON string, released with
/// [`ipn_string_free`].
///
/// # Safety
/// Handles must come from this library; `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ipn_evaluate_json(
    model: *const IpnModel,
    ds: *const IpnDataset,
    protocol: u32,
    out_json: *mut *mut c_char,
) -> IpnStatus {
    guard(|| {
        out_arg(out_json, "out_json")?;
        let m = ref_arg(model, "model")?;
        let ds = ref_arg(ds, "ds")?;
        let protocol = protocol_arg(protocol)?;
        ipn_core::checkpoint::check_compatible(&m.model, &ds.0)?;
        let r = evaluate(&m.model, &ds.0, protocol)?;
        let s = serde_json::to_string(&r).map_err(Error::from)?;
        *out_json = CString::new(s).map_err(|e| Failure::Arg(e.to_string()))?.into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` must be null or a string returned by this library.
#[no_mangle]
pub unsafe extern "C" fn ipn_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// `2·S·U / (S + U)`, or 0 when both are 0.
#[no_mangle]
pub extern "C" fn ipn_harmonic(acc_seen: f64, acc_unseen: f64) -> f64 {
    harmonic(acc_seen, acc_unseen)
}

/// Mean over `targets` of each class's accuracy on its own samples.
///
/// # Safety
/// `predictions` and `labels` must point to `n` readable values, `targets`
/// to `n_targets`; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ipn_per_class_accuracy(
    predictions: *const usize,
    labels: *const usize,
    n: usize,
    targets: *const usize,
    n_targets: usize,
    out: *mut f64,
) -> IpnStatus {
    guard(|| {
        out_arg(out, "out")?;
        let slice = |p: *const usize, len: usize, name: &str| -> Result<&[usize], Failure> {
            if len == 0 {
                Ok(&[])
            } else if p.is_null() {
                Err(Failure::Arg(format!("{name} is null")))
            } else {
                Ok(std::slice::from_raw_parts(p, len))
            }
        };
        let acc = per_class_accuracy(
            slice(predictions, n, "predictions")?,
            slice(labels, n, "labels")?,
            slice(targets, n_targets, "targets")?,
        )?;
        *out = acc;
        Ok(())
    })
}

