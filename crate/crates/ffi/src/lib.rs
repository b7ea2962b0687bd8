//! C interface over the `prevmatch` crate.
//!
//! Objects cross the boundary as opaque pointers (`PvmConfig`, `PvmRun`)
//! that the caller releases with the matching `*_free` function. Every
//! fallible call returns a [`PvmStatus`]; on failure the message is kept per
//! thread and read with [`pvm_last_error_message`]. Strings returned to the
//! caller are released with [`pvm_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use prevmatch::config::{parse_config, TrainConfig};
use prevmatch::metrics::history_to_csv;
use prevmatch::model::SegModel;
use prevmatch::trainer::{fit, make_run_splits, RunSummary};
use prevmatch::{argmax_channels, Error, Tensor};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PvmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Config = 3,
    InvalidArgument = 4,
    Io = 5,
    Format = 6,
    Aborted = 7,
    Panic = 8,
}

/// Training configuration.
pub struct PvmConfig(TrainConfig);

/// A finished training run: final model, history and summary.
pub struct PvmRun {
    config: TrainConfig,
    model: SegModel,
    history_csv: String,
    summary: RunSummary,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> PvmStatus {
    match e {
        Error::Config { .. } => PvmStatus::Config,
        Error::Io { .. } => PvmStatus::Io,
        Error::Format(_) | Error::Malformed { .. } => PvmStatus::Format,
        Error::Aborted { .. } | Error::NonFinite { .. } => PvmStatus::Aborted,
        _ => PvmStatus::InvalidArgument,
    }
}

/// Runs `f`, converting errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), (PvmStatus, String)>) -> PvmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PvmStatus::Ok,
        Ok(Err((status, msg))) => {
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
            PvmStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (PvmStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (PvmStatus, String) {
    (PvmStatus::NullPointer, format!("{what} is null"))
}

unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, (PvmStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (PvmStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, (PvmStatus, String)> {
    p.as_ref().ok_or_else(|| null(what))
}

fn to_c_string(s: &str) -> *mut c_char {
    CString::new(s).map_or(ptr::null_mut(), CString::into_raw)
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn pvm_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned by this library.
///
/// # Safety
/// `s` must be null or a pointer returned by this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn pvm_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// A config holding every default.
#[no_mangle]
pub extern "C" fn pvm_config_default() -> *mut PvmConfig {
    Box::into_raw(Box::new(PvmConfig(TrainConfig::default())))
}

/// Parses `key = value` text over the defaults.
///
/// # Safety
/// `text` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pvm_config_parse(text: *const c_char, out: *mut *mut PvmConfig) -> PvmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = parse_config(read_str(text, "text")?).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(PvmConfig(cfg)));
        Ok(())
    })
}

/// Sets one key; the config is left unchanged if the result is invalid.
///
/// # Safety
/// `cfg` must come from this library; `key` and `value` nul-terminated.
#[no_mangle]
pub unsafe extern "C" fn pvm_config_set(cfg: *mut PvmConfig, key: *const c_char, value: *const c_char) -> PvmStatus {
    guard(|| {
        let cfg = cfg.as_mut().ok_or_else(|| null("cfg"))?;
        let (key, value) = (read_str(key, "key")?, read_str(value, "value")?);
        let mut next = cfg.0.clone();
        next.set(key, value).map_err(|m| {
            (PvmStatus::Config, format!("key `{key}`: {m}"))
        })?;
        next.validate().map_err(lib_err)?;
        cfg.0 = next;
        Ok(())
    })
}

/// The full effective config as text; free with [`pvm_string_free`].
///
/// # Safety
/// `cfg` must come from this library.
#[no_mangle]
pub unsafe extern "C" fn pvm_config_echo(cfg: *const PvmConfig) -> *mut c_char {
    cfg.as_ref().map_or(ptr::null_mut(), |c| to_c_string(&c.0.echo()))
}

/// # Safety
/// `cfg` must be null or come from this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn pvm_config_free(cfg: *mut PvmConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Generates the data and trains every configured epoch.
///
/// # Safety
/// `cfg` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pvm_train(cfg: *const PvmConfig, out: *mut *mut PvmRun) -> PvmStatus {
    guard(|| {
        let cfg = &deref(cfg, "cfg")?.0;
        if out.is_null() {
            return Err(null("out"));
        }
        let splits = make_run_splits(cfg).map_err(lib_err)?;
        let fitted = fit(cfg, &splits).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(PvmRun {
            config: cfg.clone(),
            history_csv: history_to_csv(&fitted.history, cfg.classes),
            model: fitted.model,
            summary: fitted.summary,
        }));
        Ok(())
    })
}

/// # Safety
/// `run` must be null or come from this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn pvm_run_free(run: *mut PvmRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Test mIoU, shifted-test mIoU and their difference.
///
/// # Safety
/// `run` must come from this library; outputs may be null to skip them.
#[no_mangle]
pub unsafe extern "C" fn pvm_run_scores(
    run: *const PvmRun,
    test_miou: *mut f64,
    shifted_miou: *mut f64,
    gap: *mut f64,
) -> PvmStatus {
    guard(|| {
        let s = &deref(run, "run")?.summary;
        for (p, v) in [(test_miou, s.test_miou), (shifted_miou, s.shifted_miou), (gap, s.delta)] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Number of epochs the run trained.
///
/// # Safety
/// `run` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn pvm_run_epochs(run: *const PvmRun) -> u32 {
    run.as_ref().map_or(0, |r| r.summary.epochs)
}

/// The metrics history as CSV text; free with [`pvm_string_free`].
///
/// # Safety
/// `run` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn pvm_run_history_csv(run: *const PvmRun) -> *mut c_char {
    run.as_ref().map_or(ptr::null_mut(), |r| to_c_string(&r.history_csv))
}

/// Per-pixel class labels for a `[batch, channels, height, width]` input in
/// row-major order. `labels` must hold `batch * height * width` entries.
///
/// # Safety
/// `input` must point to `batch * channels * height * width` doubles and
/// `labels` to `labels_len` writable entries.
#[no_mangle]
pub unsafe extern "C" fn pvm_run_predict(
    run: *const PvmRun,
    input: *const f64,
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    labels: *mut u32,
    labels_len: usize,
) -> PvmStatus {
    guard(|| {
        let run = deref(run, "run")?;
        if input.is_null() || labels.is_null() {
            return Err(null("input or labels"));
        }
        let want = batch * height * width;
        if labels_len != want {
            return Err((
                PvmStatus::InvalidArgument,
                format!("labels buffer holds {labels_len}, need {want}"),
            ));
        }
        let n = batch * channels * height * width;
        let x = Tensor::new(vec![batch, channels, height, width], std::slice::from_raw_parts(input, n).to_vec())
            .map_err(lib_err)?;
        let logits = run.model.predict(&x).map_err(lib_err)?;
        let (pred, _) = argmax_channels(&logits).map_err(lib_err)?;
        std::slice::from_raw_parts_mut(labels, want).copy_from_slice(pred.data());
        Ok(())
    })
}

/// Number of classes the run's model predicts.
///
/// # Safety
/// `run` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn pvm_run_num_classes(run: *const PvmRun) -> usize {
    run.as_ref().map_or(0, |r| r.config.classes)
}
