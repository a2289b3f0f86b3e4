//! C ABI over the detector: load a checkpoint, embed waveforms, compute metrics.
//!
//! Every entry point returns an [`FteasdStatus`]. On failure the message is kept
//! per thread and read back with [`fteasd_last_error`]. Panics never cross the
//! boundary; they surface as `FTEASD_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use fteasd::metrics::{self, PAUC_MAX_FPR};
use fteasd::{checkpoint, Detector, Error};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FteasdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Numeric = 5,
    Dimension = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

/// Opaque handle to a loaded model.
pub struct FteasdModel {
    det: Detector,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> FteasdStatus {
    match e {
        Error::Dimension(_) => FteasdStatus::Dimension,
        Error::Argument(_) | Error::Config(_) | Error::State(_) => FteasdStatus::InvalidArgument,
        Error::Numeric(_) => FteasdStatus::Numeric,
        Error::Format(_) | Error::Wav { .. } => FteasdStatus::Format,
        Error::Io { .. } => FteasdStatus::Io,
    }
}

struct Fail(FteasdStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> FteasdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            FteasdStatus::Ok
        }
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("panic inside fteasd".into());
            FteasdStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(FteasdStatus::NullPointer, format!("{what} is null"))
}

/// `ptr` may be null only when `len` is 0.
unsafe fn slice<'a>(ptr: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `cap`). Returns the full message length without the NUL.
///
/// # Safety
/// `buf` must be null or point to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn fteasd_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && cap > 0 {
            let n = msg.len().min(cap - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Loads a checkpoint. On success `*out` owns a handle freed by [`fteasd_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fteasd_model_load(path: *const c_char, out: *mut *mut FteasdModel) -> FteasdStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        *out = std::ptr::null_mut();
        let p = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Fail(FteasdStatus::InvalidArgument, "path is not UTF-8".into()))?;
        let det = checkpoint::load(Path::new(p))?;
        *out = Box::into_raw(Box::new(FteasdModel { det }));
        Ok(())
    })
}

/// Frees a handle; null is a no-op.
///
/// # Safety
/// `model` must come from [`fteasd_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fteasd_model_free(model: *mut FteasdModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Writes the embedding length to `*dim`.
///
/// # Safety
/// `model` must be a live handle and `dim` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fteasd_model_embedding_dim(model: *const FteasdModel, dim: *mut usize) -> FteasdStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        *dim.as_mut().ok_or_else(|| null("dim"))? = m.det.embedding_dim();
        Ok(())
    })
}

/// Writes the sample rate the model expects to `*rate`.
///
/// # Safety
/// `model` must be a live handle and `rate` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fteasd_model_sample_rate(model: *const FteasdModel, rate: *mut u32) -> FteasdStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        *rate.as_mut().ok_or_else(|| null("rate"))? = m.det.config.audio.sample_rate;
        Ok(())
    })
}

/// Embeds one mono waveform at the model's sample rate. The clip is repeated
/// or cut to the configured length first. `out` receives `out_len` values,
/// which must be at least the embedding length.
///
/// # Safety
/// `model` must be a live handle not used concurrently; `samples` must hold
/// `n_samples` values and `out` `out_len` writable values.
#[no_mangle]
pub unsafe extern "C" fn fteasd_model_embed(
    model: *mut FteasdModel,
    samples: *const f64,
    n_samples: usize,
    out: *mut f64,
    out_len: usize,
) -> FteasdStatus {
    guard(|| {
        let m = model.as_mut().ok_or_else(|| null("model"))?;
        let x = slice(samples, n_samples, "samples")?;
        let dim = m.det.embedding_dim();
        if out.is_null() {
            return Err(null("out"));
        }
        if out_len < dim {
            return Err(Fail(
                FteasdStatus::BufferTooSmall,
                format!("output holds {out_len} values, embedding needs {dim}"),
            ));
        }
        let f = m.det.features_of(x)?;
        let e = m.det.embed(&[&f])?;
        std::ptr::copy_nonoverlapping(e[0].as_ptr(), out, dim);
        Ok(())
    })
}

/// Mann-Whitney AUC of positive (anomalous) over negative (normal) scores.
///
/// # Safety
/// `pos` and `neg` must hold `n_pos` and `n_neg` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn fteasd_auc(
    pos: *const f64,
    n_pos: usize,
    neg: *const f64,
    n_neg: usize,
    out: *mut f64,
) -> FteasdStatus {
    guard(|| {
        let o = out.as_mut().ok_or_else(|| null("out"))?;
        *o = metrics::auc(slice(pos, n_pos, "pos")?, slice(neg, n_neg, "neg")?)?;
        Ok(())
    })
}

/// Standardized partial AUC over false-positive rates up to `max_fpr`; pass a
/// non-positive value for the default of 0.1.
///
/// # Safety
/// As for [`fteasd_auc`].
#[no_mangle]
pub unsafe extern "C" fn fteasd_pauc(
    pos: *const f64,
    n_pos: usize,
    neg: *const f64,
    n_neg: usize,
    max_fpr: f64,
    out: *mut f64,
) -> FteasdStatus {
    guard(|| {
        let o = out.as_mut().ok_or_else(|| null("out"))?;
        let p = if max_fpr > 0.0 { max_fpr } else { PAUC_MAX_FPR };
        *o = metrics::pauc(slice(pos, n_pos, "pos")?, slice(neg, n_neg, "neg")?, p)?;
        Ok(())
    })
}

/// Harmonic mean of `n` non-negative values.
///
/// # Safety
/// `values` must hold `n` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn fteasd_harmonic_mean(values: *const f64, n: usize, out: *mut f64) -> FteasdStatus {
    guard(|| {
        let o = out.as_mut().ok_or_else(|| null("out"))?;
        *o = metrics::harmonic_mean(slice(values, n, "values")?)?;
        Ok(())
    })
}
