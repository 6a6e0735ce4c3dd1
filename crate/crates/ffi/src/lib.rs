//! C ABI over the adiabatic replay scholar.
//!
//! Every call returns an [`ArStatus`]; on failure the message is kept per
//! thread and can be read with [`ar_last_error`]. Scholars are opaque
//! handles created by `ar_scholar_new` or `ar_scholar_load` and released
//! with `ar_scholar_free`. Images are row-major `float` arrays with values in
//! `[0, 1]`, labels are `uint32_t`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use ar_core::datasets::{ImageSet, LabelSet, Labeled};
use ar_core::sampler::{generate_variants, SamplerConfig};
use ar_core::scholar::{ReplayPlan, Scholar, ScholarConfig};
use ar_core::Error;

/// Result code of every exported function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    NotInitialized = 4,
    DimensionMismatch = 5,
    Numerical = 6,
    /// A Rust panic was caught at the boundary.
    Internal = 7,
}

/// Opaque scholar handle.
pub struct ArScholar {
    inner: Scholar,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let c = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> ArStatus {
    match e {
        Error::IoFailure { .. }
        | Error::WrongMagic { .. }
        | Error::TruncatedPayload { .. }
        | Error::Checkpoint(_) => ArStatus::Io,
        Error::NotInitialized => ArStatus::NotInitialized,
        Error::DimensionMismatch { .. } | Error::LengthMismatch { .. } => {
            ArStatus::DimensionMismatch
        }
        Error::NonFiniteGradient => ArStatus::Numerical,
        _ => ArStatus::InvalidArgument,
    }
}

struct Fail(ArStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(ArStatus::NullPointer, format!("{what} is NULL"))
}

/// Runs `f`, converting errors and panics into a status plus message.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> ArStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ArStatus::Ok,
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal error: {msg}"));
            ArStatus::Internal
        }
    }
}

unsafe fn handle<'a>(h: *const ArScholar) -> Result<&'a ArScholar, Fail> {
    h.as_ref().ok_or_else(|| null("scholar"))
}

unsafe fn handle_mut<'a>(h: *mut ArScholar) -> Result<&'a mut ArScholar, Fail> {
    h.as_mut().ok_or_else(|| null("scholar"))
}

unsafe fn path_arg(p: *const c_char) -> Result<String, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(str::to_owned)
        .map_err(|_| Fail(ArStatus::InvalidArgument, "path is not UTF-8".into()))
}

unsafe fn images_arg(data: *const f32, n: usize, dim: usize) -> Result<ImageSet, Fail> {
    if data.is_null() {
        return Err(null("images"));
    }
    let len = n
        .checked_mul(dim)
        .ok_or_else(|| Fail(ArStatus::InvalidArgument, "n * dim overflows".into()))?;
    Ok(ImageSet::new(
        std::slice::from_raw_parts(data, len).to_vec(),
        dim,
    )?)
}

unsafe fn labeled_arg(
    s: &Scholar,
    images: *const f32,
    labels: *const u32,
    n: usize,
) -> Result<Labeled, Fail> {
    if labels.is_null() {
        return Err(null("labels"));
    }
    let x = images_arg(images, n, s.dim())?;
    let y = std::slice::from_raw_parts(labels, n)
        .iter()
        .map(|&v| v as usize)
        .collect();
    Ok(Labeled::new(x, LabelSet::new(y, Some(s.num_classes()))?)?)
}

/// Message of the last failed call on this thread, or NULL. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ar_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn ar_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates an untrained scholar with `k` components (a perfect square) and
/// otherwise default settings.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn ar_scholar_new(
    k: usize,
    dim: usize,
    num_classes: usize,
    seed: u64,
    out: *mut *mut ArScholar,
) -> ArStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let config = ScholarConfig {
            k,
            seed,
            ..ScholarConfig::default()
        };
        let inner = Scholar::new(config, dim, num_classes)?;
        *out = Box::into_raw(Box::new(ArScholar { inner }));
        Ok(())
    })
}

/// Overrides the epoch budgets of the first task and of replay stages.
///
/// # Safety
/// `h` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn ar_scholar_set_epochs(
    h: *mut ArScholar,
    initial_epochs: usize,
    replay_epochs: usize,
) -> ArStatus {
    guard(|| {
        let s = handle_mut(h)?;
        let mut config = s.inner.config().clone();
        config.initial_epochs = initial_epochs;
        config.replay_epochs = replay_epochs;
        config.validate()?;
        if s.inner.is_initialized() {
            return Err(Fail(
                ArStatus::InvalidArgument,
                "settings are frozen after the first fit".into(),
            ));
        }
        s.inner = Scholar::new(config, s.inner.dim(), s.inner.num_classes())?;
        Ok(())
    })
}

/// Loads a checkpoint written by `ar_scholar_save` or the `ar` tool.
///
/// # Safety
/// `path` must be a NUL-terminated string, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ar_scholar_load(
    path: *const c_char,
    out: *mut *mut ArScholar,
) -> ArStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = Scholar::load(path_arg(path)?)?;
        *out = Box::into_raw(Box::new(ArScholar { inner }));
        Ok(())
    })
}

/// # Safety
/// `h` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ar_scholar_save(h: *const ArScholar, path: *const c_char) -> ArStatus {
    guard(|| {
        let s = handle(h)?;
        s.inner.save(path_arg(path)?)?;
        Ok(())
    })
}

/// Releases a handle. NULL is ignored.
///
/// # Safety
/// `h` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ar_scholar_free(h: *mut ArScholar) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// # Safety
/// `h` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn ar_scholar_dim(h: *const ArScholar) -> usize {
    h.as_ref().map_or(0, |s| s.inner.dim())
}

/// # Safety
/// `h` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn ar_scholar_k(h: *const ArScholar) -> usize {
    h.as_ref().map_or(0, |s| s.inner.k())
}

/// Fits the first task: `n` images of `dim` floats with their labels.
///
/// # Safety
/// `images` must hold `n * dim` floats and `labels` `n` values.
#[no_mangle]
pub unsafe extern "C" fn ar_scholar_initial_fit(
    h: *mut ArScholar,
    images: *const f32,
    labels: *const u32,
    n: usize,
) -> ArStatus {
    guard(|| {
        let s = handle_mut(h)?;
        let task = labeled_arg(&s.inner, images, labels, n)?;
        s.inner.initial_fit(&task)?;
        Ok(())
    })
}

/// Learns a new task with constant-time replay. `generated` (may be NULL)
/// receives the number of replayed variants.
///
/// # Safety
/// As for `ar_scholar_initial_fit`; `generated` is NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn ar_scholar_update(
    h: *mut ArScholar,
    images: *const f32,
    labels: *const u32,
    n: usize,
    generated: *mut usize,
) -> ArStatus {
    guard(|| {
        let s = handle_mut(h)?;
        let task = labeled_arg(&s.inner, images, labels, n)?;
        let plan = ReplayPlan::constant_time(s.inner.config().batch_size);
        let log = s.inner.adiabatic_update(&task, &plan)?;
        if let Some(g) = generated.as_mut() {
            *g = log.generated;
        }
        Ok(())
    })
}

/// Predicts a label for each of `n` images into `out`.
///
/// # Safety
/// `images` must hold `n * dim` floats, `out` room for `n` labels.
#[no_mangle]
pub unsafe extern "C" fn ar_scholar_classify(
    h: *const ArScholar,
    images: *const f32,
    n: usize,
    out: *mut u32,
) -> ArStatus {
    guard(|| {
        let s = handle(h)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let x = images_arg(images, n, s.inner.dim())?;
        let pred = s.inner.classify_batch(&x)?;
        let out = std::slice::from_raw_parts_mut(out, n);
        for (o, p) in out.iter_mut().zip(pred) {
            *o = p as u32;
        }
        Ok(())
    })
}

/// Mean negative log-likelihood of `n` images under the mixture.
///
/// # Safety
/// `images` must hold `n * dim` floats, `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ar_scholar_mean_nll(
    h: *const ArScholar,
    images: *const f32,
    n: usize,
    out: *mut f64,
) -> ArStatus {
    guard(|| {
        let s = handle(h)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let x = images_arg(images, n, s.inner.dim())?;
        *out = s.inner.gmm()?.batch_loss(&x)?;
        Ok(())
    })
}

/// Draws `per_query` variants for each of `n` queries into `out`, grouped by
/// query (`n * per_query * dim` floats).
///
/// # Safety
/// `queries` must hold `n * dim` floats and `out` room for the variants.
#[no_mangle]
pub unsafe extern "C" fn ar_scholar_generate(
    h: *const ArScholar,
    queries: *const f32,
    n: usize,
    per_query: usize,
    seed: u64,
    out: *mut f32,
) -> ArStatus {
    guard(|| {
        let s = handle(h)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let q = images_arg(queries, n, s.inner.dim())?;
        let cfg = SamplerConfig {
            s: s.inner.config().top_s,
            rho: s.inner.config().rho,
            seed,
        };
        let v = generate_variants(s.inner.gmm()?, &q, &cfg, per_query)?;
        std::slice::from_raw_parts_mut(out, v.as_slice().len()).copy_from_slice(v.as_slice());
        Ok(())
    })
}
