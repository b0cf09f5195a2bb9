//! C ABI over the `sitl` estimators.
//!
//! Objects cross the boundary as opaque handles that the caller frees with
//! the matching `*_free` function. Every fallible call returns a
//! [`SitlStatus`]; on failure, [`sitl_last_error`] describes the problem for
//! the calling thread. Panics never unwind into foreign code.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use sitl::cohort::{load_cohort, Cohort};
use sitl::cqr::exchange::{export_estimator, import_estimator};
use sitl::cqr::{bases_for, default_knots, fit_sequential, CoefficientSurface, IpmOptions, QuantileGrid};
use sitl::sitl::{sitl_estimate, Kernel, SitlConfig, SitlFit};
use sitl::surface::{CoefficientFunction, DEFAULT_DENSE_POINTS};
use sitl::Error;

/// Result codes. The positive codes match the command-line exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SitlStatus {
    Ok = 0,
    /// Unreadable or malformed input file or estimator document.
    Input = 2,
    /// Invalid configuration, argument or domain.
    Config = 3,
    /// Not enough data, degenerate data or solver failure.
    Fit = 4,
    /// A required pointer argument was null.
    NullArgument = 10,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 11,
    /// Internal error; the library caught a panic.
    Internal = 12,
}

/// Similarity kernel selector for [`sitl_transfer`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SitlKernel {
    Gaussian = 0,
    Uniform = 1,
}

/// A censored cohort loaded from the two CSV tables.
pub struct SitlCohort(Cohort);

/// A baseline coefficient surface (the shareable estimator).
pub struct SitlEstimator(CoefficientSurface);

/// A fitted transfer estimate.
pub struct SitlTransfer(SitlFit);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> SitlStatus {
    match e.exit_code() {
        2 => SitlStatus::Input,
        3 => SitlStatus::Config,
        _ => SitlStatus::Fit,
    }
}

struct Failure(SitlStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SitlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            SitlStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal error");
            SitlStatus::Internal
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(SitlStatus::NullArgument, format!("`{name}` is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(SitlStatus::InvalidUtf8, format!("`{name}` is not UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| Failure(SitlStatus::NullArgument, format!("`{name}` is null")))
}

fn out_arg<T>(p: *mut T, name: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure(SitlStatus::NullArgument, format!("`{name}` is null")))
    } else {
        Ok(())
    }
}

fn evaluate(f: &dyn CoefficientFunction, predictor: usize, tau: f64, s: f64) -> Result<f64, Failure> {
    if predictor >= f.q() {
        return Err(Failure(
            SitlStatus::Config,
            format!("predictor {predictor} out of range (q = {})", f.q()),
        ));
    }
    let j = f.quantile_grid().index_of(tau)?;
    Ok(f.values_at(predictor, j, &[s])?[0])
}

/// Message for the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn sitl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sitl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a cohort from its observation and functional CSV files.
///
/// # Safety
/// String arguments must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sitl_cohort_load(
    observations: *const c_char,
    functional: *const c_char,
    label: *const c_char,
    out: *mut *mut SitlCohort,
) -> SitlStatus {
    guard(|| {
        out_arg(out, "out")?;
        let obs = str_arg(observations, "observations")?;
        let fun = str_arg(functional, "functional")?;
        let label = str_arg(label, "label")?;
        let cohort = load_cohort(Path::new(obs), Path::new(fun), label)?;
        *out = Box::into_raw(Box::new(SitlCohort(cohort)));
        Ok(())
    })
}

/// Number of subjects and functional predictors.
///
/// # Safety
/// `cohort` must come from [`sitl_cohort_load`]; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn sitl_cohort_shape(
    cohort: *const SitlCohort,
    subjects: *mut usize,
    predictors: *mut usize,
) -> SitlStatus {
    guard(|| {
        let c = &ref_arg(cohort, "cohort")?.0;
        out_arg(subjects, "subjects")?;
        out_arg(predictors, "predictors")?;
        *subjects = c.n();
        *predictors = c.q();
        Ok(())
    })
}

/// # Safety
/// `cohort` must be null or come from [`sitl_cohort_load`], freed once.
#[no_mangle]
pub unsafe extern "C" fn sitl_cohort_free(cohort: *mut SitlCohort) {
    if !cohort.is_null() {
        drop(Box::from_raw(cohort));
    }
}

/// Fits the baseline estimator on the grid `tau_step, 2 tau_step, ..., tau_max`
/// with cubic splines. `knots == 0` picks the size-based default.
///
/// # Safety
/// `cohort` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sitl_fit_baseline(
    cohort: *const SitlCohort,
    tau_max: f64,
    tau_step: f64,
    knots: usize,
    out: *mut *mut SitlEstimator,
) -> SitlStatus {
    guard(|| {
        out_arg(out, "out")?;
        let c = &ref_arg(cohort, "cohort")?.0;
        let grid = QuantileGrid::build(tau_max, tau_step)?;
        let knots = if knots == 0 { default_knots(c.n()) } else { knots };
        let bases = bases_for(c, 4, knots)?;
        let fit = fit_sequential(c, &bases, &grid, &IpmOptions::default())?;
        *out = Box::into_raw(Box::new(SitlEstimator(fit)));
        Ok(())
    })
}

/// Parses an estimator exchange document (`len` bytes, no NUL needed).
///
/// # Safety
/// `bytes` must point to `len` readable bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sitl_estimator_import(
    bytes: *const u8,
    len: usize,
    out: *mut *mut SitlEstimator,
) -> SitlStatus {
    guard(|| {
        out_arg(out, "out")?;
        if bytes.is_null() {
            return Err(Failure(SitlStatus::NullArgument, "`bytes` is null".into()));
        }
        let fit = import_estimator(std::slice::from_raw_parts(bytes, len))?;
        *out = Box::into_raw(Box::new(SitlEstimator(fit)));
        Ok(())
    })
}

/// Serializes an estimator to its exchange document. The returned buffer is
/// NUL-terminated, `len` excludes the NUL, and it must be released with
/// [`sitl_string_free`].
///
/// # Safety
/// `estimator` must be a live handle; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn sitl_estimator_export(
    estimator: *const SitlEstimator,
    out: *mut *mut c_char,
    len: *mut usize,
) -> SitlStatus {
    guard(|| {
        let e = &ref_arg(estimator, "estimator")?.0;
        out_arg(out, "out")?;
        out_arg(len, "len")?;
        let doc = CString::new(export_estimator(e))
            .map_err(|_| Failure(SitlStatus::Internal, "document contains NUL".into()))?;
        *len = doc.as_bytes().len();
        *out = doc.into_raw();
        Ok(())
    })
}

/// Coefficient `alpha_d(s, tau)` of an estimator; `predictor` is 0-based and
/// `tau` must be a grid level.
///
/// # Safety
/// `estimator` must be a live handle; `value` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sitl_estimator_alpha(
    estimator: *const SitlEstimator,
    predictor: usize,
    tau: f64,
    s: f64,
    value: *mut f64,
) -> SitlStatus {
    guard(|| {
        let e = &ref_arg(estimator, "estimator")?.0;
        out_arg(value, "value")?;
        *value = evaluate(e, predictor, tau, s)?;
        Ok(())
    })
}

/// # Safety
/// `estimator` must be null or a handle from this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn sitl_estimator_free(estimator: *mut SitlEstimator) {
    if !estimator.is_null() {
        drop(Box::from_raw(estimator));
    }
}

/// # Safety
/// `s` must be null or come from [`sitl_estimator_export`], freed once.
#[no_mangle]
pub unsafe extern "C" fn sitl_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Runs the transfer estimate of `target` from `count` source estimators.
/// `bandwidth <= 0` picks the default; `seed` drives the half split.
///
/// # Safety
/// `sources` must point to `count` live estimator handles; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn sitl_transfer(
    target: *const SitlCohort,
    sources: *const *const SitlEstimator,
    count: usize,
    kernel: SitlKernel,
    bandwidth: f64,
    seed: u64,
    out: *mut *mut SitlTransfer,
) -> SitlStatus {
    guard(|| {
        out_arg(out, "out")?;
        let t = &ref_arg(target, "target")?.0;
        if count > 0 && sources.is_null() {
            return Err(Failure(SitlStatus::NullArgument, "`sources` is null".into()));
        }
        let handles = if count == 0 {
            &[][..]
        } else {
            std::slice::from_raw_parts(sources, count)
        };
        let fits = handles
            .iter()
            .map(|h| ref_arg(*h, "sources[k]").map(|e| e.0.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        let config = SitlConfig {
            order: 4,
            knots: None,
            eta_knots: None,
            bandwidth: (bandwidth > 0.0).then_some(bandwidth),
            kernel: match kernel {
                SitlKernel::Gaussian => Kernel::Gaussian,
                SitlKernel::Uniform => Kernel::Uniform,
            },
            dense_points: DEFAULT_DENSE_POINTS,
            split_seed: seed,
        };
        let fit = sitl_estimate(t, &fits, &config, &IpmOptions::default())?;
        *out = Box::into_raw(Box::new(SitlTransfer(fit)));
        Ok(())
    })
}

/// Writes the normalized source weights into `weights[0..capacity]`, and
/// the actual count into `count`. Fails with `Config` if `capacity` is too
/// small (after still setting `count`).
///
/// # Safety
/// `fit` must be a live handle; `weights` must hold `capacity` doubles.
#[no_mangle]
pub unsafe extern "C" fn sitl_transfer_weights(
    fit: *const SitlTransfer,
    weights: *mut f64,
    capacity: usize,
    count: *mut usize,
) -> SitlStatus {
    guard(|| {
        let f = &ref_arg(fit, "fit")?.0;
        out_arg(count, "count")?;
        let w = f.report.normalized_weights();
        *count = w.len();
        if capacity < w.len() {
            return Err(Failure(
                SitlStatus::Config,
                format!("need room for {} weights, got {capacity}", w.len()),
            ));
        }
        out_arg(weights, "weights")?;
        ptr::copy_nonoverlapping(w.as_ptr(), weights, w.len());
        Ok(())
    })
}

/// Whether every source was uninformative and the fit fell back to the
/// target alone.
///
/// # Safety
/// `fit` must be a live handle; `fallback` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sitl_transfer_fallback(
    fit: *const SitlTransfer,
    fallback: *mut bool,
) -> SitlStatus {
    guard(|| {
        let f = &ref_arg(fit, "fit")?.0;
        out_arg(fallback, "fallback")?;
        *fallback = f.fallback;
        Ok(())
    })
}

/// Final coefficient `alpha_d(s, tau)` (transfer plus debias).
///
/// # Safety
/// `fit` must be a live handle; `value` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sitl_transfer_alpha(
    fit: *const SitlTransfer,
    predictor: usize,
    tau: f64,
    s: f64,
    value: *mut f64,
) -> SitlStatus {
    guard(|| {
        let f = &ref_arg(fit, "fit")?.0;
        out_arg(value, "value")?;
        *value = evaluate(&f.combined, predictor, tau, s)?;
        Ok(())
    })
}

/// # Safety
/// `fit` must be null or a handle from [`sitl_transfer`], freed once.
#[no_mangle]
pub unsafe extern "C" fn sitl_transfer_free(fit: *mut SitlTransfer) {
    if !fit.is_null() {
        drop(Box::from_raw(fit));
    }
}
