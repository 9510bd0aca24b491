//! C ABI over the `hmoe` library.
//!
//! Objects cross the boundary as opaque handles created by `hmoe_*_new` style
//! functions and released with the matching `*_free`. Every fallible call
//! returns an [`HmoeStatus`]; on failure the message is available from
//! [`hmoe_last_error`] on the same thread until the next call.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use hmoe::data::{sample, Dataset, InputLaw};
use hmoe::estimation::{fit_mle, FitConfig};
use hmoe::metrics;
use hmoe::model::{GatingCombo, MeasureFile};
use hmoe::polysys::{search_nontrivial, PolySystem, SearchConfig};
use hmoe::quadrature::QuadSpec;
use hmoe::ratelab::default_truth;
use hmoe::HmoeError;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HmoeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    InvalidModel = 3,
    FitFailed = 4,
    QuadratureError = 5,
    UnsupportedCellSize = 6,
    ConfigError = 7,
    IoError = 8,
    Panic = 9,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HmoeCombo {
    Ss = 0,
    Sl = 1,
    Ll = 2,
}

impl From<HmoeCombo> for GatingCombo {
    fn from(c: HmoeCombo) -> Self {
        match c {
            HmoeCombo::Ss => GatingCombo::SS,
            HmoeCombo::Sl => GatingCombo::SL,
            HmoeCombo::Ll => GatingCombo::LL,
        }
    }
}

/// A mixing measure tagged with its gating combination.
pub struct HmoeMeasure {
    inner: MeasureFile,
}

/// A dataset of `n` rows of `dim` inputs and one response.
pub struct HmoeDataset {
    inner: Dataset,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &HmoeError) -> HmoeStatus {
    match e {
        HmoeError::InvalidInput(_) => HmoeStatus::InvalidInput,
        HmoeError::InvalidModel(_) => HmoeStatus::InvalidModel,
        HmoeError::FitFailed { .. } => HmoeStatus::FitFailed,
        HmoeError::QuadratureError { .. } => HmoeStatus::QuadratureError,
        HmoeError::UnsupportedCellSize(_) => HmoeStatus::UnsupportedCellSize,
        HmoeError::Config(_) | HmoeError::Json(_) => HmoeStatus::ConfigError,
        HmoeError::Io(_) | HmoeError::Csv(_) => HmoeStatus::IoError,
    }
}

enum Failure {
    Null(&'static str),
    Lib(HmoeError),
}

impl From<HmoeError> for Failure {
    fn from(e: HmoeError) -> Self {
        Failure::Lib(e)
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Lib(HmoeError::Json(e))
    }
}

/// Runs `f`, translating errors and panics into a status and the last error.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> HmoeStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => HmoeStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            HmoeStatus::NullPointer
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            HmoeStatus::Panic
        }
    }
}

unsafe fn as_ref<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

unsafe fn as_str<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Lib(HmoeError::InvalidInput(format!("{what} is not valid UTF-8"))))
}

unsafe fn as_slice<'a>(p: *const f64, len: usize, what: &'static str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn write_out<T>(out: *mut T, v: T, what: &'static str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::Null(what));
    }
    out.write(v);
    Ok(())
}

/// Message of the last failed call on this thread, or NULL. The pointer is
/// valid until the next `hmoe_*` call on the same thread.
#[no_mangle]
pub extern "C" fn hmoe_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn hmoe_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Frees a string returned by this library. NULL is ignored.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn hmoe_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parses a measure from its JSON form (`combo`, `dim`, `groups`).
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hmoe_measure_from_json(json: *const c_char, out: *mut *mut HmoeMeasure) -> HmoeStatus {
    guard(|| {
        let text = as_str(json, "json")?;
        let inner = MeasureFile::from_json(text)?;
        write_out(out, Box::into_raw(Box::new(HmoeMeasure { inner })), "out")
    })
}

/// The built-in two-group, two-expert truth used by rate experiments.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hmoe_measure_default(combo: HmoeCombo, out: *mut *mut HmoeMeasure) -> HmoeStatus {
    guard(|| {
        let c = GatingCombo::from(combo);
        let inner = MeasureFile { combo: c, measure: default_truth(c) };
        write_out(out, Box::into_raw(Box::new(HmoeMeasure { inner })), "out")
    })
}

/// Serializes a measure to JSON. Free the result with `hmoe_string_free`.
///
/// # Safety
/// `m` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hmoe_measure_to_json(m: *const HmoeMeasure, out: *mut *mut c_char) -> HmoeStatus {
    guard(|| {
        let m = as_ref(m, "measure")?;
        let s = CString::new(m.inner.to_json()?).expect("JSON has no NUL bytes");
        write_out(out, s.into_raw(), "out")
    })
}

/// # Safety
/// `m` must be NULL or a handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn hmoe_measure_free(m: *mut HmoeMeasure) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Input dimension of a measure.
///
/// # Safety
/// `m` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hmoe_measure_dim(m: *const HmoeMeasure, out: *mut usize) -> HmoeStatus {
    guard(|| write_out(out, as_ref(m, "measure")?.inner.measure.dim, "out"))
}

/// Conditional density `p(y | x)` under the measure's own gating combination.
///
/// # Safety
/// `x` must point to `dim` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hmoe_measure_density(
    m: *const HmoeMeasure,
    x: *const f64,
    dim: usize,
    y: f64,
    out: *mut f64,
) -> HmoeStatus {
    guard(|| {
        let m = as_ref(m, "measure")?;
        let x = as_slice(x, dim, "x")?;
        if dim != m.inner.measure.dim {
            return Err(HmoeError::InvalidInput(format!("x has {dim} values, model dimension is {}", m.inner.measure.dim)).into());
        }
        let p = m.inner.measure.conditional_density(m.inner.combo, x, y)?;
        write_out(out, p, "out")
    })
}

/// Draws `n` rows from the measure with inputs uniform on `[-1, 1]^d`.
///
/// # Safety
/// `m` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hmoe_sample(m: *const HmoeMeasure, n: usize, seed: u64, out: *mut *mut HmoeDataset) -> HmoeStatus {
    guard(|| {
        let m = as_ref(m, "measure")?;
        let inner = sample(&m.inner.measure, m.inner.combo, n, InputLaw::default(), seed)?;
        write_out(out, Box::into_raw(Box::new(HmoeDataset { inner })), "out")
    })
}

/// Builds a dataset from row-major inputs `x` (`n * dim`) and responses `y`.
///
/// # Safety
/// `x` must point to `n * dim` doubles and `y` to `n`; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hmoe_dataset_new(
    x: *const f64,
    y: *const f64,
    n: usize,
    dim: usize,
    out: *mut *mut HmoeDataset,
) -> HmoeStatus {
    guard(|| {
        let len = n.checked_mul(dim).ok_or_else(|| HmoeError::InvalidInput("n * dim overflows".into()))?;
        let xs = as_slice(x, len, "x")?.to_vec();
        let ys = as_slice(y, n, "y")?.to_vec();
        let inner = Dataset::new(dim, xs, ys)?;
        write_out(out, Box::into_raw(Box::new(HmoeDataset { inner })), "out")
    })
}

/// # Safety
/// `d` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hmoe_dataset_len(d: *const HmoeDataset, out: *mut usize) -> HmoeStatus {
    guard(|| write_out(out, as_ref(d, "dataset")?.inner.len(), "out"))
}

/// # Safety
/// `d` must be NULL or a handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn hmoe_dataset_free(d: *mut HmoeDataset) {
    if !d.is_null() {
        drop(Box::from_raw(d));
    }
}

/// Maximum-likelihood fit. `config_json` is a fit configuration object
/// (`k1`, `k2`, and optional `restarts`, `max_iters`, `tol`, `init`, ...).
/// Writes the normalized estimate and its mean log-likelihood.
///
/// # Safety
/// Pointers must be valid; `out_estimate` and `out_loglik` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hmoe_fit(
    d: *const HmoeDataset,
    combo: HmoeCombo,
    config_json: *const c_char,
    out_estimate: *mut *mut HmoeMeasure,
    out_loglik: *mut f64,
) -> HmoeStatus {
    guard(|| {
        let d = as_ref(d, "dataset")?;
        let cfg: FitConfig = serde_json::from_str(as_str(config_json, "config_json")?)?;
        if out_estimate.is_null() || out_loglik.is_null() {
            return Err(Failure::Null("out"));
        }
        let fit = fit_mle(&d.inner, combo.into(), &cfg)?;
        write_out(out_loglik, fit.final_loglik, "out_loglik")?;
        write_out(out_estimate, Box::into_raw(Box::new(HmoeMeasure { inner: fit.estimate })), "out_estimate")
    })
}

/// Probe average of the Hellinger distance between two measures under
/// `combo`, over `probes` quasi-random inputs in `[-1, 1]^d`.
///
/// # Safety
/// Pointers must be valid; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hmoe_hellinger(
    g1: *const HmoeMeasure,
    g2: *const HmoeMeasure,
    combo: HmoeCombo,
    probes: usize,
    out: *mut f64,
) -> HmoeStatus {
    guard(|| {
        let (a, b) = (as_ref(g1, "g1")?, as_ref(g2, "g2")?);
        let pts = InputLaw::default().probes(a.inner.measure.dim, probes);
        let h = metrics::hellinger(&a.inner.measure, &b.inner.measure, combo.into(), &pts, &QuadSpec::default())?;
        write_out(out, h, "out")
    })
}

/// Multi-start search for a non-trivial solution of the `(kind, m, r)`
/// system in dimension 1. `found` is set to 1 when the scaled residual
/// dropped below 1e-10.
///
/// # Safety
/// `found` and `best_residual` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hmoe_polysys_search(
    kind: HmoeCombo,
    m: usize,
    r: usize,
    restarts: usize,
    seed: u64,
    found: *mut i32,
    best_residual: *mut f64,
) -> HmoeStatus {
    guard(|| {
        if found.is_null() || best_residual.is_null() {
            return Err(Failure::Null("out"));
        }
        let sys = PolySystem::new(kind.into(), m, r, 1)?;
        let cfg = SearchConfig { restarts, seed, ..SearchConfig::default() };
        let outcome = search_nontrivial(&sys, &cfg)?;
        write_out(found, i32::from(outcome.found.is_some()), "found")?;
        write_out(best_residual, outcome.best_residual, "best_residual")
    })
}
