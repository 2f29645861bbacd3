//! C interface to `d2ibc`.
//!
//! Objects cross the boundary as opaque handles created by `*_load`/`*_fit`
//! functions and released with the matching `*_free`. Every fallible call
//! returns a [`D2ibcStatus`]; the message of the last failure on the calling
//! thread is available from [`d2ibc_last_error`]. Windows are passed as flat
//! row-major arrays, most recent sample first.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use d2ibc::config::RunConfig;
use d2ibc::linctrl::PidGains;
use d2ibc::sysid::{PolyModel, RegressorWindow};
use d2ibc::{pipeline, DataSet, Error, InversionConfig, NormConstants, StabilityCertificate};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum D2ibcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Config = 5,
    Shape = 6,
    Numeric = 7,
    Divergence = 8,
    AssumptionViolation = 9,
    Internal = 10,
}

pub struct D2ibcDataset(DataSet);
pub struct D2ibcModel(PolyModel);
pub struct D2ibcPid(PidGains);
pub struct D2ibcCertificate(StabilityCertificate);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> D2ibcStatus {
    match e {
        Error::Io { .. } => D2ibcStatus::Io,
        Error::Parse { .. } | Error::Schema(_) | Error::Json(_) => D2ibcStatus::Parse,
        Error::Config(_) | Error::Budget { .. } | Error::BasisTooLarge { .. } => D2ibcStatus::Config,
        Error::Shape(_) | Error::EmptyDataset | Error::InsufficientData(_) => D2ibcStatus::Shape,
        Error::Divergence { .. } => D2ibcStatus::Divergence,
        Error::AssumptionViolation(_) => D2ibcStatus::AssumptionViolation,
        _ => D2ibcStatus::Numeric,
    }
}

struct Fail(D2ibcStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(D2ibcStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, recording any failure or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> D2ibcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => D2ibcStatus::Ok,
        Ok(Err(Fail(s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("internal panic".into());
            D2ibcStatus::Internal
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| Fail(D2ibcStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn put<T>(out: *mut *mut T, v: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output handle"));
    }
    *out = Box::into_raw(Box::new(v));
    Ok(())
}

fn rows(flat: &[f64], width: usize) -> Vec<Vec<f64>> {
    flat.chunks(width.max(1)).map(<[f64]>::to_vec).collect()
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn d2ibc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Frees a string returned by this library.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn d2ibc_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// # Safety
/// `path` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn d2ibc_dataset_load_csv(path: *const c_char, out: *mut *mut D2ibcDataset) -> D2ibcStatus {
    guard(|| {
        let d = DataSet::load_csv(path_arg(path, "path")?)?;
        put(out, D2ibcDataset(d))
    })
}

/// Writes the sample count and channel dimensions; any output may be null.
///
/// # Safety
/// `d` is a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn d2ibc_dataset_dims(
    d: *const D2ibcDataset,
    len: *mut usize,
    n_u: *mut usize,
    n_y: *mut usize,
) -> D2ibcStatus {
    guard(|| {
        let d = &handle(d, "dataset")?.0;
        for (p, v) in [(len, d.len()), (n_u, d.n_u()), (n_y, d.n_y())] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// # Safety
/// `d` comes from this library and is not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn d2ibc_dataset_free(d: *mut D2ibcDataset) {
    if !d.is_null() {
        drop(Box::from_raw(d));
    }
}

/// Least-squares fit of a polynomial model of order `n` and total degree
/// `degree`. `rms_residual` (may be null) receives one value per output.
///
/// # Safety
/// `d` is a live dataset; `rms_residual` holds `n_y` doubles when non-null.
#[no_mangle]
pub unsafe extern "C" fn d2ibc_model_fit(
    d: *const D2ibcDataset,
    n: usize,
    degree: u32,
    ridge: f64,
    rms_residual: *mut f64,
    out: *mut *mut D2ibcModel,
) -> D2ibcStatus {
    guard(|| {
        let d = &handle(d, "dataset")?.0;
        let fit = d2ibc::fit_model(d, n, degree, ridge)?;
        if !rms_residual.is_null() {
            std::slice::from_raw_parts_mut(rms_residual, fit.rms_residual.len()).copy_from_slice(&fit.rms_residual);
        }
        put(out, D2ibcModel(fit.model))
    })
}

/// # Safety
/// `path` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn d2ibc_model_load_json(path: *const c_char, out: *mut *mut D2ibcModel) -> D2ibcStatus {
    guard(|| {
        let m = PolyModel::load_json(path_arg(path, "path")?)?;
        put(out, D2ibcModel(m))
    })
}

/// # Safety
/// `m` is a live model; `path` is a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn d2ibc_model_save_json(m: *const D2ibcModel, path: *const c_char) -> D2ibcStatus {
    guard(|| Ok(handle(m, "model")?.0.save_json(path_arg(path, "path")?)?))
}

/// Writes the order `n` and the input and output dimensions; any output may be null.
///
/// # Safety
/// `m` is a live model handle.
#[no_mangle]
pub unsafe extern "C" fn d2ibc_model_dims(
    m: *const D2ibcModel,
    n: *mut usize,
    n_u: *mut usize,
    n_y: *mut usize,
) -> D2ibcStatus {
    guard(|| {
        let m = &handle(m, "model")?.0;
        for (p, v) in [(n, m.n()), (n_u, m.n_u()), (n_y, m.n_y())] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

unsafe fn window(m: &PolyModel, y_hist: *const f64, u_hist: *const f64) -> Result<RegressorWindow, Fail> {
    let (n, n_u, n_y) = (m.n(), m.n_u(), m.n_y());
    let y = slice_arg(y_hist, n * n_y, "y_hist")?;
    let u = slice_arg(u_hist, (n - 1) * n_u, "u_hist")?;
    Ok(RegressorWindow::new(rows(y, n_y), rows(u, n_u)))
}

/// One-step prediction. `y_hist` holds `n*n_y` values (y_t first),
/// `u_hist` holds `(n-1)*n_u` values (u_{t-1} first), `u` holds `n_u`
/// and `y_next` receives `n_y`.
///
/// # Safety
/// Array lengths as documented.
#[no_mangle]
pub unsafe extern "C" fn d2ibc_model_predict(
    m: *const D2ibcModel,
    y_hist: *const f64,
    u_hist: *const f64,
    u: *const f64,
    y_next: *mut f64,
) -> D2ibcStatus {
    guard(|| {
        let m = &handle(m, "model")?.0;
        let q = window(m, y_hist, u_hist)?;
        let u = slice_arg(u, m.n_u(), "u")?;
        if y_next.is_null() {
            return Err(null("y_next"));
        }
        let y = d2ibc::predict(m, &q, u)?;
        std::slice::from_raw_parts_mut(y_next, y.len()).copy_from_slice(&y);
        Ok(())
    })
}

/// # Safety
/// `m` comes from this library and is not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn d2ibc_model_free(m: *mut D2ibcModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Inversion input `u_nl` minimizing the normalized cost over
/// `[-u_bar, u_bar]^n_u`. Windows as in [`d2ibc_model_predict`];
/// `r_next` holds `n_y` values and `u_prev` `n_u`. `zeta` (`n_y`), `mu`
/// and `lambda` (`n_u` each) may be null for pure tracking; normalizers
/// are unit. `j_value` may be null.
///
/// # Safety
/// Array lengths as documented.
#[no_mangle]
pub unsafe extern "C" fn d2ibc_solve_inversion(
    m: *const D2ibcModel,
    y_hist: *const f64,
    u_hist: *const f64,
    r_next: *const f64,
    u_prev: *const f64,
    u_bar: f64,
    zeta: *const f64,
    mu: *const f64,
    lambda: *const f64,
    u_nl: *mut f64,
    j_value: *mut f64,
) -> D2ibcStatus {
    guard(|| {
        let m = &handle(m, "model")?.0;
        let (n_u, n_y) = (m.n_u(), m.n_y());
        let q = window(m, y_hist, u_hist)?;
        let r = slice_arg(r_next, n_y, "r_next")?;
        let up = slice_arg(u_prev, n_u, "u_prev")?;
        let mut cfg = InversionConfig::tracking(NormConstants::unit(n_y, n_u));
        if !zeta.is_null() {
            cfg.zeta = slice_arg(zeta, n_y, "zeta")?.to_vec();
        }
        if !mu.is_null() {
            cfg.mu = slice_arg(mu, n_u, "mu")?.to_vec();
        }
        if !lambda.is_null() {
            cfg.lambda = slice_arg(lambda, n_u, "lambda")?.to_vec();
        }
        cfg.validate(n_y, n_u)?;
        if u_nl.is_null() {
            return Err(null("u_nl"));
        }
        let res = d2ibc::solve_inversion(m, &q, r, up, u_bar, &cfg)?;
        std::slice::from_raw_parts_mut(u_nl, n_u).copy_from_slice(&res.u_nl);
        if !j_value.is_null() {
            *j_value = res.j_value;
        }
        Ok(())
    })
}

/// # Safety
/// `path` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn d2ibc_pid_load_json(path: *const c_char, out: *mut *mut D2ibcPid) -> D2ibcStatus {
    guard(|| {
        let g = PidGains::load_json(path_arg(path, "path")?)?;
        put(out, D2ibcPid(g))
    })
}

/// # Safety
/// `g` comes from this library and is not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn d2ibc_pid_free(g: *mut D2ibcPid) {
    if !g.is_null() {
        drop(Box::from_raw(g));
    }
}

/// Certificate for the loop described by the TOML run configuration at
/// `config_path`. `data` (may be null) supplies the inversion normalizers.
///
/// # Safety
/// Handles are live; `config_path` is a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn d2ibc_certify_from_config(
    config_path: *const c_char,
    m: *const D2ibcModel,
    g: *const D2ibcPid,
    data: *const D2ibcDataset,
    out: *mut *mut D2ibcCertificate,
) -> D2ibcStatus {
    guard(|| {
        let cfg = RunConfig::load(path_arg(config_path, "config_path")?)?;
        let (m, g) = (&handle(m, "model")?.0, &handle(g, "pid")?.0);
        let d = data.as_ref().map(|d| &d.0);
        let cert = pipeline::certify(&cfg, m, g, d, None)?;
        put(out, D2ibcCertificate(cert))
    })
}

/// Writes the assumption verdict (1 holds, 0 fails).
///
/// # Safety
/// `c` is a live certificate; `verdict` is writable.
#[no_mangle]
pub unsafe extern "C" fn d2ibc_certificate_verdict(c: *const D2ibcCertificate, verdict: *mut i32) -> D2ibcStatus {
    guard(|| {
        let c = &handle(c, "certificate")?.0;
        if verdict.is_null() {
            return Err(null("verdict"));
        }
        *verdict = i32::from(c.report.verdict);
        Ok(())
    })
}

/// Writes the tracking error bound; fails with
/// `D2IBC_STATUS_ASSUMPTION_VIOLATION` when no bound exists.
///
/// # Safety
/// `c` is a live certificate; `e_bar` is writable.
#[no_mangle]
pub unsafe extern "C" fn d2ibc_certificate_e_bar(c: *const D2ibcCertificate, e_bar: *mut f64) -> D2ibcStatus {
    guard(|| {
        let c = &handle(c, "certificate")?.0;
        if e_bar.is_null() {
            return Err(null("e_bar"));
        }
        let k = c.constants.ok_or_else(|| {
            Fail(D2ibcStatus::AssumptionViolation, "lambda_y >= 1, no error bound".into())
        })?;
        *e_bar = k.e_bar;
        Ok(())
    })
}

/// Certificate JSON; release with [`d2ibc_string_free`].
///
/// # Safety
/// `c` is a live certificate; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn d2ibc_certificate_to_json(c: *const D2ibcCertificate, out: *mut *mut c_char) -> D2ibcStatus {
    guard(|| {
        let c = &handle(c, "certificate")?.0;
        if out.is_null() {
            return Err(null("out"));
        }
        let s = CString::new(c.to_json_string()?).map_err(|e| Fail(D2ibcStatus::Internal, e.to_string()))?;
        *out = s.into_raw();
        Ok(())
    })
}

/// # Safety
/// `c` comes from this library and is not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn d2ibc_certificate_free(c: *mut D2ibcCertificate) {
    if !c.is_null() {
        drop(Box::from_raw(c));
    }
}
