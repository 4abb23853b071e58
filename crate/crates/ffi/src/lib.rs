//! C ABI over the ecokit library.
//!
//! Objects are opaque handles released with the matching `_free` call.
//! Every fallible call returns an [`EcokitStatus`]; on failure the message
//! is available from [`ecokit_last_error`] on the same thread. Matrices
//! cross the boundary row-major.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use ecokit::forecast::crps_normal;
use ecokit::ingest::GroupPanel;
use ecokit::irf::{bootstrap_irf, cluster_metrics, EcoNetwork, IrfResult, MetricNormalizer};
use ecokit::nalgebra::DMatrix;
use ecokit::var::{fit_panel, VarFit, VarModel, VarSpec};
use ecokit::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EcokitStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    Io = 3,
    Parse = 4,
    Config = 5,
    SingularDesign = 6,
    BootstrapAborted = 7,
    BufferTooSmall = 8,
    Internal = 99,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EcokitNormalizer {
    /// Divide off-diagonal sums by `m - 1`.
    Rows = 0,
    /// Divide by `m (m - 1)`.
    OrderedPairs = 1,
}

/// Weekly log-size panel.
pub struct EcokitPanel(GroupPanel);

/// VAR(1) fit together with the spec it was fitted under.
pub struct EcokitVarFit {
    spec: VarSpec,
    fit: VarFit,
}

/// Bootstrapped impulse responses.
pub struct EcokitIrf(IrfResult);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> EcokitStatus {
    match e {
        Error::Io { .. } => EcokitStatus::Io,
        Error::Csv(_) | Error::Json(_) | Error::TooManyMalformed { .. } => EcokitStatus::Parse,
        Error::Config(_) | Error::NoFeasibleCandidate { .. } => EcokitStatus::Config,
        Error::InvalidInput(_) => EcokitStatus::InvalidInput,
        Error::SingularDesign { .. } => EcokitStatus::SingularDesign,
        Error::BootstrapAborted { .. } => EcokitStatus::BootstrapAborted,
        Error::Stage { source, .. } => status_of(source),
    }
}

enum Fail {
    Status(EcokitStatus, String),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn null(what: &str) -> Fail {
    Fail::Status(EcokitStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> EcokitStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => EcokitStatus::Ok,
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Ok(Err(Fail::Status(s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("internal panic".into());
            EcokitStatus::Internal
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Status(EcokitStatus::InvalidInput, format!("{what} is not UTF-8")))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn put<T>(out: *mut *mut T, v: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(v));
    Ok(())
}

unsafe fn copy_matrix(m: &DMatrix<f64>, out: *mut f64, len: usize) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("out"));
    }
    let n = m.nrows() * m.ncols();
    if len < n {
        return Err(Fail::Status(
            EcokitStatus::BufferTooSmall,
            format!("buffer holds {len} values, {n} needed"),
        ));
    }
    let dst = std::slice::from_raw_parts_mut(out, n);
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            dst[i * m.ncols() + j] = m[(i, j)];
        }
    }
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ecokit_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ecokit_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned by this library.
#[no_mangle]
pub unsafe extern "C" fn ecokit_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Builds a panel from a row-major `n_groups x n_weeks` matrix of log sizes.
/// `names` may be null, in which case groups are named `g1`, `g2`, ...
#[no_mangle]
pub unsafe extern "C" fn ecokit_panel_from_matrix(
    sizes: *const f64,
    n_groups: usize,
    n_weeks: usize,
    names: *const *const c_char,
    out: *mut *mut EcokitPanel,
) -> EcokitStatus {
    guard(|| {
        if sizes.is_null() {
            return Err(null("sizes"));
        }
        let flat = std::slice::from_raw_parts(sizes, n_groups * n_weeks);
        let groups = if names.is_null() {
            (1..=n_groups).map(|i| format!("g{i}")).collect()
        } else {
            let raw = std::slice::from_raw_parts(names, n_groups);
            raw.iter()
                .map(|&p| str_arg(p, "group name").map(str::to_owned))
                .collect::<Result<Vec<_>, _>>()?
        };
        let rows = flat.chunks(n_weeks.max(1)).take(n_groups).map(<[f64]>::to_vec).collect();
        put(out, EcokitPanel(GroupPanel::from_sizes(groups, rows)?))
    })
}

/// Reads a `panel.csv` written by the ingest stage.
#[no_mangle]
pub unsafe extern "C" fn ecokit_panel_read_csv(path: *const c_char, out: *mut *mut EcokitPanel) -> EcokitStatus {
    guard(|| {
        let p = str_arg(path, "path")?;
        put(out, EcokitPanel(GroupPanel::read_csv(Path::new(p))?))
    })
}

#[no_mangle]
pub unsafe extern "C" fn ecokit_panel_dims(panel: *const EcokitPanel, n_groups: *mut usize, n_weeks: *mut usize) -> EcokitStatus {
    guard(|| {
        let p = handle(panel, "panel")?;
        if n_groups.is_null() || n_weeks.is_null() {
            return Err(null("out"));
        }
        *n_groups = p.0.n_groups();
        *n_weeks = p.0.n_weeks();
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn ecokit_panel_free(panel: *mut EcokitPanel) {
    if !panel.is_null() {
        drop(Box::from_raw(panel));
    }
}

/// Fits a VAR(1) over every group of the panel, training on all but the last
/// `holdout` weeks. `baseline` fixes the off-diagonal of Phi at 0.
#[no_mangle]
pub unsafe extern "C" fn ecokit_var_fit(
    panel: *const EcokitPanel,
    holdout: usize,
    min_weeks: usize,
    baseline: bool,
    out: *mut *mut EcokitVarFit,
) -> EcokitStatus {
    guard(|| {
        let p = &handle(panel, "panel")?.0;
        let spec = VarSpec::new(p.groups.clone(), p, holdout)?.with_min_weeks(min_weeks);
        let model = if baseline { VarModel::Baseline } else { VarModel::Full };
        let fit = fit_panel(p, &spec, model)?;
        put(out, EcokitVarFit { spec, fit })
    })
}

#[no_mangle]
pub unsafe extern "C" fn ecokit_var_free(fit: *mut EcokitVarFit) {
    if !fit.is_null() {
        drop(Box::from_raw(fit));
    }
}

/// Number of members, or 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn ecokit_var_n_members(fit: *const EcokitVarFit) -> usize {
    fit.as_ref().map_or(0, |f| f.fit.n_members())
}

/// Copies Phi row-major; entry `(i, j)` is the effect of member `j` at
/// `t - 1` on member `i` at `t`.
#[no_mangle]
pub unsafe extern "C" fn ecokit_var_phi(fit: *const EcokitVarFit, out: *mut f64, len: usize) -> EcokitStatus {
    guard(|| copy_matrix(&handle(fit, "fit")?.fit.phi, out, len))
}

/// Copies the residual covariance row-major.
#[no_mangle]
pub unsafe extern "C" fn ecokit_var_sigma(fit: *const EcokitVarFit, out: *mut f64, len: usize) -> EcokitStatus {
    guard(|| copy_matrix(&handle(fit, "fit")?.fit.sigma, out, len))
}

#[no_mangle]
pub unsafe extern "C" fn ecokit_var_spectral_radius(fit: *const EcokitVarFit, out: *mut f64) -> EcokitStatus {
    guard(|| {
        let f = handle(fit, "fit")?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = f.fit.spectral_radius;
        Ok(())
    })
}

/// Average interaction and interaction strength of the fitted Phi.
#[no_mangle]
pub unsafe extern "C" fn ecokit_var_metrics(
    fit: *const EcokitVarFit,
    normalizer: EcokitNormalizer,
    mean_interaction: *mut f64,
    strength: *mut f64,
) -> EcokitStatus {
    guard(|| {
        let f = handle(fit, "fit")?;
        if mean_interaction.is_null() || strength.is_null() {
            return Err(null("out"));
        }
        let norm = match normalizer {
            EcokitNormalizer::Rows => MetricNormalizer::Rows,
            EcokitNormalizer::OrderedPairs => MetricNormalizer::OrderedPairs,
        };
        let m = cluster_metrics(&f.fit.phi, norm)?;
        *mean_interaction = m.mean_interaction;
        *strength = m.strength;
        Ok(())
    })
}

/// Residual-bootstrap impulse responses with 95% bands.
#[no_mangle]
pub unsafe extern "C" fn ecokit_irf_bootstrap(
    panel: *const EcokitPanel,
    fit: *const EcokitVarFit,
    horizon: usize,
    replicates: usize,
    seed: u64,
    out: *mut *mut EcokitIrf,
) -> EcokitStatus {
    guard(|| {
        let p = &handle(panel, "panel")?.0;
        let f = handle(fit, "fit")?;
        put(out, EcokitIrf(bootstrap_irf(p, &f.spec, &f.fit, horizon, replicates, seed)?))
    })
}

#[no_mangle]
pub unsafe extern "C" fn ecokit_irf_free(irf: *mut EcokitIrf) {
    if !irf.is_null() {
        drop(Box::from_raw(irf));
    }
}

/// Copies the point response and band at lag `t` (0..=horizon), each
/// row-major `m x m`. Any of the three buffers may be null to skip it.
#[no_mangle]
pub unsafe extern "C" fn ecokit_irf_at(
    irf: *const EcokitIrf,
    t: usize,
    theta: *mut f64,
    lower: *mut f64,
    upper: *mut f64,
    len: usize,
) -> EcokitStatus {
    guard(|| {
        let r = &handle(irf, "irf")?.0;
        if t > r.horizon {
            return Err(Fail::Status(
                EcokitStatus::InvalidInput,
                format!("lag {t} beyond horizon {}", r.horizon),
            ));
        }
        for (m, buf) in [(&r.theta[t], theta), (&r.lower[t], lower), (&r.upper[t], upper)] {
            if !buf.is_null() {
                copy_matrix(m, buf, len)?;
            }
        }
        Ok(())
    })
}

/// Renders the cluster network as Graphviz DOT. Free the result with
/// [`ecokit_string_free`].
#[no_mangle]
pub unsafe extern "C" fn ecokit_network_dot(
    fit: *const EcokitVarFit,
    irf: *const EcokitIrf,
    name: *const c_char,
    window: usize,
    out: *mut *mut c_char,
) -> EcokitStatus {
    guard(|| {
        let f = handle(fit, "fit")?;
        let r = &handle(irf, "irf")?.0;
        let name = str_arg(name, "name")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let net = EcoNetwork::build(name, &f.fit, r, window, MetricNormalizer::Rows)?;
        *out = CString::new(net.to_dot()).unwrap_or_default().into_raw();
        Ok(())
    })
}

/// Closed-form CRPS of `N(mu, sigma^2)` at `y`.
#[no_mangle]
pub extern "C" fn ecokit_crps_normal(y: f64, mu: f64, sigma: f64) -> f64 {
    crps_normal(y, mu, sigma)
}
