//! C ABI over the fmlab kernels.
//!
//! Every entry point returns an [`FmlStatus`]; on failure the message is
//! available from [`fml_last_error`] on the same thread. Matrices are dense
//! row-major `double` arrays. Fields are opaque handles released with
//! [`fml_field_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use fmlab::bounds::{bound_uniform_step, bound_variable_step};
use fmlab::checkpoint::Checkpoint;
use fmlab::finetune::dominance_penalty;
use fmlab::linalg::{sym_eig_max, Mat};
use fmlab::metrics::{wasserstein2, FlowModel};
use fmlab::solvers::SolverConfig;
use fmlab::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FmlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Dimension = 3,
    NonFinite = 4,
    Io = 5,
    Parse = 6,
    Stiffness = 7,
    Unsupported = 8,
    Certificate = 9,
    BoundViolation = 10,
    Panic = 11,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FmlMethod {
    Euler = 0,
    Rk4 = 1,
    Dopri5 = 2,
}

/// A loaded flow model: a base field and an optional residual stage.
pub struct FmlField {
    model: FlowModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> FmlStatus {
    match err {
        Error::Config(_) => FmlStatus::InvalidArgument,
        Error::Dimension { .. } | Error::NotSymmetric { .. } => FmlStatus::Dimension,
        Error::NonFinite(_) | Error::Diverged { .. } => FmlStatus::NonFinite,
        Error::Stiffness { .. } => FmlStatus::Stiffness,
        Error::Unsupported(_) => FmlStatus::Unsupported,
        Error::Certificate(_) => FmlStatus::Certificate,
        Error::BoundViolation(_) => FmlStatus::BoundViolation,
        Error::Io { .. } => FmlStatus::Io,
        Error::Json(_) => FmlStatus::Parse,
    }
}

/// Run `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (FmlStatus, String)>) -> FmlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FmlStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            FmlStatus::Panic
        }
    }
}

fn lift(err: Error) -> (FmlStatus, String) {
    (status_of(&err), err.to_string())
}

fn null(what: &str) -> (FmlStatus, String) {
    (FmlStatus::NullPointer, format!("{what} is null"))
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], (FmlStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_slice<'a>(p: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], (FmlStatus, String)> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn write<T>(p: *mut T, value: T, what: &str) -> Result<(), (FmlStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    *p = value;
    Ok(())
}

unsafe fn path<'a>(p: *const c_char, what: &str) -> Result<&'a str, (FmlStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (FmlStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn matrix(p: *const f64, rows: usize, cols: usize, what: &str) -> Result<Mat, (FmlStatus, String)> {
    let data = slice(p, rows * cols, what)?;
    Mat::from_vec(rows, cols, data.to_vec()).map_err(lift)
}

/// Message of the last failure on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn fml_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn fml_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Load a checkpoint, optionally stacked with a residual checkpoint
/// (`residual_path` may be null).
///
/// # Safety
/// Paths must be valid nul-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fml_field_load(
    base_path: *const c_char,
    residual_path: *const c_char,
    out: *mut *mut FmlField,
) -> FmlStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let base = Checkpoint::load(path(base_path, "base_path")?).map_err(lift)?;
        let residual = if residual_path.is_null() {
            None
        } else {
            Some(Checkpoint::load(path(residual_path, "residual_path")?).map_err(lift)?)
        };
        let model = FlowModel::from_checkpoints(&base, residual.as_ref()).map_err(lift)?;
        *out = Box::into_raw(Box::new(FmlField { model }));
        Ok(())
    })
}

/// Release a handle; null is ignored.
///
/// # Safety
/// `field` must come from [`fml_field_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fml_field_free(field: *mut FmlField) {
    if !field.is_null() {
        drop(Box::from_raw(field));
    }
}

/// State dimension, or 0 for a null handle.
///
/// # Safety
/// `field` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fml_field_dim(field: *const FmlField) -> usize {
    field.as_ref().map_or(0, |f| f.model.dim())
}

/// Evaluate the base field at `(t, x)`; `x` and `out` hold `dim` values.
///
/// # Safety
/// Pointers must be valid for `dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn fml_field_eval(field: *const FmlField, t: f64, x: *const f64, out: *mut f64) -> FmlStatus {
    guard(|| {
        let f = field.as_ref().ok_or_else(|| null("field"))?;
        let d = f.model.dim();
        let v = fmlab::fields::VectorField::eval(&f.model.base, t, slice(x, d, "x")?).map_err(lift)?;
        out_slice(out, d, "out")?.copy_from_slice(&v);
        Ok(())
    })
}

/// Integrate `n` starting points (row-major `n × dim`) through the whole
/// model. `steps` is used by fixed-step methods, `rtol`/`atol` by dopri5.
/// Writes final states to `out` and the mean NFE per sample to `mean_nfe`.
///
/// # Safety
/// `x0` and `out` must hold `n × dim` doubles; `mean_nfe` may be null.
#[no_mangle]
pub unsafe extern "C" fn fml_field_integrate(
    field: *const FmlField,
    x0: *const f64,
    n: usize,
    method: FmlMethod,
    steps: usize,
    rtol: f64,
    atol: f64,
    out: *mut f64,
    mean_nfe: *mut f64,
) -> FmlStatus {
    guard(|| {
        let f = field.as_ref().ok_or_else(|| null("field"))?;
        let d = f.model.dim();
        let start = matrix(x0, n, d, "x0")?;
        let solver = match method {
            FmlMethod::Euler => SolverConfig::euler(steps),
            FmlMethod::Rk4 => SolverConfig::rk4(steps),
            FmlMethod::Dopri5 => SolverConfig::dopri5(rtol, atol),
        };
        let res = f.model.sample(&start, &solver).map_err(lift)?;
        out_slice(out, n * d, "out")?.copy_from_slice(res.final_states.data());
        if !mean_nfe.is_null() {
            *mean_nfe = res.mean_nfe();
        }
        Ok(())
    })
}

/// Largest eigenvalue of a symmetric `n × n` matrix.
///
/// # Safety
/// `a` must hold `n × n` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fml_sym_eig_max(a: *const f64, n: usize, out: *mut f64) -> FmlStatus {
    guard(|| {
        let m = matrix(a, n, n, "a")?;
        write(out, sym_eig_max(&m).map_err(lift)?, "out")
    })
}

/// Minimum-cost assignment for an `n × n` cost matrix: `perm[i]` is the
/// column assigned to row `i`.
///
/// # Safety
/// `cost` must hold `n × n` doubles and `perm` `n` entries.
#[no_mangle]
pub unsafe extern "C" fn fml_solve_assignment(cost: *const f64, n: usize, perm: *mut usize) -> FmlStatus {
    guard(|| {
        let m = matrix(cost, n, n, "cost")?;
        let p = fmlab::assignment::solve_assignment(&m).map_err(lift)?;
        if n > 0 && perm.is_null() {
            return Err(null("perm"));
        }
        for (i, j) in p.into_iter().enumerate() {
            *perm.add(i) = j;
        }
        Ok(())
    })
}

/// Exact 2-Wasserstein distance between two `m × d` point sets.
///
/// # Safety
/// `a` and `b` must hold `m × d` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fml_wasserstein2(a: *const f64, b: *const f64, m: usize, d: usize, out: *mut f64) -> FmlStatus {
    guard(|| {
        let a = matrix(a, m, d, "a")?;
        let b = matrix(b, m, d, "b")?;
        write(out, wasserstein2(&a, &b).map_err(lift)?, "out")
    })
}

/// Variable-step error bound over the `n` steps in `taus`.
///
/// # Safety
/// `taus` must hold `n` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fml_bound_variable_step(
    l_u: f64,
    delta: f64,
    m: f64,
    eps0: f64,
    taus: *const f64,
    n: usize,
    out: *mut f64,
) -> FmlStatus {
    guard(|| {
        let t = slice(taus, n, "taus")?;
        write(out, bound_variable_step(l_u, delta, m, eps0, t).map_err(lift)?, "out")
    })
}

/// Uniform-step error bound on `[0, 1]` with step `tau0`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fml_bound_uniform_step(
    l_u: f64,
    delta: f64,
    m: f64,
    eps0: f64,
    tau0: f64,
    out: *mut f64,
) -> FmlStatus {
    guard(|| write(out, bound_uniform_step(l_u, delta, m, eps0, tau0).map_err(lift)?, "out"))
}

/// `λ_ω · ReLU(ω)` for one square `n × n` matrix.
///
/// # Safety
/// `a` must hold `n × n` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fml_dominance_penalty(
    a: *const f64,
    n: usize,
    eps_a: f64,
    lambda_omega: f64,
    out: *mut f64,
) -> FmlStatus {
    guard(|| {
        let m = matrix(a, n, n, "a")?;
        write(out, dominance_penalty(&[&m], eps_a, lambda_omega).map_err(lift)?, "out")
    })
}
