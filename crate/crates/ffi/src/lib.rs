//! C ABI over the `ddlab` core library.
//!
//! Every function returns a [`DdlabStatus`]. On failure the message is kept
//! per thread and can be read with [`ddlab_last_error`]. Objects are opaque
//! handles created by `*_new`/`*_run` functions and released with the
//! matching `*_free`. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use ddlab::analysis::{early_stop_online, select_candidate, StopMode};
use ddlab::descent::{run_trajectory, Algorithm, DdParams, StepRecord, TrajectoryOptions};
use ddlab::mixture::{build_signalless_spec, build_xor_spec, MixtureSpec};
use ddlab::model::{make_model, LossModel};
use ddlab::state_evolution::signalless_closed_form;
use ddlab::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DdlabStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Numerical = 3,
    Io = 4,
    Panic = 5,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DdlabAlgorithmKind {
    Gd = 0,
    Dd = 1,
}

/// Step sizes. For GD only `eta1` (weights) and `gamma1` (head) are read.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DdlabAlgorithm {
    pub kind: DdlabAlgorithmKind,
    pub eta0: f64,
    pub eta1: f64,
    pub gamma0: f64,
    pub gamma1: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DdlabStepRecord {
    pub t: usize,
    pub train_error: f64,
    pub test_error: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DdlabStopMode {
    Absolute = 0,
    Log = 1,
}

pub struct DdlabModel(Box<dyn LossModel>);

pub struct DdlabSpec(MixtureSpec);

pub struct DdlabTrajectory(Vec<StepRecord>);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(e: &Error) -> DdlabStatus {
    match e {
        Error::Io(_) => DdlabStatus::Io,
        e if e.is_numerical() => DdlabStatus::Numerical,
        _ => DdlabStatus::InvalidArgument,
    }
}

struct Fail(DdlabStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(DdlabStatus::NullPointer, format!("`{what}` is null"))
}

fn guard<F: FnOnce() -> Result<(), Fail>>(f: F) -> DdlabStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            DdlabStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            DdlabStatus::Panic
        }
    }
}

unsafe fn slice_in<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn slice_out<'a>(p: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn str_in<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        Fail(
            DdlabStatus::InvalidArgument,
            format!("`{what}` is not UTF-8"),
        )
    })
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn ddlab_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// # Safety
/// `kind` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ddlab_model_new(
    kind: *const c_char,
    width: usize,
    out: *mut *mut DdlabModel,
) -> DdlabStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let model = make_model(str_in(kind, "kind")?, width)?;
        *out = Box::into_raw(Box::new(DdlabModel(model)));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`ddlab_model_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ddlab_model_free(model: *mut DdlabModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn ddlab_model_width(model: *const DdlabModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.width())
}

/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn ddlab_model_head_width(model: *const DdlabModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.head_width())
}

/// Loss `Ψ(h, y, a)` and its gradient in `h`. `grad_h` may be null.
///
/// # Safety
/// `h` holds `h_len` values, `a` holds `a_len` values, `grad_h` (if not
/// null) has room for `h_len` values.
#[no_mangle]
pub unsafe extern "C" fn ddlab_model_eval(
    model: *const DdlabModel,
    h: *const f64,
    h_len: usize,
    y: f64,
    a: *const f64,
    a_len: usize,
    psi: *mut f64,
    grad_h: *mut f64,
) -> DdlabStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.0;
        let h = slice_in(h, h_len, "h")?;
        let a = slice_in(a, a_len, "a")?;
        if h.len() != m.width() || a.len() != m.head_width() {
            return Err(Fail(
                DdlabStatus::InvalidArgument,
                format!(
                    "expected h of length {} and a of length {}",
                    m.width(),
                    m.head_width()
                ),
            ));
        }
        *out_ptr(psi, "psi")? = m.psi(h, y, a);
        if !grad_h.is_null() {
            m.grad_h(h, y, a, slice_out(grad_h, h_len, "grad_h")?);
        }
        Ok(())
    })
}

fn put_spec(out: *mut *mut DdlabSpec, spec: MixtureSpec) -> Result<(), Fail> {
    let out = unsafe { out_ptr(out, "out")? };
    *out = Box::into_raw(Box::new(DdlabSpec(spec)));
    Ok(())
}

/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ddlab_spec_signalless(d: usize, out: *mut *mut DdlabSpec) -> DdlabStatus {
    guard(|| put_spec(out, build_signalless_spec(d)?))
}

/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ddlab_spec_xor(
    d: usize,
    lambda: f64,
    out: *mut *mut DdlabSpec,
) -> DdlabStatus {
    guard(|| put_spec(out, build_xor_spec(d, lambda)?))
}

/// # Safety
/// `text` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ddlab_spec_from_toml(
    text: *const c_char,
    out: *mut *mut DdlabSpec,
) -> DdlabStatus {
    guard(|| put_spec(out, MixtureSpec::from_toml(str_in(text, "text")?)?))
}

/// # Safety
/// `spec` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn ddlab_spec_num_modes(spec: *const DdlabSpec) -> usize {
    spec.as_ref().map_or(0, |s| s.0.num_modes())
}

/// Copy `χ` row-major into `out`, which must hold `J*J` values.
///
/// # Safety
/// `spec` must be a live handle and `out` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn ddlab_spec_chi(
    spec: *const DdlabSpec,
    out: *mut f64,
    len: usize,
) -> DdlabStatus {
    guard(|| {
        let s = &spec.as_ref().ok_or_else(|| null("spec"))?.0;
        let chi = s.chi();
        if len != chi.len() {
            return Err(Fail(
                DdlabStatus::InvalidArgument,
                format!("chi has {} entries, buffer has {len}", chi.len()),
            ));
        }
        for (dst, src) in slice_out(out, len, "out")?.iter_mut().zip(chi.iter()) {
            *dst = *src;
        }
        Ok(())
    })
}

/// # Safety
/// `spec` must come from a `ddlab_spec_*` constructor and not be used
/// afterwards.
#[no_mangle]
pub unsafe extern "C" fn ddlab_spec_free(spec: *mut DdlabSpec) {
    if !spec.is_null() {
        drop(Box::from_raw(spec));
    }
}

/// Sample `n` points from `spec` and train for `steps` steps. If the run
/// diverges the status is `Numerical` and `out` still receives the records
/// produced before the failure.
///
/// # Safety
/// `spec` and `model` must be live handles and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ddlab_trajectory_run(
    spec: *const DdlabSpec,
    model: *const DdlabModel,
    algorithm: DdlabAlgorithm,
    n: usize,
    steps: usize,
    seed: u64,
    out: *mut *mut DdlabTrajectory,
) -> DdlabStatus {
    guard(|| {
        let spec = &spec.as_ref().ok_or_else(|| null("spec"))?.0;
        let model = &model.as_ref().ok_or_else(|| null("model"))?.0;
        let out = out_ptr(out, "out")?;
        let alg = match algorithm.kind {
            DdlabAlgorithmKind::Gd => Algorithm::Gd {
                eta: algorithm.eta1,
                gamma: algorithm.gamma1,
            },
            DdlabAlgorithmKind::Dd => Algorithm::Dd(DdParams {
                eta0: algorithm.eta0,
                eta1: algorithm.eta1,
                gamma0: algorithm.gamma0,
                gamma1: algorithm.gamma1,
            }),
        };
        if let Algorithm::Dd(p) = alg {
            p.validate()?;
        }
        let opts = TrajectoryOptions::new(n, steps, seed);
        match run_trajectory(spec, model.as_ref(), None, alg, &opts) {
            Ok(tr) => {
                *out = Box::into_raw(Box::new(DdlabTrajectory(tr.records)));
                Ok(())
            }
            Err(Error::Diverged {
                step,
                source,
                partial,
            }) => {
                *out = Box::into_raw(Box::new(DdlabTrajectory(*partial)));
                Err(Fail(
                    DdlabStatus::Numerical,
                    format!("diverged at step {step}: {source}"),
                ))
            }
            Err(e) => Err(e.into()),
        }
    })
}

/// # Safety
/// `traj` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn ddlab_trajectory_len(traj: *const DdlabTrajectory) -> usize {
    traj.as_ref().map_or(0, |t| t.0.len())
}

/// Record `index` (0-based).
///
/// # Safety
/// `traj` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ddlab_trajectory_record(
    traj: *const DdlabTrajectory,
    index: usize,
    out: *mut DdlabStepRecord,
) -> DdlabStatus {
    guard(|| {
        let t = &traj.as_ref().ok_or_else(|| null("traj"))?.0;
        let r = t.get(index).ok_or_else(|| {
            Fail(
                DdlabStatus::InvalidArgument,
                format!("index {index} out of range 0..{}", t.len()),
            )
        })?;
        *out_ptr(out, "out")? = DdlabStepRecord {
            t: r.t,
            train_error: r.train_error,
            test_error: r.test_error,
        };
        Ok(())
    })
}

/// # Safety
/// `traj` must come from [`ddlab_trajectory_run`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ddlab_trajectory_free(traj: *mut DdlabTrajectory) {
    if !traj.is_null() {
        drop(Box::from_raw(traj));
    }
}

/// Signal-less SE diagonal `Ω_t[t,t]` and test error for `t = 1..=len`.
///
/// # Safety
/// `omega` and `test` must each hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn ddlab_signalless_closed_form(
    eta0: f64,
    eta1: f64,
    alpha: f64,
    theta_sq: f64,
    omega: *mut f64,
    test: *mut f64,
    len: usize,
) -> DdlabStatus {
    guard(|| {
        let points = signalless_closed_form(eta0, eta1, alpha, theta_sq, len)?;
        let omega = slice_out(omega, len, "omega")?;
        let test = slice_out(test, len, "test")?;
        for (i, p) in points.iter().enumerate() {
            omega[i] = p.omega;
            test[i] = p.test;
        }
        Ok(())
    })
}

/// Online early stopping. `out` receives the 1-based stop time, or 0 when
/// the rule never fires.
///
/// # Safety
/// `errors` must hold `len` values and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ddlab_early_stop_online(
    errors: *const f64,
    len: usize,
    eps: f64,
    mode: DdlabStopMode,
    out: *mut usize,
) -> DdlabStatus {
    guard(|| {
        let mode = match mode {
            DdlabStopMode::Absolute => StopMode::Absolute,
            DdlabStopMode::Log => StopMode::Log,
        };
        let t = early_stop_online(slice_in(errors, len, "errors")?, eps, mode)?;
        *out_ptr(out, "out")? = t.unwrap_or(0);
        Ok(())
    })
}

/// 1-based index of the smallest candidate error, ties toward the smaller
/// index.
///
/// # Safety
/// `errors` must hold `len` values and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ddlab_select_candidate(
    errors: *const f64,
    len: usize,
    out: *mut usize,
) -> DdlabStatus {
    guard(|| {
        *out_ptr(out, "out")? = select_candidate(slice_in(errors, len, "errors")?)?;
        Ok(())
    })
}
