//! C ABI over `oppsched`.
//!
//! Handles are opaque pointers created by `*_new`-style functions and
//! released with the matching `*_free`. Every fallible call returns an
//! [`OppschedStatus`]; on failure [`oppsched_last_error`] describes it.
//! Outputs are written only on success.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use oppsched::cli::{resolve_policy, PolicyArgs};
use oppsched::drift::{averaged_drift, SolverError, SolverOptions};
use oppsched::fluid::{fluid_trajectory, is_stable, stability_threshold, Sweep};
use oppsched::{Error, FluidError, Policy, PolicySpec, SystemConfig};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OppschedStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidConfig = 3,
    InvalidPolicy = 4,
    NotErgodic = 5,
    SolverFailed = 6,
    Panic = 7,
}

/// A validated system configuration.
pub struct OppschedSystem {
    cfg: SystemConfig,
}

/// A policy compiled against a copy of the system it was created for.
pub struct OppschedPolicy {
    spec: PolicySpec,
    policy: Policy,
    cfg: SystemConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Fail(OppschedStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Config(_) => OppschedStatus::InvalidConfig,
            Error::Policy(_) => OppschedStatus::InvalidPolicy,
            Error::Usage(_) | Error::Io { .. } => OppschedStatus::InvalidArgument,
            Error::Solver(s) | Error::Fluid(FluidError::Solver(s)) => solver_status(s),
            Error::Fluid(FluidError::Policy(_)) => OppschedStatus::InvalidPolicy,
            Error::Fluid(FluidError::BadInitial { .. } | FluidError::BadSweep(_)) => {
                OppschedStatus::InvalidArgument
            }
            Error::Fluid(_) => OppschedStatus::SolverFailed,
        };
        Fail(status, e.to_string())
    }
}

impl From<FluidError> for Fail {
    fn from(e: FluidError) -> Self {
        Error::from(e).into()
    }
}

impl From<SolverError> for Fail {
    fn from(e: SolverError) -> Self {
        Error::from(e).into()
    }
}

fn solver_status(e: &SolverError) -> OppschedStatus {
    match e {
        SolverError::NotErgodic(_) => OppschedStatus::NotErgodic,
        _ => OppschedStatus::SolverFailed,
    }
}

fn null(what: &str) -> Fail {
    Fail(OppschedStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: String) -> Fail {
    Fail(OppschedStatus::InvalidArgument, msg)
}

/// Runs `f`, converting errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> OppschedStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            OppschedStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(&format!("internal error: {msg}"));
            OppschedStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// Message for the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn oppsched_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn oppsched_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Parses and validates a JSON configuration.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn oppsched_system_from_json(
    json: *const c_char,
    out: *mut *mut OppschedSystem,
) -> OppschedStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let cfg = SystemConfig::from_json_str(str_arg(json, "json")?).map_err(Error::from)?;
        *out = Box::into_raw(Box::new(OppschedSystem { cfg }));
        Ok(())
    })
}

/// The bundled two-class CDMA system with the given class-1 arrival rate.
///
/// # Safety
/// `out` must be a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn oppsched_system_cdma(
    lambda1: f64,
    out: *mut *mut OppschedSystem,
) -> OppschedStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let cfg = SystemConfig::cdma_table1(lambda1)
            .validate()
            .map_err(Error::from)?;
        *out = Box::into_raw(Box::new(OppschedSystem { cfg }));
        Ok(())
    })
}

/// # Safety
/// `sys` must come from this library and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn oppsched_system_free(sys: *mut OppschedSystem) {
    if !sys.is_null() {
        drop(Box::from_raw(sys));
    }
}

/// # Safety
/// `sys` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn oppsched_system_num_classes(
    sys: *const OppschedSystem,
    out: *mut usize,
) -> OppschedStatus {
    guard(|| {
        let s = ref_arg(sys, "sys")?;
        *out_arg(out, "out")? = s.cfg.num_classes();
        Ok(())
    })
}

/// Load `sum_k lambda_k / mu_{k,N_k}`.
///
/// # Safety
/// `sys` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn oppsched_system_rho(
    sys: *const OppschedSystem,
    out: *mut f64,
) -> OppschedStatus {
    guard(|| {
        let s = ref_arg(sys, "sys")?;
        *out_arg(out, "out")? = s.cfg.rho();
        Ok(())
    })
}

/// Builds a policy from the same strings the command line accepts, e.g.
/// `"sb"` with tie `"random:1,1"`. A null `tie` selects the default.
///
/// # Safety
/// `sys` must be a live handle, `policy` a NUL-terminated string, `tie`
/// null or NUL-terminated, and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn oppsched_policy_new(
    sys: *const OppschedSystem,
    policy: *const c_char,
    tie: *const c_char,
    out: *mut *mut OppschedPolicy,
) -> OppschedStatus {
    guard(|| {
        let s = ref_arg(sys, "sys")?;
        let out = out_arg(out, "out")?;
        let args = PolicyArgs {
            policy: str_arg(policy, "policy")?.to_string(),
            tie: if tie.is_null() {
                None
            } else {
                Some(str_arg(tie, "tie")?.to_string())
            },
        };
        let spec = resolve_policy(&args, &s.cfg)?;
        let policy = Policy::new(spec.clone(), &s.cfg).map_err(Error::from)?;
        *out = Box::into_raw(Box::new(OppschedPolicy {
            spec,
            policy,
            cfg: s.cfg.clone(),
        }));
        Ok(())
    })
}

/// # Safety
/// `p` must come from this library and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn oppsched_policy_free(p: *mut OppschedPolicy) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Whether the policy serves a best-state user whenever one is present.
///
/// # Safety
/// `p` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn oppsched_policy_is_best_rate(
    p: *const OppschedPolicy,
    out: *mut bool,
) -> OppschedStatus {
    guard(|| {
        let p = ref_arg(p, "policy")?;
        *out_arg(out, "out")? = p.policy.is_best_rate(&p.cfg);
        Ok(())
    })
}

/// Averaged drift with the classes listed in `emptied` (0-based) in steady
/// state and every other class saturated. Writes one value per class into
/// `out`, which must hold `out_len >= num_classes` doubles.
///
/// # Safety
/// `p` must be a live handle, `emptied` must point to `emptied_len`
/// values (may be null when the length is 0) and `out` to `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn oppsched_averaged_drift(
    p: *const OppschedPolicy,
    emptied: *const usize,
    emptied_len: usize,
    out: *mut f64,
    out_len: usize,
) -> OppschedStatus {
    guard(|| {
        let p = ref_arg(p, "policy")?;
        let k = p.cfg.num_classes();
        let u = slice_arg(emptied, emptied_len, "emptied")?;
        if let Some(bad) = u.iter().find(|&&c| c >= k) {
            return Err(invalid(format!("class {bad} out of range (0..{k})")));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        if out_len < k {
            return Err(invalid(format!("out holds {out_len} values, need {k}")));
        }
        let d = averaged_drift(&p.policy, &p.cfg, u, &SolverOptions::default())?;
        std::slice::from_raw_parts_mut(out, k).copy_from_slice(&d.drift);
        Ok(())
    })
}

/// Stability verdict of the policy at the system's load.
///
/// # Safety
/// `p` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn oppsched_is_stable(
    p: *const OppschedPolicy,
    out: *mut bool,
) -> OppschedStatus {
    guard(|| {
        let p = ref_arg(p, "policy")?;
        let out = out_arg(out, "out")?;
        *out = is_stable(&p.policy, &p.cfg, &SolverOptions::default())?.policy_stable;
        Ok(())
    })
}

/// Time at which the fluid limit started at `x0` reaches zero, or +infinity
/// when it grows forever.
///
/// # Safety
/// `p` must be a live handle, `x0` must point to `x0_len` doubles and `out`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn oppsched_emptying_time(
    p: *const OppschedPolicy,
    x0: *const f64,
    x0_len: usize,
    out: *mut f64,
) -> OppschedStatus {
    guard(|| {
        let p = ref_arg(p, "policy")?;
        let x0 = slice_arg(x0, x0_len, "x0")?;
        let out = out_arg(out, "out")?;
        let tr = fluid_trajectory(&p.policy, &p.cfg, x0, &SolverOptions::default())?;
        *out = tr.emptying_time().unwrap_or(f64::INFINITY);
        Ok(())
    })
}

/// Load at which the policy loses stability as the arrival rate of `class`
/// (0-based) moves over `[lo, hi]`.
///
/// # Safety
/// `p` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn oppsched_stability_threshold(
    p: *const OppschedPolicy,
    class: usize,
    lo: f64,
    hi: f64,
    out: *mut f64,
) -> OppschedStatus {
    guard(|| {
        let p = ref_arg(p, "policy")?;
        let out = out_arg(out, "out")?;
        let sweep = Sweep { class, lo, hi };
        *out = stability_threshold(&p.spec, &p.cfg, sweep, &SolverOptions::default())?.rho_star;
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ptr;

    #[test]
    fn null_out_pointer_is_reported() {
        let st = unsafe { oppsched_system_cdma(0.14, ptr::null_mut()) };
        assert_eq!(st, OppschedStatus::NullPointer);
        let msg = unsafe { CStr::from_ptr(oppsched_last_error()) };
        assert_eq!(msg.to_str().unwrap(), "out is null");
    }

    #[test]
    fn version_matches_crate() {
        let v = unsafe { CStr::from_ptr(oppsched_version()) };
        assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
    }
}
