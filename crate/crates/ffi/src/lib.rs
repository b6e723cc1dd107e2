//! C ABI over `ctxrisk`.
//!
//! Objects cross the boundary as opaque handles created by `*_new`/`*_from_*`
//! functions and released by the matching `*_free`. Every fallible call
//! returns a [`CtxriskStatus`]; on failure the message is available from
//! [`ctxrisk_last_error`] on the same thread. Structured parameters (risk
//! measures, objectives, policies, joint distributions) are JSON strings in
//! the library's serde format.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use ctxrisk::cli::{run_experiment, write_output, ExperimentConfig, RunError};
use ctxrisk::nested::{self, DiscreteJoint, TabularPolicy};
use ctxrisk::newsvendor::{train_policy, NvCost, NvObjective, NvTrainConfig, PolicyClass};
use ctxrisk::objectives::EmpiricalSample;
use ctxrisk::policy::PolicySpec;
use ctxrisk::risk::{self, LossSample, RiskSpec};
use ctxrisk::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CtxriskStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidJson = 3,
    InvalidArgument = 4,
    DimensionMismatch = 5,
    SolverFailure = 6,
    BufferTooSmall = 7,
    Io = 8,
    Panic = 9,
}

/// Training sample of covariates and outcomes.
pub struct CtxriskSample(EmpiricalSample);

/// Trained or deserialized decision policy.
pub struct CtxriskPolicy(PolicySpec);

/// Finite joint distribution of contexts and outcomes.
pub struct CtxriskJoint(DiscreteJoint);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Fail(CtxriskStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::DimensionMismatch { .. } => CtxriskStatus::DimensionMismatch,
            Error::ObjectiveNonFinite { .. } | Error::NotPositiveDefinite(_) | Error::OceUnbounded(_) => {
                CtxriskStatus::SolverFailure
            }
            Error::Format(_) => CtxriskStatus::InvalidJson,
            Error::Io(_) => CtxriskStatus::Io,
            _ => CtxriskStatus::InvalidArgument,
        };
        Fail(code, e.to_string())
    }
}

impl From<serde_json::Error> for Fail {
    fn from(e: serde_json::Error) -> Self {
        Fail(CtxriskStatus::InvalidJson, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> CtxriskStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            CtxriskStatus::Ok
        }
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic".into());
            CtxriskStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(CtxriskStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail(CtxriskStatus::InvalidUtf8, format!("{what} is not UTF-8")))
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

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

fn to_c_string(s: String) -> Result<*mut c_char, Fail> {
    CString::new(s).map(CString::into_raw).map_err(|e| Fail(CtxriskStatus::InvalidArgument, e.to_string()))
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn ctxrisk_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned by this library.
///
/// # Safety
/// `s` must be null or a pointer obtained from this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ctxrisk_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Evaluates a risk measure (`spec_json`, e.g. `{"kind":"cvar","beta":0.9}`)
/// on `n` equally likely losses.
///
/// # Safety
/// `spec_json` must be a valid C string, `losses` must point to `n` doubles
/// and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ctxrisk_risk_evaluate(
    spec_json: *const c_char,
    losses: *const f64,
    n: usize,
    out: *mut f64,
) -> CtxriskStatus {
    guard(|| {
        let spec: RiskSpec = serde_json::from_str(str_arg(spec_json, "spec_json")?)?;
        let sample = LossSample::uniform(slice_arg(losses, n, "losses")?.to_vec())?;
        *out_arg(out, "out")? = risk::evaluate(&spec, &sample)?;
        Ok(())
    })
}

/// Builds a sample from row-major covariates (`n × dx`) and outcomes
/// (`n × dy`).
///
/// # Safety
/// `x` must point to `n*dx` doubles, `y` to `n*dy` doubles and `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn ctxrisk_sample_new(
    n: usize,
    dx: usize,
    dy: usize,
    x: *const f64,
    y: *const f64,
    out: *mut *mut CtxriskSample,
) -> CtxriskStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let xs = slice_arg(x, n * dx, "x")?;
        let ys = slice_arg(y, n * dy, "y")?;
        let rows = |v: &[f64], d: usize| (0..n).map(|i| v[i * d..(i + 1) * d].to_vec()).collect::<Vec<_>>();
        let s = EmpiricalSample::new(rows(xs, dx), rows(ys, dy))?;
        *out = Box::into_raw(Box::new(CtxriskSample(s)));
        Ok(())
    })
}

/// Number of observations in a sample (0 for null).
///
/// # Safety
/// `sample` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ctxrisk_sample_len(sample: *const CtxriskSample) -> usize {
    sample.as_ref().map_or(0, |s| s.0.len())
}

/// # Safety
/// `sample` must be null or a live handle; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn ctxrisk_sample_free(sample: *mut CtxriskSample) {
    if !sample.is_null() {
        drop(Box::from_raw(sample));
    }
}

/// Trains a newsvendor order-quantity policy. `objective_json` is e.g.
/// `{"kind":"expected_cvar","beta":0.9}`; `class` is `"ldr"`, `"qdr"` or
/// `"rkhs"`; `config_json` may be null for defaults.
///
/// # Safety
/// Pointers must be valid C strings or handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ctxrisk_newsvendor_train(
    sample: *const CtxriskSample,
    objective_json: *const c_char,
    class: *const c_char,
    config_json: *const c_char,
    out: *mut *mut CtxriskPolicy,
) -> CtxriskStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let data = &ref_arg(sample, "sample")?.0;
        let objective: NvObjective = serde_json::from_str(str_arg(objective_json, "objective_json")?)?;
        let class: PolicyClass = serde_json::from_value(serde_json::Value::String(str_arg(class, "class")?.into()))?;
        let cfg: NvTrainConfig =
            if config_json.is_null() { NvTrainConfig::default() } else { serde_json::from_str(str_arg(config_json, "config_json")?)? };
        let policy = train_policy(data, objective, class, &cfg)?;
        *out = Box::into_raw(Box::new(CtxriskPolicy(policy)));
        Ok(())
    })
}

/// # Safety
/// `json` must be a valid C string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ctxrisk_policy_from_json(json: *const c_char, out: *mut *mut CtxriskPolicy) -> CtxriskStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let p = PolicySpec::from_json(str_arg(json, "json")?)?;
        *out = Box::into_raw(Box::new(CtxriskPolicy(p)));
        Ok(())
    })
}

/// Serializes a policy; release the result with [`ctxrisk_string_free`].
///
/// # Safety
/// `policy` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ctxrisk_policy_to_json(policy: *const CtxriskPolicy, out: *mut *mut c_char) -> CtxriskStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = to_c_string(ref_arg(policy, "policy")?.0.to_json()?)?;
        Ok(())
    })
}

/// Covariate and decision dimensions of a policy.
///
/// # Safety
/// `policy` must be a live handle; `dx` and `dz` writable.
#[no_mangle]
pub unsafe extern "C" fn ctxrisk_policy_dims(
    policy: *const CtxriskPolicy,
    dx: *mut usize,
    dz: *mut usize,
) -> CtxriskStatus {
    guard(|| {
        let p = &ref_arg(policy, "policy")?.0;
        *out_arg(dx, "dx")? = p.basis().dx();
        *out_arg(dz, "dz")? = p.dz();
        Ok(())
    })
}

/// Writes the decision `z(x)` into `z` (capacity `z_cap`, at least the
/// policy's `dz`).
///
/// # Safety
/// `x` must point to `dx` doubles and `z` to `z_cap` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn ctxrisk_policy_evaluate(
    policy: *const CtxriskPolicy,
    x: *const f64,
    dx: usize,
    z: *mut f64,
    z_cap: usize,
) -> CtxriskStatus {
    guard(|| {
        let p = &ref_arg(policy, "policy")?.0;
        let (dec, _) = p.evaluate(slice_arg(x, dx, "x")?)?;
        if dec.len() > z_cap {
            return Err(Fail(CtxriskStatus::BufferTooSmall, format!("need {} doubles, have {z_cap}", dec.len())));
        }
        if z.is_null() {
            return Err(null("z"));
        }
        std::slice::from_raw_parts_mut(z, dec.len()).copy_from_slice(&dec);
        Ok(())
    })
}

/// # Safety
/// `policy` must be null or a live handle; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn ctxrisk_policy_free(policy: *mut CtxriskPolicy) {
    if !policy.is_null() {
        drop(Box::from_raw(policy));
    }
}

/// # Safety
/// `json` must be a valid C string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ctxrisk_joint_from_json(json: *const c_char, out: *mut *mut CtxriskJoint) -> CtxriskStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let j = DiscreteJoint::from_json(str_arg(json, "json")?)?;
        *out = Box::into_raw(Box::new(CtxriskJoint(j)));
        Ok(())
    })
}

/// The built-in instance on which ex-ante CVaR is contextually inconsistent.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ctxrisk_joint_counterexample(out: *mut *mut CtxriskJoint) -> CtxriskStatus {
    guard(|| {
        *out_arg(out, "out")? = Box::into_raw(Box::new(CtxriskJoint(nested::counterexample_instance())));
        Ok(())
    })
}

/// Number of contexts (0 for null).
///
/// # Safety
/// `joint` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ctxrisk_joint_len(joint: *const CtxriskJoint) -> usize {
    joint.as_ref().map_or(0, |j| j.0.len())
}

/// Nested risk `ρ₁(ρ₂(cost | X))` of the newsvendor cost with default
/// holding/backorder prices, for the order quantity `z[k]` in context `k`.
///
/// # Safety
/// JSON arguments must be valid C strings, `z` must point to `n_contexts`
/// doubles and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ctxrisk_joint_nested_risk(
    joint: *const CtxriskJoint,
    rho1_json: *const c_char,
    rho2_json: *const c_char,
    z: *const f64,
    n_contexts: usize,
    out: *mut f64,
) -> CtxriskStatus {
    guard(|| {
        let j = &ref_arg(joint, "joint")?.0;
        let rho1: RiskSpec = serde_json::from_str(str_arg(rho1_json, "rho1_json")?)?;
        let rho2: RiskSpec = serde_json::from_str(str_arg(rho2_json, "rho2_json")?)?;
        let policy = tabular(j, z, n_contexts)?;
        *out_arg(out, "out")? = nested::nested_risk(j, &rho1, &rho2, &NvCost::default(), &policy)?;
        Ok(())
    })
}

/// Ex-ante risk `ρ(cost)` over the joint law, with the same conventions as
/// [`ctxrisk_joint_nested_risk`].
///
/// # Safety
/// As for [`ctxrisk_joint_nested_risk`].
#[no_mangle]
pub unsafe extern "C" fn ctxrisk_joint_exante_risk(
    joint: *const CtxriskJoint,
    rho_json: *const c_char,
    z: *const f64,
    n_contexts: usize,
    out: *mut f64,
) -> CtxriskStatus {
    guard(|| {
        let j = &ref_arg(joint, "joint")?.0;
        let rho: RiskSpec = serde_json::from_str(str_arg(rho_json, "rho_json")?)?;
        let policy = tabular(j, z, n_contexts)?;
        *out_arg(out, "out")? = nested::exante_risk(j, &rho, &NvCost::default(), &policy)?;
        Ok(())
    })
}

unsafe fn tabular(j: &DiscreteJoint, z: *const f64, n: usize) -> Result<TabularPolicy, Fail> {
    if n != j.len() {
        return Err(Error::DimensionMismatch { expected: j.len(), got: n }.into());
    }
    Ok(TabularPolicy { z: slice_arg(z, n, "z")?.iter().map(|v| vec![*v]).collect(), t: None })
}

/// # Safety
/// `joint` must be null or a live handle; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn ctxrisk_joint_free(joint: *mut CtxriskJoint) {
    if !joint.is_null() {
        drop(Box::from_raw(joint));
    }
}

/// Runs an experiment config and writes its result files under `out_dir`.
/// Invalid configs return `INVALID_ARGUMENT` and failed trials
/// `SOLVER_FAILURE`.
///
/// # Safety
/// Both arguments must be valid C strings.
#[no_mangle]
pub unsafe extern "C" fn ctxrisk_run_experiment(config_json: *const c_char, out_dir: *const c_char) -> CtxriskStatus {
    guard(|| {
        let text = str_arg(config_json, "config_json")?;
        let dir = str_arg(out_dir, "out_dir")?;
        let run = ExperimentConfig::from_json(text)
            .map_err(RunError::Config)
            .and_then(|c| run_experiment(&c))
            .and_then(|o| write_output(Path::new(dir), &o));
        run.map_err(|e| {
            let code = match e {
                RunError::Config(_) => CtxriskStatus::InvalidArgument,
                RunError::Trial { .. } => CtxriskStatus::SolverFailure,
                RunError::Io(_) => CtxriskStatus::Io,
            };
            Fail(code, e.to_string())
        })
    })
}
