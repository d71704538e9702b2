//! C ABI over the `goats` crate.
//!
//! Every fallible function returns a [`GoatsStatus`]; on failure the message
//! is available from [`goats_last_error_message`] on the same thread.
//! Environments and agents are opaque handles that must be released with
//! their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use goats::cli::Checkpoint;
use goats::goaldist::{
    interpolate_box, interpolate_discrete, reward_factorized, reward_sparse, BoxDistribution, DiscreteDistribution,
    GoalState, InterpolationMode, TemporalFactor,
};
use goats::sac::SacAgent;
use goats::scoopenv::{ContainerPreset, EnvAction, EnvConfig, Observation, ScoopEnv};
use goats::Error;

pub const GOATS_OBS_DIM: usize = 8;
pub const GOATS_ACTION_DIM: usize = 3;
pub const GOATS_GOAL_DIM: usize = 3;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GoatsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    BufferTooSmall = 4,
    Io = 5,
    VersionMismatch = 6,
    Checkpoint = 7,
    Numerical = 8,
    Panic = 9,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GoatsPreset {
    Bowl = 0,
    Bucket = 1,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GoatsInterpolation {
    Mixture = 0,
    Displacement = 1,
}

/// Opaque environment handle.
pub struct GoatsEnv {
    env: ScoopEnv,
}

/// Opaque trained-agent handle.
pub struct GoatsAgent {
    agent: SacAgent,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).expect("nul bytes removed"));
}

fn status_of(err: &Error) -> GoatsStatus {
    match err {
        Error::DimensionMismatch { .. } => GoatsStatus::DimensionMismatch,
        Error::Io(_) => GoatsStatus::Io,
        Error::VersionMismatch { .. } => GoatsStatus::VersionMismatch,
        Error::Checkpoint(_) | Error::Json(_) => GoatsStatus::Checkpoint,
        Error::NonFinite(_) | Error::NumericalAbort { .. } => GoatsStatus::Numerical,
        _ => GoatsStatus::InvalidArgument,
    }
}

/// Runs `f`, recording errors and converting panics.
fn guard<F>(f: F) -> GoatsStatus
where
    F: FnOnce() -> Result<(), (GoatsStatus, String)>,
{
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            GoatsStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            GoatsStatus::Panic
        }
    }
}

fn fail(err: Error) -> (GoatsStatus, String) {
    (status_of(&err), err.to_string())
}

fn null(what: &str) -> (GoatsStatus, String) {
    (GoatsStatus::NullPointer, format!("{what} is null"))
}

unsafe fn slice<'a>(p: *const f64, n: usize, what: &str) -> Result<&'a [f64], (GoatsStatus, String)> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn slice_mut<'a>(p: *mut f64, n: usize, what: &str) -> Result<&'a mut [f64], (GoatsStatus, String)> {
    if n == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, n))
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn goats_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn goats_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Box distribution at temporal factor `k` between `[lo0, hi0]` and `[log, hig]`.
///
/// # Safety
/// Every pointer must reference `dim` readable (inputs) or writable (outputs) doubles.
#[no_mangle]
pub unsafe extern "C" fn goats_interpolate_box(
    dim: usize,
    lo0: *const f64,
    hi0: *const f64,
    log: *const f64,
    hig: *const f64,
    k: f64,
    out_lo: *mut f64,
    out_hi: *mut f64,
) -> GoatsStatus {
    guard(|| {
        let a = BoxDistribution::new(slice(lo0, dim, "lo0")?.to_vec(), slice(hi0, dim, "hi0")?.to_vec()).map_err(fail)?;
        let b = BoxDistribution::new(slice(log, dim, "log")?.to_vec(), slice(hig, dim, "hig")?.to_vec()).map_err(fail)?;
        let k = TemporalFactor::new(k).map_err(fail)?;
        let r = interpolate_box(&a, &b, k).map_err(fail)?;
        slice_mut(out_lo, dim, "out_lo")?.copy_from_slice(r.lower());
        slice_mut(out_hi, dim, "out_hi")?.copy_from_slice(r.upper());
        Ok(())
    })
}

/// Discrete amount distribution at temporal factor `k`; `mode` is a `GoatsInterpolation` value.
///
/// On entry `*out_len` is the capacity of `out_support`/`out_weights`; on
/// return it holds the number of atoms. If the capacity is too small the
/// required length is written and `BufferTooSmall` is returned.
///
/// # Safety
/// Input arrays must hold `n0`/`ng` doubles; outputs must hold `*out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn goats_interpolate_discrete(
    n0: usize,
    support0: *const f64,
    weights0: *const f64,
    ng: usize,
    supportg: *const f64,
    weightsg: *const f64,
    k: f64,
    mode: u32,
    out_support: *mut f64,
    out_weights: *mut f64,
    out_len: *mut usize,
) -> GoatsStatus {
    guard(|| {
        if out_len.is_null() {
            return Err(null("out_len"));
        }
        let a = DiscreteDistribution::new(slice(support0, n0, "support0")?.to_vec(), slice(weights0, n0, "weights0")?.to_vec())
            .map_err(fail)?;
        let b = DiscreteDistribution::new(slice(supportg, ng, "supportg")?.to_vec(), slice(weightsg, ng, "weightsg")?.to_vec())
            .map_err(fail)?;
        let mode = match mode {
            m if m == GoatsInterpolation::Mixture as u32 => InterpolationMode::Mixture,
            m if m == GoatsInterpolation::Displacement as u32 => InterpolationMode::Displacement,
            m => return Err((GoatsStatus::InvalidArgument, format!("unknown interpolation mode {m}"))),
        };
        let r = interpolate_discrete(&a, &b, TemporalFactor::new(k).map_err(fail)?, mode).map_err(fail)?;
        let n = r.support().len();
        let cap = *out_len;
        *out_len = n;
        if cap < n {
            return Err((GoatsStatus::BufferTooSmall, format!("need {n} atoms, capacity {cap}")));
        }
        slice_mut(out_support, n, "out_support")?.copy_from_slice(r.support());
        slice_mut(out_weights, n, "out_weights")?.copy_from_slice(r.weights());
        Ok(())
    })
}

unsafe fn goal(pos: *const f64, dim: usize, amount: f64, what: &str) -> Result<GoalState, (GoatsStatus, String)> {
    GoalState::new(slice(pos, dim, what)?.to_vec(), amount).map_err(fail)
}

/// Factorized reward of an achieved goal against a desired goal.
///
/// # Safety
/// Position pointers must reference `dim` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn goats_reward_factorized(
    dim: usize,
    achieved_pos: *const f64,
    achieved_amount: f64,
    desired_pos: *const f64,
    desired_amount: f64,
    epsilon: f64,
    out: *mut f64,
) -> GoatsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let a = goal(achieved_pos, dim, achieved_amount, "achieved_pos")?;
        let d = goal(desired_pos, dim, desired_amount, "desired_pos")?;
        *out = reward_factorized(&a, &d, epsilon);
        Ok(())
    })
}

/// Sparse reward: 0 when both tolerances hold, otherwise -1.
///
/// # Safety
/// Position pointers must reference `dim` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn goats_reward_sparse(
    dim: usize,
    achieved_pos: *const f64,
    achieved_amount: f64,
    desired_pos: *const f64,
    desired_amount: f64,
    epsilon_pos: f64,
    epsilon_amount: f64,
    out: *mut f64,
) -> GoatsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let a = goal(achieved_pos, dim, achieved_amount, "achieved_pos")?;
        let d = goal(desired_pos, dim, desired_amount, "desired_pos")?;
        *out = reward_sparse(&a, &d, epsilon_pos, epsilon_amount);
        Ok(())
    })
}

/// Creates an environment from a `GoatsPreset` value. Release with [`goats_env_free`].
///
/// # Safety
/// `out` must be a writable handle slot.
#[no_mangle]
pub unsafe extern "C" fn goats_env_new(preset: u32, seed: u64, out: *mut *mut GoatsEnv) -> GoatsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let preset = match preset {
            p if p == GoatsPreset::Bowl as u32 => ContainerPreset::Bowl,
            p if p == GoatsPreset::Bucket as u32 => ContainerPreset::Bucket,
            p => return Err((GoatsStatus::InvalidArgument, format!("unknown preset {p}"))),
        };
        let env = ScoopEnv::new(EnvConfig::preset(preset), seed).map_err(fail)?;
        *out = Box::into_raw(Box::new(GoatsEnv { env }));
        Ok(())
    })
}

/// Starts a new episode and writes the first observation.
///
/// # Safety
/// `env` must come from [`goats_env_new`]; `obs_out` must hold `GOATS_OBS_DIM` doubles.
#[no_mangle]
pub unsafe extern "C" fn goats_env_reset(env: *mut GoatsEnv, obs_out: *mut f64) -> GoatsStatus {
    guard(|| {
        let env = env.as_mut().ok_or_else(|| null("env"))?;
        let out = slice_mut(obs_out, GOATS_OBS_DIM, "obs_out")?;
        out.copy_from_slice(env.env.reset().as_slice());
        Ok(())
    })
}

/// Advances one step. `achieved_out` receives `x, y, fill_fraction`.
///
/// # Safety
/// `env` must come from [`goats_env_new`]; arrays must have the documented
/// lengths; `done_out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn goats_env_step(
    env: *mut GoatsEnv,
    action: *const f64,
    obs_out: *mut f64,
    achieved_out: *mut f64,
    done_out: *mut bool,
) -> GoatsStatus {
    guard(|| {
        let env = env.as_mut().ok_or_else(|| null("env"))?;
        if done_out.is_null() {
            return Err(null("done_out"));
        }
        let mut a = [0.0; GOATS_ACTION_DIM];
        a.copy_from_slice(slice(action, GOATS_ACTION_DIM, "action")?);
        let step = env.env.step(&EnvAction(a)).map_err(fail)?;
        slice_mut(obs_out, GOATS_OBS_DIM, "obs_out")?.copy_from_slice(step.observation.as_slice());
        slice_mut(achieved_out, GOATS_GOAL_DIM, "achieved_out")?.copy_from_slice(&step.achieved.to_vec());
        *done_out = step.done;
        Ok(())
    })
}

/// Noise-free waterline height of the current episode.
///
/// # Safety
/// `env` must come from [`goats_env_new`]; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn goats_env_waterline(env: *const GoatsEnv, out: *mut f64) -> GoatsStatus {
    guard(|| {
        let env = env.as_ref().ok_or_else(|| null("env"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = env.env.waterline();
        Ok(())
    })
}

/// # Safety
/// `env` must come from [`goats_env_new`] and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn goats_env_free(env: *mut GoatsEnv) {
    if !env.is_null() {
        drop(Box::from_raw(env));
    }
}

/// Loads the agent stored in a checkpoint file. Release with [`goats_agent_free`].
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string; `out` must be a writable handle slot.
#[no_mangle]
pub unsafe extern "C" fn goats_agent_load(path: *const c_char, out: *mut *mut GoatsAgent) -> GoatsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        if path.is_null() {
            return Err(null("path"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| (GoatsStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
        let agent = Checkpoint::load(Path::new(path)).and_then(|c| c.agent()).map_err(fail)?;
        *out = Box::into_raw(Box::new(GoatsAgent { agent }));
        Ok(())
    })
}

/// Deterministic policy action for an observation and a desired goal
/// (`x, y, amount`).
///
/// # Safety
/// `agent` must come from [`goats_agent_load`]; arrays must have the documented lengths.
#[no_mangle]
pub unsafe extern "C" fn goats_agent_act(
    agent: *const GoatsAgent,
    obs: *const f64,
    desired: *const f64,
    action_out: *mut f64,
) -> GoatsStatus {
    guard(|| {
        let agent = &agent.as_ref().ok_or_else(|| null("agent"))?.agent;
        let mut o = [0.0; GOATS_OBS_DIM];
        o.copy_from_slice(slice(obs, GOATS_OBS_DIM, "obs")?);
        let d = slice(desired, GOATS_GOAL_DIM, "desired")?;
        let goal = GoalState::new(d[..2].to_vec(), d[2]).map_err(fail)?;
        let input = agent.input_for(&Observation(o), &goal);
        let a = agent.act_deterministic(&input).map_err(fail)?;
        slice_mut(action_out, GOATS_ACTION_DIM, "action_out")?.copy_from_slice(&a.0);
        Ok(())
    })
}

/// # Safety
/// `agent` must come from [`goats_agent_load`] and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn goats_agent_free(agent: *mut GoatsAgent) {
    if !agent.is_null() {
        drop(Box::from_raw(agent));
    }
}
