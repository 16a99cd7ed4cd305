//! C interface to pixelrl.
//!
//! Every fallible call returns a [`PxrlStatus`]; on failure the message is
//! available from [`pxrl_last_error`] on the same thread until the next
//! failing call. Handles are opaque and owned by the caller, who must release
//! them with the matching `*_free` function. Output buffers are caller
//! allocated and their lengths are checked against the handle's shapes.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::slice;

use pixelrl::agent::Agent;
use pixelrl::config::ExperimentConfig;
use pixelrl::envs::{Env, EnvConfig, Task};
use pixelrl::harness::{self, layout_for};
use pixelrl::replay::{ReplayBuffer, Transition};
use pixelrl::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PxrlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Dimension = 3,
    Config = 4,
    Contract = 5,
    NotReady = 6,
    Numerical = 7,
    Io = 8,
    Format = 9,
    /// A Rust panic was caught at the boundary; the handle involved should
    /// be freed and not used again.
    Panic = 10,
}

pub struct PxrlEnv {
    env: Env,
}

pub struct PxrlAgent {
    agent: Agent,
}

pub struct PxrlReplay {
    buf: ReplayBuffer,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> PxrlStatus {
    match e {
        Error::Dimension { .. } => PxrlStatus::Dimension,
        Error::Domain { .. } => PxrlStatus::InvalidArgument,
        Error::Config(_) => PxrlStatus::Config,
        Error::Contract(_) => PxrlStatus::Contract,
        Error::NotReady { .. } => PxrlStatus::NotReady,
        Error::Numerical { .. } => PxrlStatus::Numerical,
        Error::Io { .. } => PxrlStatus::Io,
        Error::Format { .. } => PxrlStatus::Format,
    }
}

struct Fail(PxrlStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(PxrlStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(PxrlStatus::InvalidArgument, msg.into())
}

/// Runs `f`, converting errors and panics into a status plus message.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> PxrlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PxrlStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(&format!("panic: {msg}"));
            PxrlStatus::Panic
        }
    }
}

unsafe fn handle<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn input<'a, T>(p: *const T, len: usize, expected: usize, what: &str) -> Result<&'a [T], Fail> {
    if len != expected {
        return Err(invalid(format!("{what} has length {len}, expected {expected}")));
    }
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn output<'a, T>(p: *mut T, len: usize, expected: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if len != expected {
        return Err(invalid(format!("{what} has length {len}, expected {expected}")));
    }
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn config_arg(toml: *const c_char) -> Result<ExperimentConfig, Fail> {
    if toml.is_null() {
        return Ok(ExperimentConfig::default());
    }
    Ok(ExperimentConfig::from_toml_str(str_arg(toml, "config")?)?)
}

/// Message of the last failed call on this thread; empty if none. The
/// pointer stays valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn pxrl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pxrl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

// Environments.

/// Creates an environment. `task` is one of `pendulum_swingup`,
/// `pendulum_sparse`, `point_reacher`, `cartpole_balance`.
///
/// # Safety
/// `task` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pxrl_env_new(
    task: *const c_char,
    render_size: usize,
    action_repeat: usize,
    episode_len: usize,
    seed: u64,
    out: *mut *mut PxrlEnv,
) -> PxrlStatus {
    guard(|| {
        let name = str_arg(task, "task")?;
        let task = Task::parse(name).ok_or_else(|| invalid(format!("unknown task {name:?}")))?;
        let cfg = EnvConfig {
            task,
            render_size,
            action_repeat,
            episode_len,
            seed,
            ..EnvConfig::default()
        };
        put(out, PxrlEnv { env: Env::new(cfg)? })
    })
}

/// # Safety
/// `env` must come from [`pxrl_env_new`] and not be used afterwards; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn pxrl_env_free(env: *mut PxrlEnv) {
    if !env.is_null() {
        drop(Box::from_raw(env));
    }
}

/// Length in bytes of a stacked observation; 0 for a null handle.
///
/// # Safety
/// `env` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pxrl_env_obs_len(env: *const PxrlEnv) -> usize {
    env.as_ref().map_or(0, |e| e.env.config().obs_len())
}

/// # Safety
/// `env` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pxrl_env_action_dim(env: *const PxrlEnv) -> usize {
    env.as_ref().map_or(0, |e| e.env.action_dim())
}

/// # Safety
/// `env` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pxrl_env_state_dim(env: *const PxrlEnv) -> usize {
    env.as_ref().map_or(0, |e| e.env.state_dim())
}

/// Starts an episode, writing the first observation and state.
///
/// # Safety
/// Buffers must hold `obs_len` bytes and `state_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn pxrl_env_reset(
    env: *mut PxrlEnv,
    obs: *mut u8,
    obs_len: usize,
    state: *mut f64,
    state_len: usize,
) -> PxrlStatus {
    guard(|| {
        let e = handle(env, "env")?;
        let o = output(obs, obs_len, e.env.config().obs_len(), "obs")?;
        let s = output(state, state_len, e.env.state_dim(), "state")?;
        let (ob, st) = e.env.reset();
        o.copy_from_slice(&ob);
        s.copy_from_slice(&st);
        Ok(())
    })
}

/// Applies one action (repeated `action_repeat` times).
///
/// # Safety
/// Buffers must match the environment's shapes; `reward` and `done` must be
/// valid pointers.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn pxrl_env_step(
    env: *mut PxrlEnv,
    action: *const f64,
    action_len: usize,
    obs: *mut u8,
    obs_len: usize,
    state: *mut f64,
    state_len: usize,
    reward: *mut f64,
    done: *mut bool,
) -> PxrlStatus {
    guard(|| {
        let e = handle(env, "env")?;
        let a = input(action, action_len, e.env.action_dim(), "action")?;
        let o = output(obs, obs_len, e.env.config().obs_len(), "obs")?;
        let s = output(state, state_len, e.env.state_dim(), "state")?;
        let r = handle(reward, "reward")?;
        let d = handle(done, "done")?;
        let step = e.env.step(a)?;
        o.copy_from_slice(&step.obs);
        s.copy_from_slice(&step.state);
        *r = step.reward;
        *d = step.done;
        Ok(())
    })
}

// Replay buffers.

/// Creates an empty buffer shaped for `env`'s observations and actions.
///
/// # Safety
/// `env` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pxrl_replay_new(
    env: *const PxrlEnv,
    capacity: usize,
    seed: u64,
    out: *mut *mut PxrlReplay,
) -> PxrlStatus {
    guard(|| {
        let e = env.as_ref().ok_or_else(|| null("env"))?;
        let buf = ReplayBuffer::new(layout_for(e.env.config()), capacity, seed)?;
        put(out, PxrlReplay { buf })
    })
}

/// # Safety
/// `replay` must come from this library and not be used afterwards; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn pxrl_replay_free(replay: *mut PxrlReplay) {
    if !replay.is_null() {
        drop(Box::from_raw(replay));
    }
}

/// # Safety
/// `replay` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pxrl_replay_len(replay: *const PxrlReplay) -> usize {
    replay.as_ref().map_or(0, |r| r.buf.len())
}

/// Appends one transition.
///
/// # Safety
/// Every pointer must address at least its stated number of elements.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn pxrl_replay_push(
    replay: *mut PxrlReplay,
    obs: *const u8,
    action: *const f64,
    reward: f64,
    next_obs: *const u8,
    done: bool,
    state: *const f64,
    next_state: *const f64,
) -> PxrlStatus {
    guard(|| {
        let r = handle(replay, "replay")?;
        let l = r.buf.layout();
        let n = l.obs_len();
        let t = Transition {
            obs: input(obs, n, n, "obs")?.to_vec(),
            action: input(action, l.action_dim, l.action_dim, "action")?.to_vec(),
            reward,
            next_obs: input(next_obs, n, n, "next_obs")?.to_vec(),
            done,
            state: input(state, l.state_dim, l.state_dim, "state")?.to_vec(),
            next_state: input(next_state, l.state_dim, l.state_dim, "next_state")?.to_vec(),
        };
        r.buf.push(t)?;
        Ok(())
    })
}

/// Fills the buffer with `n` transitions from a uniformly random policy.
///
/// # Safety
/// Both handles must be live.
#[no_mangle]
pub unsafe extern "C" fn pxrl_replay_collect(replay: *mut PxrlReplay, env: *mut PxrlEnv, n: usize, seed: u64) -> PxrlStatus {
    guard(|| {
        let r = handle(replay, "replay")?;
        let e = handle(env, "env")?;
        harness::seed_collect(&mut e.env, &mut r.buf, n, &mut ChaCha8Rng::seed_from_u64(seed))?;
        Ok(())
    })
}

/// Makes the buffer read-only.
///
/// # Safety
/// `replay` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn pxrl_replay_freeze(replay: *mut PxrlReplay) -> PxrlStatus {
    guard(|| {
        handle(replay, "replay")?.buf.freeze();
        Ok(())
    })
}

/// # Safety
/// `replay` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn pxrl_replay_save(replay: *const PxrlReplay, path: *const c_char) -> PxrlStatus {
    guard(|| {
        let r = replay.as_ref().ok_or_else(|| null("replay"))?;
        r.buf.save(&PathBuf::from(str_arg(path, "path")?))?;
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pxrl_replay_load(path: *const c_char, seed: u64, out: *mut *mut PxrlReplay) -> PxrlStatus {
    guard(|| {
        let buf = ReplayBuffer::load(&PathBuf::from(str_arg(path, "path")?), seed)?;
        put(out, PxrlReplay { buf })
    })
}

// Agents.

/// Creates an agent from a TOML experiment config (null for defaults).
///
/// # Safety
/// `config_toml` must be null or NUL-terminated; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn pxrl_agent_new(config_toml: *const c_char, seed: u64, out: *mut *mut PxrlAgent) -> PxrlStatus {
    guard(|| {
        let cfg = config_arg(config_toml)?;
        put(out, PxrlAgent { agent: Agent::new(&cfg, seed)? })
    })
}

/// # Safety
/// `agent` must come from this library and not be used afterwards; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn pxrl_agent_free(agent: *mut PxrlAgent) {
    if !agent.is_null() {
        drop(Box::from_raw(agent));
    }
}

/// # Safety
/// `agent` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pxrl_agent_action_dim(agent: *const PxrlAgent) -> usize {
    agent.as_ref().map_or(0, |a| a.agent.action_dim())
}

/// Chooses an action. Pixel agents read `obs` and ignore `state`; state
/// agents read `state` and ignore `obs` (which may then be null with length 0).
///
/// # Safety
/// Buffers must address at least their stated lengths.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn pxrl_agent_act(
    agent: *mut PxrlAgent,
    obs: *const u8,
    obs_len: usize,
    state: *const f64,
    state_len: usize,
    deterministic: bool,
    action: *mut f64,
    action_len: usize,
) -> PxrlStatus {
    guard(|| {
        let a = handle(agent, "agent")?;
        let o = input(obs, obs_len, obs_len, "obs")?;
        let s = input(state, state_len, state_len, "state")?;
        let out = output(action, action_len, a.agent.action_dim(), "action")?;
        out.copy_from_slice(&a.agent.act(o, s, deterministic)?);
        Ok(())
    })
}

/// One training update from `replay`; writes the critic loss when
/// `loss_q` is non-null.
///
/// # Safety
/// Handles must be live; `loss_q` null or valid.
#[no_mangle]
pub unsafe extern "C" fn pxrl_agent_train_step(agent: *mut PxrlAgent, replay: *mut PxrlReplay, loss_q: *mut f64) -> PxrlStatus {
    guard(|| {
        let a = handle(agent, "agent")?;
        let r = handle(replay, "replay")?;
        let m = a.agent.train_step(&mut r.buf)?;
        if let Some(l) = loss_q.as_mut() {
            *l = m.loss_q;
        }
        Ok(())
    })
}

/// # Safety
/// `agent` must be live and `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn pxrl_agent_save(agent: *const PxrlAgent, path: *const c_char) -> PxrlStatus {
    guard(|| {
        let a = agent.as_ref().ok_or_else(|| null("agent"))?;
        a.agent.save_checkpoint(&PathBuf::from(str_arg(path, "path")?))?;
        Ok(())
    })
}

/// Restores all parameters; the checkpoint must match the architecture.
///
/// # Safety
/// `agent` must be live and `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn pxrl_agent_load(agent: *mut PxrlAgent, path: *const c_char) -> PxrlStatus {
    guard(|| {
        let a = handle(agent, "agent")?;
        a.agent.load_checkpoint(&PathBuf::from(str_arg(path, "path")?))?;
        Ok(())
    })
}

// Whole runs.

/// Runs a full training job for one seed. Writes the run directory under
/// `out_dir` when non-null and the final score (NaN without evaluations)
/// to `final_mean` when non-null.
///
/// # Safety
/// String arguments must be null or NUL-terminated; `final_mean` null or valid.
#[no_mangle]
pub unsafe extern "C" fn pxrl_run_training(
    config_toml: *const c_char,
    seed: u64,
    out_dir: *const c_char,
    final_mean: *mut f64,
) -> PxrlStatus {
    guard(|| {
        let cfg = config_arg(config_toml)?;
        let out = if out_dir.is_null() {
            None
        } else {
            Some(PathBuf::from(str_arg(out_dir, "out_dir")?))
        };
        let run = harness::run_training(&cfg, seed, out.as_deref())?;
        if let Some(f) = final_mean.as_mut() {
            *f = run.final_mean().unwrap_or(f64::NAN);
        }
        Ok(())
    })
}
