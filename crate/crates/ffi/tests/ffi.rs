use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use pixelrl_ffi::*;

const TINY: &str = r#"
[experiment]
mode = "sac_ae"
steps = 10
seed_steps = 4
batch_size = 4
eval_interval = 5
eval_episodes = 1

[net]
hidden = 16
latent_dim = 4
conv_depth = 2
conv_channels = 4

[env]
render_size = 16
episode_len = 40
"#;

fn last_error() -> String {
    unsafe { CStr::from_ptr(pxrl_last_error()) }.to_string_lossy().into_owned()
}

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn new_env(task: &str) -> *mut PxrlEnv {
    let mut env = ptr::null_mut();
    let st = unsafe { pxrl_env_new(c(task).as_ptr(), 16, 4, 40, 3, &mut env) };
    assert_eq!(st, PxrlStatus::Ok, "{}", last_error());
    env
}

#[test]
fn env_round_trip_and_shape_checks() {
    let env = new_env("point_reacher");
    unsafe {
        let (n, a, s) = (pxrl_env_obs_len(env), pxrl_env_action_dim(env), pxrl_env_state_dim(env));
        assert_eq!((n, a, s), (9 * 16 * 16, 2, 6));
        let mut obs = vec![0u8; n];
        let mut state = vec![0.0; s];
        assert_eq!(pxrl_env_reset(env, obs.as_mut_ptr(), n, state.as_mut_ptr(), s), PxrlStatus::Ok);
        let (mut reward, mut done) = (0.0, false);
        let mut steps = 0;
        while !done {
            let st = pxrl_env_step(env, [0.3, -0.2].as_ptr(), 2, obs.as_mut_ptr(), n, state.as_mut_ptr(), s, &mut reward, &mut done);
            assert_eq!(st, PxrlStatus::Ok);
            steps += 1;
        }
        assert_eq!(steps, 10);
        let st = pxrl_env_step(env, [0.0, 0.0].as_ptr(), 2, obs.as_mut_ptr(), n, state.as_mut_ptr(), s, &mut reward, &mut done);
        assert_eq!(st, PxrlStatus::Contract);
        assert!(last_error().contains("reset"));

        pxrl_env_reset(env, obs.as_mut_ptr(), n, state.as_mut_ptr(), s);
        let st = pxrl_env_step(env, [0.0].as_ptr(), 1, obs.as_mut_ptr(), n, state.as_mut_ptr(), s, &mut reward, &mut done);
        assert_eq!(st, PxrlStatus::InvalidArgument);
        assert!(last_error().contains("action"));
        assert_eq!(pxrl_env_reset(env, obs.as_mut_ptr(), n - 1, state.as_mut_ptr(), s), PxrlStatus::InvalidArgument);
        pxrl_env_free(env);
    }
}

#[test]
fn bad_arguments_report_status_and_message() {
    unsafe {
        let mut env = ptr::null_mut();
        assert_eq!(pxrl_env_new(c("walker").as_ptr(), 16, 4, 40, 0, &mut env), PxrlStatus::InvalidArgument);
        assert!(last_error().contains("walker"));
        assert!(env.is_null());
        assert_eq!(pxrl_env_new(c("pendulum_swingup").as_ptr(), 16, 3, 40, 0, &mut env), PxrlStatus::Config);
        assert_eq!(pxrl_env_new(ptr::null(), 16, 4, 40, 0, &mut env), PxrlStatus::NullPointer);
        assert_eq!(pxrl_env_new(c("pendulum_swingup").as_ptr(), 16, 4, 40, 0, ptr::null_mut()), PxrlStatus::NullPointer);
        assert_eq!(pxrl_env_obs_len(ptr::null()), 0);
        pxrl_env_free(ptr::null_mut());

        let mut agent = ptr::null_mut();
        assert_eq!(pxrl_agent_new(c("[sac]\ngamma = 2.0").as_ptr(), 0, &mut agent), PxrlStatus::Config);
        assert!(last_error().contains("sac.gamma"));
        assert_eq!(pxrl_agent_new(c("[nope]").as_ptr(), 0, &mut agent), PxrlStatus::Config);
        assert!(!CStr::from_ptr(pxrl_version()).to_bytes().is_empty());
    }
}

#[test]
fn replay_agent_training_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let env = new_env("pendulum_swingup");
    unsafe {
        let mut replay = ptr::null_mut();
        assert_eq!(pxrl_replay_new(env, 100, 0, &mut replay), PxrlStatus::Ok);
        let mut agent = ptr::null_mut();
        assert_eq!(pxrl_agent_new(c(TINY).as_ptr(), 1, &mut agent), PxrlStatus::Ok, "{}", last_error());

        let mut loss = f64::NAN;
        assert_eq!(pxrl_agent_train_step(agent, replay, &mut loss), PxrlStatus::NotReady);
        assert_eq!(pxrl_replay_collect(replay, env, 12, 5), PxrlStatus::Ok);
        assert_eq!(pxrl_replay_len(replay), 12);

        // Manual push with the handle's shapes.
        let n = pxrl_env_obs_len(env);
        let (obs, state) = (vec![7u8; n], vec![0.5; 3]);
        let st = pxrl_replay_push(replay, obs.as_ptr(), [0.1].as_ptr(), 1.0, obs.as_ptr(), false, state.as_ptr(), state.as_ptr());
        assert_eq!(st, PxrlStatus::Ok);
        assert_eq!(pxrl_replay_len(replay), 13);

        for _ in 0..3 {
            assert_eq!(pxrl_agent_train_step(agent, replay, &mut loss), PxrlStatus::Ok, "{}", last_error());
            assert!(loss.is_finite());
        }
        let mut action = [0.0];
        assert_eq!(pxrl_agent_act(agent, obs.as_ptr(), n, ptr::null(), 0, true, action.as_mut_ptr(), 1), PxrlStatus::Ok);
        assert!(action[0].abs() <= 1.0);

        let ckpt = c(dir.path().join("a.ckpt").to_str().unwrap());
        assert_eq!(pxrl_agent_save(agent, ckpt.as_ptr()), PxrlStatus::Ok);
        let mut copy = ptr::null_mut();
        pxrl_agent_new(c(TINY).as_ptr(), 9, &mut copy);
        assert_eq!(pxrl_agent_load(copy, ckpt.as_ptr()), PxrlStatus::Ok);
        let mut again = [0.0];
        pxrl_agent_act(copy, obs.as_ptr(), n, ptr::null(), 0, true, again.as_mut_ptr(), 1);
        assert_eq!(action, again);

        let mut other = ptr::null_mut();
        pxrl_agent_new(c(&TINY.replace("conv_channels = 4", "conv_channels = 8")).as_ptr(), 0, &mut other);
        assert_eq!(pxrl_agent_load(other, ckpt.as_ptr()), PxrlStatus::Contract);
        assert_eq!(pxrl_agent_load(other, c("/nonexistent/x.ckpt").as_ptr()), PxrlStatus::Io);

        let file = c(dir.path().join("buf.bin").to_str().unwrap());
        assert_eq!(pxrl_replay_freeze(replay), PxrlStatus::Ok);
        assert_eq!(pxrl_replay_collect(replay, env, 1, 0), PxrlStatus::Contract);
        assert_eq!(pxrl_replay_save(replay, file.as_ptr()), PxrlStatus::Ok);
        let mut loaded = ptr::null_mut();
        assert_eq!(pxrl_replay_load(file.as_ptr(), 0, &mut loaded), PxrlStatus::Ok);
        assert_eq!(pxrl_replay_len(loaded), 13);
        std::fs::write(dir.path().join("junk.bin"), b"junk").unwrap();
        let junk = c(dir.path().join("junk.bin").to_str().unwrap());
        assert_eq!(pxrl_replay_load(junk.as_ptr(), 0, &mut loaded), PxrlStatus::Format);

        for a in [agent, copy, other] {
            pxrl_agent_free(a);
        }
        pxrl_replay_free(replay);
        pxrl_replay_free(loaded);
        pxrl_env_free(env);
    }
}

#[test]
fn whole_run_is_deterministic() {
    let mut a = f64::NAN;
    let mut b = f64::NAN;
    unsafe {
        assert_eq!(pxrl_run_training(c(TINY).as_ptr(), 2, ptr::null(), &mut a), PxrlStatus::Ok, "{}", last_error());
        assert_eq!(pxrl_run_training(c(TINY).as_ptr(), 2, ptr::null(), &mut b), PxrlStatus::Ok);
    }
    assert!(a.is_finite());
    assert_eq!(a.to_bits(), b.to_bits());
}

fn target_dir() -> PathBuf {
    // tests run from target/<profile>/deps
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().parent().unwrap().to_path_buf()
}

const C_SMOKE: &str = r#"
#include <stdio.h>
#include <string.h>
#include "pixelrl.h"

int main(void) {
    PxrlEnv *env = NULL;
    if (pxrl_env_new("pendulum_swingup", 16, 4, 40, 1, &env) != PXRL_STATUS_OK) return 1;
    size_t n = pxrl_env_obs_len(env), s = pxrl_env_state_dim(env);
    unsigned char obs[9 * 16 * 16];
    double state[3], reward = 0.0, action[1] = {0.5};
    bool done = false;
    if (n != sizeof obs || s != 3) return 2;
    if (pxrl_env_reset(env, obs, n, state, s) != PXRL_STATUS_OK) return 3;
    if (pxrl_env_step(env, action, 1, obs, n, state, s, &reward, &done) != PXRL_STATUS_OK) return 4;
    if (pxrl_env_step(env, action, 2, obs, n, state, s, &reward, &done) != PXRL_STATUS_INVALID_ARGUMENT) return 5;
    if (strstr(pxrl_last_error(), "action") == NULL) return 6;
    pxrl_env_free(env);
    printf("ok %s\n", pxrl_version());
    return 0;
}
"#;

#[test]
fn header_compiles_and_links_from_c() {
    let lib = target_dir().join("libpixelrl_ffi.a");
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    if Command::new("cc").arg("--version").output().is_err() || !lib.exists() {
        eprintln!("skipping: no C compiler or static library at {}", lib.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    let exe = dir.path().join("smoke");
    std::fs::write(&src, C_SMOKE).unwrap();
    let out = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-I"])
        .arg(&include)
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = Command::new(&exe).output().unwrap();
    assert_eq!(run.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&run.stdout).starts_with("ok "));
}
