#ifndef PIXELRL_H
#define PIXELRL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum PxrlStatus {
  PXRL_STATUS_OK = 0,
  PXRL_STATUS_NULL_POINTER = 1,
  PXRL_STATUS_INVALID_ARGUMENT = 2,
  PXRL_STATUS_DIMENSION = 3,
  PXRL_STATUS_CONFIG = 4,
  PXRL_STATUS_CONTRACT = 5,
  PXRL_STATUS_NOT_READY = 6,
  PXRL_STATUS_NUMERICAL = 7,
  PXRL_STATUS_IO = 8,
  PXRL_STATUS_FORMAT = 9,
  // A Rust panic was caught at the boundary; the handle involved should
  // be freed and not used again.
  PXRL_STATUS_PANIC = 10,
} PxrlStatus;

typedef struct PxrlAgent PxrlAgent;

typedef struct PxrlEnv PxrlEnv;

typedef struct PxrlReplay PxrlReplay;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread; empty if none. The
// pointer stays valid until the next failing call on this thread.
const char *pxrl_last_error(void);

// Library version as a static NUL-terminated string.
const char *pxrl_version(void);

// Creates an environment. `task` is one of `pendulum_swingup`,
// `pendulum_sparse`, `point_reacher`, `cartpole_balance`.
//
// # Safety
// `task` must be a NUL-terminated string and `out` a valid pointer.
enum PxrlStatus pxrl_env_new(const char *task,
                             size_t render_size,
                             size_t action_repeat,
                             size_t episode_len,
                             uint64_t seed,
                             struct PxrlEnv **out);

// # Safety
// `env` must come from [`pxrl_env_new`] and not be used afterwards; null is ignored.
void pxrl_env_free(struct PxrlEnv *env);

// Length in bytes of a stacked observation; 0 for a null handle.
//
// # Safety
// `env` must be null or a live handle.
size_t pxrl_env_obs_len(const struct PxrlEnv *env);

// # Safety
// `env` must be null or a live handle.
size_t pxrl_env_action_dim(const struct PxrlEnv *env);

// # Safety
// `env` must be null or a live handle.
size_t pxrl_env_state_dim(const struct PxrlEnv *env);

// Starts an episode, writing the first observation and state.
//
// # Safety
// Buffers must hold `obs_len` bytes and `state_len` doubles.
enum PxrlStatus pxrl_env_reset(struct PxrlEnv *env,
                               uint8_t *obs,
                               size_t obs_len,
                               double *state,
                               size_t state_len);

// Applies one action (repeated `action_repeat` times).
//
// # Safety
// Buffers must match the environment's shapes; `reward` and `done` must be
// valid pointers.
enum PxrlStatus pxrl_env_step(struct PxrlEnv *env,
                              const double *action,
                              size_t action_len,
                              uint8_t *obs,
                              size_t obs_len,
                              double *state,
                              size_t state_len,
                              double *reward,
                              bool *done);

// Creates an empty buffer shaped for `env`'s observations and actions.
//
// # Safety
// `env` must be a live handle and `out` a valid pointer.
enum PxrlStatus pxrl_replay_new(const struct PxrlEnv *env,
                                size_t capacity,
                                uint64_t seed,
                                struct PxrlReplay **out);

// # Safety
// `replay` must come from this library and not be used afterwards; null is ignored.
void pxrl_replay_free(struct PxrlReplay *replay);

// # Safety
// `replay` must be null or a live handle.
size_t pxrl_replay_len(const struct PxrlReplay *replay);

// Appends one transition.
//
// # Safety
// Every pointer must address at least its stated number of elements.
enum PxrlStatus pxrl_replay_push(struct PxrlReplay *replay,
                                 const uint8_t *obs,
                                 const double *action,
                                 double reward,
                                 const uint8_t *next_obs,
                                 bool done,
                                 const double *state,
                                 const double *next_state);

// Fills the buffer with `n` transitions from a uniformly random policy.
//
// # Safety
// Both handles must be live.
enum PxrlStatus pxrl_replay_collect(struct PxrlReplay *replay,
                                    struct PxrlEnv *env,
                                    size_t n,
                                    uint64_t seed);

// Makes the buffer read-only.
//
// # Safety
// `replay` must be a live handle.
enum PxrlStatus pxrl_replay_freeze(struct PxrlReplay *replay);

// # Safety
// `replay` must be a live handle and `path` a NUL-terminated string.
enum PxrlStatus pxrl_replay_save(const struct PxrlReplay *replay, const char *path);

// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum PxrlStatus pxrl_replay_load(const char *path, uint64_t seed, struct PxrlReplay **out);

// Creates an agent from a TOML experiment config (null for defaults).
//
// # Safety
// `config_toml` must be null or NUL-terminated; `out` must be valid.
enum PxrlStatus pxrl_agent_new(const char *config_toml, uint64_t seed, struct PxrlAgent **out);

// # Safety
// `agent` must come from this library and not be used afterwards; null is ignored.
void pxrl_agent_free(struct PxrlAgent *agent);

// # Safety
// `agent` must be null or a live handle.
size_t pxrl_agent_action_dim(const struct PxrlAgent *agent);

// Chooses an action. Pixel agents read `obs` and ignore `state`; state
// agents read `state` and ignore `obs` (which may then be null with length 0).
//
// # Safety
// Buffers must address at least their stated lengths.
enum PxrlStatus pxrl_agent_act(struct PxrlAgent *agent,
                               const uint8_t *obs,
                               size_t obs_len,
                               const double *state,
                               size_t state_len,
                               bool deterministic,
                               double *action,
                               size_t action_len);

// One training update from `replay`; writes the critic loss when
// `loss_q` is non-null.
//
// # Safety
// Handles must be live; `loss_q` null or valid.
enum PxrlStatus pxrl_agent_train_step(struct PxrlAgent *agent,
                                      struct PxrlReplay *replay,
                                      double *loss_q);

// # Safety
// `agent` must be live and `path` NUL-terminated.
enum PxrlStatus pxrl_agent_save(const struct PxrlAgent *agent, const char *path);

// Restores all parameters; the checkpoint must match the architecture.
//
// # Safety
// `agent` must be live and `path` NUL-terminated.
enum PxrlStatus pxrl_agent_load(struct PxrlAgent *agent, const char *path);

// Runs a full training job for one seed. Writes the run directory under
// `out_dir` when non-null and the final score (NaN without evaluations)
// to `final_mean` when non-null.
//
// # Safety
// String arguments must be null or NUL-terminated; `final_mean` null or valid.
enum PxrlStatus pxrl_run_training(const char *config_toml,
                                  uint64_t seed,
                                  const char *out_dir,
                                  double *final_mean);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PIXELRL_H */
