#ifndef GOATS_H
#define GOATS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define GOATS_OBS_DIM 8

#define GOATS_ACTION_DIM 3

#define GOATS_GOAL_DIM 3

typedef enum {
  GOATS_STATUS_OK = 0,
  GOATS_STATUS_NULL_POINTER = 1,
  GOATS_STATUS_INVALID_ARGUMENT = 2,
  GOATS_STATUS_DIMENSION_MISMATCH = 3,
  GOATS_STATUS_BUFFER_TOO_SMALL = 4,
  GOATS_STATUS_IO = 5,
  GOATS_STATUS_VERSION_MISMATCH = 6,
  GOATS_STATUS_CHECKPOINT = 7,
  GOATS_STATUS_NUMERICAL = 8,
  GOATS_STATUS_PANIC = 9,
} GoatsStatus;

typedef enum {
  GOATS_PRESET_BOWL = 0,
  GOATS_PRESET_BUCKET = 1,
} GoatsPreset;

typedef enum {
  GOATS_INTERPOLATION_MIXTURE = 0,
  GOATS_INTERPOLATION_DISPLACEMENT = 1,
} GoatsInterpolation;

/**
 * Opaque trained-agent handle.
 */
typedef struct GoatsAgent GoatsAgent;

/**
 * Opaque environment handle.
 */
typedef struct GoatsEnv GoatsEnv;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call into this library on the same thread.
 */
const char *goats_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *goats_version(void);

/**
 * Box distribution at temporal factor `k` between `[lo0, hi0]` and `[log, hig]`.
 *
 * # Safety
 * Every pointer must reference `dim` readable (inputs) or writable (outputs) doubles.
 */
GoatsStatus goats_interpolate_box(size_t dim,
                                  const double *lo0,
                                  const double *hi0,
                                  const double *log,
                                  const double *hig,
                                  double k,
                                  double *out_lo,
                                  double *out_hi);

/**
 * Discrete amount distribution at temporal factor `k`; `mode` is a `GoatsInterpolation` value.
 *
 * On entry `*out_len` is the capacity of `out_support`/`out_weights`; on
 * return it holds the number of atoms. If the capacity is too small the
 * required length is written and `BufferTooSmall` is returned.
 *
 * # Safety
 * Input arrays must hold `n0`/`ng` doubles; outputs must hold `*out_len` doubles.
 */
GoatsStatus goats_interpolate_discrete(size_t n0,
                                       const double *support0,
                                       const double *weights0,
                                       size_t ng,
                                       const double *supportg,
                                       const double *weightsg,
                                       double k,
                                       uint32_t mode,
                                       double *out_support,
                                       double *out_weights,
                                       size_t *out_len);

/**
 * Factorized reward of an achieved goal against a desired goal.
 *
 * # Safety
 * Position pointers must reference `dim` doubles; `out` must be writable.
 */
GoatsStatus goats_reward_factorized(size_t dim,
                                    const double *achieved_pos,
                                    double achieved_amount,
                                    const double *desired_pos,
                                    double desired_amount,
                                    double epsilon,
                                    double *out);

/**
 * Sparse reward: 0 when both tolerances hold, otherwise -1.
 *
 * # Safety
 * Position pointers must reference `dim` doubles; `out` must be writable.
 */
GoatsStatus goats_reward_sparse(size_t dim,
                                const double *achieved_pos,
                                double achieved_amount,
                                const double *desired_pos,
                                double desired_amount,
                                double epsilon_pos,
                                double epsilon_amount,
                                double *out);

/**
 * Creates an environment from a `GoatsPreset` value. Release with [`goats_env_free`].
 *
 * # Safety
 * `out` must be a writable handle slot.
 */
GoatsStatus goats_env_new(uint32_t preset, uint64_t seed, GoatsEnv **out);

/**
 * Starts a new episode and writes the first observation.
 *
 * # Safety
 * `env` must come from [`goats_env_new`]; `obs_out` must hold `GOATS_OBS_DIM` doubles.
 */
GoatsStatus goats_env_reset(GoatsEnv *env, double *obs_out);

/**
 * Advances one step. `achieved_out` receives `x, y, fill_fraction`.
 *
 * # Safety
 * `env` must come from [`goats_env_new`]; arrays must have the documented
 * lengths; `done_out` must be writable.
 */
GoatsStatus goats_env_step(GoatsEnv *env,
                           const double *action,
                           double *obs_out,
                           double *achieved_out,
                           bool *done_out);

/**
 * Noise-free waterline height of the current episode.
 *
 * # Safety
 * `env` must come from [`goats_env_new`]; `out` must be writable.
 */
GoatsStatus goats_env_waterline(const GoatsEnv *env, double *out);

/**
 * # Safety
 * `env` must come from [`goats_env_new`] and not be used afterwards. Null is ignored.
 */
void goats_env_free(GoatsEnv *env);

/**
 * Loads the agent stored in a checkpoint file. Release with [`goats_agent_free`].
 *
 * # Safety
 * `path` must be a NUL-terminated UTF-8 string; `out` must be a writable handle slot.
 */
GoatsStatus goats_agent_load(const char *path, GoatsAgent **out);

/**
 * Deterministic policy action for an observation and a desired goal
 * (`x, y, amount`).
 *
 * # Safety
 * `agent` must come from [`goats_agent_load`]; arrays must have the documented lengths.
 */
GoatsStatus goats_agent_act(const GoatsAgent *agent,
                            const double *obs,
                            const double *desired,
                            double *action_out);

/**
 * # Safety
 * `agent` must come from [`goats_agent_load`] and not be used afterwards. Null is ignored.
 */
void goats_agent_free(GoatsAgent *agent);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GOATS_H */
