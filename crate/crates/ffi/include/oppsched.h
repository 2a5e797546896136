#ifndef OPPSCHED_H
#define OPPSCHED_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdbool.h>
#include <stddef.h>

/**
 * Result of every fallible call.
 */
typedef enum OppschedStatus {
  OPPSCHED_STATUS_OK = 0,
  OPPSCHED_STATUS_NULL_POINTER = 1,
  OPPSCHED_STATUS_INVALID_ARGUMENT = 2,
  OPPSCHED_STATUS_INVALID_CONFIG = 3,
  OPPSCHED_STATUS_INVALID_POLICY = 4,
  OPPSCHED_STATUS_NOT_ERGODIC = 5,
  OPPSCHED_STATUS_SOLVER_FAILED = 6,
  OPPSCHED_STATUS_PANIC = 7,
} OppschedStatus;

/**
 * A policy compiled against a copy of the system it was created for.
 */
typedef struct OppschedPolicy OppschedPolicy;

/**
 * A validated system configuration.
 */
typedef struct OppschedSystem OppschedSystem;

/**
 * Message for the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *oppsched_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *oppsched_version(void);

/**
 * Parses and validates a JSON configuration.
 *
 * # Safety
 * `json` must be a NUL-terminated string and `out` a writable pointer.
 */
enum OppschedStatus oppsched_system_from_json(const char *json, struct OppschedSystem **out);

/**
 * The bundled two-class CDMA system with the given class-1 arrival rate.
 *
 * # Safety
 * `out` must be a writable pointer.
 */
enum OppschedStatus oppsched_system_cdma(double lambda1, struct OppschedSystem **out);

/**
 * # Safety
 * `sys` must come from this library and not be used afterwards. Null is ignored.
 */
void oppsched_system_free(struct OppschedSystem *sys);

/**
 * # Safety
 * `sys` must be a live handle and `out` writable.
 */
enum OppschedStatus oppsched_system_num_classes(const struct OppschedSystem *sys, size_t *out);

/**
 * Load `sum_k lambda_k / mu_{k,N_k}`.
 *
 * # Safety
 * `sys` must be a live handle and `out` writable.
 */
enum OppschedStatus oppsched_system_rho(const struct OppschedSystem *sys, double *out);

/**
 * Builds a policy from the same strings the command line accepts, e.g.
 * `"sb"` with tie `"random:1,1"`. A null `tie` selects the default.
 *
 * # Safety
 * `sys` must be a live handle, `policy` a NUL-terminated string, `tie`
 * null or NUL-terminated, and `out` writable.
 */
enum OppschedStatus oppsched_policy_new(const struct OppschedSystem *sys,
                                        const char *policy,
                                        const char *tie,
                                        struct OppschedPolicy **out);

/**
 * # Safety
 * `p` must come from this library and not be used afterwards. Null is ignored.
 */
void oppsched_policy_free(struct OppschedPolicy *p);

/**
 * Whether the policy serves a best-state user whenever one is present.
 *
 * # Safety
 * `p` must be a live handle and `out` writable.
 */
enum OppschedStatus oppsched_policy_is_best_rate(const struct OppschedPolicy *p, bool *out);

/**
 * Averaged drift with the classes listed in `emptied` (0-based) in steady
 * state and every other class saturated. Writes one value per class into
 * `out`, which must hold `out_len >= num_classes` doubles.
 *
 * # Safety
 * `p` must be a live handle, `emptied` must point to `emptied_len`
 * values (may be null when the length is 0) and `out` to `out_len` doubles.
 */
enum OppschedStatus oppsched_averaged_drift(const struct OppschedPolicy *p,
                                            const size_t *emptied,
                                            size_t emptied_len,
                                            double *out,
                                            size_t out_len);

/**
 * Stability verdict of the policy at the system's load.
 *
 * # Safety
 * `p` must be a live handle and `out` writable.
 */
enum OppschedStatus oppsched_is_stable(const struct OppschedPolicy *p, bool *out);

/**
 * Time at which the fluid limit started at `x0` reaches zero, or +infinity
 * when it grows forever.
 *
 * # Safety
 * `p` must be a live handle, `x0` must point to `x0_len` doubles and `out`
 * must be writable.
 */
enum OppschedStatus oppsched_emptying_time(const struct OppschedPolicy *p,
                                           const double *x0,
                                           size_t x0_len,
                                           double *out);

/**
 * Load at which the policy loses stability as the arrival rate of `class`
 * (0-based) moves over `[lo, hi]`.
 *
 * # Safety
 * `p` must be a live handle and `out` writable.
 */
enum OppschedStatus oppsched_stability_threshold(const struct OppschedPolicy *p,
                                                 size_t class_,
                                                 double lo,
                                                 double hi,
                                                 double *out);

#endif  /* OPPSCHED_H */
