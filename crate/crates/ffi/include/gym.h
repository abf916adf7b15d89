#ifndef GYM_H
#define GYM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum GymStatus {
  GYM_STATUS_OK = 0,
  GYM_STATUS_NULL_POINTER = 1,
  GYM_STATUS_INVALID_UTF8 = 2,
  GYM_STATUS_INVALID_ARGUMENT = 3,
  GYM_STATUS_NOT_FOUND = 4,
  GYM_STATUS_RUNTIME = 5,
  GYM_STATUS_PANIC = 6,
} GymStatus;

// A loaded suite.
typedef struct GymSuite GymSuite;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread; empty after a success.
// The pointer stays valid until the next call on the same thread.
const char *gym_last_error_message(void);

// Verifier success probability from a YES/NO logit pair.
//
// # Safety
// `out` must be valid for writes.
enum GymStatus gym_verifier_probability(double l_yes, double l_no, double *out);

// Token estimate for a NUL-terminated UTF-8 string.
//
// # Safety
// `text_ptr` must be a NUL-terminated string; `out` valid for writes.
enum GymStatus gym_estimate_tokens(const char *text_ptr, uintptr_t *out);

// Exact-match check of an answer against a gold value.
//
// # Safety
// Both strings must be NUL-terminated; `out` valid for writes.
enum GymStatus gym_verify_exact(const char *answer,
                                const char *gold,
                                bool case_insensitive,
                                bool *out);

// Pass@K over a row-major `n_tasks` x `n_rollouts` matrix of 0/1 successes.
//
// # Safety
// `successes` must point to `n_tasks * n_rollouts` bytes; `out` valid for writes.
enum GymStatus gym_pass_at_k(const uint8_t *successes,
                             uintptr_t n_tasks,
                             uintptr_t n_rollouts,
                             uintptr_t k,
                             double *out);

// Best@K with verifier scores laid out like `successes`.
//
// # Safety
// `successes` and `scores` must each hold `n_tasks * n_rollouts` elements;
// `out` valid for writes.
enum GymStatus gym_best_at_k(const uint8_t *successes,
                             const double *scores,
                             uintptr_t n_tasks,
                             uintptr_t n_rollouts,
                             uintptr_t k,
                             double *out);

// Loads a suite manifest into a new handle.
//
// # Safety
// `path` must be NUL-terminated; `out` valid for writes. Release the handle
// with `gym_suite_free`.
enum GymStatus gym_suite_load(const char *path, struct GymSuite **out);

// # Safety
// `suite` must come from `gym_suite_load` (or be null) and not be used afterwards.
void gym_suite_free(struct GymSuite *suite);

// Suite id, owned by the handle.
//
// # Safety
// `suite` must be a live handle; returns null when it is null.
const char *gym_suite_id(const struct GymSuite *suite);

// # Safety
// `suite` must be a live handle; `out` valid for writes.
enum GymStatus gym_suite_task_count(const struct GymSuite *suite, uintptr_t *out);

// Runs one greedy episode per task with a built-in policy (gold, looping,
// crashing, silent, debug) and writes the success rate. `max_turns` of 0
// keeps the default budget. `sandbox_root` may be null.
//
// # Safety
// `suite` must be a live handle; strings NUL-terminated; `out` valid for writes.
enum GymStatus gym_suite_eval(const struct GymSuite *suite,
                              const char *policy,
                              uint32_t max_turns,
                              const char *sandbox_root,
                              double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GYM_H */
