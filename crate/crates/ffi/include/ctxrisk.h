#ifndef CTXRISK_H
#define CTXRISK_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum CtxriskStatus {
  CTXRISK_STATUS_OK = 0,
  CTXRISK_STATUS_NULL_POINTER = 1,
  CTXRISK_STATUS_INVALID_UTF8 = 2,
  CTXRISK_STATUS_INVALID_JSON = 3,
  CTXRISK_STATUS_INVALID_ARGUMENT = 4,
  CTXRISK_STATUS_DIMENSION_MISMATCH = 5,
  CTXRISK_STATUS_SOLVER_FAILURE = 6,
  CTXRISK_STATUS_BUFFER_TOO_SMALL = 7,
  CTXRISK_STATUS_IO = 8,
  CTXRISK_STATUS_PANIC = 9,
} CtxriskStatus;

/**
 * Finite joint distribution of contexts and outcomes.
 */
typedef struct CtxriskJoint CtxriskJoint;

/**
 * Trained or deserialized decision policy.
 */
typedef struct CtxriskPolicy CtxriskPolicy;

/**
 * Training sample of covariates and outcomes.
 */
typedef struct CtxriskSample CtxriskSample;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next call into this library on the same thread.
 */
const char *ctxrisk_last_error(void);

/**
 * Releases a string returned by this library.
 *
 * # Safety
 * `s` must be null or a pointer obtained from this library and not yet freed.
 */
void ctxrisk_string_free(char *s);

/**
 * Evaluates a risk measure (`spec_json`, e.g. `{"kind":"cvar","beta":0.9}`)
 * on `n` equally likely losses.
 *
 * # Safety
 * `spec_json` must be a valid C string, `losses` must point to `n` doubles
 * and `out` must be writable.
 */
enum CtxriskStatus ctxrisk_risk_evaluate(const char *spec_json,
                                         const double *losses,
                                         size_t n,
                                         double *out);

/**
 * Builds a sample from row-major covariates (`n × dx`) and outcomes
 * (`n × dy`).
 *
 * # Safety
 * `x` must point to `n*dx` doubles, `y` to `n*dy` doubles and `out` must be
 * writable.
 */
enum CtxriskStatus ctxrisk_sample_new(size_t n,
                                      size_t dx,
                                      size_t dy,
                                      const double *x,
                                      const double *y,
                                      struct CtxriskSample **out);

/**
 * Number of observations in a sample (0 for null).
 *
 * # Safety
 * `sample` must be null or a live handle.
 */
size_t ctxrisk_sample_len(const struct CtxriskSample *sample);

/**
 * # Safety
 * `sample` must be null or a live handle; it is invalid afterwards.
 */
void ctxrisk_sample_free(struct CtxriskSample *sample);

/**
 * Trains a newsvendor order-quantity policy. `objective_json` is e.g.
 * `{"kind":"expected_cvar","beta":0.9}`; `class` is `"ldr"`, `"qdr"` or
 * `"rkhs"`; `config_json` may be null for defaults.
 *
 * # Safety
 * Pointers must be valid C strings or handles; `out` must be writable.
 */
enum CtxriskStatus ctxrisk_newsvendor_train(const struct CtxriskSample *sample,
                                            const char *objective_json,
                                            const char *class_,
                                            const char *config_json,
                                            struct CtxriskPolicy **out);

/**
 * # Safety
 * `json` must be a valid C string and `out` writable.
 */
enum CtxriskStatus ctxrisk_policy_from_json(const char *json, struct CtxriskPolicy **out);

/**
 * Serializes a policy; release the result with [`ctxrisk_string_free`].
 *
 * # Safety
 * `policy` must be a live handle and `out` writable.
 */
enum CtxriskStatus ctxrisk_policy_to_json(const struct CtxriskPolicy *policy, char **out);

/**
 * Covariate and decision dimensions of a policy.
 *
 * # Safety
 * `policy` must be a live handle; `dx` and `dz` writable.
 */
enum CtxriskStatus ctxrisk_policy_dims(const struct CtxriskPolicy *policy, size_t *dx, size_t *dz);

/**
 * Writes the decision `z(x)` into `z` (capacity `z_cap`, at least the
 * policy's `dz`).
 *
 * # Safety
 * `x` must point to `dx` doubles and `z` to `z_cap` writable doubles.
 */
enum CtxriskStatus ctxrisk_policy_evaluate(const struct CtxriskPolicy *policy,
                                           const double *x,
                                           size_t dx,
                                           double *z,
                                           size_t z_cap);

/**
 * # Safety
 * `policy` must be null or a live handle; it is invalid afterwards.
 */
void ctxrisk_policy_free(struct CtxriskPolicy *policy);

/**
 * # Safety
 * `json` must be a valid C string and `out` writable.
 */
enum CtxriskStatus ctxrisk_joint_from_json(const char *json, struct CtxriskJoint **out);

/**
 * The built-in instance on which ex-ante CVaR is contextually inconsistent.
 *
 * # Safety
 * `out` must be writable.
 */
enum CtxriskStatus ctxrisk_joint_counterexample(struct CtxriskJoint **out);

/**
 * Number of contexts (0 for null).
 *
 * # Safety
 * `joint` must be null or a live handle.
 */
size_t ctxrisk_joint_len(const struct CtxriskJoint *joint);

/**
 * Nested risk `ρ₁(ρ₂(cost | X))` of the newsvendor cost with default
 * holding/backorder prices, for the order quantity `z[k]` in context `k`.
 *
 * # Safety
 * JSON arguments must be valid C strings, `z` must point to `n_contexts`
 * doubles and `out` must be writable.
 */
enum CtxriskStatus ctxrisk_joint_nested_risk(const struct CtxriskJoint *joint,
                                             const char *rho1_json,
                                             const char *rho2_json,
                                             const double *z,
                                             size_t n_contexts,
                                             double *out);

/**
 * Ex-ante risk `ρ(cost)` over the joint law, with the same conventions as
 * [`ctxrisk_joint_nested_risk`].
 *
 * # Safety
 * As for [`ctxrisk_joint_nested_risk`].
 */
enum CtxriskStatus ctxrisk_joint_exante_risk(const struct CtxriskJoint *joint,
                                             const char *rho_json,
                                             const double *z,
                                             size_t n_contexts,
                                             double *out);

/**
 * # Safety
 * `joint` must be null or a live handle; it is invalid afterwards.
 */
void ctxrisk_joint_free(struct CtxriskJoint *joint);

/**
 * Runs an experiment config and writes its result files under `out_dir`.
 * Invalid configs return `INVALID_ARGUMENT` and failed trials
 * `SOLVER_FAILURE`.
 *
 * # Safety
 * Both arguments must be valid C strings.
 */
enum CtxriskStatus ctxrisk_run_experiment(const char *config_json, const char *out_dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CTXRISK_H */
