#ifndef OCRM_H
#define OCRM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum OcrmStatus {
  OCRM_STATUS_OK = 0,
  OCRM_STATUS_NULL_POINTER = 1,
  OCRM_STATUS_INVALID_ARGUMENT = 2,
  OCRM_STATUS_OUT_OF_RANGE = 3,
  OCRM_STATUS_IO = 4,
  OCRM_STATUS_PARSE = 5,
  OCRM_STATUS_CONFIG = 6,
  OCRM_STATUS_NOT_CONVERGED = 7,
  OCRM_STATUS_INTERNAL = 8,
} OcrmStatus;

/**
 * Opaque preference dataset of the 2-D task.
 */
typedef struct OcrmDataset OcrmDataset;

/**
 * Opaque discrete task.
 */
typedef struct OcrmDiscreteTask OcrmDiscreteTask;

/**
 * Opaque Gaussian policy snapshot.
 */
typedef struct OcrmPolicy OcrmPolicy;

/**
 * Importance weight options. `clip <= 0` disables clipping.
 */
typedef struct OcrmIwConfig {
  double eta;
  double alpha;
  double clip;
} OcrmIwConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null after a
 * successful call. Valid until the next call on the same thread.
 */
const char *ocrm_last_error(void);

/**
 * Gold reward of the 2-D task. Actions outside `[-1.5, 1.5]^2` give
 * `OCRM_STATUS_OUT_OF_RANGE`.
 */
enum OcrmStatus ocrm_gold_reward_continuous(double a0, double a1, double *out);

/**
 * Gold reward of the 2-D task after clamping the action to the box, the
 * rule used when scoring policy samples.
 */
enum OcrmStatus ocrm_gold_reward_clamped(double a0, double a1, double *out);

/**
 * Bradley-Terry loss `-log sigmoid(margin)`.
 */
enum OcrmStatus ocrm_bt_loss(double margin, double *out);

/**
 * Plain ratio weights: `eta = 1`, `alpha = 1`, no clipping.
 */
struct OcrmIwConfig ocrm_iw_config_default(void);

/**
 * Weight of one pair from `log P_current(pair) - log P_behavior(pair)`.
 */
enum OcrmStatus ocrm_pair_weight(double log_ratio, struct OcrmIwConfig cfg, double *out);

/**
 * `(sum w)^2 / sum w^2` over `len` weights.
 */
enum OcrmStatus ocrm_effective_sample_size(const double *weights, size_t len, double *out);

enum OcrmStatus ocrm_discrete_task_new(uint64_t seed,
                                       size_t n_states,
                                       size_t n_actions,
                                       size_t feature_dim,
                                       struct OcrmDiscreteTask **out);

enum OcrmStatus ocrm_discrete_task_load(const char *path, struct OcrmDiscreteTask **out);

enum OcrmStatus ocrm_discrete_task_save(const struct OcrmDiscreteTask *task, const char *path);

enum OcrmStatus ocrm_discrete_task_n_states(const struct OcrmDiscreteTask *task, size_t *out);

enum OcrmStatus ocrm_discrete_task_n_actions(const struct OcrmDiscreteTask *task, size_t *out);

enum OcrmStatus ocrm_discrete_task_gold_reward(const struct OcrmDiscreteTask *task,
                                               size_t state,
                                               size_t action,
                                               double *out);

/**
 * Releases a task. Null is ignored.
 */
void ocrm_discrete_task_free(struct OcrmDiscreteTask *task);

enum OcrmStatus ocrm_dataset_load(const char *path, struct OcrmDataset **out);

enum OcrmStatus ocrm_dataset_len(const struct OcrmDataset *ds, size_t *out);

void ocrm_dataset_free(struct OcrmDataset *ds);

enum OcrmStatus ocrm_policy_load(const char *path, struct OcrmPolicy **out);

void ocrm_policy_free(struct OcrmPolicy *policy);

/**
 * Writes one weight per dataset pair into `out[0..len]`; `len` must equal
 * the dataset length. `ess_out` may be null.
 */
enum OcrmStatus ocrm_dataset_weights(const struct OcrmDataset *ds,
                                     const struct OcrmPolicy *policy,
                                     struct OcrmIwConfig cfg,
                                     double *out,
                                     size_t len,
                                     double *ess_out);

/**
 * Runs the experiment described by `config_toml`. A non-null `out_dir`
 * replaces the configured output directory.
 */
enum OcrmStatus ocrm_run_config(const char *config_toml, const char *out_dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* OCRM_H */
