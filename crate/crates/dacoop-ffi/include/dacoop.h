/* C ABI for the cooperative pursuit lab. */

#pragma once

/* Generated with cbindgen:0.29.4 */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Call status. Anything but `Ok` leaves a message for
 * [`dacoop_last_error`].
 */
typedef enum DacoopStatus {
  DacoopStatus_Ok = 0,
  DacoopStatus_NullArgument = 1,
  DacoopStatus_InvalidArgument = 2,
  DacoopStatus_Io = 3,
  DacoopStatus_Parse = 4,
  DacoopStatus_Runtime = 5,
} DacoopStatus;

/**
 * Opaque arena handle.
 */
typedef struct DacoopArena DacoopArena;

/**
 * Opaque experiment configuration handle.
 */
typedef struct DacoopConfig DacoopConfig;

/**
 * Opaque policy handle: a Q-network; the config decides how its actions
 * drive motion.
 */
typedef struct DacoopPolicy DacoopPolicy;

/**
 * Result of a single episode.
 */
typedef struct DacoopRolloutSummary {
  /**
   * 0 = capture, 1 = collision, 2 = timeout.
   */
  int terminal_kind;
  uint32_t steps;
  double mean_return;
} DacoopRolloutSummary;

/**
 * Aggregate evaluation statistics.
 */
typedef struct DacoopEvalSummary {
  uint32_t episodes;
  double success_rate;
  double collision_rate;
  double mean_return;
  double mean_steps;
} DacoopEvalSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *dacoop_version(void);

/**
 * Copy the last error message into `buf` (truncated to `cap - 1` bytes,
 * always NUL-terminated). Returns the full message length in bytes.
 *
 * # Safety
 * `buf` must point to at least `cap` writable bytes, or be NULL (then only
 * the length is returned).
 */
uintptr_t dacoop_last_error(char *buf, uintptr_t cap);

/**
 * New configuration with the standard defaults. Free with
 * [`dacoop_config_free`].
 */
struct DacoopConfig *dacoop_config_default(void);

/**
 * Load a configuration file. Returns NULL on error.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string.
 */
struct DacoopConfig *dacoop_config_load(const char *path);

/**
 * Apply one `key = value` override to a configuration.
 *
 * # Safety
 * `cfg` must be a live handle from this library; `key` and `value` must be
 * valid NUL-terminated strings.
 */
enum DacoopStatus dacoop_config_set(struct DacoopConfig *cfg, const char *key, const char *value);

/**
 * # Safety
 * `cfg` must be a handle from this library, not yet freed; NULL is a no-op.
 */
void dacoop_config_free(struct DacoopConfig *cfg);

/**
 * Build the arena selected by the configuration. Free with
 * [`dacoop_arena_free`].
 *
 * # Safety
 * `cfg` must be a live handle from this library.
 */
struct DacoopArena *dacoop_arena_create(const struct DacoopConfig *cfg);

/**
 * Load an arena from its text format. Returns NULL on error.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string.
 */
struct DacoopArena *dacoop_arena_load(const char *path);

/**
 * Write an arena in its text format.
 *
 * # Safety
 * `arena` must be a live handle; `path` a valid NUL-terminated string.
 */
enum DacoopStatus dacoop_arena_save(const struct DacoopArena *arena, const char *path);

/**
 * # Safety
 * `arena` must be a handle from this library, not yet freed; NULL is a
 * no-op.
 */
void dacoop_arena_free(struct DacoopArena *arena);

/**
 * Fresh randomly initialized policy for the configured algorithm. Free
 * with [`dacoop_policy_free`].
 *
 * # Safety
 * `cfg` must be a live handle from this library.
 */
struct DacoopPolicy *dacoop_policy_init(const struct DacoopConfig *cfg, uint64_t seed);

/**
 * Load a policy checkpoint, reconstructing its topology from the header.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string.
 */
struct DacoopPolicy *dacoop_policy_load(const char *path);

/**
 * Save a policy checkpoint.
 *
 * # Safety
 * `policy` must be a live handle; `path` a valid NUL-terminated string.
 */
enum DacoopStatus dacoop_policy_save(const struct DacoopPolicy *policy, const char *path);

/**
 * # Safety
 * `policy` must be a handle from this library, not yet freed; NULL is a
 * no-op.
 */
void dacoop_policy_free(struct DacoopPolicy *policy);

/**
 * Roll one greedy episode. When `log_path` is non-NULL the episode log is
 * written there in its delimited-text format.
 *
 * # Safety
 * `cfg`, `arena`, and `policy` must be live handles from this library;
 * `out` must point to a writable summary; `log_path` must be NULL or a
 * valid NUL-terminated string.
 */
enum DacoopStatus dacoop_rollout(const struct DacoopConfig *cfg,
                                 const struct DacoopArena *arena,
                                 const struct DacoopPolicy *policy,
                                 uint64_t seed,
                                 const char *log_path,
                                 struct DacoopRolloutSummary *out);

/**
 * Evaluate a policy greedily over seeded episodes.
 *
 * # Safety
 * `cfg`, `arena`, and `policy` must be live handles from this library;
 * `out` must point to a writable summary.
 */
enum DacoopStatus dacoop_evaluate(const struct DacoopConfig *cfg,
                                  const struct DacoopArena *arena,
                                  const struct DacoopPolicy *policy,
                                  uint32_t episodes,
                                  uint64_t seed,
                                  struct DacoopEvalSummary *out);

/**
 * Evaluate the rule-based baseline with one fixed action index.
 *
 * # Safety
 * `cfg` and `arena` must be live handles; `out` must be writable.
 */
enum DacoopStatus dacoop_evaluate_fixed(const struct DacoopConfig *cfg,
                                        const struct DacoopArena *arena,
                                        uint32_t action,
                                        uint32_t episodes,
                                        uint64_t seed,
                                        struct DacoopEvalSummary *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus
