#ifndef GBPSTACK_H
#define GBPSTACK_H

/* Generated by cbindgen from crates/ffi; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  GBP_STATUS_OK = 0,
  GBP_STATUS_NULL_POINTER = -1,
  GBP_STATUS_INVALID_CONFIG = -2,
  GBP_STATUS_NUMERICAL_ABORT = -3,
  GBP_STATUS_INVALID_ARGUMENT = -4,
  GBP_STATUS_UTF8 = -5,
  GBP_STATUS_PANIC = -6,
} GbpStatus;

/**
 * A ground-truth field.
 */
typedef struct GbpField GbpField;

/**
 * A simulated fleet.
 */
typedef struct GbpWorld GbpWorld;

typedef struct {
  double x;
  double y;
  double vx;
  double vy;
  double goal_x;
  double goal_y;
  bool failed;
} GbpRobotState;

typedef struct {
  double t;
  double coverage;
  double rms_psi;
  size_t done_robots;
  bool done;
} GbpMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or "" after a success.
 * Valid until the next call on the same thread.
 */
const char *gbp_last_error(void);

/**
 * Builds a world from a JSON object of config keys. NULL means defaults.
 *
 * # Safety
 * `config_json` is NULL or a NUL-terminated string; `out` is writable.
 */
GbpStatus gbp_world_new(const char *config_json, GbpWorld **out);

/**
 * # Safety
 * `world` is NULL or came from [`gbp_world_new`] and is not used again.
 */
void gbp_world_free(GbpWorld *world);

/**
 * Advances `steps` timesteps, stopping early at `t_max`.
 *
 * # Safety
 * `world` is a live handle.
 */
GbpStatus gbp_world_step(GbpWorld *world, uint64_t steps);

/**
 * Runs until every robot knows a source region or `t_max`; `found`
 * receives which.
 *
 * # Safety
 * `world` is a live handle; `found` is writable.
 */
GbpStatus gbp_world_run_until_done(GbpWorld *world, bool *found);

/**
 * # Safety
 * `world` is a live handle; `out` is writable.
 */
GbpStatus gbp_world_time(const GbpWorld *world, double *out);

/**
 * # Safety
 * `world` is a live handle; `out` is writable.
 */
GbpStatus gbp_world_robot_count(const GbpWorld *world, size_t *out);

/**
 * # Safety
 * `world` is a live handle; `out` is writable.
 */
GbpStatus gbp_world_robot(const GbpWorld *world, size_t robot, GbpRobotState *out);

/**
 * Metrics of the fleet's current beliefs.
 *
 * # Safety
 * `world` is a live handle; `out` is writable.
 */
GbpStatus gbp_world_metrics(const GbpWorld *world, GbpMetrics *out);

/**
 * Generates a field with the default fractal parameters.
 *
 * # Safety
 * `out` is writable.
 */
GbpStatus gbp_field_generate(uint64_t seed, double side, double region_width, GbpField **out);

/**
 * # Safety
 * `field` is NULL or came from [`gbp_field_generate`] and is not used again.
 */
void gbp_field_free(GbpField *field);

/**
 * # Safety
 * `field` is a live handle; `out` is writable.
 */
GbpStatus gbp_field_region_count(const GbpField *field, size_t *out);

/**
 * Copies region values, row-major from the origin, into `buf` of `len`
 * doubles. `len` must be at least the region count.
 *
 * # Safety
 * `field` is a live handle; `buf` has room for `len` doubles.
 */
GbpStatus gbp_field_values(const GbpField *field, double *buf, size_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GBPSTACK_H */
