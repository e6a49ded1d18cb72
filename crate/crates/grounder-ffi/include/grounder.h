#ifndef GROUNDER_H
#define GROUNDER_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible call.
 */
typedef enum GrounderStatus {
  GROUNDER_STATUS_OK = 0,
  /**
   * Null pointer or malformed argument.
   */
  GROUNDER_STATUS_INVALID_ARGUMENT = 1,
  /**
   * Config parse/validation failure.
   */
  GROUNDER_STATUS_CONFIG = 2,
  /**
   * Checkpoint or filesystem failure.
   */
  GROUNDER_STATUS_IO = 3,
  /**
   * Forward-pass failure.
   */
  GROUNDER_STATUS_RUNTIME = 4,
} GrounderStatus;

/**
 * Opaque handle to a model plus its optimizer state.
 */
typedef struct GrounderModel GrounderModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread. Valid until the next
 * failing call; never null.
 */
const char *grounder_last_error(void);

/**
 * Build a model from a config JSON string and an init seed.
 *
 * # Safety
 * `config_json` must be a valid NUL-terminated string and `out` a valid
 * pointer; the returned handle must be released with [`grounder_model_free`].
 */
enum GrounderStatus grounder_model_new(const char *config_json,
                                       uint64_t seed,
                                       struct GrounderModel **out);

/**
 * Build the small demonstration profile.
 *
 * # Safety
 * `out` must be a valid pointer; release the handle with
 * [`grounder_model_free`].
 */
enum GrounderStatus grounder_model_new_toy(uint64_t seed, struct GrounderModel **out);

/**
 * Load a model and optimizer from a checkpoint file.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string and `out` a valid pointer.
 */
enum GrounderStatus grounder_model_load(const char *path, struct GrounderModel **out);

/**
 * Save the handle's model and optimizer state to a checkpoint file.
 *
 * # Safety
 * `handle` must come from this library; `path` must be a valid
 * NUL-terminated string.
 */
enum GrounderStatus grounder_model_save(const struct GrounderModel *handle, const char *path);

/**
 * Release a handle. Null is a no-op.
 *
 * # Safety
 * `handle` must be null or come from this library, and must not be used
 * afterwards.
 */
void grounder_model_free(struct GrounderModel *handle);

/**
 * Run one forward pass. `image` is row-major RGB f64 of length
 * `image_size * image_size * 3`; `words` are token ids padded to the
 * configured text length. Writes (cx, cy, w, h) in [0, 1] to `out_box`.
 *
 * # Safety
 * All pointers must be valid for the stated lengths; `out_box` must have
 * room for 4 doubles.
 */
enum GrounderStatus grounder_predict(const struct GrounderModel *handle,
                                     const double *image,
                                     uintptr_t image_len,
                                     const uint32_t *words,
                                     uintptr_t words_len,
                                     double *out_box);

/**
 * Tunable share of all parameters, in [0, 1].
 *
 * # Safety
 * `handle` and `out` must be valid pointers.
 */
enum GrounderStatus grounder_tunable_fraction(const struct GrounderModel *handle, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GROUNDER_H */
