#ifndef EMBREF_H
#define EMBREF_H

#include <stddef.h>
#include <stdint.h>

typedef enum EmbrefStatus {
  EMBREF_STATUS_OK = 0,
  EMBREF_STATUS_NULL_POINTER = 1,
  EMBREF_STATUS_INVALID_ARGUMENT = 2,
  EMBREF_STATUS_IO = 3,
  EMBREF_STATUS_FORMAT = 4,
  EMBREF_STATUS_SHAPE = 5,
  EMBREF_STATUS_NON_FINITE = 6,
  EMBREF_STATUS_BUFFER_TOO_SMALL = 7,
  EMBREF_STATUS_PANIC = 8,
  EMBREF_STATUS_INTERNAL = 9,
} EmbrefStatus;

/**
 * A model restored from a training checkpoint.
 */
typedef struct EmbrefModel EmbrefModel;

/**
 * A generated scene and the vocabulary its tokens index.
 */
typedef struct EmbrefScene EmbrefScene;

/**
 * Axis-aligned box in pixels.
 */
typedef struct EmbrefBox {
  double x_min;
  double y_min;
  double x_max;
  double y_max;
} EmbrefBox;

/**
 * Top-1 detection: grid cell, anchor index, box and objectness.
 */
typedef struct EmbrefDetection {
  struct EmbrefBox bbox;
  double confidence;
  uint32_t row;
  uint32_t col;
  uint32_t anchor;
} EmbrefDetection;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on this thread.
 */
const char *embref_last_error(void);

/**
 * Generates the scene for `seed` at `image_size` x `image_size` pixels.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
enum EmbrefStatus embref_scene_generate(uint64_t seed,
                                        uint32_t image_size,
                                        struct EmbrefScene **out);

/**
 * # Safety
 * `scene` must come from [`embref_scene_generate`] and not be freed twice.
 */
void embref_scene_free(struct EmbrefScene *scene);

/**
 * # Safety
 * `scene` must be a live handle; `height` and `width` must be writable.
 */
enum EmbrefStatus embref_scene_size(const struct EmbrefScene *scene,
                                    uint32_t *height,
                                    uint32_t *width);

/**
 * Copies the RGB image (row-major `H x W x 3`, values in `[0, 1]`) into
 * `buf`, which must hold `len >= H * W * 3` floats.
 *
 * # Safety
 * `scene` must be a live handle and `buf` valid for `len` writes.
 */
enum EmbrefStatus embref_scene_copy_image(const struct EmbrefScene *scene, float *buf, size_t len);

/**
 * Number of phrase tokens.
 *
 * # Safety
 * `scene` must be a live handle and `count` writable.
 */
enum EmbrefStatus embref_scene_token_count(const struct EmbrefScene *scene, size_t *count);

/**
 * # Safety
 * `scene` must be a live handle and `buf` valid for `len` writes.
 */
enum EmbrefStatus embref_scene_copy_tokens(const struct EmbrefScene *scene,
                                           uint32_t *buf,
                                           size_t len);

/**
 * Writes the phrase as a NUL-terminated string. `needed` (if not null)
 * receives the required size including the terminator, also on
 * `BufferTooSmall`.
 *
 * # Safety
 * `scene` must be a live handle and `buf` valid for `cap` writes.
 */
enum EmbrefStatus embref_scene_phrase(const struct EmbrefScene *scene,
                                      char *buf,
                                      size_t cap,
                                      size_t *needed);

/**
 * # Safety
 * `scene` must be a live handle and `out` writable.
 */
enum EmbrefStatus embref_scene_gt_box(const struct EmbrefScene *scene, struct EmbrefBox *out);

/**
 * Intersection over union; 0 when the union is empty.
 */
double embref_iou(struct EmbrefBox a, struct EmbrefBox b);

/**
 * Percentage of pairs whose IoU is strictly greater than `threshold`.
 *
 * # Safety
 * `predictions` and `ground_truths` must each point to `n` boxes.
 */
enum EmbrefStatus embref_prec_at(const struct EmbrefBox *predictions,
                                 const struct EmbrefBox *ground_truths,
                                 size_t n,
                                 double threshold,
                                 double *out);

/**
 * Loads a checkpoint written by `embref train`.
 *
 * # Safety
 * `path` must be a NUL-terminated UTF-8 string and `out` writable.
 */
enum EmbrefStatus embref_model_load(const char *path, struct EmbrefModel **out);

/**
 * # Safety
 * `model` must come from [`embref_model_load`] and not be freed twice.
 */
void embref_model_free(struct EmbrefModel *model);

/**
 * Input resolution the model expects.
 *
 * # Safety
 * `model` must be a live handle and `image_size` writable.
 */
enum EmbrefStatus embref_model_image_size(const struct EmbrefModel *model, uint32_t *image_size);

/**
 * Top-1 detection for a scene. The scene must match the model's image size
 * and vocabulary.
 *
 * # Safety
 * `model` and `scene` must be live handles and `out` writable.
 */
enum EmbrefStatus embref_model_predict(const struct EmbrefModel *model,
                                       const struct EmbrefScene *scene,
                                       struct EmbrefDetection *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EMBREF_H */
