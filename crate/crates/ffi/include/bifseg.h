#ifndef BIFSEG_H
#define BIFSEG_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum BifsegStatus {
  BIFSEG_STATUS_OK = 0,
  BIFSEG_STATUS_NULL_POINTER = 1,
  BIFSEG_STATUS_INVALID_ARGUMENT = 2,
  BIFSEG_STATUS_IO = 3,
  BIFSEG_STATUS_SCRIBBLE_CONFLICT = 4,
  BIFSEG_STATUS_NUMERIC = 5,
  BIFSEG_STATUS_BUFFER_TOO_SMALL = 6,
  BIFSEG_STATUS_PANIC = 7,
} BifsegStatus;

// A trained model; may be shared by any number of sessions.
typedef struct BifsegModel BifsegModel;

// One interactive segmentation. Not safe to use from two threads at once.
typedef struct BifsegSession BifsegSession;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. Valid until the
// next failing call on this thread.
const char *bifseg_last_error(void);

// Library version as a static string.
const char *bifseg_version(void);

// Loads a model file written by `bifseg train`.
//
// # Safety
// `path` must be a nul-terminated string and `out` a valid pointer.
enum BifsegStatus bifseg_model_load(const char *path, struct BifsegModel **out);

// Frees a model. Sessions created from it stay valid.
//
// # Safety
// `model` must come from [`bifseg_model_load`] and not be used afterwards.
void bifseg_model_free(struct BifsegModel *model);

// Segments the object inside the inclusive box `(x0, y0)`-`(x1, y1)` of a
// `width x height` image. `target_min` is the working resolution's shorter
// side; 0 selects the default.
//
// # Safety
// `pixels` must hold `width * height` values; `model` and `out` must be valid.
enum BifsegStatus bifseg_session_create(const struct BifsegModel *model,
                                        const float *pixels,
                                        size_t width,
                                        size_t height,
                                        size_t x0,
                                        size_t y0,
                                        size_t x1,
                                        size_t y1,
                                        size_t target_min,
                                        struct BifsegSession **out);

// Runs one refinement round with `fg_count` foreground and `bg_count`
// background points (`x, y` pairs). No points gives unsupervised refinement.
// `config_json` may be null or a JSON object overriding refinement settings.
// On error the session is unchanged.
//
// # Safety
// Point arrays must hold `2 * count` values; `session` must be valid.
enum BifsegStatus bifseg_session_refine(struct BifsegSession *session,
                                        const uint32_t *fg_xy,
                                        size_t fg_count,
                                        const uint32_t *bg_xy,
                                        size_t bg_count,
                                        const char *config_json);

// Writes the image size.
//
// # Safety
// All pointers must be valid.
enum BifsegStatus bifseg_session_image_size(const struct BifsegSession *session,
                                            size_t *width,
                                            size_t *height);

// Writes the box size, the frame scribble points are given in.
//
// # Safety
// All pointers must be valid.
enum BifsegStatus bifseg_session_crop_size(const struct BifsegSession *session,
                                           size_t *width,
                                           size_t *height);

// Copies the current full-image mask into `out`, which must hold
// `width * height` bytes of the image.
//
// # Safety
// `out` must point to `len` writable bytes.
enum BifsegStatus bifseg_session_mask(const struct BifsegSession *session,
                                      uint8_t *out,
                                      size_t len);

// Rounds run so far, the initial segmentation included.
//
// # Safety
// `session` must be valid or null.
size_t bifseg_session_rounds(const struct BifsegSession *session);

// Session diagnostics as a JSON string; free with [`bifseg_string_free`].
// Returns null on failure.
//
// # Safety
// `session` must be valid.
char *bifseg_session_diagnostics(const struct BifsegSession *session);

// # Safety
// `s` must come from this library and not be used afterwards.
void bifseg_string_free(char *s);

// # Safety
// `session` must come from [`bifseg_session_create`] and not be used afterwards.
void bifseg_session_free(struct BifsegSession *session);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BIFSEG_H */
