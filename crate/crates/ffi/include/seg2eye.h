#ifndef SEG2EYE_H
#define SEG2EYE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes.
typedef enum {
  SEG2EYE_STATUS_OK = 0,
  SEG2EYE_STATUS_NULL_POINTER = 1,
  SEG2EYE_STATUS_INVALID_ARGUMENT = 2,
  SEG2EYE_STATUS_IO = 3,
  SEG2EYE_STATUS_CHECKPOINT = 4,
  SEG2EYE_STATUS_SHAPE = 5,
  SEG2EYE_STATUS_PANIC = 6,
} Seg2eyeStatus;

// Opaque generator handle.
typedef struct Seg2eyeGenerator Seg2eyeGenerator;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failure on this thread, empty after a success. The
// pointer stays valid until the next call on the same thread.
const char *seg2eye_last_error(void);

// Load a generator checkpoint. On success `*out` owns a handle that must be
// released with `seg2eye_generator_free`.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
Seg2eyeStatus seg2eye_generator_load(const char *path, Seg2eyeGenerator **out);

// Release a handle. Null is ignored.
//
// # Safety
// `generator` must come from `seg2eye_generator_load` and not be used again.
void seg2eye_generator_free(Seg2eyeGenerator *generator);

// Image side length the generator works at.
//
// # Safety
// `generator` must be a live handle or null (returns 0).
uintptr_t seg2eye_generator_resolution(const Seg2eyeGenerator *generator);

// Length of a style code.
//
// # Safety
// `generator` must be a live handle or null (returns 0).
uintptr_t seg2eye_generator_style_dim(const Seg2eyeGenerator *generator);

// Aggregated style code of `count` images stored back to back in `pixels`.
//
// # Safety
// `pixels` must hold `count * height * width` bytes and `code` `code_len` floats.
Seg2eyeStatus seg2eye_encode_style(const Seg2eyeGenerator *generator,
                                   const uint8_t *pixels,
                                   uintptr_t count,
                                   uintptr_t height,
                                   uintptr_t width,
                                   float *code,
                                   uintptr_t code_len);

// Generate an image for `mask` and a style code, writing `height * width`
// bytes to `out_pixels`.
//
// # Safety
// `mask` must hold `height * width` bytes, `code` `code_len` floats and
// `out_pixels` `height * width` bytes.
Seg2eyeStatus seg2eye_generate(const Seg2eyeGenerator *generator,
                               const uint8_t *mask,
                               uintptr_t height,
                               uintptr_t width,
                               const float *code,
                               uintptr_t code_len,
                               uint8_t *out_pixels);

// Challenge metric of two 8-bit images: `sqrt(sum of squared differences) / (height * width)`.
//
// # Safety
// `a` and `b` must hold `height * width` bytes and `out` must be valid.
Seg2eyeStatus seg2eye_challenge_metric(const uint8_t *a,
                                       const uint8_t *b,
                                       uintptr_t height,
                                       uintptr_t width,
                                       double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SEG2EYE_H */
