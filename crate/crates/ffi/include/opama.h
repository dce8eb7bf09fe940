/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#ifndef OPAMA_H
#define OPAMA_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum OpamaStatus {
  OPAMA_STATUS_OK = 0,
  OPAMA_STATUS_NULL_ARGUMENT = 1,
  OPAMA_STATUS_CONTRACT = 2,
  OPAMA_STATUS_DIMENSION = 3,
  OPAMA_STATUS_DOMAIN = 4,
  OPAMA_STATUS_CONFIG = 5,
  OPAMA_STATUS_IO = 6,
  OPAMA_STATUS_CHECKPOINT = 7,
  OPAMA_STATUS_PANIC = 8,
} OpamaStatus;

// A run configuration.
typedef struct OpamaConfig OpamaConfig;

// An equirectangular RGB image with an optional validity mask.
typedef struct OpamaEquirect OpamaEquirect;

// Models built from a configuration, optionally loaded from a checkpoint.
typedef struct OpamaModels OpamaModels;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread; empty after a success.
// The pointer stays valid until the next call on the same thread.
const char *opama_last_error(void);

// Library version as a static NUL-terminated string.
const char *opama_version(void);

// Zero-order-hold discretization of one diagonal entry: `a_bar = exp(delta·a)`
// and `b_factor` with `B̄ = b_factor·B`.
enum OpamaStatus opama_zoh(double a, double delta, double *a_bar, double *b_factor);

// Run the diagonal selective scan. `a_bar`, `b_bar` are `[l, d, n]`, `c` is
// `[l, n]`, `x` and `y` are `[l, d]`, `h0` (nullable) and `h_last` are
// `[d, n]`. A nonzero `parallel` selects the associative form.
enum OpamaStatus opama_scan(size_t l,
                            size_t d,
                            size_t n,
                            const double *a_bar,
                            const double *b_bar,
                            const double *c,
                            const double *x,
                            const double *h0,
                            int32_t parallel,
                            double *y,
                            double *h_last);

// Wrap `height·width·3` pixels and an optional `height·width` mask.
enum OpamaStatus opama_equirect_new(size_t width,
                                    size_t height,
                                    const double *rgb,
                                    const uint8_t *mask,
                                    struct OpamaEquirect **out);

// An all-unknown black image.
enum OpamaStatus opama_equirect_blank(size_t width, size_t height, struct OpamaEquirect **out);

// Read a PNG or PPM file, plus an optional mask image (nullable path).
enum OpamaStatus opama_equirect_load(const char *path,
                                     const char *mask_path,
                                     struct OpamaEquirect **out);

// Write the pixels and, with a non-null `mask_path`, the mask.
enum OpamaStatus opama_equirect_save(const struct OpamaEquirect *img,
                                     const char *path,
                                     const char *mask_path);

void opama_equirect_free(struct OpamaEquirect *img);

// Width and height of `img` (either output pointer may be null).
enum OpamaStatus opama_equirect_size(const struct OpamaEquirect *img,
                                     size_t *width,
                                     size_t *height);

enum OpamaStatus opama_equirect_unknown_count(const struct OpamaEquirect *img, size_t *count);

// Copy the `height·width·3` pixels into `rgb`; `len` must match.
enum OpamaStatus opama_equirect_pixels(const struct OpamaEquirect *img, double *rgb, size_t len);

// Copy the `height·width` mask into `mask` as 0/1 bytes.
enum OpamaStatus opama_equirect_mask(const struct OpamaEquirect *img, uint8_t *mask, size_t len);

// Perspective view of `size × size` pixels at (`lon`, `lat`) degrees; `rgb`
// receives `size·size·3` values and `mask` (nullable) `size·size` bytes.
enum OpamaStatus opama_extract_nfov(const struct OpamaEquirect *img,
                                    double lon,
                                    double lat,
                                    double fov,
                                    size_t size,
                                    double *rgb,
                                    uint8_t *mask);

// Default configuration.
enum OpamaStatus opama_config_default(struct OpamaConfig **out);

// Parse `key = value` configuration text; missing keys take defaults.
enum OpamaStatus opama_config_parse(const char *text, struct OpamaConfig **out);

enum OpamaStatus opama_config_set_seed(struct OpamaConfig *cfg, uint64_t seed);

void opama_config_free(struct OpamaConfig *cfg);

// Freshly initialized models, or trained ones when `ckpt_path` is non-null.
enum OpamaStatus opama_models_new(const struct OpamaConfig *cfg,
                                  const char *ckpt_path,
                                  struct OpamaModels **out);

void opama_models_free(struct OpamaModels *models);

// Grow a full panorama. `seed_rgb` (nullable) is a `seed_size × seed_size`
// view centred at (`seed_lon`, `seed_lat`) with the configured fov; `text`
// may be null. At least one of them must be given.
enum OpamaStatus opama_generate(const struct OpamaModels *models,
                                const struct OpamaConfig *cfg,
                                const double *seed_rgb,
                                size_t seed_size,
                                double seed_lon,
                                double seed_lat,
                                const char *text,
                                struct OpamaEquirect **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* OPAMA_H */
