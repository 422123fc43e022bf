#ifndef IDPATCH_H
#define IDPATCH_H

#include <stddef.h>
#include <stdint.h>

typedef enum IdpStatus {
  IDP_STATUS_OK = 0,
  IDP_STATUS_NULL_POINTER = 1,
  IDP_STATUS_INVALID_ARGUMENT = 2,
  IDP_STATUS_SHAPE_MISMATCH = 3,
  IDP_STATUS_PRECONDITION = 4,
  IDP_STATUS_NUMERICAL = 5,
  IDP_STATUS_CHECKPOINT = 6,
  IDP_STATUS_IO = 7,
  IDP_STATUS_PANIC = 8,
} IdpStatus;

/*
 A checkpoint loaded for generation.
 */
typedef struct IdpSampler IdpSampler;

/*
 Synthetic identity world: sprite renderer and feature oracle.
 */
typedef struct IdpWorld IdpWorld;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Copies the calling thread's last error message into `buf` (NUL
 terminated, truncated to `len`) and returns the full message length.
 */
size_t idp_last_error(char *buf, size_t len);

enum IdpStatus idp_world_new(size_t feature_dim,
                             size_t sprite_size,
                             size_t num_styles,
                             struct IdpWorld **out);

void idp_world_free(struct IdpWorld *world);

/*
 Unit-norm identity feature for `seed`, written to `out[dim]`.
 */
enum IdpStatus idp_sample_identity(uint64_t seed, size_t dim, float *out);

/*
 Renders the face sprite of `feature[dim]` into `out[3 * S * S]`, values in `[0, 1]`.
 */
enum IdpStatus idp_world_render_face(const struct IdpWorld *world,
                                     const float *feature,
                                     size_t dim,
                                     float *out,
                                     size_t out_len);

/*
 Recovers the unit-norm feature of an `S x S` crop into `out[dim]`.
 */
enum IdpStatus idp_world_extract_feature(const struct IdpWorld *world,
                                         const float *crop,
                                         size_t crop_len,
                                         float *out,
                                         size_t dim);

/*
 Pastes `n` square patches (`patches[n * 3 * P * P]`) at anchors
 `xy[2 * n]` on a black `height x width` canvas written to `out`.
 */
enum IdpStatus idp_compose_canvas(const float *patches,
                                  size_t n,
                                  size_t patch_size,
                                  const uint32_t *xy,
                                  size_t height,
                                  size_t width,
                                  float *out,
                                  size_t out_len);

/*
 Identity-position association accuracy of a row-major `n x n`
 similarity matrix (rows: generated faces, columns: input faces).
 */
enum IdpStatus idp_association_accuracy(const double *sim, size_t n, double *out);

/*
 Loads a checkpoint for generation.
 */
enum IdpStatus idp_sampler_load(const char *path, struct IdpSampler **out);

void idp_sampler_free(struct IdpSampler *s);

/*
 Canvas height, width and identity feature size of a loaded checkpoint.
 */
enum IdpStatus idp_sampler_dims(const struct IdpSampler *s,
                                size_t *height,
                                size_t *width,
                                size_t *feature_dim);

/*
 Generates one image for `n` identities (`features[n * dim]`) at anchors
 `xy[2 * n]` with the default two-phase schedule and guidance. Writes
 `3 * H * W` values in `[0, 1]` to `out`.
 */
enum IdpStatus idp_sampler_generate(const struct IdpSampler *s,
                                    const float *features,
                                    size_t n,
                                    size_t dim,
                                    const uint32_t *xy,
                                    size_t caption_label,
                                    uint64_t seed,
                                    size_t steps,
                                    float *out,
                                    size_t out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* IDPATCH_H */
