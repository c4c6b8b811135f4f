/* C interface of the sifcn rotated-box detector.
 *
 * Every fallible function returns a status code; after a failure,
 * sifcn_last_error() describes it (per thread, valid until the next call).
 * Output arrays are caller-allocated: when one is too small the call returns
 * SIFCN_ERR_BUFFER and the count argument holds the required length.
 */
#ifndef SIFCN_H
#define SIFCN_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef int32_t SifcnStatus;

#define SIFCN_OK 0
#define SIFCN_ERR_NULL 1
#define SIFCN_ERR_INVALID 2
#define SIFCN_ERR_IO 3
#define SIFCN_ERR_BUFFER 4
#define SIFCN_ERR_PANIC 5

/* Rotated rectangle: vertices p0..p3 clockwise from the top-left one, in
 * image coordinates with y pointing down (x0, y0, ..., x3, y3); theta in
 * radians, counter-clockwise positive; detection score. */
typedef struct SifcnRect {
    double vertices[8];
    double theta;
    double score;
} SifcnRect;

/* Opaque model handle. */
typedef struct SifcnModel SifcnModel;

const char *sifcn_last_error(void);
const char *sifcn_version(void);

/* Rectangle seen from pixel centre (x, y) with edge distances
 * (top, right, bottom, left) and angle theta. */
SifcnStatus sifcn_restore_rect(double x, double y, const double *distances, double theta, SifcnRect *out);

SifcnStatus sifcn_rect_iou(const SifcnRect *a, const SifcnRect *b, double *out);

/* Greedy NMS; writes kept indices, best score first. */
SifcnStatus sifcn_nms(const SifcnRect *rects, size_t n, double iou_threshold, size_t *keep, size_t capacity, size_t *n_keep);

/* Loads a training checkpoint; free the handle with sifcn_model_free. */
SifcnStatus sifcn_model_load(const char *path, SifcnModel **out);
void sifcn_model_free(SifcnModel *model);
size_t sifcn_model_input_size(const SifcnModel *model);

/* Detects rectangles in a planar RGB image (3 x S x S doubles in [0, 1],
 * S = sifcn_model_input_size). */
SifcnStatus sifcn_model_detect(const SifcnModel *model, const double *image, double score_threshold, double nms_iou, SifcnRect *out,
                               size_t capacity, size_t *n_out);

#ifdef __cplusplus
}
#endif

#endif /* SIFCN_H */
