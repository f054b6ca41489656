#ifndef PENSEG_H
#define PENSEG_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum PensegLabelKind {
  PENSEG_LABEL_KIND_BINARY = 0,
  PENSEG_LABEL_KIND_CATEGORICAL3 = 1,
  PENSEG_LABEL_KIND_INSTANCE = 2,
  PENSEG_LABEL_KIND_BODYPART3 = 3,
} PensegLabelKind;

typedef enum PensegMode {
  PENSEG_MODE_CATEGORICAL = 0,
  PENSEG_MODE_COMBINED = 1,
  PENSEG_MODE_BODYPART = 2,
} PensegMode;

typedef enum PensegStatus {
  PENSEG_STATUS_OK = 0,
  PENSEG_STATUS_INVALID_ARGUMENT = 1,
  PENSEG_STATUS_DATA_ERROR = 2,
  PENSEG_STATUS_NUMERICAL_ERROR = 3,
  PENSEG_STATUS_NULL_POINTER = 4,
  PENSEG_STATUS_BUFFER_TOO_SMALL = 5,
  PENSEG_STATUS_PANIC = 6,
} PensegStatus;

/**
 * Opaque embedding field.
 */
typedef struct PensegEmbedding PensegEmbedding;

/**
 * Opaque label image.
 */
typedef struct PensegLabelImage PensegLabelImage;

/**
 * Ellipse parameters. `head_sign` is 1 (forward), -1 (backward) or 0
 * (unknown); `depth` is the occlusion rank, larger is nearer.
 */
typedef struct PensegEllipse {
  double cx;
  double cy;
  double a;
  double b;
  double theta;
  int32_t head_sign;
  int32_t depth;
} PensegEllipse;

typedef struct PensegMatchCounts {
  size_t tp;
  size_t fp;
  size_t fn_;
  double iou_sum;
  /**
   * NaN when there are no segments at all.
   */
  double pq;
  /**
   * NaN when there are no segments at all.
   */
  double f1;
} PensegMatchCounts;

typedef struct PensegLossParams {
  double delta_v;
  double delta_d;
  double alpha;
  double beta;
  double gamma;
} PensegLossParams;

typedef struct PensegLoss {
  double total;
  double variance_term;
  double distance_term;
  double regularization_term;
} PensegLoss;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next failing call on the same thread.
 */
const char *penseg_last_error(void);

/**
 * Creates a label image from `width * height` row-major labels.
 */
enum PensegStatus penseg_label_image_new(size_t width,
                                         size_t height,
                                         enum PensegLabelKind kind,
                                         const uint16_t *pixels,
                                         size_t len,
                                         struct PensegLabelImage **out);

enum PensegStatus penseg_label_image_read_pgm(const char *path_,
                                              enum PensegLabelKind kind,
                                              struct PensegLabelImage **out);

enum PensegStatus penseg_label_image_write_pgm(const struct PensegLabelImage *img,
                                               const char *path_);

void penseg_label_image_free(struct PensegLabelImage *img);

/**
 * Width of the image, 0 for a null handle.
 */
size_t penseg_label_image_width(const struct PensegLabelImage *img);

/**
 * Height of the image, 0 for a null handle.
 */
size_t penseg_label_image_height(const struct PensegLabelImage *img);

/**
 * Copies the labels into `buf`, which must hold `width * height` values.
 */
enum PensegStatus penseg_label_image_pixels(const struct PensegLabelImage *img,
                                            uint16_t *buf,
                                            size_t len);

/**
 * Embedding field from `width * height * dim` row-major values.
 */
enum PensegStatus penseg_embedding_new(size_t width,
                                       size_t height,
                                       size_t dim,
                                       const double *values,
                                       size_t len,
                                       struct PensegEmbedding **out);

void penseg_embedding_free(struct PensegEmbedding *f);

/**
 * Direct least-squares ellipse fit to `n` points.
 */
enum PensegStatus penseg_fit_ellipse(const double *xs,
                                     const double *ys,
                                     size_t n,
                                     struct PensegEllipse *out);

/**
 * IoU of two ellipses rasterized on the `width x height` pixel grid.
 */
enum PensegStatus penseg_ellipse_iou(const struct PensegEllipse *e1,
                                     const struct PensegEllipse *e2,
                                     size_t width,
                                     size_t height,
                                     double *out);

/**
 * Instance image of `n` annotation ellipses (ids follow list order; depth
 * ranks must be unique).
 */
enum PensegStatus penseg_render_instance(size_t width,
                                         size_t height,
                                         const struct PensegEllipse *ellipses,
                                         size_t n,
                                         struct PensegLabelImage **out);

/**
 * Fits an ellipse to every instance region of at least `min_pixels`
 * pixels. Writes up to `capacity` ellipses and the number found to `count`;
 * returns `BufferTooSmall` (with `count` set) when they do not fit.
 */
enum PensegStatus penseg_extract_ellipses(const struct PensegLabelImage *img,
                                          size_t min_pixels,
                                          struct PensegEllipse *buf,
                                          size_t capacity,
                                          size_t *count);

/**
 * Matches two instance images (IoU > 0.5) and reports PQ and F1.
 */
enum PensegStatus penseg_match_segments(const struct PensegLabelImage *pred,
                                        const struct PensegLabelImage *gt,
                                        struct PensegMatchCounts *out);

/**
 * Discriminative loss of an embedding for an instance image. A null
 * `params` uses the defaults.
 */
enum PensegStatus penseg_discriminative_loss(const struct PensegEmbedding *field,
                                             const struct PensegLabelImage *inst,
                                             const struct PensegLossParams *params,
                                             bool include_background,
                                             struct PensegLoss *out);

/**
 * HDBSCAN on `n` points of dimension `dim`. Writes one label per point to
 * `labels` (-1 = noise) and the cluster count to `n_clusters`.
 */
enum PensegStatus penseg_hdbscan(const double *data,
                                 size_t n,
                                 size_t dim,
                                 size_t min_cluster_size,
                                 size_t min_samples,
                                 int32_t *labels,
                                 size_t *n_clusters);

/**
 * Clusters the embeddings of the mask's foreground pixels into an instance
 * image.
 */
enum PensegStatus penseg_cluster_masked(const struct PensegEmbedding *field,
                                        const struct PensegLabelImage *mask,
                                        size_t min_cluster_size,
                                        size_t min_samples,
                                        struct PensegLabelImage **out);

/**
 * Segments every scene of a dataset directory. `config_json` may be null
 * for the defaults. Writes the number of failed scenes to `failures`.
 */
enum PensegStatus penseg_segment_dataset(const char *dataset,
                                         const char *output,
                                         const char *config_json,
                                         enum PensegMode mode,
                                         size_t *failures);

/**
 * Evaluates a prediction directory and writes the reports to `output`.
 * Writes the aggregate ellipse-level PQ and F1 (NaN when undefined).
 */
enum PensegStatus penseg_evaluate_dataset(const char *predictions,
                                          const char *dataset,
                                          const char *config_json,
                                          const char *output,
                                          double *pq,
                                          double *f1);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PENSEG_H */
