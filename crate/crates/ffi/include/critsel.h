#ifndef CRITSEL_H
#define CRITSEL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CritselStatus {
  CRITSEL_STATUS_OK = 0,
  CRITSEL_STATUS_NULL_ARGUMENT = 1,
  CRITSEL_STATUS_INVALID_UTF8 = 2,
  CRITSEL_STATUS_IO = 3,
  CRITSEL_STATUS_PARSE = 4,
  CRITSEL_STATUS_VALIDATION = 5,
  CRITSEL_STATUS_CONTRACT = 6,
  CRITSEL_STATUS_NO_CATEGORIES = 7,
  CRITSEL_STATUS_NO_EVALUABLE_IMAGES = 8,
  CRITSEL_STATUS_NUMERIC = 9,
  CRITSEL_STATUS_INVALID_BOX = 10,
  CRITSEL_STATUS_PANIC = 11,
} CritselStatus;

typedef struct CritselConceptMap CritselConceptMap;

typedef struct CritselDataset CritselDataset;

typedef struct CritselDetections CritselDetections;

typedef struct CritselImportance CritselImportance;

// Summary metrics. Undefined values are NaN.
typedef struct CritselMetrics {
  double map;
  double map50;
  double map75;
  double mar1;
  double mar10;
  double mar100;
  double mar1_50;
  double f1;
  double precision_50;
  size_t images_evaluated;
  size_t gt_annotations;
  size_t detections;
} CritselMetrics;

// Axis-aligned box in COCO order.
typedef struct CritselBox {
  double x;
  double y;
  double w;
  double h;
} CritselBox;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. The pointer is
// valid until the next call into this library on the same thread.
const char *critsel_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *critsel_version(void);

// # Safety
// `path` must be a NUL-terminated string and `out` a writable pointer.
enum CritselStatus critsel_dataset_load(const char *path, bool strict, struct CritselDataset **out);

// # Safety
// `ds` must be null or a handle from [`critsel_dataset_load`] not yet freed.
void critsel_dataset_free(struct CritselDataset *ds);

// # Safety
// `ds` must be a live dataset handle and `out` writable.
enum CritselStatus critsel_dataset_annotation_count(const struct CritselDataset *ds, size_t *out);

// # Safety
// `ds` must be a live dataset handle and `out` writable.
enum CritselStatus critsel_dataset_image_count(const struct CritselDataset *ds, size_t *out);

// Builds a concept map from the dataset's category names, adding the
// synonyms in `path` when it is not null.
//
// # Safety
// `path` must be null or NUL-terminated, `ds` a live handle, `out` writable.
enum CritselStatus critsel_concept_map_load(const char *path,
                                            const struct CritselDataset *ds,
                                            struct CritselConceptMap **out);

// # Safety
// `cmap` must be null or a live concept map handle.
void critsel_concept_map_free(struct CritselConceptMap *cmap);

// Scores every image of `ds` with the captions in `captions_path`.
//
// # Safety
// Handles must be live, `captions_path` NUL-terminated, `out` writable.
enum CritselStatus critsel_score(const struct CritselDataset *ds,
                                 const char *captions_path,
                                 const struct CritselConceptMap *cmap,
                                 double heat_time,
                                 struct CritselImportance **out);

// # Safety
// `path` must be NUL-terminated and `out` writable.
enum CritselStatus critsel_importance_load(const char *path, struct CritselImportance **out);

// # Safety
// `imp` must be a live handle and `path` NUL-terminated.
enum CritselStatus critsel_importance_write(const struct CritselImportance *imp, const char *path);

// Number of annotations with propagated importance above `threshold`.
//
// # Safety
// `imp` must be a live handle and `out` writable.
enum CritselStatus critsel_importance_select_count(const struct CritselImportance *imp,
                                                   double threshold,
                                                   size_t *out);

// # Safety
// `imp` must be null or a live importance handle.
void critsel_importance_free(struct CritselImportance *imp);

// # Safety
// `path` must be NUL-terminated, `ds` a live handle, `out` writable.
enum CritselStatus critsel_detections_load(const char *path,
                                           const struct CritselDataset *ds,
                                           bool strict,
                                           struct CritselDetections **out);

// # Safety
// `dets` must be null or a live detections handle.
void critsel_detections_free(struct CritselDetections *dets);

// Evaluates with the default protocol. With `imp` null every annotation
// counts; otherwise only those with importance above `threshold`.
//
// # Safety
// `dets` and `ds` must be live handles, `imp` null or live, `out` writable.
enum CritselStatus critsel_evaluate(const struct CritselDetections *dets,
                                    const struct CritselDataset *ds,
                                    const struct CritselImportance *imp,
                                    double threshold,
                                    struct CritselMetrics *out);

// # Safety
// `a`, `b` must point to boxes and `out` be writable.
enum CritselStatus critsel_iou(const struct CritselBox *a, const struct CritselBox *b, double *out);

// # Safety
// `a`, `b` must point to boxes and `out` be writable.
enum CritselStatus critsel_min_distance(const struct CritselBox *a,
                                        const struct CritselBox *b,
                                        double *out);

// Heat kernel of the graph with row-major `n x n` weights, written
// row-major to `out`.
//
// # Safety
// `weights` must hold `n * n` readable values and `out` `n * n` writable ones.
enum CritselStatus critsel_heat_kernel(const double *weights, size_t n, double t, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CRITSEL_H */
