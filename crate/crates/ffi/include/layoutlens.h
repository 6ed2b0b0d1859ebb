#ifndef LAYOUTLENS_H
#define LAYOUTLENS_H

/* Matches `cbindgen --config cbindgen.toml` output for src/lib.rs; the
   crate's header test checks that every exported symbol is declared. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

#define LL_LOSS_PHOTO (1 << 0)

#define LL_LOSS_CYCLE (1 << 1)

#define LL_LOSS_SRC_TGT (1 << 2)

#define LL_LOSS_CEIL_FLOOR (1 << 3)

#define LL_LOSS_MANHATTAN (1 << 4)

#define LL_LOSS_STRETCH (1 << 5)

#define LL_LOSS_ALL ((1 << 6) - 1)

/*
 Initialization of a fit.
 */
typedef enum LlInit {
  LL_INIT_FLAT = 0,
  LL_INIT_GROUND_TRUTH = 1,
  /*
   Ground truth plus Gaussian noise of `sigma` radians.
   */
  LL_INIT_PERTURBED = 2,
} LlInit;

/*
 Result code of every fallible call.
 */
typedef enum LlStatus {
  LL_STATUS_OK = 0,
  LL_STATUS_NULL_POINTER = 1,
  LL_STATUS_INVALID_ARGUMENT = 2,
  LL_STATUS_SCHEMA = 3,
  LL_STATUS_IO = 4,
  LL_STATUS_DIVERGENCE = 5,
  LL_STATUS_BUFFER_TOO_SMALL = 6,
  LL_STATUS_PANIC = 7,
} LlStatus;

/*
 Layout boundaries of one view with their ceiling height.
 */
typedef struct LlLayout LlLayout;

/*
 A synthetic or loaded panorama pair.
 */
typedef struct LlScene LlScene;

typedef struct LlFitOptions {
  /*
   Iterations summed over all resolution stages.
   */
  size_t iterations;
  double learning_rate;
  /*
   Bitwise OR of `LL_LOSS_*`.
   */
  uint32_t losses;
  LlInit init;
  double sigma;
  /*
   Infer the ceiling height from the boundaries instead of using the
   annotation.
   */
  bool inferred_heights;
  uint64_t seed;
} LlFitOptions;

typedef struct LlFitSummary {
  size_t iterations;
  double best_total;
  bool converged;
} LlFitSummary;

typedef struct LlMetrics {
  double iou2d;
  double iou3d;
  double rmse;
  double delta1;
} LlMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread (empty if none). The
 pointer stays valid until the next failing call on the same thread.
 */
const char *ll_last_error(void);

/*
 Static name of a status code.
 */
const char *ll_status_name(LlStatus status);

/*
 Creates a layout from `width` floor angles in (-pi/2, 0), `width` ceiling
 angles in (0, pi/2) and the ceiling height in camera-height units.
 */
LlStatus ll_layout_new(const double *floor,
                       const double *ceil,
                       size_t width,
                       double z_ceil,
                       LlLayout **out);

/*
 Reads a layout JSON file.
 */
LlStatus ll_layout_read(const char *path, LlLayout **out);

LlStatus ll_layout_write(const LlLayout *layout, const char *path);

/*
 Column count, or 0 for a null handle.
 */
size_t ll_layout_width(const LlLayout *layout);

LlStatus ll_layout_ceiling_height(const LlLayout *layout, double *out);

/*
 Copies the floor (`which` = 0) or ceiling (`which` = 1) angles into
 `buf`, which must hold at least `ll_layout_width` values.
 */
LlStatus ll_layout_angles(const LlLayout *layout, uint32_t which, double *buf, size_t len);

void ll_layout_free(LlLayout *layout);

/*
 Closed-form ceiling height of boundary angles (camera-height units).
 */
LlStatus ll_infer_ceiling_height(const double *floor,
                                 const double *ceil,
                                 size_t width,
                                 double *out);

/*
 Floor-plan IoU of two layouts.
 */
LlStatus ll_iou_2d(const LlLayout *a, const LlLayout *b, double *out);

/*
 Label-free uncertainty score (Manhattan plus ceiling-floor terms).
 */
LlStatus ll_uncertainty_score(const LlLayout *layout, double *out);

/*
 Renders a synthetic room with `corners` corners as a `height` x `width`
 panorama pair.
 */
LlStatus ll_scene_generate(uint64_t seed,
                           size_t corners,
                           size_t height,
                           size_t width,
                           LlScene **out);

/*
 Loads a scene directory.
 */
LlStatus ll_scene_read(const char *dir, LlScene **out);

/*
 Writes a scene directory (created if missing).
 */
LlStatus ll_scene_write(const LlScene *scene, const char *dir);

/*
 Ground-truth layout of view `a` (0) or `b` (1).
 */
LlStatus ll_scene_gt_layout(const LlScene *scene, uint32_t view, LlLayout **out);

void ll_scene_free(LlScene *scene);

/*
 Library defaults for [`ll_fit`].
 */
LlStatus ll_fit_options_default(LlFitOptions *out);

/*
 Fits both views of `scene`. On success `out_a` and `out_b` receive new
 layouts owned by the caller; `summary` may be null.
 */
LlStatus ll_fit(const LlScene *scene,
                const LlFitOptions *options,
                LlLayout **out_a,
                LlLayout **out_b,
                LlFitSummary *summary);

/*
 Metrics of `pred` against the ground truth of view `view` of `scene`.
 */
LlStatus ll_evaluate(const LlLayout *pred, const LlScene *scene, uint32_t view, LlMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LAYOUTLENS_H */
