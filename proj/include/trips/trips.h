/* Differentiable trilinear point-splatting renderer: C interface.
 *
 * All functions return a trips_status. On failure a human-readable message
 * is available from trips_last_error() until the next call on the same
 * thread. Handles are opaque and must be released with the matching _free
 * function.
 */
#ifndef TRIPS_TRIPS_H
#define TRIPS_TRIPS_H

#include <stddef.h>
#include <stdint.h>

#if defined(TRIPS_BUILDING_LIBRARY)
#define TRIPS_API __attribute__((visibility("default")))
#else
#define TRIPS_API
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum trips_status {
  TRIPS_OK = 0,
  TRIPS_ERROR_USAGE = 1,    /* invalid argument or option */
  TRIPS_ERROR_DATA = 2,     /* unreadable or malformed input, I/O failure */
  TRIPS_ERROR_CHECK = 3,    /* a verification (gradient check) failed */
  TRIPS_ERROR_INTERNAL = 4
} trips_status;

typedef enum trips_env_mode { TRIPS_ENV_CONSTANT = 0, TRIPS_ENV_LATLONG = 1 } trips_env_mode;

/* Point cloud, cameras and (optionally) ground-truth images. */
typedef struct trips_scene trips_scene;
/* Optimizable parameters: points, decoder, tone mapper, camera poses. */
typedef struct trips_model trips_model;

TRIPS_API const char* trips_last_error(void);
TRIPS_API const char* trips_version(void);

/* Caps every parallel region; <= 0 restores the default
 * (TRIPS_THREADS or the number of processors). */
TRIPS_API void trips_set_threads(int threads);
TRIPS_API int trips_get_threads(void);

/* ---- scenes ------------------------------------------------------------ */

/* kind: "plane", "sphere" or "hole". */
TRIPS_API trips_status trips_scene_synthesize(const char* kind, int points, int cameras, int resolution,
                                              uint64_t seed, int features, trips_scene** out);
/* Reads a PLY and a camera JSON; images are loaded lazily by training. */
TRIPS_API trips_status trips_scene_load(const char* ply_path, const char* cameras_path, int features,
                                        uint64_t seed, trips_scene** out);
/* Writes points.ply, cameras.json and images/ into dir. */
TRIPS_API trips_status trips_scene_save(trips_scene* scene, const char* dir);
TRIPS_API size_t trips_scene_point_count(const trips_scene* scene);
TRIPS_API int trips_scene_frame_count(const trips_scene* scene);
/* Number of warnings recorded while loading (e.g. renormalized quaternions). */
TRIPS_API int trips_scene_warning_count(const trips_scene* scene);
TRIPS_API const char* trips_scene_warning(const trips_scene* scene, int index);
TRIPS_API void trips_scene_free(trips_scene* scene);

/* ---- models ------------------------------------------------------------ */

typedef struct trips_model_options {
  int layers;        /* 3..8 */
  int features;      /* descriptor channels */
  int sh;            /* nonzero: 27-channel SH output */
  trips_env_mode env;
  int env_height;    /* latlong texture height */
  uint64_t seed;
} trips_model_options;

TRIPS_API void trips_model_options_default(trips_model_options* options);
TRIPS_API trips_status trips_model_create(const trips_scene* scene, const trips_model_options* options,
                                          trips_model** out);
TRIPS_API trips_status trips_model_load(const char* path, trips_model** out);
TRIPS_API trips_status trips_model_save(const trips_model* model, const char* path);
TRIPS_API size_t trips_model_point_count(const trips_model* model);
TRIPS_API int trips_model_camera_count(const trips_model* model);
TRIPS_API int trips_model_epoch(const trips_model* model);
TRIPS_API void trips_model_free(trips_model* model);

/* ---- training ---------------------------------------------------------- */

typedef struct trips_train_options {
  int epochs;
  int warmup_epochs;
  int eval_every;
  double ssim_weight;
  int zoom;              /* nonzero: random zoom/crop after warm-up */
  uint64_t seed;
  const char* metrics_csv; /* optional path */
  int verbose;           /* nonzero: one progress line per epoch on stderr */
} trips_train_options;

typedef struct trips_train_summary {
  int epochs;
  double final_loss;
  double test_psnr;
  double test_ssim;
  int rates_halved;
} trips_train_summary;

TRIPS_API void trips_train_options_default(trips_train_options* options);
/* The scene must have the cameras the model was created from. */
TRIPS_API trips_status trips_train(trips_model* model, const trips_scene* scene, const trips_train_options* options,
                                   trips_train_summary* summary);

/* ---- rendering --------------------------------------------------------- */

/* Renders model camera `camera` to a PNG/PPM file. */
TRIPS_API trips_status trips_render_frame(const trips_model* model, int camera, const char* path);
/* Renders the first `channels * width * height` floats of a [3,H,W] image. */
TRIPS_API trips_status trips_render_to_buffer(const trips_model* model, int camera, float* rgb, size_t capacity,
                                              int* width, int* height);
/* Interpolates between consecutive key cameras (slerp on rotation, linear on
 * camera center) and writes frame_NNNN.png files into dir. */
TRIPS_API trips_status trips_render_path(const trips_model* model, const int* keys, int key_count,
                                         int steps_per_segment, const char* dir, int* frames_written);

/* ---- benchmark --------------------------------------------------------- */

typedef struct trips_benchmark_result {
  size_t points;
  int layers;
  int width;
  int height;
  double count_alloc_ms;
  double splat_ms;
  double sort_blend_ms;
  double raster_ms;
  double network_ms;
  double tonemap_ms;
  double total_ms;
  double fragments_per_point;
  int max_fragments_per_point;
  double mean_list_length;
  double truncation_rate;
} trips_benchmark_result;

TRIPS_API trips_status trips_benchmark(const trips_model* model, int camera, int repetitions,
                                       trips_benchmark_result* out);

/* ---- gradient check ---------------------------------------------------- */

typedef struct trips_gradcheck_group {
  char group[32];
  double max_rel_error;
  size_t checked;
  size_t skipped;
} trips_gradcheck_group;

/* Finite-difference check of every parameter group of the full pipeline.
 * scene == NULL uses a random 200-point scene. Returns TRIPS_ERROR_CHECK when
 * any group exceeds `tolerance`. */
TRIPS_API trips_status trips_gradcheck(const trips_scene* scene, const trips_model_options* options, int resolution,
                                       double tolerance, trips_gradcheck_group* groups, int capacity, int* count);

#ifdef __cplusplus
}
#endif

#endif /* TRIPS_TRIPS_H */
