#ifndef GSQA_GSQA_H
#define GSQA_GSQA_H

#include <stddef.h>
#include <stdint.h>

#if defined(GSQA_BUILDING_LIBRARY)
#define GSQA_API __attribute__((visibility("default")))
#else
#define GSQA_API
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum gsqa_status {
  GSQA_OK = 0,
  GSQA_ERR_PARSE = 1,
  GSQA_ERR_SCHEMA = 2,
  GSQA_ERR_IO = 3,
  GSQA_ERR_DOMAIN = 4,
  GSQA_ERR_DATA = 5,
  GSQA_ERR_CONFIG = 6,
  GSQA_ERR_CONTRACT = 7,
  GSQA_ERR_UNDEFINED_METRIC = 8,
  GSQA_ERR_NOT_FOUND = 9,
  GSQA_ERR_CONFLICT = 10,
  GSQA_ERR_INVALID_ARGUMENT = 11,
  GSQA_ERR_INTERNAL = 12
} gsqa_status;

/* Message of the last failed call on this thread; never NULL. */
GSQA_API const char* gsqa_last_error(void);
GSQA_API const char* gsqa_status_name(gsqa_status status);
GSQA_API const char* gsqa_version(void);
GSQA_API const char* gsqa_build_info(void);

/* Strings returned through char** out-parameters are owned by the caller. */
GSQA_API void gsqa_string_free(char* s);

/* Clouds */

typedef struct gsqa_cloud gsqa_cloud;

GSQA_API gsqa_status gsqa_cloud_read(const char* path, gsqa_cloud** out);
GSQA_API gsqa_status gsqa_cloud_write(const gsqa_cloud* cloud, const char* path, int ascii);
GSQA_API void gsqa_cloud_free(gsqa_cloud* cloud);
GSQA_API size_t gsqa_cloud_size(const gsqa_cloud* cloud);
GSQA_API gsqa_status gsqa_cloud_bounding_volume(const gsqa_cloud* cloud, double* out);
/* Copies the 59 attributes of splat `index` ([C, O, S, R, SH]) into out[59]. */
GSQA_API gsqa_status gsqa_cloud_attributes(const gsqa_cloud* cloud, size_t index, float* out);
/* kind: downsample | spatial_noise | color_noise */
GSQA_API gsqa_status gsqa_cloud_distort(const gsqa_cloud* cloud, const char* kind, double level,
                                        uint64_t seed, gsqa_cloud** out);
/* shape: sphere | torus | box | wave | helix */
GSQA_API gsqa_status gsqa_cloud_synthetic(const char* shape, size_t count, uint64_t seed,
                                          gsqa_cloud** out);

/* Region batches */

typedef struct gsqa_region_params {
  size_t p_pre;
  size_t n;
  size_t k;
  uint64_t seed;
  int standardize;
} gsqa_region_params;

GSQA_API gsqa_region_params gsqa_region_params_default(void);

typedef struct gsqa_regions gsqa_regions;

GSQA_API gsqa_status gsqa_regions_build(const gsqa_cloud* cloud, const gsqa_region_params* params,
                                        gsqa_regions** out);
GSQA_API gsqa_status gsqa_regions_write(const gsqa_regions* regions, const char* path);
GSQA_API gsqa_status gsqa_regions_read(const char* path, gsqa_regions** out);
GSQA_API void gsqa_regions_free(gsqa_regions* regions);
GSQA_API size_t gsqa_regions_count(const gsqa_regions* regions);
GSQA_API size_t gsqa_regions_members(const gsqa_regions* regions);

/* Dataset, training, evaluation. Options are JSON objects; NULL means {}. */

/* Writes every executable variant of each *.ply in bases_dir plus manifest.json. */
GSQA_API gsqa_status gsqa_dataset_build(const char* bases_dir, const char* out_dir, uint64_t seed,
                                        unsigned threads, char** manifest_json);

/* Options: epochs, batch_size, peak_lr, weight_decay, seed, fold_seed, folds,
   d, heads, ffn_mult, k_g, blocks, p_pre, n, k, region_seed, standardize,
   cache_dir, threads, log_path (line-delimited JSON training log),
   per_fold_average, logistic_map, resample_per_epoch.
   fold: -1 trains every fold into out (a directory); -2 trains on all
   stimuli into out (a file); i >= 0 trains fold i into out (a file). */
GSQA_API gsqa_status gsqa_train(const char* manifest_path, int fold, const char* options_json,
                                const char* out, char** summary_json);
GSQA_API gsqa_status gsqa_evaluate(const char* manifest_path, const char* ckpt_dir,
                                   const char* options_json, char** report_json, char** table);
/* Full cross-validated benchmark in one call. */
GSQA_API gsqa_status gsqa_benchmark(const char* manifest_path, const char* options_json,
                                    char** report_json, char** table);

/* Models */

typedef struct gsqa_model gsqa_model;

GSQA_API gsqa_status gsqa_model_load(const char* ckpt_path, gsqa_model** out);
GSQA_API void gsqa_model_free(gsqa_model* model);
GSQA_API gsqa_status gsqa_model_predict_cloud(const gsqa_model* model, const gsqa_cloud* cloud,
                                              double* score);
GSQA_API gsqa_status gsqa_model_predict_regions(const gsqa_model* model, const gsqa_regions* regions,
                                                double* score);
/* Scores externally supplied region tokens (n x d, see the token file format
   in the README) on the graph of `regions`; the built-in encoder is skipped. */
GSQA_API gsqa_status gsqa_model_predict_tokens(const gsqa_model* model, const gsqa_regions* regions,
                                               const char* tokens_path, double* score);
GSQA_API gsqa_status gsqa_model_describe(const gsqa_model* model, char** text);

/* Metrics */

GSQA_API gsqa_status gsqa_metrics(const double* pred, const double* target, size_t m, int logistic_map,
                                  char** json);
/* Score files hold one value per line or "id,value" rows. */
GSQA_API gsqa_status gsqa_metrics_files(const char* pred_csv, const char* target_csv, int logistic_map,
                                        char** json);

/* Subjective data */

/* Screens ratings, writes the MOS CSV and returns a JSON summary.
   Options: fence, max_flagged_fraction, min_variance, extreme_fraction, min_raters. */
GSQA_API gsqa_status gsqa_mos(const char* ratings_csv, const char* mos_csv_out, const char* options_json,
                              char** summary_json);
GSQA_API gsqa_status gsqa_manifest_attach_mos(const char* manifest_in, const char* mos_csv,
                                              const char* manifest_out, char** summary_json);

/* Rating sessions */

typedef struct gsqa_sessions gsqa_sessions;

/* config: {"index": path, "ratings": path, "log": path?, "training_count": n?} */
GSQA_API gsqa_status gsqa_sessions_open(const char* config_json, gsqa_sessions** out);
GSQA_API void gsqa_sessions_free(gsqa_sessions* store);
GSQA_API gsqa_status gsqa_sessions_create(gsqa_sessions* store, const char* participant, uint64_t seed,
                                          char** json);
GSQA_API gsqa_status gsqa_sessions_current(gsqa_sessions* store, const char* session_id, char** json);
GSQA_API gsqa_status gsqa_sessions_progress(gsqa_sessions* store, const char* session_id, char** json);
/* session_id may be NULL (plain download). Returns the video file path. */
GSQA_API gsqa_status gsqa_sessions_video(gsqa_sessions* store, const char* stimulus_id,
                                         const char* session_id, char** path);
GSQA_API gsqa_status gsqa_sessions_rate(gsqa_sessions* store, const char* session_id, int score,
                                        char** json);

#ifdef __cplusplus
}
#endif

#endif /* GSQA_GSQA_H */
