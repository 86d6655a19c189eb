#ifndef MANGO_H
#define MANGO_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#if defined(_WIN32)
#define MANGO_API __declspec(dllexport)
#else
#define MANGO_API __attribute__((visibility("default")))
#endif

typedef enum mango_status {
  MANGO_OK = 0,
  MANGO_ERR_DIMENSION = 1,
  MANGO_ERR_CONTRACT = 2,
  MANGO_ERR_PARTITION = 3,
  MANGO_ERR_LAYOUT = 4,
  MANGO_ERR_SINGULARITY = 5,
  MANGO_ERR_NUMERIC = 6,
  MANGO_ERR_FORMAT = 7,
  MANGO_ERR_CONFIG = 8,
  MANGO_ERR_INPUT = 9,
  MANGO_ERR_ORACLE = 10,
  MANGO_ERR_IO = 11,
  MANGO_ERR_ARGUMENT = 12, /* null handle or pointer */
  MANGO_ERR_INTERNAL = 13
} mango_status;

typedef struct mango_dataset mango_dataset;
typedef struct mango_run mango_run;

/* Receives one JSON document per call (a metrics line, an audit, a compare row). */
typedef void (*mango_line_fn)(const char* json_line, void* user);

MANGO_API const char* mango_version(void);
MANGO_API const char* mango_status_name(mango_status status);
/* Message of the last failure on the calling thread; empty after success. */
MANGO_API const char* mango_last_error(void);
/* Frees strings returned through char** out-parameters. */
MANGO_API void mango_string_free(char* s);

/* Checks an experiment config; normalized_json receives it with defaults filled in. */
MANGO_API mango_status mango_config_validate(const char* config_json, char** normalized_json);

/* options_json may be NULL: {"seeds", "base_seed", "inject_fault"}. */
MANGO_API mango_status mango_verify(const char* options_json, mango_line_fn on_audit, void* user,
                                    char** report_json, int* passed);

/* spec_json keys: name, seed, size, d_model, n_tokens_per_modality, noise, raw_dim, raw_noise. */
MANGO_API mango_status mango_dataset_generate(const char* spec_json, mango_dataset** out);
MANGO_API mango_status mango_dataset_load(const char* path, mango_dataset** out);
/* Writes the container; hash_out receives 16 hex digits and a terminator. */
MANGO_API mango_status mango_dataset_save(const mango_dataset* data, const char* path, char hash_out[17]);
MANGO_API mango_status mango_dataset_shape(const mango_dataset* data, size_t* rows, size_t* tokens, size_t* width);
/* Copies rows·tokens·width doubles, row-major. */
MANGO_API mango_status mango_dataset_copy_tokens(const mango_dataset* data, double* out, size_t capacity);
MANGO_API void mango_dataset_free(mango_dataset* data);

/* Trains from an experiment config and writes into out_dir: config.json,
   metrics.jsonl, final.mngo, best.mngo and validation.mngo. */
MANGO_API mango_status mango_train(const char* config_json, const char* out_dir, mango_line_fn on_metrics,
                                   void* user, char** summary_json);

MANGO_API mango_status mango_run_load(const char* checkpoint_path, mango_run** out);
MANGO_API void mango_run_free(mango_run* run);
/* Token count and width of the flow's input space. */
MANGO_API mango_status mango_run_shape(const mango_run* run, size_t* tokens, size_t* width);
MANGO_API mango_status mango_run_evaluate(mango_run* run, const mango_dataset* data, char** metrics_json);
/* x and z hold batch·tokens·width doubles; log_det holds batch doubles. */
MANGO_API mango_status mango_run_forward(mango_run* run, const double* x, size_t batch, double* z, double* log_det);
MANGO_API mango_status mango_run_inverse(mango_run* run, const double* z, size_t batch, double* x);
MANGO_API mango_status mango_run_sample(mango_run* run, size_t count, uint64_t seed, const char* out_path,
                                        char** info_json);
/* Mean attention of model layer `layer` over the first `batch` rows of data. */
MANGO_API mango_status mango_run_export_attention(mango_run* run, const mango_dataset* data, size_t layer,
                                                  size_t batch, const char* csv_path, const char* sidecar_path);

/* threads 0 uses MANGO_THREADS or the hardware concurrency. */
MANGO_API mango_status mango_compare(const char* config_json, size_t threads, mango_line_fn on_row, void* user,
                                     char** csv, char** summary_json);

#ifdef __cplusplus
}
#endif

#endif
