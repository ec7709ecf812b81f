/* C interface to the few-shot meta-learning library.
 *
 * Every function returns an fsml_status. On failure the thread-local message
 * from fsml_last_error() describes what went wrong. Strings returned through
 * char** out-parameters are owned by the caller and released with
 * fsml_free_string().
 */
#ifndef FSML_H
#define FSML_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define FSML_API __declspec(dllexport)
#else
#define FSML_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum fsml_status {
  FSML_OK = 0,
  FSML_ERR_DIMENSION = 1,
  FSML_ERR_INDEX = 2,
  FSML_ERR_CONTRACT = 3,
  FSML_ERR_CONFIG = 4,
  FSML_ERR_FORMAT = 5,
  FSML_ERR_IO = 6,
  FSML_ERR_SAMPLING = 7,
  FSML_ERR_CONDITIONING = 8,
  FSML_ERR_LOAD = 9,
  FSML_ERR_GATE = 10,
  FSML_ERR_INVALID_ARGUMENT = 11,
  FSML_ERR_INTERNAL = 12
} fsml_status;

/* Test-fixture faults for fsml_oracle_check. */
#define FSML_FAULT_FLIP_META_GRADIENT 1u

typedef struct fsml_experiment fsml_experiment;
typedef struct fsml_dataset fsml_dataset;

FSML_API const char* fsml_version(void);
FSML_API const char* fsml_status_name(fsml_status status);
/* Message of the last failure on this thread ("" when none). */
FSML_API const char* fsml_last_error(void);
FSML_API void fsml_free_string(char* s);

/* Experiments: a validated configuration plus run options. */
FSML_API fsml_status fsml_experiment_from_file(const char* config_path, fsml_experiment** out);
FSML_API fsml_status fsml_experiment_from_json(const char* config_json, fsml_experiment** out);
FSML_API void fsml_experiment_destroy(fsml_experiment* exp);

FSML_API fsml_status fsml_experiment_set_seed(fsml_experiment* exp, uint64_t seed);
FSML_API fsml_status fsml_experiment_set_out(fsml_experiment* exp, const char* dir);
FSML_API fsml_status fsml_experiment_set_jobs(fsml_experiment* exp, size_t jobs);
FSML_API fsml_status fsml_experiment_set_force(fsml_experiment* exp, int force);
FSML_API fsml_status fsml_experiment_set_checkpoint(fsml_experiment* exp, const char* path);
/* Hex digest of the canonical configuration. */
FSML_API fsml_status fsml_experiment_config_hash(const fsml_experiment* exp, char** out);

/* Subcommands. `summary` (may be NULL) receives the text to print. */
FSML_API fsml_status fsml_train(fsml_experiment* exp, char** summary);
FSML_API fsml_status fsml_eval(fsml_experiment* exp, char** summary);
FSML_API fsml_status fsml_ablate(fsml_experiment* exp, char** summary);
FSML_API fsml_status fsml_gen_data(fsml_experiment* exp, char** summary);

/* Runs the oracle gates. Returns FSML_OK when all pass and FSML_ERR_GATE
 * otherwise; `report` (may be NULL) receives the per-gate lines either way. */
FSML_API fsml_status fsml_oracle_check(unsigned faults, char** report);

/* Datasets (FSDS files). */
FSML_API fsml_status fsml_dataset_load(const char* path, fsml_dataset** out);
FSML_API void fsml_dataset_destroy(fsml_dataset* ds);
FSML_API size_t fsml_dataset_size(const fsml_dataset* ds);
FSML_API size_t fsml_dataset_classes(const fsml_dataset* ds);
/* Writes c, h, w into shape[0..2]. */
FSML_API fsml_status fsml_dataset_image_shape(const fsml_dataset* ds, size_t shape[3]);
FSML_API fsml_status fsml_dataset_label(const fsml_dataset* ds, size_t index, uint32_t* label);

#ifdef __cplusplus
}
#endif

#endif /* FSML_H */
